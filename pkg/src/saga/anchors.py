"""Anchor construction: structured bank, free-anchor control, per-image
domain anchors, and the pairwise decorrelation penalty.

Structured anchors are derived, not stored: every forward re-encodes
the learnable contexts through the frozen encoder and projects into
token space, so the contexts and the projection are the only trainable
state. The free mode keeps K directly-learnable vectors as the ablation
control.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .textenc import FrozenTextEncoder

DEFAULT_K = 24
DEFAULT_M = 3
DEFAULT_CONTEXT_LEN = 4


def domain_hidden_width(dim: int) -> int:
    """Generator hidden width, scaled from the reference budget at D=768."""
    return max(1, round(4900 * dim / 768))


class AnchorBank:
    """K anchors in token space, structured (contexts -> frozen encoder ->
    projection) or free (direct parameters)."""

    def __init__(self, mode: str, k: int, dim: int, encoder: FrozenTextEncoder | None = None,
                 context_len: int = DEFAULT_CONTEXT_LEN, seed: int = 0):
        if mode not in ("structured", "free"):
            raise ValueError(f"unknown anchor mode {mode!r}")
        if mode == "structured" and encoder is None:
            raise ValueError("structured mode needs a frozen encoder")
        self.mode = mode
        self.k = k
        self.dim = dim
        self.encoder = encoder
        self.context_len = context_len
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA2C402]))
        if mode == "structured":
            self.contexts = T.Tensor(
                rng.standard_normal((k, context_len, encoder.text_dim)) * 0.02,
                requires_grad=True,
            )
            self.w_proj = T.Tensor(
                rng.standard_normal((encoder.out_dim, dim)) / np.sqrt(encoder.out_dim),
                requires_grad=True,
            )
            self.free_anchors = None
        else:
            self.contexts = None
            self.w_proj = None
            self.free_anchors = T.Tensor(
                rng.standard_normal((k, dim)) / np.sqrt(dim), requires_grad=True
            )

    def build(self) -> T.Tensor:
        """(K, dim) anchor matrix; differentiable w.r.t. the learnable state."""
        if self.mode == "free":
            return T.add(self.free_anchors, 0.0)  # fresh graph node over the parameter
        encoded = self.encoder.encode(self.contexts)
        return T.matmul(encoded, self.w_proj)

    def parameters(self) -> dict:
        if self.mode == "structured":
            return {"anchors.contexts": self.contexts, "anchors.w_proj": self.w_proj}
        return {"anchors.free": self.free_anchors}


def decorrelation_loss(anchors: T.Tensor, lambda_div: float) -> T.Tensor:
    """Mean squared pairwise cosine over ordered anchor pairs, scaled by
    lambda_div. Scale invariant per row; zero iff all pairs orthogonal."""
    k = anchors.shape[0]
    if k < 2:
        raise ValueError(f"decorrelation needs K >= 2 anchors, got {k}")
    unit = T.l2_normalize(anchors)  # raises DegenerateNormError on zero rows
    gram = T.matmul(unit, T.transpose(unit))
    off_diag = T.mul(gram, 1.0 - np.eye(k))
    return T.mul(T.sum_(T.square(off_diag)), lambda_div / (k * (k - 1)))


class DomainAnchorGenerator:
    """Per-image anchors decoded from the mean patch token by a two-layer
    MLP with ReLU; output reshaped to (M, dim) per image."""

    def __init__(self, dim: int, m: int = DEFAULT_M, hidden: int | None = None, seed: int = 0):
        self.dim = dim
        self.m = m
        self.hidden = hidden or domain_hidden_width(dim)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD04A1]))
        self.w1 = T.Tensor(rng.standard_normal((dim, self.hidden)) * 0.02, requires_grad=True)
        self.w2 = T.Tensor(rng.standard_normal((self.hidden, m * dim)) * 0.02, requires_grad=True)

    def generate(self, tokens: T.Tensor) -> T.Tensor:
        """(B, N, dim) tokens -> (B, M, dim) anchors (differentiable through
        the mean pool)."""
        batch = tokens.shape[0]
        pooled = T.mean(tokens, axis=1)  # (B, dim)
        hidden = T.relu(T.matmul(pooled, self.w1))
        flat = T.matmul(hidden, self.w2)
        return T.reshape(flat, (batch, self.m, self.dim))

    def parameters(self) -> dict:
        return {"domain_gen.w1": self.w1, "domain_gen.w2": self.w2}


def assemble_anchor_set(structured: T.Tensor, domain: T.Tensor) -> T.Tensor:
    """Row-concatenate shared and per-image anchors, structured first.

    structured: (K, dim); domain: (B, M, dim) or None -> (B, K+M, dim).
    With no domain anchors the structured set is tiled per image.
    """
    if domain is None:
        raise ValueError("domain tensor required; use m=0 generator output for none")
    batch = domain.shape[0]
    if structured.shape[-1] != domain.shape[-1]:
        raise T.ShapeError(
            f"anchor dims disagree: structured {structured.shape} vs domain {domain.shape}"
        )
    tiled = T.tile_batch(structured, batch)
    if domain.shape[1] == 0:
        return tiled
    return T.concat([tiled, domain], axis=1)
