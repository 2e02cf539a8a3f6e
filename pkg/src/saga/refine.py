"""Cross-attention refinement over patch tokens.

Patch tokens are queries; the anchor set provides keys and values. Each
block applies pre-norm multi-head cross-attention and a feed-forward
update, both residual. The last block's post-softmax attention (mean
over heads) is the alignment matrix: per-token max alignment, sum
normalized, weights the refined tokens into the reconstructed feature.

``zero_out`` initialization zeroes the attention-output and FFN-output
projections so the module starts as the exact identity on tokens.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import blob as blob_io
from . import tensor as T


class DegeneratePoolingError(RuntimeError):
    """All-zero alignment row; cannot happen downstream of a softmax."""


class UninitializedStatisticsError(RuntimeError):
    """Inference-mode embed head used before any running-stat update."""


def count_attention_flops(n_tokens: int, n_anchors: int, dim: int) -> int:
    """Multiply-accumulate count of the two attention contractions
    (scores and value aggregation) for one block forward of one image."""
    if n_tokens <= 0 or n_anchors <= 0 or dim <= 0:
        raise ValueError("count_attention_flops needs positive arguments")
    return 2 * n_tokens * n_anchors * dim


@dataclass
class RefinementOutput:
    refined_tokens: T.Tensor  # (B, N, D)
    attention: T.Tensor  # (B, N, K+M), last block, mean over heads
    pooled_weights: T.Tensor  # (B, N), sums to 1 per image
    f_ref: T.Tensor  # (B, D)
    argmax_anchor: np.ndarray  # (B, N) anchor index of each token's max alignment


class RefinementModule:
    def __init__(self, dim: int, n_blocks: int = 2, heads: int = 8,
                 init_mode: str = "zero_out", seed: int = 0, ffn_dim: int | None = None):
        if dim % heads != 0:
            raise T.ShapeError(f"heads {heads} must divide dim {dim}")
        if init_mode not in ("zero_out", "random"):
            raise ValueError(f"unknown init_mode {init_mode!r}; use from_blob for loaded")
        self.dim = dim
        self.n_blocks = n_blocks
        self.heads = heads
        self.ffn_dim = ffn_dim or 4 * dim
        self.init_mode = init_mode
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x2EF1E]))
        s = 1.0 / np.sqrt(dim)
        self.blocks = []
        for _ in range(n_blocks):
            blk = {
                "ln1.g": np.ones(dim), "ln1.b": np.zeros(dim),
                "attn.wq": rng.standard_normal((dim, dim)) * s,
                "attn.bq": np.zeros(dim),
                # No key bias: it shifts every anchor's score for a given
                # query uniformly, which softmax cancels exactly.
                "attn.wk": rng.standard_normal((dim, dim)) * s,
                "attn.wv": rng.standard_normal((dim, dim)) * s,
                "attn.bv": np.zeros(dim),
                "attn.wo": (np.zeros((dim, dim)) if init_mode == "zero_out"
                            else rng.standard_normal((dim, dim)) * s),
                "attn.bo": np.zeros(dim),
                "ln2.g": np.ones(dim), "ln2.b": np.zeros(dim),
                "mlp.w1": rng.standard_normal((dim, self.ffn_dim)) * s,
                "mlp.b1": np.zeros(self.ffn_dim),
                "mlp.w2": (np.zeros((self.ffn_dim, dim)) if init_mode == "zero_out"
                           else rng.standard_normal((self.ffn_dim, dim)) / np.sqrt(self.ffn_dim)),
                "mlp.b2": np.zeros(dim),
            }
            self.blocks.append({k: T.Tensor(v, requires_grad=True) for k, v in blk.items()})

    @classmethod
    def from_blob(cls, path, n_blocks: int = 2, expected_dim: int | None = None):
        """Initialize every block from the exported backbone layer weights."""
        meta, tensors = blob_io.read_blob(path)
        dim = int(meta["vision_dim"])
        if expected_dim is not None and dim != expected_dim:
            raise blob_io.BlobFormatError(
                f"blob vision_dim {dim} does not match required dim {expected_dim}"
            )
        module = cls(dim=dim, n_blocks=n_blocks, heads=int(meta["vision_heads"]),
                     init_mode="random", ffn_dim=int(meta["vision_ffn"]))
        module.init_mode = "loaded"
        for blk in module.blocks:
            for key in blk:
                src = tensors["vision." + key]
                if tuple(src.shape) != tuple(blk[key].shape):
                    raise blob_io.BlobFormatError(
                        f"vision.{key} shape {src.shape} != expected {blk[key].shape}"
                    )
                blk[key] = T.Tensor(src, requires_grad=True)
        return module

    # -- forward ----------------------------------------------------------

    def forward(self, tokens: T.Tensor, anchor_set: T.Tensor):
        """tokens (B, N, D), anchor_set (B, K+M, D) ->
        (refined (B, N, D), attention (B, N, K+M) mean over heads)."""
        if tokens.ndim != 3 or anchor_set.ndim != 3:
            raise T.ShapeError("refine expects batched 3-D tokens and anchors")
        B, N, D = tokens.shape
        if D != self.dim or anchor_set.shape[-1] != self.dim or anchor_set.shape[0] != B:
            raise T.ShapeError(
                f"shape mismatch: tokens {tokens.shape}, anchors {anchor_set.shape}, dim {self.dim}"
            )
        x = tokens
        attention = None
        for blk in self.blocks:
            mha_out, attention = self._cross_attention(blk, x, anchor_set)
            x = T.add(x, mha_out)
            x = T.add(x, self._ffn(blk, x))
        return x, attention

    def _cross_attention(self, blk, x, anchors):
        B, N, D = x.shape
        A = anchors.shape[1]
        h, dh = self.heads, D // self.heads
        xn = T.layer_norm(x, blk["ln1.g"], blk["ln1.b"])
        an = T.layer_norm(anchors, blk["ln1.g"], blk["ln1.b"])  # shared pre-norm

        def heads_of(m, length):
            return T.reshape(
                T.transpose(T.reshape(m, (B, length, h, dh)), (0, 2, 1, 3)), (B * h, length, dh)
            )

        q = heads_of(T.add(T.matmul(xn, blk["attn.wq"]), blk["attn.bq"]), N)
        k = heads_of(T.matmul(an, blk["attn.wk"]), A)
        v = heads_of(T.add(T.matmul(an, blk["attn.wv"]), blk["attn.bv"]), A)
        attn = T.softmax(T.mul(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(dh)))  # (B*h, N, A)
        ctx = T.matmul(attn, v)
        merged = T.reshape(T.transpose(T.reshape(ctx, (B, h, N, dh)), (0, 2, 1, 3)), (B, N, D))
        out = T.add(T.matmul(merged, blk["attn.wo"]), blk["attn.bo"])
        head_mean = T.mean(T.reshape(attn, (B, h, N, A)), axis=1)  # (B, N, A)
        return out, head_mean

    def _ffn(self, blk, x):
        xn = T.layer_norm(x, blk["ln2.g"], blk["ln2.b"])
        hidden = T.quick_gelu(T.add(T.matmul(xn, blk["mlp.w1"]), blk["mlp.b1"]))
        return T.add(T.matmul(hidden, blk["mlp.w2"]), blk["mlp.b2"])

    def parameters(self) -> dict:
        out = {}
        for i, blk in enumerate(self.blocks):
            for key, tensor in blk.items():
                out[f"refine.{i}.{key}"] = tensor
        return out

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        for name in sorted(self.parameters()):
            digest.update(self.parameters()[name].data.tobytes())
        return digest.hexdigest()


def pool_max_alignment(attention: T.Tensor, refined_tokens: T.Tensor):
    """Per-token max alignment across anchors, normalized to a convex
    weighting, applied to the refined tokens.

    attention (B, N, A), refined (B, N, D) ->
    (pooled_weights (B, N), f_ref (B, D), argmax (B, N))."""
    B, N, _ = attention.shape
    w, argmax = T.reduce_max_with_index(attention)  # (B, N)
    totals = T.sum_(w, axis=-1, keepdims=True)  # (B, 1)
    if np.any(totals.data <= 0):
        raise DegeneratePoolingError("alignment weights sum to zero")
    w_tilde = T.div(w, totals)
    f_ref = T.reshape(T.matmul(T.reshape(w_tilde, (B, 1, N)), refined_tokens), (B, refined_tokens.shape[-1]))
    return w_tilde, f_ref, argmax


def refine(module: RefinementModule, tokens: T.Tensor, anchor_set: T.Tensor) -> RefinementOutput:
    """Full refinement pass: blocks, final attention, max-alignment pooling."""
    refined, attention = module.forward(tokens, anchor_set)
    w_tilde, f_ref, argmax = pool_max_alignment(attention, refined)
    return RefinementOutput(
        refined_tokens=refined,
        attention=attention,
        pooled_weights=w_tilde,
        f_ref=f_ref,
        argmax_anchor=argmax,
    )


class EmbedHead:
    """Linear projection followed by feature-wise batch norm.

    Training mode uses batch statistics and updates running statistics
    (EMA); inference mode requires at least one prior update.
    """

    def __init__(self, dim: int, momentum: float = 0.1, eps: float = 1e-5):
        self.dim = dim
        self.momentum = momentum
        self.eps = eps
        self.w = T.Tensor(np.eye(dim), requires_grad=True)
        self.gamma = T.Tensor(np.ones(dim), requires_grad=True)
        self.beta = T.Tensor(np.zeros(dim), requires_grad=True)
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.initialized = False

    def forward(self, x: T.Tensor, training: bool) -> T.Tensor:
        z = T.matmul(x, self.w)
        if training:
            mu = T.mean(z, axis=0, keepdims=True)  # (1, D)
            centered = T.sub(z, mu)
            var = T.mean(T.square(centered), axis=0, keepdims=True)
            self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mu.data[0]
            self.running_var = (1 - self.momentum) * self.running_var + self.momentum * var.data[0]
            self.initialized = True
            denom = T.sqrt(T.add(var, self.eps))
            xhat = T.div(centered, denom)
        else:
            if not self.initialized:
                raise UninitializedStatisticsError(
                    "embed head inference requested before any running-statistic update"
                )
            xhat = T.div(T.sub(z, self.running_mean[None, :]),
                         np.sqrt(self.running_var + self.eps)[None, :])
        return T.add(T.mul(xhat, self.gamma), self.beta)

    def parameters(self) -> dict:
        return {"embed_head.w": self.w, "embed_head.gamma": self.gamma, "embed_head.beta": self.beta}


def attention_map_rows(w_tilde: np.ndarray, argmax_anchor: np.ndarray, grid_h: int, grid_w: int):
    """Rows for the attention-map CSV: (grid_row, grid_col, weight, anchor)."""
    rows = []
    for n in range(grid_h * grid_w):
        rows.append((n // grid_w, n % grid_w, float(w_tilde[n]), int(argmax_anchor[n])))
    return rows
