"""Frozen causal sequence encoder that grounds the structured anchors.

Learnable context vectors are wrapped between frozen start/suffix
embeddings and pushed through frozen transformer blocks; the last-token
hidden state is the anchor's pre-projection representation. Gradients
flow only into the contexts, never into the encoder weights.

Two modes: ``toy`` (seeded random weights, 2 blocks, 4 heads, width
512) for desk-scale runs, and ``loaded`` (weights read from a weight
blob, including the frozen output projection) for full-scale corpora.
"""

from __future__ import annotations

import hashlib

import numpy as np

from . import blob as blob_io
from . import tensor as T

NEG_MASK = -1e30  # additive causal mask value; keeps tensors finite


def _frozen(arr) -> T.Tensor:
    return T.Tensor(np.asarray(arr, dtype=np.float64), requires_grad=False)


class FrozenTextEncoder:
    def __init__(self, mode, text_dim, heads, ffn_dim, blocks, e_sos, e_suf,
                 pos_embed, ln_final, proj=None):
        if text_dim % heads != 0:
            raise T.ShapeError(f"heads {heads} must divide text_dim {text_dim}")
        self.mode = mode
        self.text_dim = text_dim
        self.heads = heads
        self.ffn_dim = ffn_dim
        self.blocks = blocks  # list of dicts of frozen Tensors
        self.e_sos = e_sos
        self.e_suf = e_suf
        self.pos_embed = pos_embed
        self.ln_final = ln_final  # (gamma, beta)
        self.proj = proj  # frozen output projection Tensor or None (toy)
        self.out_dim = proj.shape[1] if proj is not None else text_dim

    # -- constructors ---------------------------------------------------

    @classmethod
    def toy(cls, seed: int, text_dim: int = 512, n_blocks: int = 2, heads: int = 4,
            ffn_dim=None, max_len: int = 16) -> "FrozenTextEncoder":
        """Seeded random frozen encoder; deterministic for a given seed."""
        if ffn_dim is None:
            ffn_dim = 2 * text_dim
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7E47E6C0]))
        s = 1.0 / np.sqrt(text_dim)
        blocks = []
        for _ in range(n_blocks):
            blocks.append(
                {
                    "ln1.g": _frozen(np.ones(text_dim)),
                    "ln1.b": _frozen(np.zeros(text_dim)),
                    "attn.wq": _frozen(rng.standard_normal((text_dim, text_dim)) * s),
                    "attn.bq": _frozen(np.zeros(text_dim)),
                    "attn.wk": _frozen(rng.standard_normal((text_dim, text_dim)) * s),
                    "attn.bk": _frozen(np.zeros(text_dim)),
                    "attn.wv": _frozen(rng.standard_normal((text_dim, text_dim)) * s),
                    "attn.bv": _frozen(np.zeros(text_dim)),
                    "attn.wo": _frozen(rng.standard_normal((text_dim, text_dim)) * s),
                    "attn.bo": _frozen(np.zeros(text_dim)),
                    "ln2.g": _frozen(np.ones(text_dim)),
                    "ln2.b": _frozen(np.zeros(text_dim)),
                    "mlp.w1": _frozen(rng.standard_normal((text_dim, ffn_dim)) * s),
                    "mlp.b1": _frozen(np.zeros(ffn_dim)),
                    "mlp.w2": _frozen(rng.standard_normal((ffn_dim, text_dim)) / np.sqrt(ffn_dim)),
                    "mlp.b2": _frozen(np.zeros(text_dim)),
                }
            )
        return cls(
            mode="toy",
            text_dim=text_dim,
            heads=heads,
            ffn_dim=ffn_dim,
            blocks=blocks,
            e_sos=_frozen(rng.standard_normal(text_dim) * 0.02),
            e_suf=_frozen(rng.standard_normal(text_dim) * 0.02),
            pos_embed=_frozen(rng.standard_normal((max_len, text_dim)) * 0.01),
            ln_final=(_frozen(np.ones(text_dim)), _frozen(np.zeros(text_dim))),
        )

    @classmethod
    def from_blob(cls, path) -> "FrozenTextEncoder":
        """Load the full frozen encoder (including output projection) from a
        weight blob written by the exporter."""
        meta, tensors = blob_io.read_blob(path)
        text_dim = int(meta["text_dim"])
        n_blocks = int(meta["text_layers"])
        blocks = []
        for i in range(n_blocks):
            p = f"text.blocks.{i}."
            blocks.append({k: _frozen(tensors[p + k]) for k in (
                "ln1.g", "ln1.b", "attn.wq", "attn.bq", "attn.wk", "attn.bk",
                "attn.wv", "attn.bv", "attn.wo", "attn.bo", "ln2.g", "ln2.b",
                "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2")})
        proj = _frozen(tensors["text.proj"])
        if proj.shape[0] != text_dim:
            raise blob_io.BlobFormatError(
                f"text projection rows {proj.shape[0]} != text_dim {text_dim}"
            )
        return cls(
            mode="loaded",
            text_dim=text_dim,
            heads=int(meta["text_heads"]),
            ffn_dim=int(meta["text_ffn"]),
            blocks=blocks,
            e_sos=_frozen(tensors["text.e_sos"]),
            e_suf=_frozen(tensors["text.e_suf"]),
            pos_embed=_frozen(tensors["text.pos"]),
            ln_final=(_frozen(tensors["text.ln_final.g"]), _frozen(tensors["text.ln_final.b"])),
            proj=proj,
        )

    # -- forward ---------------------------------------------------------

    def encode(self, contexts: T.Tensor) -> T.Tensor:
        """(K, L_c, text_dim) learnable contexts -> (K, out_dim) encodings."""
        K, L_c, td = contexts.shape
        if td != self.text_dim:
            raise T.ShapeError(f"context width {td} != encoder width {self.text_dim}")
        L = L_c + 2
        if L > self.pos_embed.shape[0]:
            raise T.ShapeError(f"sequence length {L} exceeds positional table")
        sos = T.reshape(T.tile_batch(self.e_sos, K), (K, 1, td))
        suf = T.reshape(T.tile_batch(self.e_suf, K), (K, 1, td))
        x = T.concat([sos, contexts, suf], axis=1)
        x = T.add(x, T.Tensor(self.pos_embed.data[:L]))

        causal = np.triu(np.full((L, L), NEG_MASK), k=1)
        for blk in self.blocks:
            x = T.add(x, self._attention(blk, x, causal))
            x = T.add(x, self._ffn(blk, x))
        x = T.layer_norm(x, self.ln_final[0], self.ln_final[1])
        out = T.index_axis(x, 1, L - 1)  # last-token hidden state
        if self.proj is not None:
            out = T.matmul(out, self.proj)
        return out

    def _attention(self, blk, x, causal):
        K, L, td = x.shape
        h, dh = self.heads, td // self.heads
        xn = T.layer_norm(x, blk["ln1.g"], blk["ln1.b"])

        def split_heads(m):
            return T.reshape(T.transpose(T.reshape(m, (K, L, h, dh)), (0, 2, 1, 3)), (K * h, L, dh))

        q = split_heads(T.add(T.matmul(xn, blk["attn.wq"]), blk["attn.bq"]))
        k = split_heads(T.add(T.matmul(xn, blk["attn.wk"]), blk["attn.bk"]))
        v = split_heads(T.add(T.matmul(xn, blk["attn.wv"]), blk["attn.bv"]))
        scores = T.mul(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(dh))
        attn = T.softmax(T.add(scores, T.Tensor(causal)))
        ctx = T.matmul(attn, v)  # (K*h, L, dh)
        merged = T.reshape(T.transpose(T.reshape(ctx, (K, h, L, dh)), (0, 2, 1, 3)), (K, L, td))
        return T.add(T.matmul(merged, blk["attn.wo"]), blk["attn.bo"])

    def _ffn(self, blk, x):
        xn = T.layer_norm(x, blk["ln2.g"], blk["ln2.b"])
        hidden = T.quick_gelu(T.add(T.matmul(xn, blk["mlp.w1"]), blk["mlp.b1"]))
        return T.add(T.matmul(hidden, blk["mlp.w2"]), blk["mlp.b2"])

    # -- frozen-ness ------------------------------------------------------

    def weight_arrays(self):
        yield self.e_sos.data
        yield self.e_suf.data
        yield self.pos_embed.data
        yield self.ln_final[0].data
        yield self.ln_final[1].data
        if self.proj is not None:
            yield self.proj.data
        for blk in self.blocks:
            for key in sorted(blk):
                yield blk[key].data

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        for arr in self.weight_arrays():
            digest.update(arr.tobytes())
        return digest.hexdigest()
