"""Training objective and the frozen-backbone training loop.

The total loss is the weighted sum of a label-smoothed identity
cross-entropy on the final embedding, a batch-hard triplet term on the
same embedding, an image-to-text alignment term on the projected
backbone feature against the frozen identity bank, and the anchor
decorrelation penalty. With a frozen feature corpus the alignment term
has no trainable inputs and is logged as a constant diagnostic, unless
the auxiliary-head variant routes a projection of the reconstructed
feature through it.

Training is PK-sampled (P identities x K images) Adam over the anchor
contexts, anchor projection, domain generator, refinement blocks,
classifier, and embed head. The text encoder, corpus features, and the
identity bank stay frozen.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import anchors as anchors_mod
from . import corpus as corpus_mod
from . import refine as refine_mod
from . import tensor as T
from .config import RunConfig
from .textenc import FrozenTextEncoder


class SamplingError(ValueError):
    """Batch composition violates what batch-hard mining needs."""


class LabelError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


# -- loss terms ------------------------------------------------------------


def id_loss(logits: T.Tensor, labels, smoothing: float) -> T.Tensor:
    """Label-smoothed cross-entropy, mean over the batch.

    Target distribution puts 1 - eps on the true class and eps/(C-1)
    on each other class.
    """
    b, c = logits.shape
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= c:
        raise LabelError(f"labels outside [0, {c})")
    if c < 2:
        raise LabelError("need at least 2 classes")
    targets = np.full((b, c), smoothing / (c - 1))
    targets[np.arange(b), labels] = 1.0 - smoothing
    log_p = T.sub(logits, T.logsumexp(logits, keepdims=True))
    return T.mul(T.sum_(T.mul(log_p, targets)), -1.0 / b)


def pairwise_distances(embeddings: T.Tensor) -> T.Tensor:
    """Euclidean distance matrix via the Gram expansion; a small epsilon
    inside the sqrt keeps the zero diagonal differentiable."""
    sq = T.sum_(T.square(embeddings), axis=1, keepdims=True)  # (B, 1)
    gram = T.matmul(embeddings, T.transpose(embeddings))
    d2 = T.add(T.sub(sq, T.mul(gram, 2.0)), T.transpose(sq))
    return T.sqrt(T.add(T.relu(d2), 1e-12))


def triplet_loss_batch_hard(embeddings: T.Tensor, labels, margin: float) -> T.Tensor:
    """Batch-hard mining: per anchor, the farthest same-identity sample
    and the closest different-identity sample, hinge at `margin`."""
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    counts = np.bincount(np.unique(labels, return_inverse=True)[1])
    if len(counts) < 2 or counts.max() < 2:
        raise SamplingError(
            "batch-hard needs >= 2 identities and >= 2 images for some identity "
            "(check the PK sampler configuration)"
        )
    dists = pairwise_distances(embeddings)
    big = 1e30
    pos_masked = T.add(dists, (~same) * -big)  # non-positives masked out of the max
    d_ap, _ = T.reduce_max_with_index(pos_masked)
    neg_masked = T.add(T.mul(dists, -1.0), same * -big)  # maximize -d over negatives
    neg_best, _ = T.reduce_max_with_index(neg_masked)
    d_an = T.mul(neg_best, -1.0)
    hinge = T.relu(T.add(T.sub(d_ap, d_an), margin))
    return T.mean(hinge)


def i2t_loss(proj: T.Tensor, bank: corpus_mod.IdentityTextBank, labels,
             temperature: float, smoothing: float) -> T.Tensor:
    """Cross-entropy over cosine similarities to the frozen identity bank."""
    rows = []
    for pid in np.asarray(labels):
        try:
            rows.append(bank.row_for(int(pid)))
        except KeyError:
            raise LabelError(f"identity {pid} missing from text bank") from None
    sims = T.matmul(T.l2_normalize(proj), T.transpose(T.Tensor(bank.vectors)))
    return id_loss(T.mul(sims, 1.0 / temperature), np.asarray(rows), smoothing)


# -- model bundle -----------------------------------------------------------


class Classifier:
    def __init__(self, dim: int, num_classes: int, seed: int = 0):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC1A55]))
        self.w = T.Tensor(rng.standard_normal((dim, num_classes)) * 0.02, requires_grad=True)

    def logits(self, f: T.Tensor) -> T.Tensor:
        return T.matmul(f, self.w)

    def parameters(self) -> dict:
        return {"classifier.w": self.w}


@dataclass
class ForwardResult:
    f: T.Tensor  # (B, D) final identity embedding
    refined: refine_mod.RefinementOutput
    structured_anchors: T.Tensor  # (K, D), shared graph node per forward


class Model:
    """Everything trainable plus the frozen encoder, wired for one forward."""

    def __init__(self, cfg: RunConfig, dim: int, proj_dim: int, num_classes: int):
        self.cfg = cfg
        self.dim = dim
        self.proj_dim = proj_dim
        self.num_classes = num_classes
        if cfg.anchor_mode == "structured":
            self.encoder = FrozenTextEncoder.toy(
                seed=cfg.encoder_seed,
                text_dim=cfg.text_dim,
                n_blocks=cfg.text_blocks,
                heads=cfg.text_heads,
                ffn_dim=cfg.text_ffn,
            )
        else:
            self.encoder = None
        self.bank = anchors_mod.AnchorBank(
            cfg.anchor_mode, k=cfg.anchors_k, dim=dim, encoder=self.encoder,
            context_len=cfg.context_len, seed=cfg.seed,
        )
        self.domain_gen = anchors_mod.DomainAnchorGenerator(dim=dim, m=cfg.anchors_m, seed=cfg.seed)
        self.refiner = refine_mod.RefinementModule(
            dim=dim, n_blocks=cfg.n_blocks, heads=cfg.heads,
            init_mode=cfg.refine_init, seed=cfg.seed, ffn_dim=cfg.ffn_mult * dim,
        )
        self.embed_head = refine_mod.EmbedHead(dim=dim)
        self.classifier = Classifier(dim, num_classes, seed=cfg.seed)
        if cfg.i2t_aux_head:
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x12A7]))
            self.i2t_head = T.Tensor(
                rng.standard_normal((dim, proj_dim)) / np.sqrt(dim), requires_grad=True
            )
        else:
            self.i2t_head = None

    def parameters(self) -> dict:
        params = {}
        params.update(self.bank.parameters())
        params.update(self.domain_gen.parameters())
        params.update(self.refiner.parameters())
        params.update(self.embed_head.parameters())
        params.update(self.classifier.parameters())
        if self.i2t_head is not None:
            params["i2t_head.w"] = self.i2t_head
        return params

    def forward(self, tokens: T.Tensor, training: bool, structured: T.Tensor | None = None) -> ForwardResult:
        """Anchor assembly, refinement, and embedding for (B, N, D) tokens.

        `structured` lets inference reuse a prebuilt anchor matrix (it does
        not depend on the image); training rebuilds it every step.
        """
        if structured is None:
            structured = self.bank.build()
        domain = self.domain_gen.generate(tokens)
        anchor_set = anchors_mod.assemble_anchor_set(structured, domain)
        refined = refine_mod.refine(self.refiner, tokens, anchor_set)
        f = self.embed_head.forward(refined.f_ref, training=training)
        return ForwardResult(f=f, refined=refined, structured_anchors=structured)


def total_loss(model: Model, bank: corpus_mod.IdentityTextBank, tokens: T.Tensor,
               proj: T.Tensor, labels, class_rows, cfg: RunConfig):
    """Weighted objective exactly as configured, plus a per-term breakdown.

    Breakdown values are the unweighted terms; the reported total equals
    id + lambda_tri*tri + lambda_i2t*i2t + div (div carries lambda_div
    internally).
    """
    result = model.forward(tokens, training=True)
    logits = model.classifier.logits(result.f)
    l_id = id_loss(logits, class_rows, cfg.label_smoothing)
    l_tri = triplet_loss_batch_hard(result.f, labels, cfg.margin)
    if model.i2t_head is not None:
        aux = T.matmul(result.f, model.i2t_head)
        l_i2t = i2t_loss(aux, bank, labels, cfg.temperature, cfg.label_smoothing)
    else:
        l_i2t = i2t_loss(proj, bank, labels, cfg.temperature, cfg.label_smoothing)
    l_div = anchors_mod.decorrelation_loss(result.structured_anchors, cfg.lambda_div)
    total = T.add(
        T.add(l_id, T.mul(l_tri, cfg.lambda_tri)),
        T.add(T.mul(l_i2t, cfg.lambda_i2t), l_div),
    )
    breakdown = {
        "id": l_id.item(),
        "tri": l_tri.item(),
        "i2t": l_i2t.item(),
        "div": l_div.item(),
        "total": total.item(),
    }
    return total, breakdown


# -- optimizer ---------------------------------------------------------------


class Adam:
    def __init__(self, params: dict, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.names = sorted(params)  # fixed update order for determinism
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(params[k].data) for k in self.names}
        self.v = {k: np.zeros_like(params[k].data) for k in self.names}
        self.t = 0

    def step(self, lr_scale: float = 1.0):
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name in self.names:
            p = self.params[name]
            g = p.grad
            if g is None:
                continue
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            mhat = self.m[name] / bc1
            vhat = self.v[name] / bc2
            p.data -= (self.lr * lr_scale) * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        for name in self.names:
            self.params[name].zero_grad()


def cosine_lr_scale(step: int, total_steps: int) -> float:
    if total_steps <= 1:
        return 1.0
    return 0.5 * (1.0 + np.cos(np.pi * step / (total_steps - 1)))


# -- PK sampling --------------------------------------------------------------


class PKSampler:
    """Deterministic P-identities x K-images batch stream over the train
    split; identities cycle in shuffled order per epoch, images are drawn
    without replacement where possible (with replacement plus a warning
    otherwise)."""

    def __init__(self, labels, p_ids: int, k_images: int, seed: int):
        labels = np.asarray(labels)
        self.by_id = {}
        for idx, pid in enumerate(labels):
            self.by_id.setdefault(int(pid), []).append(idx)
        if len(self.by_id) < 2:
            raise SamplingError("PK sampling needs at least two identities")
        self.p = min(p_ids, len(self.by_id))
        self.k = k_images
        self.rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9A3B1E]))
        self.ids = sorted(self.by_id)
        self.warned_replacement = False

    def steps_per_epoch(self) -> int:
        return max(1, len(self.ids) // self.p)

    def epoch_batches(self):
        order = self.rng.permutation(len(self.ids))
        for start in range(0, len(order) - self.p + 1, self.p):
            chosen = [self.ids[i] for i in order[start : start + self.p]]
            batch = []
            for pid in chosen:
                pool = self.by_id[pid]
                if len(pool) >= self.k:
                    picks = self.rng.choice(len(pool), size=self.k, replace=False)
                else:
                    self.warned_replacement = True
                    picks = self.rng.choice(len(pool), size=self.k, replace=True)
                batch.extend(pool[i] for i in picks)
            yield np.asarray(batch)


# -- checkpointing -------------------------------------------------------------

CHECKPOINT_MAGIC = b"SCK1"
SECTION_OF = {
    "anchors": ("anchors.",),
    "domain_gen": ("domain_gen.",),
    "refine": ("refine.",),
    "classifier": ("classifier.",),
    "embed_head": ("embed_head.", "i2t_head."),
}


def save_checkpoint(path, model: Model, step: int, extra: dict | None = None) -> None:
    """Single file: magic, canonical JSON manifest, float64 LE blob.

    The manifest records the config, derived dims, step count, and per
    section the tensor names/shapes/offsets. Running BN statistics ride
    along as tensors so reloads reproduce inference exactly.
    """
    params = dict(model.parameters())
    params["embed_head.running_mean"] = T.Tensor(model.embed_head.running_mean)
    params["embed_head.running_var"] = T.Tensor(model.embed_head.running_var)

    sections: dict = {name: [] for name in SECTION_OF}
    chunks, offset = [], 0
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name].data, dtype="<f8")
        section = next(s for s, prefixes in SECTION_OF.items() if name.startswith(prefixes))
        sections[section].append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size

    manifest = {
        "format_version": 1,
        "config": model.cfg.to_dict(),
        "derived": {
            "dim": model.dim,
            "proj_dim": model.proj_dim,
            "num_classes": model.num_classes,
            "bn_initialized": model.embed_head.initialized,
        },
        "step": step,
        "sections": sections,
    }
    if extra:
        manifest["extra"] = extra
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)


def load_checkpoint(path):
    """Rebuild the model from a checkpoint; returns (model, manifest)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {raw[:4]!r}")
    (mlen,) = struct.unpack_from("<I", raw, 4)
    manifest = json.loads(raw[8 : 8 + mlen].decode())
    if manifest.get("format_version") != 1:
        raise CheckpointError("unsupported checkpoint format version")
    data_start = 8 + mlen

    cfg = RunConfig.from_dict(manifest["config"])
    derived = manifest["derived"]
    model = Model(cfg, dim=derived["dim"], proj_dim=derived["proj_dim"],
                  num_classes=derived["num_classes"])

    arrays = {}
    for entries in manifest["sections"].values():
        for ent in entries:
            size = int(np.prod(ent["shape"])) if ent["shape"] else 1
            start = data_start + 8 * ent["offset"]
            arr = np.frombuffer(raw, dtype="<f8", count=size, offset=start)
            arrays[ent["name"]] = arr.astype(np.float64).reshape(ent["shape"])

    params = model.parameters()
    for name, tensor in params.items():
        if name not in arrays:
            raise CheckpointError(f"checkpoint missing tensor {name}")
        if tuple(arrays[name].shape) != tuple(tensor.shape):
            raise CheckpointError(f"tensor {name} shape mismatch")
        tensor.data[...] = arrays[name]
    model.embed_head.running_mean = arrays["embed_head.running_mean"].copy()
    model.embed_head.running_var = arrays["embed_head.running_var"].copy()
    model.embed_head.initialized = bool(derived["bn_initialized"])
    return model, manifest


# -- training loop ---------------------------------------------------------------


@dataclass
class TrainLog:
    rows: list  # (step, total, id, tri, i2t, div)
    warnings: list

    def to_csv(self) -> str:
        lines = ["step,total,id,tri,i2t,div"]
        for row in self.rows:
            lines.append(",".join(f"{v:.10g}" if i else str(v) for i, v in enumerate(row)))
        return "\n".join(lines) + "\n"


def train_stage2(header: corpus_mod.CorpusHeader, records, cfg: RunConfig,
                 out_checkpoint=None, bank: corpus_mod.IdentityTextBank | None = None):
    """Stage-2 training over a frozen feature corpus.

    Returns (model, TrainLog). Writes the checkpoint (and per-E-epoch
    snapshots when configured) if `out_checkpoint` is given.
    """
    train = [r for r in records if r.split == "train"]
    if not train:
        raise SamplingError("corpus has no train split")
    labels = np.array([r.person_id for r in train])
    class_ids = sorted(set(int(p) for p in labels))
    class_row = {pid: i for i, pid in enumerate(class_ids)}
    if bank is None:
        bank = corpus_mod.make_text_bank(class_ids, header.proj_dim, seed=cfg.corpus_seed)

    tokens_all = np.stack([r.tokens for r in train])  # (n_train, N, D)
    proj_all = np.stack([r.proj for r in train])

    model = Model(cfg, dim=header.dim, proj_dim=header.proj_dim, num_classes=len(class_ids))
    params = model.parameters()
    opt = Adam(params, lr=cfg.lr)
    sampler = PKSampler(labels, cfg.p_ids, cfg.k_images, seed=cfg.seed)
    total_steps = cfg.epochs * sampler.steps_per_epoch()

    log_rows, warnings = [], []
    step = 0
    for epoch in range(cfg.epochs):
        for batch_idx in sampler.epoch_batches():
            scale = cosine_lr_scale(step, total_steps) if cfg.cosine_decay else 1.0
            batch_tokens = T.Tensor(tokens_all[batch_idx])
            batch_proj = T.Tensor(proj_all[batch_idx])
            batch_labels = labels[batch_idx]
            rows = np.array([class_row[int(p)] for p in batch_labels])
            loss, breakdown = total_loss(
                model, bank, batch_tokens, batch_proj, batch_labels, rows, cfg
            )
            opt.zero_grad()
            T.backward(loss)
            opt.step(lr_scale=scale)
            log_rows.append(
                (step, breakdown["total"], breakdown["id"], breakdown["tri"],
                 breakdown["i2t"], breakdown["div"])
            )
            step += 1
        if (
            out_checkpoint is not None
            and cfg.checkpoint_every > 0
            and (epoch + 1) % cfg.checkpoint_every == 0
            and epoch + 1 < cfg.epochs
        ):
            save_checkpoint(f"{out_checkpoint}.epoch{epoch + 1}", model, step)
    if sampler.warned_replacement:
        warnings.append("some identities had fewer images than k_images; resampled with replacement")
    if out_checkpoint is not None:
        save_checkpoint(out_checkpoint, model, step)
    return model, TrainLog(rows=log_rows, warnings=warnings)
