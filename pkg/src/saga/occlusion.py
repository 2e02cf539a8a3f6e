"""Controlled occlusion at the patch-token level.

Without a pixel backbone, occlusion replaces patch tokens directly:
masking geometries (lower half, upper half, seeded random rectangle)
overwrite tokens with a fill (zeros, corpus-scale noise, or a provided
token), and the distractor condition pastes corresponding-position
tokens from a record of a disjoint identity pool entering from a
seeded-random side. The CLS vector is recomputed as the mean of the
post-occlusion tokens, a declared stand-in for how a pooled global
feature degrades. Coverage zero is the exact identity. Gallery records
are never modified by the sweep.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from statistics import mean, pstdev

import numpy as np

from . import retrieval
from .corpus import FeatureRecord

KINDS = ("lower_half", "upper_half", "random_rect", "distractor")
MAX_COVERAGE = 0.8
ENTRY_SIDES = ("left", "right", "bottom")  # distractors rarely enter from above


class OcclusionError(ValueError):
    pass


@dataclass
class OcclusionSpec:
    kind: str
    coverage: float
    seed: int = 0
    fill: str = "noise"  # zeros | noise | learned_token (masking kinds only)
    fill_scale: float = 1.0  # expected norm of a noise-fill token; match the corpus noise scale
    fill_token: np.ndarray | None = None  # required for learned_token
    distractor_pool: list = field(default_factory=list)  # disjoint-identity records

    def __post_init__(self):
        if self.kind not in KINDS:
            raise OcclusionError(f"unknown occlusion kind {self.kind!r}")
        if not 0.0 <= self.coverage <= MAX_COVERAGE:
            raise OcclusionError(f"coverage {self.coverage} outside [0, {MAX_COVERAGE}]")
        if self.fill not in ("zeros", "noise", "learned_token"):
            raise OcclusionError(f"unknown fill mode {self.fill!r}")


def _masked_token_indices(spec: OcclusionSpec, grid, rng) -> np.ndarray:
    """Flat token indices covered by the occlusion geometry."""
    h, w = grid
    n = h * w
    if spec.kind == "lower_half":
        rows = int(np.ceil(spec.coverage * h))
        return np.arange((h - rows) * w, n)
    if spec.kind == "upper_half":
        rows = int(np.ceil(spec.coverage * h))
        return np.arange(0, rows * w)
    if spec.kind == "random_rect":
        area = max(1, round(spec.coverage * n))
        aspect = rng.uniform(0.5, 2.0)  # rect height / width
        rh = int(np.clip(round(np.sqrt(area * aspect)), 1, h))
        rw = int(np.clip(round(area / rh), 1, w))
        top = int(rng.integers(0, h - rh + 1))
        left = int(rng.integers(0, w - rw + 1))
        rr, cc = np.meshgrid(np.arange(top, top + rh), np.arange(left, left + rw), indexing="ij")
        return (rr * w + cc).reshape(-1)
    # distractor: rectangle entering from a random side
    side = ENTRY_SIDES[int(rng.integers(0, len(ENTRY_SIDES)))]
    if side == "bottom":
        rows = int(np.ceil(spec.coverage * h))
        return np.arange((h - rows) * w, n)
    cols = int(np.ceil(spec.coverage * w))
    if side == "left":
        col_range = np.arange(0, cols)
    else:
        col_range = np.arange(w - cols, w)
    rr, cc = np.meshgrid(np.arange(h), col_range, indexing="ij")
    return (rr * w + cc).reshape(-1)


def apply_occlusion(record: FeatureRecord, spec: OcclusionSpec, grid,
                    record_key: int = 0) -> FeatureRecord:
    """Occlude one record; deterministic given (record, spec, record_key).

    record_key decorrelates per-query randomness inside one sweep cell
    (distractor identity, entry side, rectangle placement) while keeping
    the whole cell a pure function of the spec seed.
    """
    h, w = grid
    if h * w != record.tokens.shape[0]:
        raise OcclusionError(
            f"grid {h}x{w} does not match {record.tokens.shape[0]} tokens"
        )
    if spec.coverage == 0.0:
        return record  # exact identity, bit for bit

    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, record_key, 0x0CC1]))
    idx = _masked_token_indices(spec, grid, rng)
    tokens = record.tokens.copy()

    if spec.kind == "distractor":
        if not spec.distractor_pool:
            raise OcclusionError("distractor occlusion needs a nonempty disjoint pool")
        source = spec.distractor_pool[int(rng.integers(0, len(spec.distractor_pool)))]
        tokens[idx] = source.tokens[idx]
    elif spec.fill == "zeros":
        tokens[idx] = 0.0
    elif spec.fill == "noise":
        d = tokens.shape[1]
        tokens[idx] = rng.standard_normal((len(idx), d)) * (spec.fill_scale / np.sqrt(d))
    else:  # learned_token
        if spec.fill_token is None:
            raise OcclusionError("learned_token fill needs a fill_token vector")
        tokens[idx] = spec.fill_token

    return replace(record, tokens=tokens, cls=tokens.mean(axis=0))


# -- coverage sweep -----------------------------------------------------------


@dataclass
class SweepCell:
    kind: str
    coverage: float
    seed: int
    variant: str
    mAP: float
    rank1: float
    advantage_mAP: float
    advantage_r1: float


@dataclass
class SweepResult:
    cells: list

    def to_csv(self, config_lines=()) -> str:
        out = [f"# {line}" for line in config_lines]
        out.append("kind,coverage,seed,variant,mAP,rank1,advantage_mAP,advantage_r1")
        for c in self.cells:
            out.append(
                f"{c.kind},{c.coverage:.10g},{c.seed},{c.variant},"
                f"{c.mAP:.10g},{c.rank1:.10g},{c.advantage_mAP:.10g},{c.advantage_r1:.10g}"
            )
        return "\n".join(out) + "\n"

    def mean_advantage(self, kind: str, coverage: float, variant: str, metric: str = "r1"):
        """(mean, sd) of the variant's advantage over seeds for a cell."""
        attr = "advantage_r1" if metric == "r1" else "advantage_mAP"
        vals = [
            getattr(c, attr)
            for c in self.cells
            if c.kind == kind and abs(c.coverage - coverage) < 1e-12 and c.variant == variant
        ]
        if not vals:
            raise OcclusionError(f"no sweep cell for ({kind}, {coverage}, {variant})")
        return mean(vals), (pstdev(vals) if len(vals) > 1 else 0.0)

    def coverages(self, kind: str):
        return sorted({c.coverage for c in self.cells if c.kind == kind})


def sweep(model, records, grid, kinds, coverages, variants, w_r: float, w_i: float,
          base_seed: int = 0, n_seeds: int = 3, fill: str = "noise",
          fill_scale: float = 1.0, fill_token=None, topk: int = 10,
          threads: int = 1) -> SweepResult:
    """Occlude queries only, evaluate every variant at each cell.

    Masking kinds run once per coverage (seed column = base_seed);
    the distractor kind averages across `n_seeds` pools of entry
    geometry and identity choice. Gallery embeddings are computed once
    from untouched records. Cells are evaluated in a canonical order so
    output is identical regardless of execution parallelism.
    """
    queries = [r for r in records if r.split == "query"]
    gallery = [r for r in records if r.split == "gallery"]
    if not queries or not gallery:
        raise OcclusionError("sweep needs query and gallery splits")
    query_ids = {r.person_id for r in queries}
    distractor_pool = [r for r in records if r.split == "train" and r.person_id not in query_ids]

    gallery_emb = retrieval.extract_embeddings(model, gallery, w_r, w_i, threads=threads)

    def run_cell(kind, coverage, seed):
        spec = OcclusionSpec(
            kind=kind, coverage=coverage, seed=seed, fill=fill,
            fill_scale=fill_scale, fill_token=fill_token,
            distractor_pool=distractor_pool if kind == "distractor" else [],
        )
        occluded = [apply_occlusion(r, spec, grid, record_key=i) for i, r in enumerate(queries)]
        q_emb = retrieval.extract_embeddings(model, occluded, w_r, w_i, threads=threads)
        metrics = {}
        for variant in variants:
            res = retrieval.evaluate_variant(q_emb, gallery_emb, variant, w_r, w_i,
                                             topk=topk, threads=threads)
            metrics[variant] = (res.mAP, float(res.cmc[0]))
        base_map, base_r1 = metrics.get("cls_only", (np.nan, np.nan))
        cells = []
        for variant in variants:
            m, r1 = metrics[variant]
            cells.append(
                SweepCell(
                    kind=kind, coverage=coverage, seed=seed, variant=variant,
                    mAP=m, rank1=r1,
                    advantage_mAP=(m - base_map) * 100.0,
                    advantage_r1=(r1 - base_r1) * 100.0,
                )
            )
        return cells

    all_cells = []
    for kind in kinds:
        seeds = [base_seed + s for s in range(n_seeds)] if kind == "distractor" else [base_seed]
        for coverage in coverages:
            for seed in seeds:
                all_cells.extend(run_cell(kind, float(coverage), seed))
    return SweepResult(cells=all_cells)


# -- crossover reporting ---------------------------------------------------------


def crossover_coverage(result: SweepResult, kind: str, variant: str = "refined_only"):
    """Lowest coverage at which the variant's mean Rank-1 advantage over
    the CLS baseline becomes positive; None when it never does."""
    for coverage in result.coverages(kind):
        adv, _ = result.mean_advantage(kind, coverage, variant)
        if adv > 0:
            return coverage
    return None


def crossover_report(masking: SweepResult, masking_kind: str,
                     distractor: SweepResult, variant: str = "refined_only") -> dict:
    cov_m = masking.coverages(masking_kind)
    cov_d = distractor.coverages("distractor")
    if cov_m != cov_d:
        raise OcclusionError("crossover comparison needs identical coverage grids")
    masking_cross = crossover_coverage(masking, masking_kind, variant)
    distractor_cross = crossover_coverage(distractor, "distractor", variant)
    return {
        "masking_kind": masking_kind,
        "variant": variant,
        "masking_crossover": masking_cross,
        "distractor_crossover": distractor_cross,
        "distractor_at_or_above_masking": (
            None
            if masking_cross is None or distractor_cross is None
            else distractor_cross >= masking_cross
        ),
    }
