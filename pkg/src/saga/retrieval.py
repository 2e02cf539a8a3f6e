"""Embedding extraction, score-level fusion, and retrieval evaluation.

Evaluation follows the standard cross-camera protocol: per query, every
gallery entry sharing both identity and camera is excluded, average
precision is computed over the remaining ranked list, and a query
counts only if a cross-camera same-identity match exists. Similarity
ties break by gallery index (ascending) so results are reproducible.

Fusion concatenates the sqrt-weighted unit components and renormalizes,
which makes every fused pairwise similarity a weighted average of the
component cosines:

    dot(fuse_a, fuse_b) * (w_r + w_i) == w_r * ref_dot + w_i * cls_dot
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .objective import Model

VARIANTS = ("cls_only", "refined_only", "concatenated_unweighted", "fused")


class ProtocolError(ValueError):
    pass


@dataclass
class EmbeddingRecord:
    person_id: int
    camera_id: int
    split: str
    f_ref_unit: np.ndarray  # unit-norm embed output
    cls_unit: np.ndarray  # unit-norm backbone CLS
    fused: np.ndarray  # unit-norm weighted concatenation


@dataclass
class EvalResult:
    mAP: float
    cmc: np.ndarray  # ranks 1..R
    per_query_ap: list
    num_valid_queries: int

    def to_json(self, extra: dict | None = None) -> str:
        payload = {
            "mAP": self.mAP,
            "cmc": [float(v) for v in self.cmc],
            "num_valid_queries": self.num_valid_queries,
        }
        if extra:
            payload.update(extra)
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"


# -- fusion -----------------------------------------------------------------


def fuse(f_ref_unit: np.ndarray, cls_unit: np.ndarray, w_r: float, w_i: float) -> np.ndarray:
    """Weighted concatenation of unit components, renormalized."""
    if w_r < 0 or w_i < 0 or (w_r == 0 and w_i == 0):
        raise ProtocolError("fusion weights must be nonnegative and not both zero")
    stacked = np.concatenate(
        [np.sqrt(w_r) * f_ref_unit, np.sqrt(w_i) * cls_unit], axis=-1
    )
    return stacked / np.linalg.norm(stacked, axis=-1, keepdims=True)


def _unit_rows(m: np.ndarray) -> np.ndarray:
    return m / np.linalg.norm(m, axis=-1, keepdims=True)


# -- embedding extraction ------------------------------------------------------


def extract_embeddings(model: Model, records, w_r: float, w_i: float,
                       batch_size: int = 64, threads: int = 1):
    """Inference-mode embeddings for each record.

    The structured anchor matrix is image independent, so it is built
    once and reused across batches; batches can run on a thread pool
    (results are ordered, so parallel output is identical to serial).
    """
    with T.no_grad():
        structured = model.bank.build()
    chunks = [records[i : i + batch_size] for i in range(0, len(records), batch_size)]

    def run_chunk(chunk):
        tokens = T.Tensor(np.stack([r.tokens for r in chunk]))
        with T.no_grad():
            result = model.forward(tokens, training=False, structured=structured)
        f_unit = _unit_rows(result.f.data)
        cls_unit = _unit_rows(np.stack([r.cls for r in chunk]))
        fused = fuse(f_unit, cls_unit, w_r, w_i)
        return [
            EmbeddingRecord(
                person_id=rec.person_id,
                camera_id=rec.camera_id,
                split=rec.split,
                f_ref_unit=f_unit[i],
                cls_unit=cls_unit[i],
                fused=fused[i],
            )
            for i, rec in enumerate(chunk)
        ]

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_chunk, chunks))
    else:
        results = [run_chunk(c) for c in chunks]
    return [e for chunk in results for e in chunk]


# -- similarity and evaluation ---------------------------------------------------


def similarity_matrix(queries: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """Cosine similarities of unit-vector rows (plain dot products)."""
    queries = np.atleast_2d(queries)
    gallery = np.atleast_2d(gallery)
    if queries.shape[1] != gallery.shape[1]:
        raise ProtocolError(
            f"embedding dims disagree: query {queries.shape[1]} vs gallery {gallery.shape[1]}"
        )
    return queries @ gallery.T


def evaluate(sim: np.ndarray, query_ids, query_cams, gallery_ids, gallery_cams,
             topk: int = 10, threads: int = 1) -> EvalResult:
    """Cross-camera CMC/mAP from a precomputed similarity matrix."""
    query_ids = np.asarray(query_ids)
    query_cams = np.asarray(query_cams)
    gallery_ids = np.asarray(gallery_ids)
    gallery_cams = np.asarray(gallery_cams)

    def one_query(qi):
        keep = ~((gallery_ids == query_ids[qi]) & (gallery_cams == query_cams[qi]))
        kept_ids = gallery_ids[keep]
        relevant = kept_ids == query_ids[qi]
        if not relevant.any():
            return None  # invalid query: no cross-camera match remains
        # stable sort on negated similarity: ties resolve by gallery index
        order = np.argsort(-sim[qi][keep], kind="stable")
        rel_sorted = relevant[order]
        hit_ranks = np.flatnonzero(rel_sorted)
        precision = (np.arange(len(hit_ranks)) + 1) / (hit_ranks + 1)
        ap = precision.mean()
        first = hit_ranks[0]
        cmc_row = np.zeros(topk)
        if first < topk:
            cmc_row[first:] = 1.0
        return ap, cmc_row

    if threads > 1 and len(query_ids) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(one_query, range(len(query_ids))))
    else:
        outcomes = [one_query(qi) for qi in range(len(query_ids))]

    aps, cmc_acc = [], np.zeros(topk)
    for out in outcomes:
        if out is None:
            continue
        aps.append(out[0])
        cmc_acc += out[1]
    if not aps:
        raise ProtocolError("no valid queries: gallery lacks cross-camera matches")
    return EvalResult(
        mAP=float(np.mean(aps)),
        cmc=cmc_acc / len(aps),
        per_query_ap=[float(a) for a in aps],
        num_valid_queries=len(aps),
    )


def _vectors_for(embeddings, variant: str, w_r: float, w_i: float) -> np.ndarray:
    if variant == "cls_only":
        return np.stack([e.cls_unit for e in embeddings])
    if variant == "refined_only":
        return np.stack([e.f_ref_unit for e in embeddings])
    if variant == "concatenated_unweighted":
        w_r, w_i = 1.0, 1.0
    elif variant != "fused":
        raise ProtocolError(f"unknown feature variant {variant!r}")
    ref = np.stack([e.f_ref_unit for e in embeddings])
    cls = np.stack([e.cls_unit for e in embeddings])
    return fuse(ref, cls, w_r, w_i)


def variant_similarity(query_emb, gallery_emb, variant: str, w_r: float, w_i: float) -> np.ndarray:
    """Similarity matrix for a feature variant.

    Fused variants use the decomposition identity (weighted average of
    component similarity matrices), which equals the explicit fused-vector
    similarities by construction; endpoints w_i=0 / w_r=0 reproduce the
    single-component variants exactly.
    """
    if variant == "cls_only":
        return similarity_matrix(
            np.stack([e.cls_unit for e in query_emb]), np.stack([e.cls_unit for e in gallery_emb])
        )
    if variant == "refined_only":
        return similarity_matrix(
            np.stack([e.f_ref_unit for e in query_emb]),
            np.stack([e.f_ref_unit for e in gallery_emb]),
        )
    if variant == "concatenated_unweighted":
        w_r, w_i = 1.0, 1.0
    elif variant != "fused":
        raise ProtocolError(f"unknown feature variant {variant!r}")
    if w_r < 0 or w_i < 0 or (w_r == 0 and w_i == 0):
        raise ProtocolError("fusion weights must be nonnegative and not both zero")
    s_ref = similarity_matrix(
        np.stack([e.f_ref_unit for e in query_emb]), np.stack([e.f_ref_unit for e in gallery_emb])
    )
    s_cls = similarity_matrix(
        np.stack([e.cls_unit for e in query_emb]), np.stack([e.cls_unit for e in gallery_emb])
    )
    return (w_r * s_ref + w_i * s_cls) / (w_r + w_i)


def evaluate_variant(query_emb, gallery_emb, variant: str, w_r: float, w_i: float,
                     topk: int = 10, threads: int = 1) -> EvalResult:
    sim = variant_similarity(query_emb, gallery_emb, variant, w_r, w_i)
    return evaluate(
        sim,
        [e.person_id for e in query_emb],
        [e.camera_id for e in query_emb],
        [e.person_id for e in gallery_emb],
        [e.camera_id for e in gallery_emb],
        topk=topk,
        threads=threads,
    )


def feature_variant_eval(model: Model, records, variant: str, w_r: float, w_i: float,
                         topk: int = 10, threads: int = 1) -> EvalResult:
    """End-to-end: embed the corpus splits and evaluate one variant."""
    queries = [r for r in records if r.split == "query"]
    gallery = [r for r in records if r.split == "gallery"]
    q_emb = extract_embeddings(model, queries, w_r, w_i, threads=threads)
    g_emb = extract_embeddings(model, gallery, w_r, w_i, threads=threads)
    return evaluate_variant(q_emb, g_emb, variant, w_r, w_i, topk=topk, threads=threads)


# -- fusion weight sweep ----------------------------------------------------------


def ratio_to_weights(ratio: float):
    """Map w_r/w_i ratio to (w_r, w_i) with w_r + w_i = 1.

    ratio 0 and inf are the exact single-component endpoints.
    """
    if ratio < 0:
        raise ProtocolError("fusion ratio must be nonnegative")
    if np.isinf(ratio):
        return 1.0, 0.0
    return ratio / (1.0 + ratio), 1.0 / (1.0 + ratio)


def fusion_weight_sweep(query_emb, gallery_emb, ratios, topk: int = 10, threads: int = 1):
    """Evaluate the fused variant across w_r/w_i ratios.

    Returns (rows, argmax_ratio) where rows are
    (ratio, mAP, rank1..rankR); argmax is by mAP, ties to the smallest
    ratio.
    """
    ratios = list(ratios)
    if not ratios:
        raise ProtocolError("empty ratio list")
    rows = []
    for ratio in ratios:
        w_r, w_i = ratio_to_weights(float(ratio))
        res = evaluate_variant(query_emb, gallery_emb, "fused", w_r, w_i,
                               topk=topk, threads=threads)
        rows.append((float(ratio), res.mAP, *[float(c) for c in res.cmc]))
    best = max(range(len(rows)), key=lambda i: (rows[i][1], -rows[i][0]))
    return rows, rows[best][0]


def sweep_csv(rows, topk: int, config_lines) -> str:
    header = "ratio,mAP," + ",".join(f"rank{r}" for r in range(1, topk + 1))
    out = [f"# {line}" for line in config_lines]
    out.append(header)
    for row in rows:
        out.append(",".join(f"{v:.10g}" for v in row))
    return "\n".join(out) + "\n"
