import numpy as np
import pytest

from saga import corpus
from saga.config import RunConfig, synth_config_from


def micro_run_config(**overrides) -> RunConfig:
    """Small-everything config for fast unit tests (not the reference corpus)."""
    base = dict(
        corpus_num_ids=8,
        corpus_cams_per_id=2,
        corpus_images_per_id_cam=3,
        corpus_seed=11,
        corpus_n_patches=8,
        corpus_dim=16,
        corpus_proj_dim=4,
        corpus_grid_h=4,
        corpus_grid_w=2,
        corpus_identity_subspace_dim=6,
        anchors_k=4,
        anchors_m=1,
        context_len=2,
        text_dim=64,
        text_blocks=1,
        text_heads=4,
        text_ffn=128,
        n_blocks=1,
        heads=2,
        p_ids=4,
        k_images=2,
        epochs=3,
        seed=3,
    )
    base.update(overrides)
    return RunConfig(**base)


@pytest.fixture(scope="session")
def micro_corpus():
    cfg = micro_run_config()
    header, records = corpus.generate_synthetic(synth_config_from(cfg))
    return cfg, header, records


def oracle_evaluate(sim, query_ids, query_cams, gallery_ids, gallery_cams, topk=10):
    """Direct-from-definition AP/CMC: explicit loops, explicit tie rule
    (higher similarity first, ties by ascending gallery index), same-camera
    same-identity exclusion, query valid iff a cross-camera match remains."""
    aps, cmc_rows = [], []
    for qi in range(len(query_ids)):
        ranked = []
        for gi in range(len(gallery_ids)):
            if gallery_ids[gi] == query_ids[qi] and gallery_cams[gi] == query_cams[qi]:
                continue
            ranked.append((-sim[qi][gi], gi))
        ranked.sort()
        rel = [gallery_ids[gi] == query_ids[qi] for _, gi in ranked]
        if not any(rel):
            continue
        hits, precisions = 0, []
        for rank, is_rel in enumerate(rel, start=1):
            if is_rel:
                hits += 1
                precisions.append(hits / rank)
        aps.append(sum(precisions) / len(precisions))
        first = rel.index(True)
        cmc_rows.append([1.0 if first < r else 0.0 for r in range(1, topk + 1)])
    if not aps:
        return None
    return (
        float(np.mean(aps)),
        np.mean(np.asarray(cmc_rows), axis=0),
        len(aps),
    )


def oracle_batch_hard_triplet(embeddings, labels, margin):
    """Exhaustive enumeration over all positive/negative pairs."""
    b = len(labels)
    losses = []
    for i in range(b):
        d_ap = max(
            np.linalg.norm(embeddings[i] - embeddings[j])
            for j in range(b)
            if labels[j] == labels[i]
        )
        d_an = min(
            np.linalg.norm(embeddings[i] - embeddings[j])
            for j in range(b)
            if labels[j] != labels[i]
        )
        losses.append(max(0.0, margin + d_ap - d_an))
    return float(np.mean(losses))
