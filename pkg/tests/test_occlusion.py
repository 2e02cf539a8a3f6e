import numpy as np
import pytest

from saga import corpus, objective, occlusion
from conftest import micro_run_config
from saga.config import synth_config_from


def make_record(rng, n=128, d=16, pid=0, cam=0, split="query"):
    tokens = rng.standard_normal((n, d))
    return corpus.FeatureRecord(
        person_id=pid, camera_id=cam, split=split,
        cls=tokens.mean(axis=0), proj=np.zeros(4), tokens=tokens,
    )


def test_lower_half_covers_expected_rows():
    rng = np.random.default_rng(0)
    rec = make_record(rng)
    spec = occlusion.OcclusionSpec("lower_half", 0.5, seed=1, fill="zeros")
    out = occlusion.apply_occlusion(rec, spec, (16, 8))
    assert np.all(out.tokens[64:] == 0.0)  # bottom 8 of 16 rows -> 64 tokens
    assert np.array_equal(out.tokens[:64], rec.tokens[:64])
    np.testing.assert_allclose(out.cls, out.tokens.mean(axis=0), atol=1e-12)


def test_upper_half_symmetric():
    rng = np.random.default_rng(1)
    rec = make_record(rng)
    spec = occlusion.OcclusionSpec("upper_half", 0.25, seed=1, fill="zeros")
    out = occlusion.apply_occlusion(rec, spec, (16, 8))
    assert np.all(out.tokens[:32] == 0.0)  # ceil(0.25*16)=4 rows
    assert np.array_equal(out.tokens[32:], rec.tokens[32:])


def test_ceil_row_arithmetic():
    rng = np.random.default_rng(2)
    rec = make_record(rng)
    spec = occlusion.OcclusionSpec("lower_half", 0.55, seed=0, fill="zeros")
    out = occlusion.apply_occlusion(rec, spec, (16, 8))
    changed = np.flatnonzero(np.any(out.tokens != rec.tokens, axis=1))
    assert len(changed) == int(np.ceil(0.55 * 16)) * 8


def test_coverage_zero_is_exact_identity():
    rng = np.random.default_rng(3)
    rec = make_record(rng)
    spec = occlusion.OcclusionSpec("lower_half", 0.0, seed=9)
    out = occlusion.apply_occlusion(rec, spec, (16, 8))
    assert out is rec  # bit-exact, including the original CLS


def test_determinism_given_spec_and_key():
    rng = np.random.default_rng(4)
    rec = make_record(rng)
    spec = occlusion.OcclusionSpec("random_rect", 0.4, seed=5)
    a = occlusion.apply_occlusion(rec, spec, (16, 8), record_key=3)
    b = occlusion.apply_occlusion(rec, spec, (16, 8), record_key=3)
    assert np.array_equal(a.tokens, b.tokens)
    c = occlusion.apply_occlusion(rec, spec, (16, 8), record_key=4)
    assert not np.array_equal(a.tokens, c.tokens)


def test_random_rect_area_near_target():
    rng = np.random.default_rng(5)
    rec = make_record(rng)
    for coverage in (0.1, 0.3, 0.6, 0.8):
        for key in range(5):
            spec = occlusion.OcclusionSpec("random_rect", coverage, seed=6, fill="zeros")
            out = occlusion.apply_occlusion(rec, spec, (16, 8), record_key=key)
            changed = int(np.sum(np.any(out.tokens != rec.tokens, axis=1)))
            target = coverage * 128
            assert abs(changed - target) <= 0.5 * target + 8  # aspect clamp slack


def test_distractor_pastes_source_patches_in_place():
    rng = np.random.default_rng(6)
    rec = make_record(rng, pid=1)
    pool = [make_record(rng, pid=50, split="train"), make_record(rng, pid=51, split="train")]
    spec = occlusion.OcclusionSpec("distractor", 0.5, seed=7, distractor_pool=pool)
    out = occlusion.apply_occlusion(rec, spec, (16, 8))
    changed = np.flatnonzero(np.any(out.tokens != rec.tokens, axis=1))
    assert len(changed) > 0
    match = [np.array_equal(out.tokens[changed], src.tokens[changed]) for src in pool]
    assert sum(match) == 1  # exactly one pool record provided the patches


def test_distractor_requires_pool():
    rec = make_record(np.random.default_rng(7))
    spec = occlusion.OcclusionSpec("distractor", 0.5, seed=8)
    with pytest.raises(occlusion.OcclusionError):
        occlusion.apply_occlusion(rec, spec, (16, 8))


def test_grid_mismatch_rejected():
    rec = make_record(np.random.default_rng(8), n=64)
    spec = occlusion.OcclusionSpec("lower_half", 0.5, seed=0)
    with pytest.raises(occlusion.OcclusionError):
        occlusion.apply_occlusion(rec, spec, (16, 8))


def test_coverage_bounds_enforced():
    with pytest.raises(occlusion.OcclusionError):
        occlusion.OcclusionSpec("lower_half", 0.9)
    with pytest.raises(occlusion.OcclusionError):
        occlusion.OcclusionSpec("sideways", 0.5)


def test_learned_token_fill():
    rng = np.random.default_rng(9)
    rec = make_record(rng)
    token = rng.standard_normal(16)
    spec = occlusion.OcclusionSpec("lower_half", 0.5, seed=1, fill="learned_token", fill_token=token)
    out = occlusion.apply_occlusion(rec, spec, (16, 8))
    assert np.all(out.tokens[64:] == token)


@pytest.fixture(scope="module")
def micro_sweep_setup(tmp_path_factory):
    cfg = micro_run_config(epochs=2)
    header, records = corpus.generate_synthetic(synth_config_from(cfg))
    model, _ = objective.train_stage2(header, records, cfg)
    return cfg, header, records, model


def test_sweep_gallery_immutable_and_zero_coverage_matches_clean(micro_sweep_setup):
    cfg, header, records, model = micro_sweep_setup
    from saga import retrieval

    gallery_before = [r.tokens.copy() for r in records if r.split == "gallery"]
    grid = (header.grid_h, header.grid_w)
    result = occlusion.sweep(
        model, records, grid, kinds=["lower_half"], coverages=[0.0, 0.5],
        variants=["cls_only", "refined_only", "fused"], w_r=cfg.fusion_wr,
        w_i=cfg.fusion_wi, base_seed=0, n_seeds=1, fill_scale=cfg.corpus_noise_scale,
    )
    gallery_after = [r.tokens for r in records if r.split == "gallery"]
    for a, b in zip(gallery_before, gallery_after):
        assert np.array_equal(a, b)

    clean = retrieval.feature_variant_eval(model, records, "cls_only", cfg.fusion_wr, cfg.fusion_wi)
    cell = [c for c in result.cells if c.coverage == 0.0 and c.variant == "cls_only"]
    assert len(cell) == 1
    assert cell[0].mAP == clean.mAP
    assert cell[0].advantage_r1 == 0.0


def test_sweep_distractor_runs_multiple_seeds(micro_sweep_setup):
    cfg, header, records, model = micro_sweep_setup
    grid = (header.grid_h, header.grid_w)
    result = occlusion.sweep(
        model, records, grid, kinds=["distractor"], coverages=[0.4],
        variants=["cls_only", "refined_only"], w_r=2.0, w_i=0.2,
        base_seed=0, n_seeds=3, fill_scale=cfg.corpus_noise_scale,
    )
    seeds = {c.seed for c in result.cells}
    assert seeds == {0, 1, 2}
    mean_adv, sd = result.mean_advantage("distractor", 0.4, "refined_only")
    assert isinstance(mean_adv, float) and sd >= 0.0


def test_sweep_csv_deterministic_under_threads(micro_sweep_setup):
    cfg, header, records, model = micro_sweep_setup
    grid = (header.grid_h, header.grid_w)
    kwargs = dict(
        kinds=["lower_half", "distractor"], coverages=[0.0, 0.4],
        variants=["cls_only", "refined_only"], w_r=2.0, w_i=0.2,
        base_seed=1, n_seeds=2, fill_scale=cfg.corpus_noise_scale,
    )
    csv1 = occlusion.sweep(model, records, grid, threads=1, **kwargs).to_csv()
    csv2 = occlusion.sweep(model, records, grid, threads=3, **kwargs).to_csv()
    assert csv1 == csv2


def make_sweep_result(kind, coverages, advantages):
    cells = []
    for cov, adv in zip(coverages, advantages):
        cells.append(occlusion.SweepCell(kind, cov, 0, "cls_only", 0.5, 0.5, 0.0, 0.0))
        cells.append(
            occlusion.SweepCell(kind, cov, 0, "refined_only", 0.5, 0.5, adv, adv)
        )
    return occlusion.SweepResult(cells=cells)


def test_crossover_first_sign_change():
    res = make_sweep_result("lower_half", [0.0, 0.3, 0.6], [-1.0, 2.0, 5.0])
    assert occlusion.crossover_coverage(res, "lower_half") == 0.3


def test_crossover_identical_sweeps_match():
    m = make_sweep_result("lower_half", [0.0, 0.3, 0.6], [-1.0, 2.0, 5.0])
    d = make_sweep_result("distractor", [0.0, 0.3, 0.6], [-1.0, 2.0, 5.0])
    report = occlusion.crossover_report(m, "lower_half", d)
    assert report["masking_crossover"] == report["distractor_crossover"] == 0.3
    assert report["distractor_at_or_above_masking"] is True


def test_crossover_never_positive():
    res = make_sweep_result("lower_half", [0.0, 0.4], [-1.0, -2.0])
    assert occlusion.crossover_coverage(res, "lower_half") is None
