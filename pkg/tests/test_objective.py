import numpy as np
import pytest

from saga import corpus, gradcheck, objective
from saga import tensor as T
from conftest import micro_run_config, oracle_batch_hard_triplet


def test_id_loss_uniform_logits_is_log_c():
    logits = T.Tensor(np.zeros((3, 4)))
    for eps in (0.0, 0.1, 0.5):
        assert objective.id_loss(logits, [0, 1, 3], eps).item() == pytest.approx(
            np.log(4), abs=1e-9
        )


def test_id_loss_confident_correct_goes_to_zero():
    logits = np.zeros((2, 3))
    logits[0, 1] = 200.0
    logits[1, 2] = 200.0
    loss = objective.id_loss(T.Tensor(logits), [1, 2], 0.0)
    assert loss.item() == pytest.approx(0.0, abs=1e-9)


def test_id_loss_label_out_of_range():
    with pytest.raises(objective.LabelError):
        objective.id_loss(T.Tensor(np.zeros((2, 3))), [0, 3], 0.1)


def test_id_loss_gradcheck():
    rng = np.random.default_rng(0)
    logits = T.Tensor(rng.standard_normal((3, 5)), requires_grad=True)
    errs = gradcheck.check(
        lambda: objective.id_loss(logits, [2, 0, 4], 0.1), {"logits": logits}
    )
    assert errs["logits"] < 1e-5


def test_triplet_identical_embeddings_equals_margin():
    emb = T.Tensor(np.ones((4, 3)))
    loss = objective.triplet_loss_batch_hard(emb, [0, 0, 1, 1], 0.3)
    assert loss.item() == pytest.approx(0.3, abs=1e-6)


def test_triplet_separated_clusters_is_zero():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((3, 4)) * 0.01
    b = rng.standard_normal((3, 4)) * 0.01 + 100.0
    emb = T.Tensor(np.vstack([a, b]))
    loss = objective.triplet_loss_batch_hard(emb, [0, 0, 0, 1, 1, 1], 0.3)
    assert loss.item() == 0.0


def test_triplet_hand_batch_matches_oracle():
    emb = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 2.0], [1.5, 1.5]])
    labels = [0, 0, 1, 1]
    got = objective.triplet_loss_batch_hard(T.Tensor(emb), labels, 0.3).item()
    assert got == pytest.approx(oracle_batch_hard_triplet(emb, labels, 0.3), abs=1e-9)


def test_triplet_random_batches_match_oracle():
    rng = np.random.default_rng(2)
    for _ in range(200):
        b = int(rng.integers(4, 9))
        n_ids = int(rng.integers(2, b // 2 + 1))
        labels = rng.integers(0, n_ids, size=b)
        while len(np.unique(labels)) < 2 or np.bincount(labels).max() < 2:
            labels = rng.integers(0, n_ids, size=b)
        emb = rng.standard_normal((b, 5))
        margin = float(rng.uniform(0.0, 1.0))
        got = objective.triplet_loss_batch_hard(T.Tensor(emb), labels, margin).item()
        want = oracle_batch_hard_triplet(emb, labels, margin)
        assert got == pytest.approx(want, abs=1e-9)


def test_triplet_precondition_errors():
    with pytest.raises(objective.SamplingError):
        objective.triplet_loss_batch_hard(T.Tensor(np.ones((3, 2))), [0, 0, 0], 0.3)
    with pytest.raises(objective.SamplingError):
        objective.triplet_loss_batch_hard(T.Tensor(np.ones((3, 2))), [0, 1, 2], 0.3)


def test_triplet_gradcheck():
    rng = np.random.default_rng(3)
    emb = T.Tensor(rng.standard_normal((6, 4)), requires_grad=True)
    errs = gradcheck.check(
        lambda: objective.triplet_loss_batch_hard(emb, [0, 0, 1, 1, 2, 2], 0.3),
        {"emb": emb},
    )
    assert errs["emb"] < 1e-5


def test_i2t_matching_rows_low_temperature_goes_to_zero():
    bank = corpus.make_text_bank([0, 1, 2], proj_dim=8, seed=4)
    proj = T.Tensor(bank.vectors[[0, 2]])
    loss = objective.i2t_loss(proj, bank, [0, 2], temperature=1e-3, smoothing=0.0)
    assert loss.item() == pytest.approx(0.0, abs=1e-6)


def test_i2t_orthogonal_projection_gives_log_c():
    # An orthonormal bank and projections orthogonal to every bank row
    # produce uniform logits.
    vecs = np.eye(8)[:3]
    bank = corpus.IdentityTextBank(vectors=vecs, person_ids=[0, 1, 2])
    proj = np.zeros((2, 8))
    proj[:, 5] = 1.0
    loss = objective.i2t_loss(T.Tensor(proj), bank, [0, 1], temperature=0.07, smoothing=0.0)
    assert loss.item() == pytest.approx(np.log(3), abs=1e-9)


def test_i2t_missing_identity():
    bank = corpus.make_text_bank([0, 1], proj_dim=4, seed=5)
    with pytest.raises(objective.LabelError):
        objective.i2t_loss(T.Tensor(np.ones((1, 4))), bank, [7], 0.07, 0.0)


def test_i2t_gradcheck_wrt_proj():
    rng = np.random.default_rng(6)
    bank = corpus.make_text_bank([0, 1, 2], proj_dim=6, seed=6)
    proj = T.Tensor(rng.standard_normal((2, 6)), requires_grad=True)
    errs = gradcheck.check(
        lambda: objective.i2t_loss(proj, bank, [0, 2], 0.07, 0.1), {"proj": proj}
    )
    assert errs["proj"] < 1e-5


def build_micro_model(micro_corpus, **cfg_overrides):
    cfg, header, records = micro_corpus
    if cfg_overrides:
        d = cfg.to_dict()
        d.update(cfg_overrides)
        from saga.config import RunConfig

        cfg = RunConfig.from_dict(d)
    train_ids = sorted({r.person_id for r in records if r.split == "train"})
    model = objective.Model(cfg, dim=header.dim, proj_dim=header.proj_dim,
                            num_classes=len(train_ids))
    bank = corpus.make_text_bank(train_ids, header.proj_dim, seed=cfg.corpus_seed)
    return cfg, header, records, model, bank, train_ids


def batch_from(records, train_ids, count=8):
    # two images each from count//2 identities, so batch-hard mining is valid
    train = [r for r in records if r.split == "train"]
    rows = {pid: i for i, pid in enumerate(train_ids)}
    by_id = {}
    for r in train:
        by_id.setdefault(r.person_id, []).append(r)
    chosen = []
    for pid in train_ids[: max(2, count // 2)]:
        chosen.extend(by_id[pid][:2])
    chosen = chosen[:count]
    tokens = T.Tensor(np.stack([r.tokens for r in chosen]))
    proj = T.Tensor(np.stack([r.proj for r in chosen]))
    labels = np.array([r.person_id for r in chosen])
    class_rows = np.array([rows[int(p)] for p in labels])
    return tokens, proj, labels, class_rows


def test_total_loss_reduces_to_id_when_lambdas_zero(micro_corpus):
    cfg, header, records, model, bank, train_ids = build_micro_model(
        micro_corpus, lambda_tri=0.0, lambda_i2t=0.0, lambda_div=0.0
    )
    tokens, proj, labels, class_rows = batch_from(records, train_ids)
    total, breakdown = objective.total_loss(model, bank, tokens, proj, labels, class_rows, cfg)
    assert total.item() == pytest.approx(breakdown["id"], abs=1e-12)


def test_total_loss_breakdown_identity(micro_corpus):
    cfg, header, records, model, bank, train_ids = build_micro_model(
        micro_corpus, lambda_tri=0.7, lambda_i2t=0.3, lambda_div=1.3
    )
    tokens, proj, labels, class_rows = batch_from(records, train_ids)
    total, bd = objective.total_loss(model, bank, tokens, proj, labels, class_rows, cfg)
    recomposed = bd["id"] + cfg.lambda_tri * bd["tri"] + cfg.lambda_i2t * bd["i2t"] + bd["div"]
    assert total.item() == pytest.approx(recomposed, abs=1e-12)


def test_full_objective_gradcheck(micro_corpus):
    cfg, header, records, model, bank, train_ids = build_micro_model(micro_corpus)
    tokens, proj, labels, class_rows = batch_from(records, train_ids, count=4)

    def loss():
        return objective.total_loss(model, bank, tokens, proj, labels, class_rows, cfg)[0]

    errs = gradcheck.check(loss, model.parameters(), limit=8, h=1e-5)
    worst = max(errs.values())
    assert worst < 1e-4, sorted(errs.items(), key=lambda kv: -kv[1])[:5]


def test_zero_learning_rate_freezes_parameters(micro_corpus):
    cfg, header, records, model, bank, train_ids = build_micro_model(micro_corpus)
    before = {k: v.data.copy() for k, v in model.parameters().items()}
    opt = objective.Adam(model.parameters(), lr=0.0)
    tokens, proj, labels, class_rows = batch_from(records, train_ids)
    for _ in range(3):
        total, _ = objective.total_loss(model, bank, tokens, proj, labels, class_rows, cfg)
        opt.zero_grad()
        T.backward(total)
        opt.step()
    for k, v in model.parameters().items():
        assert np.array_equal(before[k], v.data), k


def test_train_determinism_identical_checkpoints(tmp_path, micro_corpus):
    cfg, header, records = micro_corpus
    paths = []
    for name in ("a.ckpt", "b.ckpt"):
        p = tmp_path / name
        objective.train_stage2(header, records, cfg, out_checkpoint=p)
        paths.append(p)
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_training_preserves_frozen_state(micro_corpus):
    cfg, header, records = micro_corpus
    tokens_before = np.stack([r.tokens for r in records])
    model, _ = objective.train_stage2(header, records, cfg)
    assert np.array_equal(tokens_before, np.stack([r.tokens for r in records]))
    # frozen encoder fingerprint is part of the Model API
    model2 = objective.Model(cfg, header.dim, header.proj_dim, model.num_classes)
    assert model.encoder.fingerprint() == model2.encoder.fingerprint()


def test_training_smoke_loss_decreases(micro_corpus):
    cfg, header, records = micro_corpus
    d = cfg.to_dict()
    d.update(epochs=30, lr=2e-3)
    from saga.config import RunConfig

    model, log = objective.train_stage2(header, records, RunConfig.from_dict(d))
    totals = [row[1] for row in log.rows]
    first, last = np.mean(totals[:5]), np.mean(totals[-5:])
    assert last < first


def test_checkpoint_roundtrip_bytes_and_forward(tmp_path, micro_corpus):
    cfg, header, records = micro_corpus
    p1 = tmp_path / "m.ckpt"
    model, _ = objective.train_stage2(header, records, cfg, out_checkpoint=p1)

    loaded, manifest = objective.load_checkpoint(p1)
    p2 = tmp_path / "m2.ckpt"
    objective.save_checkpoint(p2, loaded, manifest["step"])
    assert p1.read_bytes() == p2.read_bytes()

    tokens = T.Tensor(np.stack([r.tokens for r in records[:4]]))
    with T.no_grad():
        out1 = model.forward(tokens, training=False).f.data
        out2 = loaded.forward(tokens, training=False).f.data
    assert np.array_equal(out1, out2)


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(objective.CheckpointError):
        objective.load_checkpoint(p)


def test_pk_sampler_requires_train_split(micro_corpus):
    cfg, header, records = micro_corpus
    no_train = [r for r in records if r.split != "train"]
    with pytest.raises(objective.SamplingError):
        objective.train_stage2(header, no_train, cfg)


def test_pk_sampler_resamples_with_warning(micro_corpus):
    cfg, header, records = micro_corpus
    # keep only one image for identity 0 in the train split
    pruned, seen0 = [], 0
    for r in records:
        if r.split == "train" and r.person_id == 0:
            seen0 += 1
            if seen0 > 1:
                continue
        pruned.append(r)
    d = cfg.to_dict()
    d.update(epochs=1, p_ids=4)
    from saga.config import RunConfig

    _, log = objective.train_stage2(header, pruned, RunConfig.from_dict(d))
    assert any("replacement" in w for w in log.warnings)


def test_cosine_schedule_endpoints():
    assert objective.cosine_lr_scale(0, 100) == pytest.approx(1.0)
    assert objective.cosine_lr_scale(99, 100) == pytest.approx(0.0, abs=1e-12)
