"""Command-line entry point for the experiment pipeline.

Subcommands cover corpus generation and validation, training,
evaluation, the occlusion and fusion-weight sweeps, the gradient-check
suite, attention export, and the attention FLOP counter. Outputs are
CSV/JSON with the effective config and tool version embedded, so a
fixed command, config, and seed reproduces every artifact byte for
byte.

Exit codes: 0 success, 1 domain error (bad data, bad math, bad file),
2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import __version__, blob, config, corpus, gradcheck, objective, occlusion
from . import refine as refine_mod
from . import retrieval
from . import tensor as T

DOMAIN_ERRORS = (
    config.ConfigError,
    corpus.CorpusFormatError,
    corpus.CorpusValueError,
    retrieval.ProtocolError,
    occlusion.OcclusionError,
    objective.SamplingError,
    objective.LabelError,
    objective.CheckpointError,
    blob.BlobFormatError,
    T.ShapeError,
    T.GraphError,
    T.DegenerateNormError,
    refine_mod.DegeneratePoolingError,
    refine_mod.UninitializedStatisticsError,
    FileNotFoundError,
)


def _config_lines(cfg: config.RunConfig, extra: dict | None = None):
    lines = [f"saga_version={__version__}"]
    for key, value in sorted(cfg.to_dict().items()):
        lines.append(f"config.{key}={value}")
    for key, value in sorted((extra or {}).items()):
        lines.append(f"{key}={value}")
    return lines


def _load_cfg(args) -> config.RunConfig:
    cfg = config.load_config(args.config) if args.config else config.RunConfig()
    if getattr(args, "seed", None) is not None:
        d = cfg.to_dict()
        d["seed"] = args.seed
        cfg = config.RunConfig.from_dict(d)
    return cfg


def _write_or_print(text: str, out):
    if out:
        with open(out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _load_model(path):
    model, manifest = objective.load_checkpoint(path)
    return model, config.RunConfig.from_dict(manifest["config"])


def cmd_gen_synth(args) -> int:
    cfg = _load_cfg(args)
    header, records = corpus.generate_synthetic(config.synth_config_from(cfg))
    corpus.write_corpus(args.out, header, records)
    corpus.write_sidecar(
        args.out,
        {
            "saga_version": __version__,
            "generator": config.synth_config_from(cfg).to_json(),
            "config": cfg.to_dict(),
        },
    )
    report = corpus.validate_corpus(header, records)
    print(f"wrote {header.record_count} records to {args.out}")
    print(report.format())
    return 0


def cmd_validate(args) -> int:
    header, records = corpus.read_corpus(args.corpus)
    report = corpus.validate_corpus(header, records)
    print(report.format())
    return 0 if report.ok else 1


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    header, records = corpus.read_corpus(args.corpus)
    report = corpus.validate_corpus(header, records)
    if not report.ok:
        print(report.format(), file=sys.stderr)
        return 1
    model, log = objective.train_stage2(header, records, cfg, out_checkpoint=args.out)
    for w in log.warnings:
        print(f"warning: {w}", file=sys.stderr)
    log_lines = [f"# {line}" for line in _config_lines(cfg)]
    log_path = args.log or f"{args.out}.log.csv"
    with open(log_path, "w") as fh:
        fh.write("\n".join(log_lines) + "\n" + log.to_csv())
    print(f"trained {len(log.rows)} steps; checkpoint {args.out}; log {log_path}")
    return 0


def cmd_eval(args) -> int:
    model, cfg = _load_model(args.checkpoint)
    header, records = corpus.read_corpus(args.corpus)
    w_r = cfg.fusion_wr if args.wr is None else args.wr
    w_i = cfg.fusion_wi if args.wi is None else args.wi
    if args.variant in ("fused", "concatenated_unweighted") and w_r == 0 and w_i == 0:
        print("error: both fusion weights zero", file=sys.stderr)
        return 1
    result = retrieval.feature_variant_eval(
        model, records, args.variant, w_r, w_i, topk=cfg.cmc_topk, threads=args.threads
    )
    extra = {
        "saga_version": __version__,
        "config": cfg.to_dict(),
        "variant": args.variant,
        "w_r": w_r,
        "w_i": w_i,
    }
    _write_or_print(result.to_json(extra), args.out)
    return 0


def cmd_sweep_occlusion(args) -> int:
    model, cfg = _load_model(args.checkpoint)
    header, records = corpus.read_corpus(args.corpus)
    kinds = args.kinds.split(",")
    coverages = [float(c) for c in args.coverages.split(",")]
    variants = args.variants.split(",")
    fill_token = None
    if cfg.occl_fill == "learned_token":
        train = [r for r in records if r.split == "train"]
        if not train:
            print("error: learned_token fill needs a train split", file=sys.stderr)
            return 1
        fill_token = np.mean([r.tokens.mean(axis=0) for r in train], axis=0)
    result = occlusion.sweep(
        model, records, (header.grid_h, header.grid_w), kinds, coverages, variants,
        w_r=cfg.fusion_wr, w_i=cfg.fusion_wi,
        base_seed=args.seed if args.seed is not None else cfg.seed,
        n_seeds=args.seeds, fill=cfg.occl_fill,
        fill_scale=cfg.corpus_noise_scale, fill_token=fill_token,
        topk=cfg.cmc_topk, threads=args.threads,
    )
    _write_or_print(result.to_csv(_config_lines(cfg, {"kinds": args.kinds})), args.out)
    return 0


def cmd_sweep_fusion(args) -> int:
    model, cfg = _load_model(args.checkpoint)
    header, records = corpus.read_corpus(args.corpus)
    ratios = [float(r) for r in args.ratios.split(",")]
    queries = [r for r in records if r.split == "query"]
    gallery = [r for r in records if r.split == "gallery"]
    q_emb = retrieval.extract_embeddings(model, queries, 1.0, 1.0, threads=args.threads)
    g_emb = retrieval.extract_embeddings(model, gallery, 1.0, 1.0, threads=args.threads)
    rows, argmax_ratio = retrieval.fusion_weight_sweep(
        q_emb, g_emb, ratios, topk=cfg.cmc_topk, threads=args.threads
    )
    lines = _config_lines(cfg, {"argmax_ratio": argmax_ratio})
    _write_or_print(retrieval.sweep_csv(rows, cfg.cmc_topk, lines), args.out)
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_suite(args.module)
    worst = 0.0
    for name, err in results:
        status = "ok" if err < gradcheck.TOLERANCE else "FAIL"
        print(f"{status:4s} {err:10.3e}  {name}")
        worst = max(worst, err)
    print(f"{len(results)} checks, worst {worst:.3e}, tolerance {gradcheck.TOLERANCE:g}")
    return 0 if worst < gradcheck.TOLERANCE else 1


def cmd_flops(args) -> int:
    print(refine_mod.count_attention_flops(args.n, args.anchors, args.dim))
    return 0


def cmd_export_attention(args) -> int:
    model, cfg = _load_model(args.checkpoint)
    header, records = corpus.read_corpus(args.corpus)
    if not 0 <= args.image_index < len(records):
        print(f"error: image index {args.image_index} outside corpus", file=sys.stderr)
        return 1
    rec = records[args.image_index]
    with T.no_grad():
        result = model.forward(T.Tensor(rec.tokens[None]), training=False)
    rows = refine_mod.attention_map_rows(
        result.refined.pooled_weights.data[0],
        result.refined.argmax_anchor[0],
        header.grid_h,
        header.grid_w,
    )
    lines = [f"# {line}" for line in _config_lines(cfg, {"image_index": args.image_index})]
    lines.append("grid_row,grid_col,pooled_weight,argmax_anchor")
    for r in rows:
        lines.append(f"{r[0]},{r[1]},{r[2]:.10g},{r[3]}")
    _write_or_print("\n".join(lines) + "\n", args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="saga",
        description="Anchor-guided aggregation experiments over patch-token corpora",
    )
    parser.add_argument("--version", action="version", version=f"saga {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False, needs_corpus=False, cfg=False, out_opt=True):
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--threads", type=int, default=1)
        if needs_corpus:
            p.add_argument("--corpus", required=True)
        if checkpoint:
            p.add_argument("--checkpoint", required=True)
        if cfg:
            p.add_argument("--config", default=None, help="flat key=value config file")
        if out_opt:
            p.add_argument("--out", default=None, help="output file (default stdout)")

    p = sub.add_parser("gen-synth", help="generate the synthetic feature corpus")
    common(p, cfg=True, out_opt=False)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("validate", help="validate a corpus file")
    common(p, needs_corpus=True, out_opt=False)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("train", help="train the aggregation model on a corpus")
    common(p, needs_corpus=True, cfg=True, out_opt=False)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", default=None, help="training log CSV (default <out>.log.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a feature variant")
    common(p, checkpoint=True, needs_corpus=True)
    p.add_argument("--variant", default="fused",
                   choices=["cls_only", "refined_only", "concatenated_unweighted", "fused"])
    p.add_argument("--wr", type=float, default=None)
    p.add_argument("--wi", type=float, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-occlusion", help="occlusion coverage sweep over queries")
    common(p, checkpoint=True, needs_corpus=True)
    p.add_argument("--kinds", default="lower_half,upper_half,random_rect")
    p.add_argument("--coverages", default="0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8")
    p.add_argument("--variants", default="cls_only,refined_only,fused")
    p.add_argument("--seeds", type=int, default=3, help="distractor seeds")
    p.set_defaults(func=cmd_sweep_occlusion)

    p = sub.add_parser("sweep-fusion", help="fusion weight-ratio sweep")
    common(p, checkpoint=True, needs_corpus=True)
    p.add_argument("--ratios", default="0,0.25,0.5,1,2,5,10,20,inf")
    p.set_defaults(func=cmd_sweep_fusion)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    common(p, out_opt=False)
    p.add_argument("--module", default=None,
                   choices=["tensor", "anchors", "refine", "objective"])
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("flops", help="attention FLOP count per image")
    common(p, out_opt=False)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--anchors", type=int, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("export-attention", help="per-patch pooled weights as CSV")
    common(p, checkpoint=True, needs_corpus=True)
    p.add_argument("--image-index", type=int, required=True)
    p.set_defaults(func=cmd_export_attention)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DOMAIN_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
