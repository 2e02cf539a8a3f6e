"""Run configuration: every tunable in one flat declarative file.

The file grammar is deliberately small and parsed by hand (no format
library): one ``key = value`` pair per line, ``#`` comments, blank
lines ignored. Values are ints, floats, booleans (``true``/``false``),
bare or double-quoted strings, or bracketed numeric lists
``[1.0, 0.5]``. Unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, asdict


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # synthetic corpus
    corpus_num_ids: int = 64
    corpus_cams_per_id: int = 2
    corpus_images_per_id_cam: int = 8
    corpus_seed: int = 7
    corpus_n_patches: int = 128
    corpus_dim: int = 64
    corpus_proj_dim: int = 32
    corpus_grid_h: int = 16
    corpus_grid_w: int = 8
    corpus_identity_signal_scale: float = 1.0
    corpus_camera_shift_scale: float = 0.6
    corpus_noise_scale: float = 1.0
    corpus_pose_scale: float = 0.0
    corpus_identity_subspace_dim: int = 12
    corpus_train_id_fraction: float = 0.5
    corpus_region_profile: list = field(default_factory=list)  # empty -> built-in profile

    # anchors
    anchors_k: int = 24
    anchors_m: int = 3
    context_len: int = 4
    anchor_mode: str = "structured"  # structured | free
    lambda_div: float = 1.0

    # frozen text encoder (toy mode)
    text_dim: int = 512
    text_blocks: int = 2
    text_heads: int = 4
    text_ffn: int = 1024
    encoder_seed: int = 0

    # refinement module
    n_blocks: int = 2
    heads: int = 8
    refine_init: str = "zero_out"  # zero_out | random
    ffn_mult: int = 4

    # objective
    lambda_tri: float = 1.0
    lambda_i2t: float = 1.0
    margin: float = 0.3
    label_smoothing: float = 0.1
    temperature: float = 0.07
    i2t_aux_head: bool = False  # experimental: route an auxiliary projection
    #   of the reconstructed feature into the alignment term

    # training
    p_ids: int = 8
    k_images: int = 4
    lr: float = 3.5e-4
    epochs: int = 30
    seed: int = 0
    checkpoint_every: int = 0  # epochs; 0 = final only
    cosine_decay: bool = True

    # fusion / evaluation
    fusion_wr: float = 2.0
    fusion_wi: float = 0.2
    cmc_topk: int = 10

    # occlusion harness
    occl_fill: str = "noise"  # zeros | noise | learned_token
    occl_seeds: int = 3

    def __post_init__(self):
        for name in ("lambda_tri", "lambda_i2t", "lambda_div", "margin", "temperature"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if not 0 <= self.label_smoothing < 1:
            raise ConfigError("label_smoothing must lie in [0, 1)")
        if self.anchor_mode not in ("structured", "free"):
            raise ConfigError(f"anchor_mode must be structured|free, got {self.anchor_mode!r}")
        if self.occl_fill not in ("zeros", "noise", "learned_token"):
            raise ConfigError(f"unknown occl_fill {self.occl_fill!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**values)


def _parse_value(raw: str, lineno: int):
    raw = raw.strip()
    if raw.startswith("[") and raw.endswith("]"):
        inner = raw[1:-1].strip()
        if not inner:
            return []
        return [_parse_scalar(tok.strip(), lineno) for tok in inner.split(",")]
    return _parse_scalar(raw, lineno)


def _parse_scalar(raw: str, lineno: int):
    if raw.startswith('"') and raw.endswith('"') and len(raw) >= 2:
        return raw[1:-1]
    if raw in ("true", "false"):
        return raw == "true"
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        pass
    if raw and all(c.isalnum() or c in "_-." for c in raw):
        return raw  # bare string
    raise ConfigError(f"line {lineno}: cannot parse value {raw!r}")


def parse_config_text(text: str) -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(raw, lineno)
    return RunConfig.from_dict(values)


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return parse_config_text(fh.read())


def format_config(cfg: RunConfig) -> str:
    """Render a config back to the flat file grammar (round-trippable)."""
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            rendered = "true" if v else "false"
        elif isinstance(v, list):
            rendered = "[" + ", ".join(repr(x) for x in v) + "]"
        elif isinstance(v, str):
            rendered = f'"{v}"'
        else:
            rendered = repr(v)
        lines.append(f"{f.name} = {rendered}")
    return "\n".join(lines) + "\n"


def synth_config_from(cfg: RunConfig):
    from .corpus import SynthConfig

    return SynthConfig(
        num_ids=cfg.corpus_num_ids,
        cams_per_id=cfg.corpus_cams_per_id,
        images_per_id_cam=cfg.corpus_images_per_id_cam,
        seed=cfg.corpus_seed,
        n_patches=cfg.corpus_n_patches,
        dim=cfg.corpus_dim,
        proj_dim=cfg.corpus_proj_dim,
        grid_h=cfg.corpus_grid_h,
        grid_w=cfg.corpus_grid_w,
        identity_signal_scale=cfg.corpus_identity_signal_scale,
        camera_shift_scale=cfg.corpus_camera_shift_scale,
        noise_scale=cfg.corpus_noise_scale,
        pose_scale=cfg.corpus_pose_scale,
        identity_subspace_dim=cfg.corpus_identity_subspace_dim,
        train_id_fraction=cfg.corpus_train_id_fraction,
        region_profile=list(cfg.corpus_region_profile),
    )
