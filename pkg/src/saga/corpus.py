"""Feature-corpus I/O, synthetic generation, and validation.

The SFC binary format is the frozen-backbone interface: a fixed header
followed by per-image records (patch tokens, CLS vector, projected
embedding, identity/camera labels). On disk everything numeric is
little-endian float32; in memory arrays are float64. Generated corpora
are rounded through float32 at build time so the write/read round trip
is bit-exact.

Format layout (all integers little-endian):

    header:  magic "SFC1" | record_count u32 | n_patches u32 | dim u32
             | proj_dim u32 | grid_h u32 | grid_w u32
    record:  person_id u64 | camera_id u32 | split u32
             | cls f32[dim] | proj f32[proj_dim] | tokens f32[n_patches*dim]

Records are concatenated directly after the header. A JSON sidecar
(same basename, ".meta.json") carries the generator config or exporter
provenance; its absence is allowed.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

MAGIC = b"SFC1"
SPLITS = ("train", "query", "gallery")
_HEADER_STRUCT = struct.Struct("<4sIIIIII")


class CorpusFormatError(ValueError):
    """Malformed SFC file; message names the failing byte offset."""


class CorpusValueError(ValueError):
    """Semantically invalid corpus or generator configuration."""


@dataclass
class CorpusHeader:
    record_count: int
    n_patches: int
    dim: int
    proj_dim: int
    grid_h: int
    grid_w: int

    def __post_init__(self):
        if self.grid_h * self.grid_w != self.n_patches:
            raise CorpusValueError(
                f"grid {self.grid_h}x{self.grid_w} != n_patches {self.n_patches}"
            )
        if self.dim <= 0 or self.proj_dim <= 0:
            raise CorpusValueError("dim and proj_dim must be positive")

    def record_nbytes(self) -> int:
        return 16 + 4 * (self.dim + self.proj_dim + self.n_patches * self.dim)


@dataclass
class FeatureRecord:
    person_id: int
    camera_id: int
    split: str  # train | query | gallery
    cls: np.ndarray  # (dim,)
    proj: np.ndarray  # (proj_dim,)
    tokens: np.ndarray  # (n_patches, dim)


@dataclass
class IdentityTextBank:
    """Frozen per-identity unit vectors in the projected space.

    Stands in for learned identity prompts: rows are seeded random unit
    vectors, one per training identity, sorted by person_id.
    """

    vectors: np.ndarray  # (num_ids, proj_dim), unit rows
    person_ids: list
    frozen: bool = True

    def row_for(self, person_id: int) -> int:
        try:
            return self._index[person_id]
        except AttributeError:
            self._index = {p: i for i, p in enumerate(self.person_ids)}
            return self._index[person_id]


def make_text_bank(person_ids, proj_dim: int, seed: int) -> IdentityTextBank:
    ids = sorted(set(int(p) for p in person_ids))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7E57BA4E]))
    rows = rng.standard_normal((len(ids), proj_dim))
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    return IdentityTextBank(vectors=rows, person_ids=ids)


# -- binary I/O ----------------------------------------------------------


def write_corpus(path, header: CorpusHeader, records) -> None:
    records = list(records)
    if header.record_count != len(records):
        raise CorpusFormatError(
            f"header says {header.record_count} records, got {len(records)}"
        )
    with open(path, "wb") as fh:
        fh.write(
            _HEADER_STRUCT.pack(
                MAGIC,
                header.record_count,
                header.n_patches,
                header.dim,
                header.proj_dim,
                header.grid_h,
                header.grid_w,
            )
        )
        for i, rec in enumerate(records):
            if rec.tokens.shape != (header.n_patches, header.dim):
                raise CorpusFormatError(
                    f"record {i}: tokens shape {rec.tokens.shape} does not match header"
                )
            fh.write(struct.pack("<QII", rec.person_id, rec.camera_id, SPLITS.index(rec.split)))
            fh.write(np.asarray(rec.cls, dtype="<f4").tobytes())
            fh.write(np.asarray(rec.proj, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(rec.tokens, dtype="<f4").tobytes())


def read_corpus(path):
    """Parse an SFC file into (CorpusHeader, [FeatureRecord])."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER_STRUCT.size:
        raise CorpusFormatError(f"truncated header: file ends at byte {len(raw)}")
    magic, count, n_patches, dim, proj_dim, grid_h, grid_w = _HEADER_STRUCT.unpack_from(raw, 0)
    if magic != MAGIC:
        raise CorpusFormatError(f"bad magic {magic!r} at byte 0")
    try:
        header = CorpusHeader(count, n_patches, dim, proj_dim, grid_h, grid_w)
    except CorpusValueError as exc:
        raise CorpusFormatError(f"inconsistent header at byte 4: {exc}") from None

    expected = _HEADER_STRUCT.size + count * header.record_nbytes()
    if len(raw) != expected:
        raise CorpusFormatError(
            f"file length {len(raw)} != expected {expected} "
            f"(mismatch detected at byte {min(len(raw), expected)})"
        )

    records = []
    off = _HEADER_STRUCT.size
    for _ in range(count):
        person_id, camera_id, split_code = struct.unpack_from("<QII", raw, off)
        if split_code >= len(SPLITS):
            raise CorpusFormatError(f"unknown split code {split_code} at byte {off + 12}")
        off += 16
        cls = np.frombuffer(raw, dtype="<f4", count=dim, offset=off).astype(np.float64)
        off += 4 * dim
        proj = np.frombuffer(raw, dtype="<f4", count=proj_dim, offset=off).astype(np.float64)
        off += 4 * proj_dim
        tokens = (
            np.frombuffer(raw, dtype="<f4", count=n_patches * dim, offset=off)
            .astype(np.float64)
            .reshape(n_patches, dim)
        )
        off += 4 * n_patches * dim
        records.append(FeatureRecord(person_id, camera_id, SPLITS[split_code], cls, proj, tokens))
    return header, records


def sidecar_path(corpus_path) -> Path:
    return Path(corpus_path).with_suffix(".meta.json")


def write_sidecar(corpus_path, payload: dict) -> None:
    sidecar_path(corpus_path).write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n"
    )


def read_sidecar(corpus_path):
    p = sidecar_path(corpus_path)
    return json.loads(p.read_text()) if p.exists() else None


# -- synthetic generation -------------------------------------------------


def default_region_profile(grid_h: int):
    """Identity-signal weight per grid row: strongest at the top, tapering
    toward the bottom. Upper rows carry the most discriminative signal,
    but lower rows still hold real evidence, so masking them removes
    information rather than just noise."""
    prof = []
    for r in range(grid_h):
        frac = r / max(grid_h - 1, 1)
        prof.append(round(1.0 - 0.75 * frac, 6))
    return prof


@dataclass
class SynthConfig:
    num_ids: int = 64
    cams_per_id: int = 2
    images_per_id_cam: int = 8
    seed: int = 7
    n_patches: int = 128
    dim: int = 64
    proj_dim: int = 32
    grid_h: int = 16
    grid_w: int = 8
    identity_signal_scale: float = 1.0
    camera_shift_scale: float = 0.6
    noise_scale: float = 1.0
    pose_scale: float = 0.0  # per-image identity jitter inside the subspace
    identity_subspace_dim: int = 12
    train_id_fraction: float = 0.5
    region_profile: list = field(default_factory=list)  # empty -> default profile

    def __post_init__(self):
        if self.num_ids < 2:
            raise CorpusValueError("num_ids must be >= 2")
        for name in ("identity_signal_scale", "camera_shift_scale", "noise_scale", "pose_scale"):
            if getattr(self, name) < 0:
                raise CorpusValueError(f"{name} must be >= 0")
        if not self.region_profile:
            self.region_profile = default_region_profile(self.grid_h)
        if len(self.region_profile) != self.grid_h:
            raise CorpusValueError(
                f"region_profile length {len(self.region_profile)} != grid_h {self.grid_h}"
            )

    def to_json(self) -> dict:
        return asdict(self)


def _f32_round(arr):
    return arr.astype(np.float32).astype(np.float64)


def generate_synthetic(config: SynthConfig):
    """Deterministic synthetic corpus.

    Tokens are a row-weighted identity direction (drawn from a shared
    low-dimensional subspace, so unseen identities still live on the
    manifold the anchors learn), plus a per-camera shift, plus i.i.d.
    noise. CLS is the token mean plus noise; proj is a fixed random
    projection of CLS. Identical configs produce byte-identical corpora.
    """
    cfg = config
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5FC0D47A]))
    H, W, N, D = cfg.grid_h, cfg.grid_w, cfg.n_patches, cfg.dim

    # Shared identity subspace: orthonormal columns.
    basis, _ = np.linalg.qr(rng.standard_normal((D, cfg.identity_subspace_dim)))
    id_coords = rng.standard_normal((cfg.num_ids, cfg.identity_subspace_dim))
    id_coords /= np.linalg.norm(id_coords, axis=1, keepdims=True)

    # Scales are vector norms: a camera shift has Euclidean length
    # camera_shift_scale, a token's noise has expected length noise_scale.
    cam_dirs = rng.standard_normal((cfg.cams_per_id, D))
    cam_dirs /= np.linalg.norm(cam_dirs, axis=1, keepdims=True)
    cam_shift = cam_dirs * cfg.camera_shift_scale
    noise_entry_std = cfg.noise_scale / np.sqrt(D)
    proj_matrix = rng.standard_normal((cfg.proj_dim, D)) / np.sqrt(D)

    row_w = np.repeat(np.asarray(cfg.region_profile, dtype=np.float64), W)  # (N,)
    num_train = int(round(cfg.num_ids * cfg.train_id_fraction))

    records = []
    for pid in range(cfg.num_ids):
        is_train = pid < num_train
        for cam in range(cfg.cams_per_id):
            for _ in range(cfg.images_per_id_cam):
                # Per-image appearance: the identity direction jittered
                # inside the shared subspace (norm preserved), so images
                # of one person vary coherently rather than by token noise.
                jitter = rng.standard_normal(cfg.identity_subspace_dim)
                jitter *= cfg.pose_scale / np.sqrt(cfg.identity_subspace_dim)
                coords = id_coords[pid] + jitter  # jitter norm ~= pose_scale
                coords /= np.linalg.norm(coords)
                img_dir = coords @ basis.T
                noise = rng.standard_normal((N, D)) * noise_entry_std
                tokens = (
                    row_w[:, None] * (cfg.identity_signal_scale * img_dir)[None, :]
                    + cam_shift[cam][None, :]
                    + noise
                )
                cls = tokens.mean(axis=0) + rng.standard_normal(D) * (
                    noise_entry_std / np.sqrt(N)
                )
                proj = proj_matrix @ cls
                if is_train:
                    split = "train"
                else:
                    split = "query" if cam == 0 else "gallery"
                records.append(
                    FeatureRecord(
                        person_id=pid,
                        camera_id=cam,
                        split=split,
                        cls=_f32_round(cls),
                        proj=_f32_round(proj),
                        tokens=_f32_round(tokens),
                    )
                )
    header = CorpusHeader(
        record_count=len(records),
        n_patches=N,
        dim=D,
        proj_dim=cfg.proj_dim,
        grid_h=H,
        grid_w=W,
    )
    return header, records


# -- validation -----------------------------------------------------------


@dataclass
class CorpusReport:
    errors: list
    warnings: list

    @property
    def ok(self) -> bool:
        return not self.errors

    def format(self) -> str:
        lines = [f"errors: {len(self.errors)}, warnings: {len(self.warnings)}"]
        lines += [f"ERROR: {e}" for e in self.errors]
        lines += [f"warning: {w}" for w in self.warnings]
        return "\n".join(lines)


def validate_corpus(header: CorpusHeader, records) -> CorpusReport:
    """Checks finiteness (fatal), cross-camera coverage and split balance
    (warnings)."""
    errors, warnings = [], []
    if header.record_count != len(records):
        errors.append(f"header record_count {header.record_count} != {len(records)} records")

    cams_by_id: dict = {}
    split_counts = {s: 0 for s in SPLITS}
    query_ids, gallery_cam_by_id = set(), {}
    for i, rec in enumerate(records):
        for name, arr in (("tokens", rec.tokens), ("cls", rec.cls), ("proj", rec.proj)):
            if not np.all(np.isfinite(arr)):
                errors.append(f"record {i}: non-finite value in {name}")
                break
        cams_by_id.setdefault(rec.person_id, set()).add(rec.camera_id)
        split_counts[rec.split] += 1
        if rec.split == "query":
            query_ids.add(rec.person_id)
        elif rec.split == "gallery":
            gallery_cam_by_id.setdefault(rec.person_id, set()).add(rec.camera_id)

    single_cam = sorted(pid for pid, cams in cams_by_id.items() if len(cams) < 2)
    if single_cam:
        warnings.append(f"identities seen by one camera only: {single_cam}")

    if split_counts["query"] and not split_counts["gallery"]:
        warnings.append("query split present but gallery split empty")
    if split_counts["gallery"] and not split_counts["query"]:
        warnings.append("gallery split present but query split empty")

    unmatched = sorted(pid for pid in query_ids if not gallery_cam_by_id.get(pid))
    if unmatched:
        warnings.append(f"query identities with no gallery records: {unmatched}")

    return CorpusReport(errors=errors, warnings=warnings)
