"""FVGE dataset format: binary tensor blocks plus a text manifest.

Layout of a dataset directory::

    manifest.txt        YAML key-value manifest (ids, roles, splits, dims)
    feat_full.bin       N x D float32 full-image features
    feat_fg.bin         N x D float32 foreground-view features
    bank_backbone.bin   C x D float32 tuned class-text features
    bank_prior.bin      C x D float32 zero-shot class-text features
    z_clip.bin          N x C float32 per-sample prior logits (optional)
    aux.bin             two blocks: N x 1 int32 labels, N x 1 float32 area ratios

Every ``.bin`` block starts with a 16-byte header: magic ``FVGE``, then
little-endian u32 version, rows, cols; the payload is row-major.
Features are stored as written; readers validate unit norm (reject beyond
1e-3 deviation, warn and renormalize beyond 1e-4) but leave clean data
untouched so a write/read/write cycle is byte-identical. Consumers
re-normalize in float64 at ingestion.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigError, FormatError, ValidationError

logger = logging.getLogger("fvge.data")

MAGIC = b"FVGE"
FORMAT_VERSION = 1

ROLE_TRAIN = "train"
ROLE_EVAL = "eval"

# Norm-deviation bands for stored features.
NORM_KEEP = 1e-4
NORM_REJECT = 1e-3

# Synthetic prototypes are near-orthogonal (inter-class cosine gaps ~1),
# unlike contrastive encoders whose embeddings crowd into a cone with gaps
# of a few hundredths; a matching, much smaller logit scale keeps the
# tempered distributions soft at the paper's learning rate.
SYNTH_LOGIT_SCALE = 10.0


@dataclass
class SampleRecord:
    """One training/eval sample over precomputed embeddings."""

    id: str
    label: int
    feat_full: np.ndarray
    feat_fg: np.ndarray
    area_ratio: float
    z_clip: np.ndarray | None = None
    role: str = ROLE_TRAIN


@dataclass
class ClassBank:
    """Per-class text features for the tuned backbone and the zero-shot prior."""

    names: list[str]
    feats_backbone: np.ndarray
    feats_prior: np.ndarray

    @property
    def class_count(self) -> int:
        return len(self.names)

    @property
    def dim(self) -> int:
        return int(self.feats_backbone.shape[1])


@dataclass
class SplitManifest:
    """Disjoint base/new class index sets plus the per-class shot count."""

    base_classes: list[int]
    new_classes: list[int]
    shots: int


@dataclass
class Dataset:
    records: list[SampleRecord]
    banks: ClassBank
    split: SplitManifest
    roles_present: bool = field(default=True)
    # scale applied to feature/class-text inner products; must match the
    # geometry of the embedding source (contrastive encoders use ~100, the
    # near-orthogonal synthetic prototypes want a much smaller value)
    logit_scale: float = 100.0

    @property
    def feature_dim(self) -> int:
        return self.banks.dim

    @property
    def class_count(self) -> int:
        return self.banks.class_count

    def train_records(self) -> list[SampleRecord]:
        if not self.roles_present:
            return list(self.records)
        return [r for r in self.records if r.role == ROLE_TRAIN]

    def eval_records(self) -> list[SampleRecord]:
        if not self.roles_present:
            return list(self.records)
        marked = [r for r in self.records if r.role == ROLE_EVAL]
        return marked if marked else list(self.records)


# ---------------------------------------------------------------------------
# Block encoding
# ---------------------------------------------------------------------------

def write_block(f, arr: np.ndarray, dtype: str) -> None:
    """Write one header-prefixed row-major block."""
    arr = np.asarray(arr)
    if arr.ndim == 1:
        rows, cols = arr.shape[0], 1
    elif arr.ndim == 2:
        rows, cols = arr.shape
    else:
        raise FormatError(f"blocks are 1-d or 2-d, got ndim={arr.ndim}")
    f.write(MAGIC)
    f.write(struct.pack("<III", FORMAT_VERSION, rows, cols))
    f.write(np.ascontiguousarray(arr, dtype=np.dtype(dtype)).tobytes())


def read_block(f, dtype: str) -> np.ndarray:
    """Read one block; returns a 2-d array of shape (rows, cols)."""
    header = f.read(16)
    if len(header) < 16:
        raise FormatError("truncated block header")
    if header[:4] != MAGIC:
        raise FormatError(f"bad magic {header[:4]!r}")
    version, rows, cols = struct.unpack("<III", header[4:])
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported block version {version}")
    dt = np.dtype(dtype)
    payload = f.read(rows * cols * dt.itemsize)
    if len(payload) != rows * cols * dt.itemsize:
        raise FormatError("truncated block payload")
    return np.frombuffer(payload, dtype=dt).reshape(rows, cols).copy()


def _write_block_file(path: Path, arr: np.ndarray, dtype: str) -> None:
    with open(path, "wb") as f:
        write_block(f, arr, dtype)


def _read_block_file(path: Path, dtype: str) -> np.ndarray:
    with open(path, "rb") as f:
        return read_block(f, dtype)


# ---------------------------------------------------------------------------
# Dataset writer / reader
# ---------------------------------------------------------------------------

def _check_unit_rows(rows: np.ndarray, what: str, ids=None) -> np.ndarray:
    """Enforce the norm bands; returns rows with the warn band renormalized."""
    rows = np.asarray(rows, dtype=np.float64)
    norms = np.linalg.norm(rows, axis=1)
    dev = np.abs(norms - 1.0)
    bad = dev > NORM_REJECT
    if np.any(bad):
        i = int(np.argmax(bad))
        name = ids[i] if ids is not None else str(i)
        raise ValidationError(f"{what} row {name} deviates from unit norm by {dev[i]:.3e}")
    warn = dev > NORM_KEEP
    if np.any(warn):
        i = int(np.argmax(warn))
        name = ids[i] if ids is not None else str(i)
        logger.warning(
            "%s row %s deviates from unit norm by %.3e; renormalizing", what, name, dev[i]
        )
        rows = rows.copy()
        rows[warn] /= norms[warn, None]
    return rows


def write_dataset(
    records: list[SampleRecord],
    banks: ClassBank,
    split: SplitManifest,
    path,
    logit_scale: float = 100.0,
) -> None:
    """Validate and serialize a dataset directory."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)

    c = banks.class_count
    if banks.feats_backbone.shape != banks.feats_prior.shape or banks.feats_backbone.shape[0] != c:
        raise ValidationError("backbone and prior banks must share class count and dimension")
    dim = banks.dim
    if set(split.base_classes) & set(split.new_classes):
        raise ValidationError("base and new class sets overlap")
    known = set(split.base_classes) | set(split.new_classes)

    with_prior = [r.z_clip is not None for r in records]
    if any(with_prior) and not all(with_prior):
        raise ValidationError("either all records carry prior logits or none do")
    has_prior_logits = bool(records) and all(with_prior)

    for r in records:
        if r.feat_full.shape != (dim,) or r.feat_fg.shape != (dim,):
            raise ValidationError(f"record {r.id}: feature dim mismatch (expected {dim})")
        for name, v in (("feat_full", r.feat_full), ("feat_fg", r.feat_fg)):
            dev = abs(float(np.linalg.norm(v)) - 1.0)
            if dev > NORM_KEEP:
                raise ValidationError(f"record {r.id}: {name} deviates from unit norm by {dev:.3e}")
        if not 0 <= r.label < c or r.label not in known:
            raise ValidationError(f"record {r.id}: label {r.label} not valid for the declared split")
        if not 0.0 <= r.area_ratio <= 1.0:
            raise ValidationError(f"record {r.id}: area ratio {r.area_ratio} outside [0, 1]")
        if has_prior_logits and r.z_clip.shape != (c,):
            raise ValidationError(f"record {r.id}: prior logits must have length {c}")
        if r.role not in (ROLE_TRAIN, ROLE_EVAL):
            raise ValidationError(f"record {r.id}: unknown role {r.role!r}")

    n = len(records)
    manifest = {
        "format": "FVGE",
        "version": FORMAT_VERSION,
        "dim": dim,
        "class_count": c,
        "record_count": n,
        "has_prior_logits": has_prior_logits,
        "class_names": list(banks.names),
        "base_classes": [int(i) for i in split.base_classes],
        "new_classes": [int(i) for i in split.new_classes],
        "shots": int(split.shots),
        "logit_scale": float(logit_scale),
        "ids": [r.id for r in records],
        "roles": [r.role for r in records],
    }
    (path / "manifest.txt").write_text(
        yaml.safe_dump(manifest, sort_keys=True, default_flow_style=None), encoding="utf-8"
    )

    stack = lambda key: np.stack([getattr(r, key) for r in records]) if n else np.zeros((0, dim))
    _write_block_file(path / "feat_full.bin", stack("feat_full"), "<f4")
    _write_block_file(path / "feat_fg.bin", stack("feat_fg"), "<f4")
    _write_block_file(path / "bank_backbone.bin", banks.feats_backbone, "<f4")
    _write_block_file(path / "bank_prior.bin", banks.feats_prior, "<f4")
    if has_prior_logits:
        _write_block_file(path / "z_clip.bin", np.stack([r.z_clip for r in records]), "<f4")
    with open(path / "aux.bin", "wb") as f:
        write_block(f, np.array([r.label for r in records], dtype=np.int32), "<i4")
        write_block(f, np.array([r.area_ratio for r in records], dtype=np.float64), "<f4")


def read_dataset(path) -> Dataset:
    """Inverse of :func:`write_dataset`, with invariant validation."""
    path = Path(path)
    manifest_path = path / "manifest.txt"
    if not manifest_path.is_file():
        raise FormatError(f"missing manifest: {manifest_path}")
    manifest = yaml.safe_load(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format") != "FVGE" or manifest.get("version") != FORMAT_VERSION:
        raise FormatError("unrecognized manifest format/version")

    n = int(manifest["record_count"])
    c = int(manifest["class_count"])
    dim = int(manifest["dim"])

    feat_full = _read_block_file(path / "feat_full.bin", "<f4").astype(np.float64)
    feat_fg = _read_block_file(path / "feat_fg.bin", "<f4").astype(np.float64)
    bank_backbone = _read_block_file(path / "bank_backbone.bin", "<f4").astype(np.float64)
    bank_prior = _read_block_file(path / "bank_prior.bin", "<f4").astype(np.float64)
    with open(path / "aux.bin", "rb") as f:
        labels = read_block(f, "<i4").ravel()
        areas = read_block(f, "<f4").astype(np.float64).ravel()

    for name, arr, shape in (
        ("feat_full", feat_full, (n, dim)),
        ("feat_fg", feat_fg, (n, dim)),
        ("bank_backbone", bank_backbone, (c, dim)),
        ("bank_prior", bank_prior, (c, dim)),
        ("labels", labels, (n,)),
        ("area ratios", areas, (n,)),
    ):
        if arr.shape != shape:
            raise FormatError(f"{name} has shape {arr.shape}, manifest says {shape}")

    z_clip = None
    if manifest["has_prior_logits"]:
        z_clip = _read_block_file(path / "z_clip.bin", "<f4").astype(np.float64)
        if z_clip.shape != (n, c):
            raise FormatError(f"z_clip has shape {z_clip.shape}, manifest says {(n, c)}")

    ids = [str(i) for i in manifest["ids"]]
    roles = [str(r) for r in manifest.get("roles", [])] or [ROLE_TRAIN] * n
    if len(ids) != n or len(roles) != n:
        raise FormatError("manifest ids/roles do not match record count")

    feat_full = _check_unit_rows(feat_full, "feat_full", ids)
    feat_fg = _check_unit_rows(feat_fg, "feat_fg", ids)
    bank_backbone = _check_unit_rows(bank_backbone, "bank_backbone", manifest["class_names"])
    bank_prior = _check_unit_rows(bank_prior, "bank_prior", manifest["class_names"])

    records = [
        SampleRecord(
            id=ids[i],
            label=int(labels[i]),
            feat_full=feat_full[i],
            feat_fg=feat_fg[i],
            area_ratio=float(areas[i]),
            z_clip=None if z_clip is None else z_clip[i],
            role=roles[i],
        )
        for i in range(n)
    ]
    banks = ClassBank(
        names=[str(s) for s in manifest["class_names"]],
        feats_backbone=bank_backbone,
        feats_prior=bank_prior,
    )
    split = SplitManifest(
        base_classes=[int(i) for i in manifest["base_classes"]],
        new_classes=[int(i) for i in manifest["new_classes"]],
        shots=int(manifest["shots"]),
    )
    return Dataset(
        records=records,
        banks=banks,
        split=split,
        roles_present="roles" in manifest,
        logit_scale=float(manifest.get("logit_scale", 100.0)),
    )


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------

def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _unit_rows(m: np.ndarray) -> np.ndarray:
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def synth_generate(
    seed: int,
    classes: int,
    dim: int,
    shots: int,
    fg_advantage: float,
    noise: float,
    eval_per_class: int | None = None,
) -> Dataset:
    """Seeded synthetic embedding dataset for desk-scale experiments.

    Each class gets a random unit prototype. Foreground features are noisy
    copies of the prototype; full-image features mix the prototype with one
    shared background direction, the mixing weight set by ``fg_advantage``
    (0 makes both views statistically identical, 1 drowns the class signal
    in background). Classes split evenly into base (first half) and new.

    The two class-text banks mimic a tuned-then-frozen backbone next to a
    broad zero-shot prior: the backbone bank matches the prototypes exactly
    on base classes but has drifted off the new-class prototypes, while the
    prior bank is uniformly mildly noisy, so the prior is the more reliable
    source on new classes and the weaker one on base classes.

    Each class gets ``shots`` train records and ``eval_per_class`` (default
    ``shots``) eval records.
    """
    if classes < 2:
        raise ConfigError(f"need at least 2 classes, got {classes}")
    if dim < 4:
        raise ConfigError(f"need dim >= 4, got {dim}")
    if shots < 1:
        raise ConfigError(f"need at least 1 shot, got {shots}")
    if not 0.0 <= fg_advantage <= 1.0:
        raise ConfigError(f"fg_advantage must lie in [0, 1], got {fg_advantage}")
    if noise < 0.0:
        raise ConfigError(f"noise must be nonnegative, got {noise}")
    if eval_per_class is None:
        eval_per_class = shots
    if eval_per_class < 1:
        raise ConfigError(f"need at least 1 eval record per class, got {eval_per_class}")

    rng = np.random.default_rng(seed)
    n_base = classes - classes // 2
    protos = _unit_rows(rng.standard_normal((classes, dim)))
    background = _unit(rng.standard_normal(dim))
    backbone_bank = protos.copy()
    backbone_bank[n_base:] = _unit_rows(
        protos[n_base:] + (2.0 * noise) * rng.standard_normal((classes - n_base, dim))
    )
    prior_bank = _unit_rows(protos + noise * rng.standard_normal((classes, dim)))

    records: list[SampleRecord] = []
    for c in range(classes):
        mix = (1.0 - fg_advantage) * protos[c] + fg_advantage * background
        for k in range(shots + eval_per_class):
            fg = _unit(protos[c] + noise * rng.standard_normal(dim))
            full = _unit(mix + noise * rng.standard_normal(dim))
            area = float(rng.uniform(0.1, 0.9))
            records.append(
                SampleRecord(
                    id=f"synth-{c:03d}-{k:04d}",
                    label=c,
                    feat_full=full,
                    feat_fg=fg,
                    area_ratio=area,
                    role=ROLE_TRAIN if k < shots else ROLE_EVAL,
                )
            )

    banks = ClassBank(
        names=[f"class-{c:03d}" for c in range(classes)],
        feats_backbone=backbone_bank,
        feats_prior=prior_bank,
    )
    split = SplitManifest(
        base_classes=list(range(n_base)),
        new_classes=list(range(n_base, classes)),
        shots=shots,
    )
    return Dataset(records=records, banks=banks, split=split, logit_scale=SYNTH_LOGIT_SCALE)


def sample_shots(records: list[SampleRecord], shots: int, rng: np.random.Generator) -> list[SampleRecord]:
    """Per-class subsample without replacement, preserving record order."""
    if shots < 1:
        raise ConfigError(f"shots must be >= 1, got {shots}")
    by_label: dict[int, list[int]] = {}
    for i, r in enumerate(records):
        by_label.setdefault(r.label, []).append(i)
    keep: set[int] = set()
    for label in sorted(by_label):
        idx = by_label[label]
        if len(idx) <= shots:
            keep.update(idx)
        else:
            keep.update(rng.choice(idx, size=shots, replace=False).tolist())
    return [records[i] for i in sorted(keep)]
