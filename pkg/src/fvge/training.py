"""Training orchestration: the two decoupled loops, checkpoints, evaluation.

Base training optimizes the adapter pair plus the foreground gate on
base-class data; calibration training optimizes the prior gate on the same
data and nothing else. The two loops draw from independent seeded streams,
so running them in either order (or alone) produces identical parameters
for a given seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from .adapters import AdapterPair, base_loss_graph, prepare_base_context
from .autodiff import ParamSet, add, mul, sgd_step
from .calibration import infer, pc_loss_graph, prepare_pc_context
from .data import Dataset, sample_shots, write_block, read_block
from .errors import ConfigError, FormatError, TrainingDivergedError
from .gates import ReliabilityGate, StatsNormalizer, indicator_mask

# stream ids for deriving independent deterministic RNGs from one seed
_STREAM_ADAPTERS = 1
_STREAM_FRG = 2
_STREAM_BASE_SHUFFLE = 3
_STREAM_SHOTS = 4
_STREAM_BRG = 5
_STREAM_PC_SHUFFLE = 6


@dataclass
class TrainConfig:
    """All hyperparameters, seeds, and ablation toggles."""

    lr: float = 0.0035
    epochs: int = 10
    batch: int = 4
    tau_d: float = 2.0
    lambda_d: float = 10.0
    dim_fdc: int = 64
    dim_rg: int = 32
    seed: int = 0
    logit_scale: float | None = None  # None: use the dataset's recorded scale
    shots: int | None = None          # None: use every train-role record
    gate_layers: int = 2
    frg_loss: bool = True
    fdc_ce: bool = True
    fdc_dist: bool = True
    pc_ce: bool = True
    pc_kl: bool = True
    textual_adapter: bool = True
    stop_grad_trust: bool = False
    frg_indicators: tuple = (True, True, True)
    brg_indicators: tuple = (True, True, True)
    threads: int = 1

    @property
    def pc_active(self) -> bool:
        return self.pc_ce or self.pc_kl

    def resolved(self, dataset: Dataset) -> "TrainConfig":
        """Copy with the logit scale pinned to a concrete value."""
        scale = self.logit_scale if self.logit_scale is not None else dataset.logit_scale
        return replace(self, logit_scale=float(scale))

    def validate(self, dim: int) -> None:
        for name, positive in (
            ("lr", self.lr), ("batch", self.batch), ("tau_d", self.tau_d),
            ("dim_fdc", self.dim_fdc), ("dim_rg", self.dim_rg),
        ):
            if positive <= 0:
                raise ConfigError(f"{name} must be positive, got {positive}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.lambda_d < 0:
            raise ConfigError(f"lambda_d must be >= 0, got {self.lambda_d}")
        if self.dim_fdc >= dim:
            raise ConfigError(
                f"adapter bottleneck ({self.dim_fdc}) must be smaller than the "
                f"feature dim ({dim}); pass a smaller dim_fdc"
            )
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")
        indicator_mask(self.frg_indicators)
        indicator_mask(self.brg_indicators)

    def as_dict(self) -> dict:
        return {
            "lr": self.lr, "epochs": self.epochs, "batch": self.batch,
            "tau_d": self.tau_d, "lambda_d": self.lambda_d,
            "dim_fdc": self.dim_fdc, "dim_rg": self.dim_rg, "seed": self.seed,
            "logit_scale": self.logit_scale, "shots": self.shots,
            "gate_layers": self.gate_layers,
            "frg_loss": self.frg_loss, "fdc_ce": self.fdc_ce,
            "fdc_dist": self.fdc_dist, "pc_ce": self.pc_ce, "pc_kl": self.pc_kl,
            "textual_adapter": self.textual_adapter,
            "stop_grad_trust": self.stop_grad_trust,
            "frg_indicators": [bool(b) for b in self.frg_indicators],
            "brg_indicators": [bool(b) for b in self.brg_indicators],
            "threads": self.threads,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["frg_indicators"] = tuple(bool(b) for b in d.get("frg_indicators", (True,) * 3))
        d["brg_indicators"] = tuple(bool(b) for b in d.get("brg_indicators", (True,) * 3))
        return cls(**d)


@dataclass
class Checkpoint:
    """Trained state: adapters, both gates, their input normalizers, config echo."""

    config: TrainConfig
    adapters: AdapterPair | None = None
    frg: ReliabilityGate | None = None
    frg_norm: StatsNormalizer = field(default_factory=StatsNormalizer)
    brg: ReliabilityGate | None = None
    brg_norm: StatsNormalizer = field(default_factory=StatsNormalizer)
    epochs_base: int = 0
    epochs_pc: int = 0

    @property
    def frg_mask(self) -> np.ndarray:
        return indicator_mask(self.config.frg_indicators)

    @property
    def brg_mask(self) -> np.ndarray:
        return indicator_mask(self.config.brg_indicators)

    def base_registry(self) -> ParamSet:
        parts: dict[str, ParamSet] = {}
        if self.adapters is not None:
            parts["visual"] = self.adapters.visual.params
            if self.adapters.textual is not None:
                parts["textual"] = self.adapters.textual.params
        if self.frg is not None:
            parts["frg"] = self.frg.params
        return ParamSet.union(parts)

    def pc_registry(self) -> ParamSet:
        if self.brg is None:
            return ParamSet()
        return ParamSet.union({"brg": self.brg.params})

    def snapshot(self) -> "Checkpoint":
        clone = Checkpoint(config=self.config)
        if self.adapters is not None:
            clone.adapters = AdapterPair.create(
                dim=self.adapters.visual.dim,
                hidden_dim=self.config.dim_fdc,
                rng=np.random.default_rng(0),
                textual=self.adapters.textual is not None,
            )
            clone.adapters.visual.params.load_from(self.adapters.visual.params)
            if self.adapters.textual is not None:
                clone.adapters.textual.params.load_from(self.adapters.textual.params)
        if self.frg is not None:
            clone.frg = _fresh_gate(self.config)
            clone.frg.params.load_from(self.frg.params)
        clone.frg_norm = StatsNormalizer.from_state(self.frg_norm.state())
        if self.brg is not None:
            clone.brg = _fresh_gate(self.config)
            clone.brg.params.load_from(self.brg.params)
        clone.brg_norm = StatsNormalizer.from_state(self.brg_norm.state())
        clone.epochs_base = self.epochs_base
        clone.epochs_pc = self.epochs_pc
        return clone


def _fresh_gate(config: TrainConfig, rng: np.random.Generator | None = None) -> ReliabilityGate:
    return ReliabilityGate(
        hidden_dim=config.dim_rg,
        layers=config.gate_layers,
        rng=rng if rng is not None else np.random.default_rng(0),
    )


def init_base_components(config: TrainConfig, dim: int) -> Checkpoint:
    """Fresh adapters + foreground gate from the config's seeded streams."""
    config.validate(dim)
    adapters = AdapterPair.create(
        dim=dim,
        hidden_dim=config.dim_fdc,
        rng=np.random.default_rng([config.seed, _STREAM_ADAPTERS]),
        textual=config.textual_adapter,
    )
    frg = ReliabilityGate(
        hidden_dim=config.dim_rg,
        layers=config.gate_layers,
        rng=np.random.default_rng([config.seed, _STREAM_FRG]),
    )
    return Checkpoint(config=config, adapters=adapters, frg=frg)


def trainable_parameter_count(config: TrainConfig, dim: int) -> int:
    """Total learnable scalars across both branches for a feature dim."""
    ckpt = init_base_components(config, dim)
    brg = ReliabilityGate(
        hidden_dim=config.dim_rg, layers=config.gate_layers, rng=np.random.default_rng(0)
    )
    return ckpt.base_registry().count() + brg.params.count()


def _unit_rows(m: np.ndarray) -> np.ndarray:
    return np.asarray(m, dtype=np.float64) / np.linalg.norm(m, axis=1, keepdims=True)


def _train_subset(dataset: Dataset, config: TrainConfig) -> list:
    base = set(dataset.split.base_classes)
    records = [r for r in dataset.train_records() if r.label in base]
    if not records:
        raise ConfigError("dataset has no base-class training records")
    if config.shots is not None:
        records = sample_shots(
            records, config.shots, np.random.default_rng([config.seed, _STREAM_SHOTS])
        )
    return records


def _mean_loss(terms):
    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    return mul(total, 1.0 / len(terms))


def train_base(dataset: Dataset, config: TrainConfig) -> tuple[Checkpoint, list[float]]:
    """Optimize the adapters and the foreground gate on base-class data.

    Returns the checkpoint and the per-epoch mean loss history. On a
    non-finite loss the run aborts with the last epoch-boundary state
    attached to the raised error.
    """
    config = config.resolved(dataset)
    ckpt = init_base_components(config, dim=dataset.feature_dim)
    records = _train_subset(dataset, config)

    base_cls = list(dataset.split.base_classes)
    local = {c: i for i, c in enumerate(base_cls)}
    bank = _unit_rows(dataset.banks.feats_backbone[base_cls])
    mask = ckpt.frg_mask
    contexts = [
        prepare_base_context(
            r, bank, tau_d=config.tau_d, scale=config.logit_scale,
            frg_mask=mask, label=local[r.label],
        )
        for r in records
    ]

    registry = ckpt.base_registry()
    shuffle = np.random.default_rng([config.seed, _STREAM_BASE_SHUFFLE])
    history: list[float] = []
    last_good = ckpt.snapshot()
    for epoch in range(config.epochs):
        order = shuffle.permutation(len(contexts))
        epoch_loss, seen = 0.0, 0
        for start in range(0, len(order), config.batch):
            batch = [contexts[i] for i in order[start : start + config.batch]]
            if not ckpt.frg_norm.frozen:
                for ctx in batch:
                    ckpt.frg_norm.update(ctx.raw_stats)
            registry.zero_grad()
            adapted = ckpt.adapters.adapt_bank(bank)
            loss = _mean_loss([
                base_loss_graph(
                    ctx, adapted, ckpt.adapters, ckpt.frg, ckpt.frg_norm,
                    tau_d=config.tau_d, scale=config.logit_scale,
                    lambda_d=config.lambda_d,
                    use_ce=config.fdc_ce, use_frg=config.frg_loss,
                    use_dist=config.fdc_dist,
                    stop_grad_trust=config.stop_grad_trust,
                )
                for ctx in batch
            ])
            if not np.isfinite(loss.data):
                raise TrainingDivergedError(
                    f"non-finite base loss in epoch {epoch}", last_checkpoint=last_good
                )
            if loss.requires_grad:
                loss.backward()
                sgd_step(registry, config.lr)
            epoch_loss += float(loss.data) * len(batch)
            seen += len(batch)
        if epoch == 0:
            ckpt.frg_norm.freeze()
        history.append(epoch_loss / max(seen, 1))
        ckpt.epochs_base = epoch + 1
        last_good = ckpt.snapshot()
    return ckpt, history


def train_pc(
    dataset: Dataset, config: TrainConfig, checkpoint: Checkpoint | None = None
) -> tuple[Checkpoint, list[float]]:
    """Optimize the prior gate on base-class data; everything else untouched.

    With both calibration losses toggled off this is a no-op: the gate
    stays at its (neutral) initialization.
    """
    config = config.resolved(dataset)
    indicator_mask(config.brg_indicators)
    if checkpoint is None:
        checkpoint = Checkpoint(config=config)
    brg = _fresh_gate(config, rng=np.random.default_rng([config.seed, _STREAM_BRG]))
    checkpoint.brg = brg
    checkpoint.brg_norm = StatsNormalizer()
    if not config.pc_active:
        return checkpoint, []

    records = _train_subset(dataset, config)
    base_cls = list(dataset.split.base_classes)
    mask = checkpoint.brg_mask
    contexts = [
        prepare_pc_context(
            r, dataset.banks.feats_backbone, dataset.banks.feats_prior, base_cls,
            tau_d=config.tau_d, scale=config.logit_scale, brg_mask=mask,
        )
        for r in records
    ]

    registry = ParamSet.union({"brg": brg.params})
    shuffle = np.random.default_rng([config.seed, _STREAM_PC_SHUFFLE])
    history: list[float] = []
    last_good = checkpoint.snapshot()
    for epoch in range(config.epochs):
        order = shuffle.permutation(len(contexts))
        epoch_loss, seen = 0.0, 0
        for start in range(0, len(order), config.batch):
            batch = [contexts[i] for i in order[start : start + config.batch]]
            if not checkpoint.brg_norm.frozen:
                for ctx in batch:
                    checkpoint.brg_norm.update(ctx.raw_stats)
            registry.zero_grad()
            loss = _mean_loss([
                pc_loss_graph(
                    ctx, brg, checkpoint.brg_norm,
                    tau_d=config.tau_d, use_ce=config.pc_ce, use_kl=config.pc_kl,
                )
                for ctx in batch
            ])
            if not np.isfinite(loss.data):
                raise TrainingDivergedError(
                    f"non-finite calibration loss in epoch {epoch}", last_checkpoint=last_good
                )
            if loss.requires_grad:
                loss.backward()
                sgd_step(registry, config.lr)
            epoch_loss += float(loss.data) * len(batch)
            seen += len(batch)
        if epoch == 0:
            checkpoint.brg_norm.freeze()
        history.append(epoch_loss / max(seen, 1))
        checkpoint.epochs_pc = epoch + 1
        last_good = checkpoint.snapshot()
    return checkpoint, history


def harmonic_mean(a: float, b: float) -> float:
    """2ab / (a + b); 0 when both accuracies vanish."""
    if a + b == 0:
        return 0.0
    return 2.0 * a * b / (a + b)


def evaluate(dataset: Dataset, checkpoint: Checkpoint, branch: str, threads: int = 1) -> dict:
    """Accuracy and diagnostics of one branch over the eval records."""
    classes = dataset.split.base_classes if branch == "base" else dataset.split.new_classes
    wanted = set(classes)
    records = [r for r in dataset.eval_records() if r.label in wanted]
    if not records:
        raise ConfigError(f"no eval records for branch {branch!r}")

    def run(record):
        return infer(record, branch, checkpoint, dataset.banks, dataset.split)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, records))
    else:
        results = [run(r) for r in records]

    correct = sum(1 for rec, res in zip(records, results) if res.predicted_class == rec.label)
    return {
        "branch": branch,
        "count": len(records),
        "accuracy": correct / len(records),
        "mean_d_fg": float(np.mean([res.d_fg for res in results])),
        "mean_trust": float(np.mean([res.trust for res in results])),
    }


# ---------------------------------------------------------------------------
# Checkpoint serialization (same block convention as the dataset format,
# with float64 payloads so reloading reproduces forward passes bit-exactly)
# ---------------------------------------------------------------------------

def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blocks: list[tuple[str, np.ndarray]] = []
    if ckpt.adapters is not None:
        for name, t in ckpt.adapters.visual.params.items():
            blocks.append((f"visual.{name}", t.data))
        if ckpt.adapters.textual is not None:
            for name, t in ckpt.adapters.textual.params.items():
                blocks.append((f"textual.{name}", t.data))
    if ckpt.frg is not None:
        for name, t in ckpt.frg.params.items():
            blocks.append((f"frg.{name}", t.data))
    if ckpt.brg is not None:
        for name, t in ckpt.brg.params.items():
            blocks.append((f"brg.{name}", t.data))
    for tag, norm in (("frg_norm", ckpt.frg_norm), ("brg_norm", ckpt.brg_norm)):
        blocks.append((f"{tag}.mean", norm.mean))
        blocks.append((f"{tag}.m2", norm.m2))

    manifest = {
        "kind": "checkpoint",
        "version": 1,
        "config": ckpt.config.as_dict(),
        "epochs_base": ckpt.epochs_base,
        "epochs_pc": ckpt.epochs_pc,
        "feature_dim": ckpt.adapters.visual.dim if ckpt.adapters is not None else None,
        "has_adapters": ckpt.adapters is not None,
        "has_textual": ckpt.adapters is not None and ckpt.adapters.textual is not None,
        "has_frg": ckpt.frg is not None,
        "has_brg": ckpt.brg is not None,
        "normalizers": {
            "frg_norm": {"count": ckpt.frg_norm.count, "frozen": ckpt.frg_norm.frozen},
            "brg_norm": {"count": ckpt.brg_norm.count, "frozen": ckpt.brg_norm.frozen},
        },
        "blocks": [{"name": n, "shape": list(a.shape)} for n, a in blocks],
    }
    (path / "manifest.txt").write_text(
        yaml.safe_dump(manifest, sort_keys=True, default_flow_style=None), encoding="utf-8"
    )
    with open(path / "params.bin", "wb") as f:
        for _, arr in blocks:
            write_block(f, arr, "<f8")


def load_checkpoint(path, components: tuple = ("adapters", "frg", "brg")) -> Checkpoint:
    """Rebuild a checkpoint; ``components`` limits which parts are loaded.

    Evaluating the new branch of a calibrated model passes
    ``components=("brg",)`` so the adapter weights are never even read.
    """
    path = Path(path)
    manifest_path = path / "manifest.txt"
    if not manifest_path.is_file():
        raise FormatError(f"missing checkpoint manifest: {manifest_path}")
    manifest = yaml.safe_load(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("kind") != "checkpoint" or manifest.get("version") != 1:
        raise FormatError("unrecognized checkpoint manifest")
    config = TrainConfig.from_dict(manifest["config"])

    arrays: dict[str, np.ndarray] = {}
    with open(path / "params.bin", "rb") as f:
        for spec in manifest["blocks"]:
            arr = read_block(f, "<f8")
            arrays[spec["name"]] = arr.reshape(spec["shape"])

    ckpt = Checkpoint(config=config)
    if manifest["has_adapters"] and "adapters" in components:
        dim = int(manifest["feature_dim"])
        ckpt.adapters = AdapterPair.create(
            dim=dim, hidden_dim=config.dim_fdc,
            rng=np.random.default_rng(0), textual=manifest["has_textual"],
        )
        for name, t in ckpt.adapters.visual.params.items():
            t.data[...] = arrays[f"visual.{name}"]
        if ckpt.adapters.textual is not None:
            for name, t in ckpt.adapters.textual.params.items():
                t.data[...] = arrays[f"textual.{name}"]
    if manifest["has_frg"] and "frg" in components:
        ckpt.frg = _fresh_gate(config)
        for name, t in ckpt.frg.params.items():
            t.data[...] = arrays[f"frg.{name}"]
    if manifest["has_brg"] and "brg" in components:
        ckpt.brg = _fresh_gate(config)
        for name, t in ckpt.brg.params.items():
            t.data[...] = arrays[f"brg.{name}"]

    for tag, meta in manifest["normalizers"].items():
        norm = StatsNormalizer.from_state(
            {
                "count": meta["count"],
                "mean": arrays[f"{tag}.mean"].ravel(),
                "m2": arrays[f"{tag}.m2"].ravel(),
                "frozen": meta["frozen"],
            }
        )
        setattr(ckpt, tag, norm)
    ckpt.epochs_base = int(manifest["epochs_base"])
    ckpt.epochs_pc = int(manifest["epochs_pc"])
    return ckpt
