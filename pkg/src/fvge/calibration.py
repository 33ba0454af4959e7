"""Prior calibration for the new branch, plus the base/new inference router.

The new branch never touches the adapters: its logits are a convex blend of
frozen backbone logits and zero-shot prior logits, weighted by the prior
gate's trust score b. Training the gate uses base-class data only, with a
classification term and a KL pull toward the prior distribution; gradients
reach nothing but the gate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add, cross_entropy, kl_div, l2_normalize, mul, softmax_temp
from .errors import ConfigError, ShapeError
from .gates import ReliabilityGate, StatsNormalizer, TrustScore
from .indicators import LogitBundle, build_brg_stats, fg_shift_index


def blend(z_full, z_clip, b):
    """Elementwise convex combination (1-b) * z_full + b * z_clip.

    ``b`` may be a plain probability or a graph Tensor.
    """
    z_full_arr = np.asarray(z_full, dtype=np.float64)
    z_clip_arr = np.asarray(z_clip, dtype=np.float64)
    if z_full_arr.shape != z_clip_arr.shape or z_full_arr.ndim != 1:
        raise ShapeError(
            f"logit length mismatch: {z_full_arr.shape} vs {z_clip_arr.shape}"
        )
    if isinstance(b, Tensor):
        one_minus = add(mul(b, -1.0), 1.0)
        return add(mul(one_minus, Tensor(z_full_arr)), mul(b, Tensor(z_clip_arr)))
    b = float(b)
    return (1.0 - b) * z_full_arr + b * z_clip_arr


@dataclass
class PcOutput:
    """Calibrated new-branch prediction with its blend diagnostics."""

    b: TrustScore
    z_pc: np.ndarray
    predicted_class: int


@dataclass
class PcSampleContext:
    """Frozen per-sample quantities for prior-gate training."""

    z_full: np.ndarray
    z_clip: np.ndarray
    p_clip: np.ndarray
    raw_stats: np.ndarray
    label: int


def prepare_pc_context(
    record,
    bank_backbone: np.ndarray,
    bank_prior: np.ndarray,
    class_indices: list[int],
    *,
    tau_d: float,
    scale: float,
    brg_mask: np.ndarray | None = None,
    label: int | None = None,
) -> PcSampleContext:
    """Backbone and prior logits over a class subset, plus gate statistics.

    Stored per-sample prior logits are sliced to the subset when present;
    otherwise the prior bank recomputes them from the full-image feature.
    """
    from .indicators import backbone_logits

    feat_full = l2_normalize(record.feat_full)
    z_full = backbone_logits(feat_full, l2_normalize(bank_backbone[class_indices]), scale)
    if record.z_clip is not None:
        z_clip = np.asarray(record.z_clip, dtype=np.float64)[class_indices]
    else:
        z_clip = backbone_logits(feat_full, l2_normalize(bank_prior[class_indices]), scale)
    bundle = LogitBundle(z_full=z_full, z_fg=z_full, z_clip=z_clip)
    raw = build_brg_stats(bundle, tau_d).as_vector()
    if brg_mask is not None:
        raw = raw * brg_mask
    if label is None:
        label = class_indices.index(record.label)
    return PcSampleContext(
        z_full=z_full,
        z_clip=z_clip,
        p_clip=softmax_temp(z_clip, tau_d),
        raw_stats=raw,
        label=label,
    )


def pc_loss_graph(
    ctx: PcSampleContext,
    gate: ReliabilityGate,
    normalizer: StatsNormalizer,
    *,
    tau_d: float,
    use_ce: bool = True,
    use_kl: bool = True,
) -> Tensor:
    """Calibration objective; gradients reach only the prior gate."""
    b, _ = gate.forward(normalizer.apply(ctx.raw_stats))
    z_pc = blend(ctx.z_full, ctx.z_clip, b)
    terms: list[Tensor] = []
    if use_ce:
        terms.append(cross_entropy(z_pc, ctx.label, tau_d))
    if use_kl:
        terms.append(kl_div(ctx.p_clip, softmax_temp(z_pc, tau_d)))
    if not terms:
        return Tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    return total


def pc_loss(
    record,
    bank_backbone: np.ndarray,
    bank_prior: np.ndarray,
    class_indices: list[int],
    gate: ReliabilityGate,
    normalizer: StatsNormalizer,
    *,
    tau_d: float,
    scale: float,
    use_ce: bool = True,
    use_kl: bool = True,
) -> Tensor:
    """Convenience single-record calibration loss."""
    if record.z_clip is None and bank_prior is None:
        raise ConfigError("prior logits or a prior bank are required for calibration")
    ctx = prepare_pc_context(
        record, bank_backbone, bank_prior, class_indices, tau_d=tau_d, scale=scale
    )
    return pc_loss_graph(ctx, gate, normalizer, tau_d=tau_d, use_ce=use_ce, use_kl=use_kl)


def calibrate(
    z_full: np.ndarray,
    z_clip: np.ndarray,
    gate: ReliabilityGate,
    normalizer: StatsNormalizer,
    *,
    tau_d: float,
    brg_mask: np.ndarray | None = None,
) -> PcOutput:
    """Inference-time blend of backbone and prior logits."""
    bundle = LogitBundle(z_full=np.asarray(z_full), z_fg=np.asarray(z_full), z_clip=np.asarray(z_clip))
    raw = build_brg_stats(bundle, tau_d).as_vector()
    if brg_mask is not None:
        raw = raw * brg_mask
    score = gate.score(normalizer.apply(raw))
    z_pc = blend(z_full, z_clip, score.value)
    return PcOutput(b=score, z_pc=z_pc, predicted_class=int(np.argmax(z_pc)))


@dataclass
class InferenceResult:
    """Predicted global class id plus branch diagnostics."""

    predicted_class: int
    branch: str
    trust: float
    d_fg: float
    logits: np.ndarray


def infer(record, branch: str, model, banks, split) -> InferenceResult:
    """Route one record through the base or new branch of a trained model.

    Base branch: compensated logits over the base classes (adapters applied
    to both image and class-text features); trust diagnostic is the
    foreground gate's r. New branch: calibrated blend over the new classes,
    never touching the adapters; trust diagnostic is the prior gate's b.
    When the model was trained without the calibration objective, the new
    branch falls back to the base machinery applied to the new classes
    (this is the configuration that exposes the base-new trade-off).

    The foreground-shift diagnostic always compares the branch's own logit
    path on the full image against the same path on the foreground view.
    """
    from .adapters import fdc_logits
    from .indicators import backbone_logits

    cfg = model.config
    if branch == "base":
        class_indices = list(split.base_classes)
    elif branch == "new":
        class_indices = list(split.new_classes)
    else:
        raise ConfigError(f"branch must be 'base' or 'new', got {branch!r}")
    if record.label not in class_indices and record.label >= 0:
        pass  # records of other classes may still be routed; caller filters

    bank = banks.feats_backbone[class_indices]
    bank = bank / np.linalg.norm(bank, axis=1, keepdims=True)
    feat_full = l2_normalize(record.feat_full)
    feat_fg = l2_normalize(record.feat_fg)
    scale, tau_d = cfg.logit_scale, cfg.tau_d

    use_pc = branch == "new" and cfg.pc_active
    if use_pc:
        if model.brg is None:
            raise ConfigError("model has no trained prior gate; run calibration training first")
        z_full = backbone_logits(feat_full, bank, scale)
        z_fg = backbone_logits(feat_fg, bank, scale)
        if record.z_clip is not None:
            z_clip = np.asarray(record.z_clip, dtype=np.float64)[class_indices]
        else:
            prior = banks.feats_prior[class_indices]
            prior = prior / np.linalg.norm(prior, axis=1, keepdims=True)
            z_clip = backbone_logits(feat_full, prior, scale)
        out = calibrate(
            z_full, z_clip, model.brg, model.brg_norm, tau_d=tau_d, brg_mask=model.brg_mask
        )
        predicted = class_indices[out.predicted_class]
        return InferenceResult(
            predicted_class=predicted,
            branch=branch,
            trust=out.b.value,
            d_fg=fg_shift_index(z_full, z_fg, tau_d),
            logits=out.z_pc,
        )

    if model.adapters is None:
        raise ConfigError("model has no trained adapters; run base training first")
    out_full = fdc_logits(feat_full, bank, model.adapters, scale, tau_d)
    out_fg = fdc_logits(feat_fg, bank, model.adapters, scale, tau_d)
    z_bb_full = backbone_logits(feat_full, bank, scale)
    z_bb_fg = backbone_logits(feat_fg, bank, scale)
    stats = build_frg_stats_for(record, z_bb_full, z_bb_fg, tau_d, model.frg_mask)
    trust = model.frg.score(model.frg_norm.apply(stats)).value if model.frg is not None else 0.5
    predicted = class_indices[int(np.argmax(out_full.z_fdc))]
    return InferenceResult(
        predicted_class=predicted,
        branch=branch,
        trust=trust,
        d_fg=fg_shift_index(out_full.z_fdc, out_fg.z_fdc, tau_d),
        logits=out_full.z_fdc,
    )


def build_frg_stats_for(record, z_full, z_fg, tau_d, mask) -> np.ndarray:
    from .indicators import build_frg_stats

    raw = build_frg_stats(
        LogitBundle(z_full=z_full, z_fg=z_fg), record.area_ratio, tau_d
    ).as_vector()
    return raw if mask is None else raw * mask
