"""Bottleneck residual adapters and the base-branch training objective.

The adapters re-project frozen image/text features: out = L2Norm(x + MLP(x))
with a two-layer bottleneck MLP (hidden width strictly below the feature
dim). The up-projection starts at zero, so an untrained adapter pair
reproduces the frozen backbone's logits exactly (up to normalization
round-off), and training starts from the backbone's behavior.

The base-branch loss combines classification of the compensated logits,
the foreground gate's supervision term, and a trust-weighted distillation
that pulls the compensated distribution toward whichever frozen view the
gate currently trusts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ParamSet,
    Tensor,
    add,
    cross_entropy,
    kl_div,
    l2_normalize,
    matmul,
    mul,
    relu,
    softmax_temp,
    transpose,
)
from .errors import ConfigError, ShapeError
from .gates import ReliabilityGate, StatsNormalizer, frg_loss
from .indicators import LogitBundle, backbone_logits, build_frg_stats, frg_supervision


class BottleneckAdapter:
    """Residual two-layer bottleneck re-projection with unit-norm output."""

    def __init__(self, dim: int, hidden_dim: int = 64, rng: np.random.Generator | None = None):
        if hidden_dim >= dim:
            raise ConfigError(
                f"bottleneck width must be smaller than the feature dim ({hidden_dim} >= {dim})"
            )
        if hidden_dim < 1:
            raise ConfigError(f"bottleneck width must be >= 1, got {hidden_dim}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dim = dim
        self.hidden_dim = hidden_dim
        bound = 1.0 / np.sqrt(dim)
        self.params = ParamSet()
        self.w_down = self.params.add("w_down", rng.uniform(-bound, bound, size=(hidden_dim, dim)))
        self.b_down = self.params.add("b_down", rng.uniform(-bound, bound, size=hidden_dim))
        self.w_up = self.params.add("w_up", np.zeros((dim, hidden_dim)))
        self.b_up = self.params.add("b_up", np.zeros(dim))

    def forward(self, feat) -> Tensor:
        """Adapt one feature vector or a matrix of row features."""
        x = feat if isinstance(feat, Tensor) else Tensor(np.asarray(feat, dtype=np.float64))
        if x.data.ndim == 1:
            if x.data.shape[0] != self.dim:
                raise ShapeError(f"expected dim {self.dim}, got {x.data.shape}")
            h = relu(add(matmul(self.w_down, x), self.b_down))
            bump = add(matmul(self.w_up, h), self.b_up)
        elif x.data.ndim == 2:
            if x.data.shape[1] != self.dim:
                raise ShapeError(f"expected row dim {self.dim}, got {x.data.shape}")
            h = relu(add(matmul(x, transpose(self.w_down)), self.b_down))
            bump = add(matmul(h, transpose(self.w_up)), self.b_up)
        else:
            raise ShapeError(f"adapter input must be 1-d or 2-d, got ndim={x.data.ndim}")
        return l2_normalize(add(x, bump))


@dataclass
class AdapterPair:
    """Visual adapter plus an optional textual twin (disjoint parameters)."""

    visual: BottleneckAdapter
    textual: BottleneckAdapter | None

    @classmethod
    def create(
        cls,
        dim: int,
        hidden_dim: int,
        rng: np.random.Generator,
        textual: bool = True,
    ) -> "AdapterPair":
        return cls(
            visual=BottleneckAdapter(dim, hidden_dim, rng),
            textual=BottleneckAdapter(dim, hidden_dim, rng) if textual else None,
        )

    def registry(self) -> ParamSet:
        parts = {"visual": self.visual.params}
        if self.textual is not None:
            parts["textual"] = self.textual.params
        return ParamSet.union(parts)

    def adapt_bank(self, class_feats: np.ndarray) -> Tensor:
        """Re-project the class-text rows; identity bank when textual is off."""
        if self.textual is None:
            return Tensor(np.asarray(class_feats, dtype=np.float64))
        return self.textual.forward(class_feats)


def adapt(feat, side: str, pair: AdapterPair) -> Tensor:
    """Spec-level entry point: adapt a feature on the named branch."""
    if side == "visual":
        return pair.visual.forward(feat)
    if side == "textual":
        if pair.textual is None:
            raise ConfigError("textual adapter is disabled")
        return pair.textual.forward(feat)
    raise ConfigError(f"unknown adapter side {side!r}")


@dataclass
class CompensatedLogits:
    """Inference view of the compensated prediction."""

    z_fdc: np.ndarray
    p_fdc: np.ndarray


def fdc_logits_graph(
    img_feat,
    adapted_bank: Tensor,
    pair: AdapterPair,
    scale: float,
    tau_d: float,
) -> tuple[Tensor, Tensor]:
    """Differentiable compensated logits and their tempered distribution."""
    v = pair.visual.forward(img_feat)
    z = mul(matmul(adapted_bank, v), float(scale))
    return z, softmax_temp(z, tau_d)


def fdc_logits(
    img_feat: np.ndarray,
    class_feats: np.ndarray,
    pair: AdapterPair,
    scale: float,
    tau_d: float,
) -> CompensatedLogits:
    """Inference-time compensated logits (plain arrays)."""
    z, p = fdc_logits_graph(img_feat, pair.adapt_bank(class_feats), pair, scale, tau_d)
    return CompensatedLogits(z_fdc=z.data.copy(), p_fdc=p.data.copy())


def distill_loss(r, p_fg, p_full, p_fdc):
    """Trust-weighted sum of forward KL terms toward the two frozen views.

    ``r`` weights the foreground target; ``1 - r`` the full-image fallback.
    Accepts a Tensor trust score so its gradient reaches the gate.
    """
    kl_fg = kl_div(p_fg, p_fdc)
    kl_full = kl_div(p_full, p_fdc)
    if isinstance(r, Tensor) or isinstance(kl_fg, Tensor) or isinstance(kl_full, Tensor):
        r_t = r if isinstance(r, Tensor) else Tensor(float(r))
        one_minus = add(mul(r_t, -1.0), 1.0)
        return add(mul(r_t, kl_fg), mul(one_minus, kl_full))
    return float(r) * kl_fg + (1.0 - float(r)) * kl_full


@dataclass
class BaseSampleContext:
    """Frozen per-sample quantities reused across epochs of base training."""

    feat_full: np.ndarray
    p_full: np.ndarray
    p_fg: np.ndarray
    raw_stats: np.ndarray
    r_star: int
    label: int


def base_loss_graph(
    ctx: BaseSampleContext,
    adapted_bank: Tensor,
    pair: AdapterPair,
    gate: ReliabilityGate,
    normalizer: StatsNormalizer,
    *,
    tau_d: float,
    scale: float,
    lambda_d: float,
    use_ce: bool = True,
    use_frg: bool = True,
    use_dist: bool = True,
    stop_grad_trust: bool = False,
) -> Tensor:
    """Single-sample base-branch objective as a graph node.

    Gradients reach only the adapter pair and the foreground gate; the
    backbone views enter as constants. Disabled terms contribute exactly 0.
    """
    if lambda_d < 0:
        raise ConfigError(f"distillation weight must be nonnegative, got {lambda_d}")
    terms: list[Tensor] = []
    if use_ce or use_dist:
        z_fdc, p_fdc = fdc_logits_graph(ctx.feat_full, adapted_bank, pair, scale, tau_d)
    if use_frg or use_dist:
        r, _ = gate.forward(normalizer.apply(ctx.raw_stats))
    if use_ce:
        terms.append(cross_entropy(z_fdc, ctx.label, tau_d))
    if use_frg:
        terms.append(frg_loss(r, ctx.r_star))
    if use_dist and lambda_d > 0:
        r_dist = r.detach() if stop_grad_trust else r
        terms.append(mul(distill_loss(r_dist, ctx.p_fg, ctx.p_full, p_fdc), float(lambda_d)))
    if not terms:
        return Tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    return total


def base_loss(
    record,
    bank_backbone: np.ndarray,
    pair: AdapterPair,
    gate: ReliabilityGate,
    normalizer: StatsNormalizer,
    *,
    tau_d: float,
    scale: float,
    lambda_d: float,
    frg_mask: np.ndarray | None = None,
    **toggles,
) -> Tensor:
    """Convenience single-record base loss over a raw dataset record."""
    ctx = prepare_base_context(
        record, bank_backbone, tau_d=tau_d, scale=scale, frg_mask=frg_mask
    )
    adapted = pair.adapt_bank(bank_backbone)
    return base_loss_graph(
        ctx, adapted, pair, gate, normalizer,
        tau_d=tau_d, scale=scale, lambda_d=lambda_d, **toggles,
    )


def prepare_base_context(
    record,
    bank_backbone: np.ndarray,
    *,
    tau_d: float,
    scale: float,
    frg_mask: np.ndarray | None = None,
    label: int | None = None,
) -> BaseSampleContext:
    """Precompute the frozen backbone views and gate statistics for a record."""
    feat_full = l2_normalize(record.feat_full)
    feat_fg = l2_normalize(record.feat_fg)
    label = record.label if label is None else label
    z_full = backbone_logits(feat_full, bank_backbone, scale)
    z_fg = backbone_logits(feat_fg, bank_backbone, scale)
    stats = build_frg_stats(LogitBundle(z_full=z_full, z_fg=z_fg), record.area_ratio, tau_d)
    raw = stats.as_vector()
    if frg_mask is not None:
        raw = raw * frg_mask
    return BaseSampleContext(
        feat_full=feat_full,
        p_full=softmax_temp(z_full, tau_d),
        p_fg=softmax_temp(z_fg, tau_d),
        raw_stats=raw,
        r_star=frg_supervision(z_full, z_fg, label, tau_d),
        label=label,
    )
