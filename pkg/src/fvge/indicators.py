"""Reliability statistics computed from frozen logits.

Everything here is a pure function of backbone/prior outputs: the logits of
the full image, of the foreground view, and optionally of the zero-shot
prior, plus the mask area ratio. These feed the two gates and the
foreground shift diagnostic; none of it carries gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import cosine, cross_entropy, entropy, kl_div, softmax_temp
from .errors import ConfigError, DomainError, ShapeError

N_FRG = 3
N_BRG = 3


@dataclass
class LogitBundle:
    """Per-sample logits over one class set.

    ``z_clip`` is the zero-shot prior row and may be absent for datasets
    exported without a prior bank.
    """

    z_full: np.ndarray
    z_fg: np.ndarray
    z_clip: np.ndarray | None = None
    class_count: int = 0

    def __post_init__(self):
        self.z_full = np.asarray(self.z_full, dtype=np.float64)
        self.z_fg = np.asarray(self.z_fg, dtype=np.float64)
        if self.class_count == 0:
            self.class_count = self.z_full.size
        for name, z in (("z_full", self.z_full), ("z_fg", self.z_fg)):
            if z.ndim != 1 or z.size != self.class_count:
                raise ShapeError(f"{name} must have length {self.class_count}, got shape {z.shape}")
        if self.z_clip is not None:
            self.z_clip = np.asarray(self.z_clip, dtype=np.float64)
            if self.z_clip.ndim != 1 or self.z_clip.size != self.class_count:
                raise ShapeError(
                    f"z_clip must have length {self.class_count}, got shape {self.z_clip.shape}"
                )


@dataclass
class FrgStats:
    """Inputs to the foreground gate: entropy gap, distribution cosine, area ratio."""

    delta_h: float
    cos_full_fg: float
    area_ratio: float

    def as_vector(self) -> np.ndarray:
        return np.array([self.delta_h, self.cos_full_fg, self.area_ratio], dtype=np.float64)


@dataclass
class BrgStats:
    """Inputs to the prior gate: both entropies and the distribution cosine."""

    h_full: float
    h_clip: float
    cos_full_clip: float

    def as_vector(self) -> np.ndarray:
        return np.array([self.h_full, self.h_clip, self.cos_full_clip], dtype=np.float64)


def backbone_logits(img_feat: np.ndarray, class_feats: np.ndarray, scale: float) -> np.ndarray:
    """Scaled inner products of a unit image feature against unit class rows."""
    if not np.isfinite(scale) or scale <= 0:
        raise ConfigError(f"logit scale must be positive, got {scale!r}")
    img_feat = np.asarray(img_feat, dtype=np.float64)
    class_feats = np.asarray(class_feats, dtype=np.float64)
    if img_feat.ndim != 1 or class_feats.ndim != 2 or class_feats.shape[1] != img_feat.size:
        raise ShapeError(
            f"feature dim mismatch: image {img_feat.shape} vs class bank {class_feats.shape}"
        )
    return float(scale) * (class_feats @ img_feat)


def frg_supervision(z_full, z_fg, label: int, tau_d: float) -> int:
    """1 when the foreground view classifies strictly better, else 0.

    Ties fall back to 0 (trust the full image).
    """
    loss_fg = cross_entropy(z_fg, label, tau_d)
    loss_full = cross_entropy(z_full, label, tau_d)
    return int(loss_fg < loss_full)


def build_frg_stats(bundle: LogitBundle, area_ratio: float, tau_d: float) -> FrgStats:
    area = float(area_ratio)
    if not 0.0 <= area <= 1.0:
        raise DomainError(f"area ratio must lie in [0, 1], got {area!r}")
    p_full = softmax_temp(bundle.z_full, tau_d)
    p_fg = softmax_temp(bundle.z_fg, tau_d)
    return FrgStats(
        delta_h=entropy(p_full) - entropy(p_fg),
        cos_full_fg=cosine(p_full, p_fg),
        area_ratio=area,
    )


def build_brg_stats(bundle: LogitBundle, tau_d: float) -> BrgStats:
    if bundle.z_clip is None:
        raise ConfigError("prior logits required to build prior-gate statistics")
    p_full = softmax_temp(bundle.z_full, tau_d)
    p_clip = softmax_temp(bundle.z_clip, tau_d)
    return BrgStats(
        h_full=entropy(p_full),
        h_clip=entropy(p_clip),
        cos_full_clip=cosine(p_full, p_clip),
    )


def fg_shift_index(z_full, z_fg, tau_d: float) -> float:
    """KL between the full-image and foreground prediction distributions.

    Large values mean the prediction ignores the foreground evidence.
    """
    p_full = softmax_temp(np.asarray(z_full, dtype=np.float64), tau_d)
    p_fg = softmax_temp(np.asarray(z_fg, dtype=np.float64), tau_d)
    return kl_div(p_full, p_fg)
