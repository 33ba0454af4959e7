"""Reliability gates: small MLPs mapping 3 statistics to a trust score.

The same architecture serves both gates (foreground trust ``r`` and prior
trust ``b``); they never share parameters because they consume different
statistics. The output layer is zero-initialized so an untrained gate emits
exactly 0.5, which makes early training behave like the ungated baseline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ParamSet, Tensor, add, bce, matmul, relu, reshape, sigmoid
from .errors import ConfigError, ShapeError

GATE_INPUT_DIM = 3
SUPPORTED_DEPTHS = (1, 2, 3)
_STD_FLOOR = 1e-6


def gate_layer_shapes(layers: int, hidden_dim: int, in_dim: int = GATE_INPUT_DIM):
    """Weight/bias shapes for each supported gate depth.

    Depth 1 is a single affine map to the scalar head; depths 2 and 3 insert
    one or two hidden layers of width ``hidden_dim``.
    """
    if layers not in SUPPORTED_DEPTHS:
        raise ConfigError(f"gate depth must be one of {SUPPORTED_DEPTHS}, got {layers!r}")
    if hidden_dim < 1:
        raise ConfigError(f"gate hidden dim must be >= 1, got {hidden_dim!r}")
    widths = [in_dim] + [hidden_dim] * (layers - 1) + [1]
    return [((widths[i + 1], widths[i]), (widths[i + 1],)) for i in range(layers)]


@dataclass
class TrustScore:
    """Sigmoid trust value together with its pre-sigmoid logit."""

    value: float
    pre_logit: float


class ReliabilityGate:
    """MLP with a scalar sigmoid head over a standardized statistics vector."""

    def __init__(
        self,
        hidden_dim: int = 32,
        layers: int = 2,
        rng: np.random.Generator | None = None,
        in_dim: int = GATE_INPUT_DIM,
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim = in_dim
        self.hidden_dim = hidden_dim
        self.layers = layers
        self.params = ParamSet()
        self._layers: list[tuple[Tensor, Tensor]] = []
        shapes = gate_layer_shapes(layers, hidden_dim, in_dim)
        for i, (w_shape, b_shape) in enumerate(shapes, start=1):
            last = i == len(shapes)
            if last:
                w = np.zeros(w_shape)
                b = np.zeros(b_shape)
            else:
                bound = 1.0 / np.sqrt(w_shape[1])
                w = rng.uniform(-bound, bound, size=w_shape)
                b = rng.uniform(-bound, bound, size=b_shape)
            self._layers.append((self.params.add(f"w{i}", w), self.params.add(f"b{i}", b)))

    def forward(self, stats: np.ndarray) -> tuple[Tensor, Tensor]:
        """Graph forward pass; returns (trust score r, pre-sigmoid logit q)."""
        stats = np.asarray(stats, dtype=np.float64)
        if stats.shape != (self.in_dim,):
            raise ShapeError(f"gate expects {self.in_dim} statistics, got shape {stats.shape}")
        h: Tensor = Tensor(stats)
        for i, (w, b) in enumerate(self._layers):
            h = add(matmul(w, h), b)
            if i < len(self._layers) - 1:
                h = relu(h)
        q = reshape(h, ())
        return sigmoid(q), q

    def score(self, stats: np.ndarray) -> TrustScore:
        """Inference forward pass returning plain floats."""
        r, q = self.forward(stats)
        return TrustScore(value=float(r.data), pre_logit=float(q.data))

    def param_count(self) -> int:
        return self.params.count()


def frg_loss(r, r_star):
    """Binary cross-entropy between the gate's trust score and its 0/1 target."""
    return bce(r, r_star)


def indicator_mask(enabled) -> np.ndarray:
    """0/1 mask zeroing disabled indicators while keeping the input width."""
    enabled = [bool(e) for e in enabled]
    if len(enabled) != GATE_INPUT_DIM:
        raise ShapeError(f"expected {GATE_INPUT_DIM} indicator flags, got {len(enabled)}")
    if not any(enabled):
        raise ConfigError("at least one gate indicator must stay enabled")
    return np.array(enabled, dtype=np.float64)


def apply_indicator_mask(stats: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return np.asarray(stats, dtype=np.float64) * mask


class StatsNormalizer:
    """Running per-component standardization, frozen after the first epoch.

    The gate inputs (entropy gap, cosine, area ratio) live on different
    scales; this centers and rescales them using Welford running moments
    accumulated over the first training epoch. Before any update it is the
    identity, so inference on an untrained model is well defined.
    """

    def __init__(self, dim: int = GATE_INPUT_DIM):
        self.dim = dim
        self.count = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)
        self.frozen = False

    def update(self, v: np.ndarray) -> None:
        if self.frozen:
            return
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.dim,):
            raise ShapeError(f"normalizer expects vectors of length {self.dim}")
        self.count += 1
        delta = v - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (v - self.mean)

    def freeze(self) -> None:
        self.frozen = True

    def apply(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if self.count == 0:
            return v.copy()
        std = np.sqrt(self.m2 / self.count)
        return (v - self.mean) / np.maximum(std, _STD_FLOOR)

    def state(self) -> dict:
        return {
            "count": self.count,
            "mean": self.mean.copy(),
            "m2": self.m2.copy(),
            "frozen": self.frozen,
        }

    @classmethod
    def from_state(cls, state: dict) -> "StatsNormalizer":
        mean = np.asarray(state["mean"], dtype=np.float64)
        out = cls(dim=mean.size)
        out.count = int(state["count"])
        out.mean = mean.copy()
        out.m2 = np.asarray(state["m2"], dtype=np.float64).copy()
        out.frozen = bool(state["frozen"])
        return out
