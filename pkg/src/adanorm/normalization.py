"""Adaptive input normalization and the fixed baseline normalizers.

All functions accept a single window ``(L, d)`` or a batch ``(B, L, d)``;
the time axis is always second to last.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .tensor import DimensionError, Parameter, Tensor, as_tensor, guard_nonzero, matmul, reduce_mean, sigmoid, sqrt

EPS = 1e-8
TIME_AXIS = -2


class DainMode(str, enum.Enum):
    SHIFT = "shift"
    SHIFT_SCALE = "shift_scale"
    FULL = "full"

    @classmethod
    def parse(cls, value: "str | DainMode") -> "DainMode":
        if isinstance(value, cls):
            return value
        aliases = {"1": cls.SHIFT, "1+2": cls.SHIFT_SCALE, "1+2+3": cls.FULL}
        key = str(value).strip().lower()
        if key in aliases:
            return aliases[key]
        return cls(key)


BASELINE_KINDS = ("none", "sample_avg", "instance", "batchnorm")


def _expand_time(v: Tensor) -> Tensor:
    """(..., d) -> (..., 1, d) so a per-window vector broadcasts over time."""
    return v.reshape(v.shape[:-1] + (1, v.shape[-1]))


def _check_window(x: Tensor) -> None:
    if x.ndim not in (2, 3):
        raise DimensionError(f"expected (L, d) or (B, L, d) window, got shape {x.shape}")
    if x.shape[TIME_AXIS] < 1:
        raise DimensionError("window has no time steps")


# -- adaptive sublayers ---------------------------------------------------


def adaptive_shift(x, W_a) -> tuple[Tensor, Tensor]:
    """Return ``(alpha, x - alpha)`` with ``alpha = W_a @ mean_t(x)``."""
    x = as_tensor(x)
    _check_window(x)
    a = reduce_mean(x, axis=TIME_AXIS)
    alpha = matmul(a, as_tensor(W_a).T)
    return alpha, x - _expand_time(alpha)


def adaptive_scale(shifted, W_b, eps: float = EPS) -> tuple[Tensor, Tensor]:
    """Return ``(beta, shifted / guard(beta))``.

    ``beta = W_b @ b`` where ``b`` is the per-feature root mean square of the
    shifted window (population form, no Bessel correction).
    """
    shifted = as_tensor(shifted)
    b = sqrt(reduce_mean(shifted * shifted, axis=TIME_AXIS))
    beta = matmul(b, as_tensor(W_b).T)
    return beta, shifted / _expand_time(guard_nonzero(beta, eps))


def adaptive_gate(scaled, W_c, d_bias) -> tuple[Tensor, Tensor]:
    """Return ``(gamma, scaled * gamma)`` with ``gamma = sigm(W_c @ mean_t(scaled) + d)``."""
    scaled = as_tensor(scaled)
    c = reduce_mean(scaled, axis=TIME_AXIS)
    gamma = sigmoid(matmul(c, as_tensor(W_c).T) + d_bias)
    return gamma, scaled * _expand_time(gamma)


@dataclass
class DainParams:
    W_a: Parameter
    W_b: Parameter
    W_c: Parameter
    d_bias: Parameter
    mode: DainMode

    def __post_init__(self):
        object.__setattr__(self, "mode", DainMode.parse(self.mode))
        d = self.W_a.shape[0]
        for p in (self.W_a, self.W_b, self.W_c):
            if p.shape != (d, d):
                raise DimensionError(f"{p.name} must be {d}x{d}, got {p.shape}")
        if self.d_bias.shape != (d,):
            raise DimensionError(f"d_bias must have shape ({d},), got {self.d_bias.shape}")

    def __setattr__(self, name, value):
        if name == "mode" and "mode" in self.__dict__:
            raise AttributeError("DainParams.mode is fixed at construction")
        super().__setattr__(name, value)

    @property
    def dim(self) -> int:
        return self.W_a.shape[0]

    @classmethod
    def init(cls, d: int, mode="full", rng=None, gate_std: float = 0.01) -> "DainParams":
        """Identity shift/scale weights; small-normal gating weights, zero gate bias."""
        rng = np.random.default_rng(rng)
        return cls(
            W_a=Parameter(np.eye(d), group="a", name="dain.W_a"),
            W_b=Parameter(np.eye(d), group="b", name="dain.W_b"),
            W_c=Parameter(rng.normal(0.0, gate_std, size=(d, d)), group="c", name="dain.W_c"),
            d_bias=Parameter(np.zeros(d), group="c", name="dain.d_bias"),
            mode=mode,
        )

    def parameters(self) -> list[Parameter]:
        params = [self.W_a]
        if self.mode in (DainMode.SHIFT_SCALE, DainMode.FULL):
            params.append(self.W_b)
        if self.mode is DainMode.FULL:
            params += [self.W_c, self.d_bias]
        return params

    def all_parameters(self) -> list[Parameter]:
        return [self.W_a, self.W_b, self.W_c, self.d_bias]


def dain_forward(x, params: DainParams) -> Tensor:
    x = as_tensor(x)
    _check_window(x)
    if x.shape[-1] != params.dim:
        raise DimensionError(f"window has {x.shape[-1]} features, layer expects {params.dim}")
    _, out = adaptive_shift(x, params.W_a)
    if params.mode is DainMode.SHIFT:
        return out
    _, out = adaptive_scale(out, params.W_b)
    if params.mode is DainMode.SHIFT_SCALE:
        return out
    _, out = adaptive_gate(out, params.W_c, params.d_bias)
    return out


# -- fixed schemes --------------------------------------------------------


@dataclass
class GlobalStats:
    mu: np.ndarray
    sigma: np.ndarray

    @classmethod
    def fit(cls, windows: np.ndarray) -> "GlobalStats":
        """Per-feature mean and population std over every row of every window."""
        rows = np.asarray(windows, dtype=np.float64).reshape(-1, np.shape(windows)[-1])
        if rows.shape[0] == 0:
            raise ValueError("cannot fit global statistics on an empty set")
        return cls(mu=rows.mean(axis=0), sigma=rows.std(axis=0))


def zscore_normalize(x, stats: GlobalStats, eps: float = EPS) -> Tensor:
    x = as_tensor(x)
    return (x - stats.mu) / np.maximum(stats.sigma, eps)


@dataclass
class BatchNormState:
    dim: int
    momentum: float = 0.1
    running_mean: np.ndarray = field(default=None)
    running_var: np.ndarray = field(default=None)
    updates: int = 0

    def __post_init__(self):
        if not 0.0 < self.momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        if self.running_mean is None:
            self.running_mean = np.zeros(self.dim)
        if self.running_var is None:
            self.running_var = np.ones(self.dim)


def _batchnorm(x: Tensor, state: BatchNormState, training: bool, eps: float) -> Tensor:
    if training:
        if x.ndim != 3:
            raise DimensionError("batchnorm training needs a (B, L, d) batch")
        mean = reduce_mean(x, axis=(0, 1))
        centered = x - mean
        var = reduce_mean(centered * centered, axis=(0, 1))
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mean.data
        state.running_var = (1 - m) * state.running_var + m * var.data
        state.updates += 1
        return centered / sqrt(var + eps)
    if state.updates == 0:
        raise RuntimeError("batchnorm inference before any training update")
    return (x - state.running_mean) / np.sqrt(state.running_var + eps)


def instance_normalize(x, eps: float = EPS) -> Tensor:
    """Per-window, per-feature z-score with the same sign-preserving guard."""
    x = as_tensor(x)
    centered = x - _expand_time(reduce_mean(x, axis=TIME_AXIS))
    std = sqrt(reduce_mean(centered * centered, axis=TIME_AXIS))
    return centered / _expand_time(guard_nonzero(std, eps))


def baseline_normalize(x, kind: str, state: BatchNormState | None = None, training: bool = False, eps: float = EPS) -> Tensor:
    x = as_tensor(x)
    _check_window(x)
    if kind == "none":
        return x
    if kind == "sample_avg":
        return x - _expand_time(reduce_mean(x, axis=TIME_AXIS))
    if kind == "instance":
        return instance_normalize(x, eps)
    if kind == "batchnorm":
        if state is None:
            raise ValueError("batchnorm needs a BatchNormState")
        # batch-norm standardization uses the additive eps inside the root
        return _batchnorm(x, state, training, 1e-5)
    raise ValueError(f"unknown baseline kind {kind!r}")


# -- stateful wrappers used by the trainer --------------------------------


class Normalizer:
    """Callable input-normalization stage with optional trainable parameters."""

    kind = "none"

    def fit(self, windows: np.ndarray) -> "Normalizer":
        return self

    def __call__(self, x, training: bool = False) -> Tensor:
        return baseline_normalize(x, "none")

    def parameters(self) -> list[Parameter]:
        return []

    def state_dict(self) -> dict[str, np.ndarray]:
        return {}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        pass


class ZScore(Normalizer):
    kind = "zscore"

    def __init__(self, stats: GlobalStats | None = None):
        self.stats = stats

    def fit(self, windows):
        self.stats = GlobalStats.fit(windows)
        return self

    def __call__(self, x, training=False):
        if self.stats is None:
            raise RuntimeError("z-score normalizer used before fit()")
        return zscore_normalize(x, self.stats)

    def state_dict(self):
        return {"mu": self.stats.mu, "sigma": self.stats.sigma}

    def load_state_dict(self, state):
        self.stats = GlobalStats(mu=np.array(state["mu"]), sigma=np.array(state["sigma"]))


class SampleAvg(Normalizer):
    kind = "sample_avg"

    def __call__(self, x, training=False):
        return baseline_normalize(x, "sample_avg")


class InstanceNorm(Normalizer):
    kind = "instance"

    def __call__(self, x, training=False):
        return baseline_normalize(x, "instance")


class BatchNorm(Normalizer):
    kind = "batchnorm"

    def __init__(self, dim: int, momentum: float = 0.1):
        self.state = BatchNormState(dim=dim, momentum=momentum)

    def __call__(self, x, training=False):
        return baseline_normalize(x, "batchnorm", self.state, training)

    def state_dict(self):
        return {
            "running_mean": self.state.running_mean,
            "running_var": self.state.running_var,
            "updates": np.array([self.state.updates], dtype=np.float64),
        }

    def load_state_dict(self, state):
        self.state.running_mean = np.array(state["running_mean"])
        self.state.running_var = np.array(state["running_var"])
        self.state.updates = int(state["updates"][0])


class Dain(Normalizer):
    kind = "dain"

    def __init__(self, dim: int, mode="full", rng=None):
        self.params = DainParams.init(dim, mode, rng)

    @property
    def mode(self) -> DainMode:
        return self.params.mode

    def __call__(self, x, training=False):
        return dain_forward(x, self.params)

    def parameters(self):
        return self.params.parameters()

    def state_dict(self):
        return {p.name: p.data for p in self.params.all_parameters()}

    def load_state_dict(self, state):
        for p in self.params.all_parameters():
            value = np.asarray(state[p.name], dtype=np.float64)
            if value.shape != p.shape:
                raise DimensionError(f"{p.name}: checkpoint shape {value.shape} != {p.shape}")
            p.data = value.copy()


NORMALIZER_KINDS = ("none", "zscore", "sample_avg", "batchnorm", "instance", "dain")


def make_normalizer(kind: str, dim: int, mode="full", rng=None) -> Normalizer:
    if kind == "none":
        return Normalizer()
    if kind == "zscore":
        return ZScore()
    if kind == "sample_avg":
        return SampleAvg()
    if kind == "instance":
        return InstanceNorm()
    if kind == "batchnorm":
        return BatchNorm(dim)
    if kind == "dain":
        return Dain(dim, mode, rng)
    raise ValueError(f"unknown normalizer kind {kind!r}; expected one of {NORMALIZER_KINDS}")
