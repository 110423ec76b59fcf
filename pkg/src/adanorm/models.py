"""Downstream classifiers: MLP, valid 1-D CNN and single-layer GRU.

Every model takes a batch of windows ``(B, L, d)`` (or a single ``(L, d)``
window) and returns logits ``(B, n_classes)`` (or ``(n_classes,)``).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .tensor import DimensionError, Parameter, Tensor, as_tensor, relu, sigmoid, tanh, unfold_time

CHECKPOINT_FORMAT = "adanorm-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    kind: str = "mlp"
    window: int = 15
    features: int = 144
    n_classes: int = 3
    hidden: int = 512
    filters: int = 256
    kernel: int = 3
    recurrent: int = 256
    dropout: float = 0.5
    init: str = "uniform"

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {tuple(MODEL_KINDS)}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.init not in ("uniform", "normal"):
            raise ValueError("init must be 'uniform' or 'normal'")


def _weight(rng, fan_in: int, shape, scheme: str, name: str) -> Parameter:
    bound = np.sqrt(1.0 / fan_in)
    if scheme == "normal":
        values = rng.normal(0.0, bound, size=shape)
    else:
        values = rng.uniform(-bound, bound, size=shape)
    return Parameter(values, group="net", name=name)


class Model:
    """Shared plumbing: parameter registry, dropout head, single-window calls."""

    def __init__(self, config: ModelConfig, rng=None):
        self.config = config
        self._params: dict[str, Parameter] = {}
        self._rng = np.random.default_rng(rng)

    def _add(self, name: str, fan_in: int, shape) -> Parameter:
        p = _weight(self._rng, fan_in, shape, self.config.init, name)
        self._params[name] = p
        return p

    def parameters(self) -> list[Parameter]:
        return list(self._params.values())

    def named_parameters(self) -> dict[str, Parameter]:
        return dict(self._params)

    def _build_head(self, in_size: int) -> None:
        h, n = self.config.hidden, self.config.n_classes
        self._add("head.W1", in_size, (in_size, h))
        self._add("head.b1", in_size, (h,))
        self._add("head.W2", h, (h, n))
        self._add("head.b2", h, (n,))

    def _head(self, flat: Tensor, training: bool, rng) -> Tensor:
        p = self._params
        hidden = relu(flat @ p["head.W1"] + p["head.b1"])
        rate = self.config.dropout
        if training and rate > 0.0:
            if rng is None:
                raise ValueError("dropout in training mode needs an rng")
            keep = rng.random(hidden.shape) >= rate
            hidden = hidden * (keep / (1.0 - rate))
        return hidden @ p["head.W2"] + p["head.b2"]

    def _body(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def __call__(self, x, training: bool = False, rng=None) -> Tensor:
        x = as_tensor(x)
        single = x.ndim == 2
        if single:
            x = x.reshape((1,) + x.shape)
        if x.ndim != 3 or x.shape[1:] != (self.config.window, self.config.features):
            raise DimensionError(
                f"{self.config.kind}: expected windows of shape "
                f"({self.config.window}, {self.config.features}), got {x.shape}"
            )
        logits = self._head(self._body(x), training, rng)
        return logits.reshape(logits.shape[1:]) if single else logits


class MLP(Model):
    """Time-major flatten, one ReLU hidden layer, dropout, linear output."""

    def __init__(self, config: ModelConfig, rng=None):
        super().__init__(config, rng)
        self._build_head(config.window * config.features)

    def _body(self, x):
        return x.reshape(x.shape[0], -1)


class CNN(Model):
    """Valid stride-1 convolution over time, ReLU, flatten, then the MLP head."""

    def __init__(self, config: ModelConfig, rng=None):
        super().__init__(config, rng)
        if config.window < config.kernel:
            raise DimensionError(f"window {config.window} shorter than kernel {config.kernel}")
        fan_in = config.kernel * config.features
        self._add("conv.W", fan_in, (fan_in, config.filters))
        self._add("conv.b", fan_in, (config.filters,))
        self._build_head(config.filters * (config.window - config.kernel + 1))

    def _body(self, x):
        cols = unfold_time(x, self.config.kernel)
        maps = relu(cols @ self._params["conv.W"] + self._params["conv.b"])
        return maps.reshape(x.shape[0], -1)


class GRU(Model):
    """Single GRU layer from h0 = 0; the last hidden state feeds the head.

    z = sigm(x Wz + h Uz + bz), r = sigm(x Wr + h Ur + br),
    h~ = tanh(x Wh + (r * h) Uh + bh), h' = (1 - z) * h + z * h~.
    """

    def __init__(self, config: ModelConfig, rng=None):
        super().__init__(config, rng)
        d, hs = config.features, config.recurrent
        for gate in ("z", "r", "h"):
            self._add(f"gru.W{gate}", hs, (d, hs))
            self._add(f"gru.U{gate}", hs, (hs, hs))
            self._add(f"gru.b{gate}", hs, (hs,))
        self._build_head(hs)

    def cell(self, x_t: Tensor, h: Tensor) -> Tensor:
        p = self._params
        z = sigmoid(x_t @ p["gru.Wz"] + h @ p["gru.Uz"] + p["gru.bz"])
        r = sigmoid(x_t @ p["gru.Wr"] + h @ p["gru.Ur"] + p["gru.br"])
        candidate = tanh(x_t @ p["gru.Wh"] + (r * h) @ p["gru.Uh"] + p["gru.bh"])
        return (1.0 - z) * h + z * candidate

    def hidden_states(self, x: Tensor) -> list[Tensor]:
        h = Tensor(np.zeros((x.shape[0], self.config.recurrent)))
        states = []
        for t in range(x.shape[1]):
            h = self.cell(x[:, t, :], h)
            states.append(h)
        return states

    def _body(self, x):
        return self.hidden_states(x)[-1]


MODEL_KINDS = {"mlp": MLP, "cnn": CNN, "gru": GRU}


def build_model(config: ModelConfig, rng=None) -> Model:
    return MODEL_KINDS[config.kind](config, rng)


# -- checkpoints ----------------------------------------------------------


def save_checkpoint(path, tensors: dict[str, np.ndarray], config: dict) -> None:
    """Write named float64 tensors plus a JSON header into one ``.npz`` file."""
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "tensors": {name: list(np.shape(v)) for name, v in tensors.items()},
        "config": config,
    }
    arrays = {f"t/{name}": np.asarray(v, dtype=np.float64) for name, v in tensors.items()}
    arrays["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with open(Path(path), "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(Path(path), allow_pickle=False) as data:
        header = json.loads(bytes(data["header"]).decode())
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not an adanorm checkpoint")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
        tensors = {name: data[f"t/{name}"].copy() for name in header["tensors"]}
    return tensors, header["config"]


def model_state(model: Model) -> dict[str, np.ndarray]:
    return {name: p.data for name, p in model.named_parameters().items()}


def load_model_state(model: Model, tensors: dict[str, np.ndarray]) -> None:
    for name, p in model.named_parameters().items():
        if name not in tensors:
            raise KeyError(f"checkpoint lacks tensor {name!r}")
        value = tensors[name]
        if value.shape != p.shape:
            raise DimensionError(f"{name}: checkpoint shape {value.shape} != model shape {p.shape}")
        p.data = np.array(value, dtype=np.float64)


def config_dict(config: ModelConfig) -> dict:
    return asdict(config)
