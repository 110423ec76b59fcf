"""Central finite-difference check of tape gradients through DAIN and a model."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .models import ModelConfig, build_model
from .normalization import Dain, DainMode
from .tensor import Tensor, backward, no_grad
from .training import cross_entropy_loss

TOLERANCE = 1e-6
STEP = 1e-5


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))


def numeric_gradient(f, value: np.ndarray, h: float = STEP) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``value`` (mutated in place)."""
    grad = np.zeros_like(value)
    flat = value.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        out[i] = (up - down) / (2.0 * h)
    return grad


@dataclass
class GradcheckReport:
    model: str
    mode: str
    seed: int
    group_errors: dict[str, float] = field(default_factory=dict)
    tolerance: float = TOLERANCE

    @property
    def max_rel_err(self) -> float:
        return max(self.group_errors.values()) if self.group_errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance

    def line(self) -> str:
        groups = " ".join(f"err_{k}={v:.3e}" for k, v in sorted(self.group_errors.items()))
        status = "PASS" if self.passed else "FAIL"
        return f"model={self.model} mode={self.mode} seed={self.seed} max_rel_err={self.max_rel_err:.3e} {groups} status={status}"


def gradcheck_dain(model_kind: str, mode="full", d: int = 4, L: int = 5, seed: int = 0, hidden: int = 8, batch: int = 3, input_only: bool = False) -> GradcheckReport:
    """Compare tape gradients with central differences for every group and the input.

    The DAIN weights are perturbed away from their identity initialization so
    every sublayer contributes a non-trivial Jacobian.  With ``input_only`` the
    parameters are treated as frozen and only the input gradient is checked.
    """
    if d > 6 or L > 8 or hidden > 8:
        raise ValueError("gradient checks are meant for small dims (d <= 6, L <= 8, hidden <= 8)")
    mode = DainMode.parse(mode)
    rng = np.random.default_rng(seed)
    config = ModelConfig(kind=model_kind, window=L, features=d, n_classes=3, hidden=hidden, filters=hidden, recurrent=hidden, kernel=min(3, L), dropout=0.0)
    model = build_model(config, rng)
    norm = Dain(d, mode, rng)
    p = norm.params
    p.W_a.data = np.eye(d) + 0.1 * rng.normal(size=(d, d))
    p.W_b.data = np.eye(d) + 0.1 * rng.normal(size=(d, d))
    p.W_c.data = rng.normal(0.0, 0.5, size=(d, d))
    p.d_bias.data = rng.normal(0.0, 0.5, size=d)

    x = Tensor(rng.uniform(-2.0, 2.0, size=(batch, L, d)), requires_grad=True)
    labels = rng.integers(0, 3, size=batch)

    def loss_value() -> float:
        with no_grad():
            return cross_entropy_loss(model(norm(x.data)), labels).item()

    loss = cross_entropy_loss(model(norm(x)), labels)
    backward(loss)

    report = GradcheckReport(model=model_kind, mode=mode.value, seed=seed)
    checks: list[tuple[str, Tensor]] = [("input", x)]
    if not input_only:
        checks += [(q.group, q) for q in norm.parameters()]
        checks += [("net", q) for q in model.parameters()]
    for group, tensor in checks:
        numeric = numeric_gradient(loss_value, tensor.data)
        err = float(relative_error(tensor.grad, numeric).max())
        report.group_errors[group] = max(report.group_errors.get(group, 0.0), err)
    return report
