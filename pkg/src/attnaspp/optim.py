"""Adam and the per-epoch cosine-annealing learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class NumericalError(FloatingPointError):
    """Raised when a loss or gradient stops being finite."""


def cosine_lr(eta_min: float, eta_max: float, t_cur: float, t_i: float) -> float:
    return eta_min + 0.5 * (eta_max - eta_min) * (1.0 + math.cos(t_cur / t_i * math.pi))


@dataclass
class CosineSchedule:
    """Cosine annealing from ``eta_max`` down to ``eta_min`` over ``t_i`` epochs.

    With ``restart=False`` (the default) the rate stays at ``eta_min`` once
    the cycle is over; with ``restart=True`` it jumps back to ``eta_max``.
    """

    eta_max: float = 1e-3
    eta_min: float = 0.0
    t_i: int = 100
    t_cur: int = 0
    restart: bool = False

    def __post_init__(self):
        if self.t_i <= 0:
            raise ValueError("t_i must be positive")
        if not 0 <= self.eta_min <= self.eta_max:
            raise ValueError("need 0 <= eta_min <= eta_max")

    def lr_at(self) -> float:
        return cosine_lr(self.eta_min, self.eta_max, min(self.t_cur, self.t_i), self.t_i)

    def epoch_tick(self) -> None:
        self.t_cur += 1
        if self.t_cur >= self.t_i:
            self.t_cur = 0 if self.restart else self.t_i


def lr_at(s: CosineSchedule) -> float:
    return s.lr_at()


def epoch_tick(s: CosineSchedule) -> None:
    s.epoch_tick()


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr: float = 1e-3
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], st: AdamState, lr: float | None = None) -> None:
    """One bias-corrected Adam update over ``{path: parameter}``.

    Parameters whose ``grad`` is ``None`` are skipped. Every gradient is
    checked before anything is modified, so a non-finite gradient leaves
    parameters and moments untouched.
    """
    lr = st.lr if lr is None else lr
    live = {k: p for k, p in params.items() if p.grad is not None}
    for name, p in live.items():
        if p.grad.shape != p.shape:
            raise ValueError(f"{name}: grad shape {p.grad.shape} != param shape {p.shape}")
        if not np.all(np.isfinite(p.grad)):
            bad = int(np.count_nonzero(~np.isfinite(p.grad)))
            raise NumericalError(f"non-finite gradient in {name} ({bad} entries)")
    st.t += 1
    c1 = 1.0 - st.beta1 ** st.t
    c2 = 1.0 - st.beta2 ** st.t
    for name, p in live.items():
        g = p.grad
        m = st.m.get(name)
        if m is None:
            m = st.m[name] = np.zeros_like(p.data)
            st.v[name] = np.zeros_like(p.data)
        v = st.v[name]
        m *= st.beta1
        m += (1.0 - st.beta1) * g
        v *= st.beta2
        v += (1.0 - st.beta2) * g * g
        step = (lr / c1) * m / (np.sqrt(v / c2) + st.eps)
        p.data = p.data - step.astype(p.dtype, copy=False)


def optimizer_state_entries(st: AdamState, sched: CosineSchedule) -> dict[str, np.ndarray]:
    out = {
        "optim.t": np.array([st.t], dtype=np.float64),
        "optim.hparams": np.array([st.beta1, st.beta2, st.eps, st.lr], dtype=np.float64),
        "optim.schedule": np.array([sched.eta_max, sched.eta_min, sched.t_i, sched.t_cur,
                                    float(sched.restart)], dtype=np.float64),
    }
    for name in st.m:
        out[f"optim.m.{name}"] = st.m[name]
        out[f"optim.v.{name}"] = st.v[name]
    return out


def optimizer_state_from_entries(entries: dict[str, np.ndarray]) -> tuple[AdamState, CosineSchedule]:
    b1, b2, eps, lr = (float(v) for v in entries["optim.hparams"])
    st = AdamState(beta1=b1, beta2=b2, eps=eps, lr=lr, t=int(entries["optim.t"][0]))
    for key, arr in entries.items():
        if key.startswith("optim.m."):
            st.m[key[len("optim.m."):]] = arr.copy()
        elif key.startswith("optim.v."):
            st.v[key[len("optim.v."):]] = arr.copy()
    eta_max, eta_min, t_i, t_cur, restart = entries["optim.schedule"]
    sched = CosineSchedule(eta_max=float(eta_max), eta_min=float(eta_min), t_i=int(t_i),
                           t_cur=int(t_cur), restart=bool(restart))
    return st, sched
