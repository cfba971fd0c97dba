"""Central finite-difference checks for every differentiable op.

Each case builds float64 inputs from a seeded generator and a function
returning a tensor. The scalar being differentiated is ``sum(out * R)`` for a
fixed random ``R``, so every output element contributes with a generic weight.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import layers as L
from .metrics import dice_bce_loss
from .tensor import Tape, Tensor, concat, matmul_1x1, mul, relu, sigmoid
from .tensor import sum as tsum

H_STEP = 1e-4
TOLERANCE = 1e-5
# denominators below this are treated as absolute error (near-zero gradients)
REL_FLOOR = 1e-3


@dataclass
class GradcheckResult:
    name: str
    seed: int
    max_rel_err: float
    n_checked: int
    tol: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_err) and self.max_rel_err < self.tol)


Case = Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]


def _leaf(rng, shape, lo=-1.0, hi=1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape).astype(np.float64), requires_grad=True)


def _module_leaves(m: L.Module) -> list[Tensor]:
    return m.parameters()


def _shape(rng, n_max=3, c_max=3, hw=(4, 6)) -> tuple:
    return (int(rng.integers(1, n_max + 1)), int(rng.integers(1, c_max + 1)),
            int(rng.choice(hw)), int(rng.choice(hw)))


def _conv_case(dilation: int, stride: int = 1, k: int = 3) -> Case:
    def build(rng):
        n, c, h, w = _shape(rng)
        x = _leaf(rng, (n, c, h, w))
        cout = int(rng.integers(1, 4))
        wt = _leaf(rng, (cout, c, k, k))
        b = _leaf(rng, (cout,))
        pad = dilation * (k - 1) // 2
        return (lambda: L.conv2d(x, wt, b, stride, dilation, pad)), [x, wt, b]
    return build


def _matmul_case(rng):
    n, c, h, w = _shape(rng)
    x = _leaf(rng, (n, c, h, w))
    wt = _leaf(rng, (c, int(rng.integers(1, 4))))
    b = _leaf(rng, (wt.shape[1],))
    return (lambda: matmul_1x1(x, wt, b)), [x, wt, b]


def _batchnorm_case(training: bool) -> Case:
    def build(rng):
        n, c, h, w = _shape(rng)
        bn = L.BatchNorm2d(c, dtype=np.float64)
        bn.scale.data = rng.uniform(0.5, 1.5, c)
        bn.shift.data = rng.uniform(-1, 1, c)
        bn.running_mean.data = rng.uniform(-0.5, 0.5, c)
        bn.running_var.data = rng.uniform(0.5, 1.5, c)
        bn.train(training)
        x = _leaf(rng, (n, c, h, w))
        return (lambda: bn(x)), [x] + _module_leaves(bn)
    return build


def _randomize(m: L.Module, rng) -> None:
    for t in m.parameters():
        t.data = rng.uniform(-1, 1, t.shape)


def _gate_case(rng):
    n, _, h, w = _shape(rng)
    f_l, f_g = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    gate = L.AttentionGate(f_l, f_g, rng=rng, dtype=np.float64)
    _randomize(gate, rng)
    x = _leaf(rng, (n, f_l, h, w))
    g = _leaf(rng, (n, f_g, h, w))

    def f():
        x_hat, alpha = gate(x, g)
        return concat([x_hat, alpha], axis=1)
    return f, [x, g] + _module_leaves(gate)


def _aspp_case(rng):
    n, c, _, _ = _shape(rng, c_max=2)
    aspp = L.ASPP(c, rates=[1, 2], rng=rng, dtype=np.float64)
    _randomize(aspp, rng)
    for _, m in aspp.named_modules():
        if isinstance(m, L.BatchNorm2d):
            m.scale.data = rng.uniform(0.5, 1.5, m.scale.shape)
    x = _leaf(rng, (max(n, 2), c, 6, 6))
    return (lambda: aspp(x)), [x] + _module_leaves(aspp)


def _spp_case(rng):
    n, c, _, _ = _shape(rng, c_max=3)
    spp = L.SPP(c, scales=[1, 2], rng=rng, dtype=np.float64)
    _randomize(spp, rng)
    spp.fuse.bn.scale.data = rng.uniform(0.5, 1.5, spp.fuse.bn.scale.shape)
    x = _leaf(rng, (max(n, 2), c, 4, 4))
    return (lambda: spp(x)), [x] + _module_leaves(spp)


def _unary_case(op, shape_fn=_shape) -> Case:
    def build(rng):
        x = _leaf(rng, shape_fn(rng))
        return (lambda: op(x)), [x]
    return build


def _mul_broadcast_case(rng):
    n, c, h, w = _shape(rng)
    a = _leaf(rng, (n, 1, h, w))
    x = _leaf(rng, (n, c, h, w))
    return (lambda: mul(a, x)), [a, x]


def _loss_case(rng):
    shape = (1, 1, 4, 4)
    pred = _leaf(rng, shape, 0.1, 0.9)
    target = (rng.uniform(size=shape) > 0.5).astype(np.float64)
    return (lambda: dice_bce_loss(pred, Tensor(target))), [pred]


CASES: dict[str, Case] = {
    "conv2d_r1": _conv_case(1),
    "conv2d_r2": _conv_case(2),
    "conv2d_r3_k1": _conv_case(3, k=1),
    "conv2d_stride2": _conv_case(1, stride=2),
    "matmul_1x1": _matmul_case,
    "batchnorm_train": _batchnorm_case(True),
    "batchnorm_eval": _batchnorm_case(False),
    "attention_gate": _gate_case,
    "aspp_block": _aspp_case,
    "spp_block": _spp_case,
    "upsample_bilinear": _unary_case(lambda x: L.upsample2(x, "bilinear")),
    "upsample_nearest": _unary_case(lambda x: L.upsample2(x, "nearest")),
    "maxpool2": _unary_case(L.maxpool2),
    "avgpool_grid": _unary_case(lambda x: L.avgpool_grid(x, 2)),
    "sigmoid": _unary_case(sigmoid),
    "relu": _unary_case(relu),
    "mul_broadcast": _mul_broadcast_case,
    "dice_bce_loss": _loss_case,
}


def _scalarize(out: Tensor, r: np.ndarray) -> Tensor:
    return tsum(mul(out, r))


def check(build: Case, seed: int, name: str = "case", h: float = H_STEP,
          tol: float = TOLERANCE) -> GradcheckResult:
    rng = np.random.default_rng(seed)
    f, inputs = build(rng)
    with Tape():
        probe = f()
    r = np.random.default_rng(seed + 10_000).uniform(-1, 1, probe.shape)
    for t in inputs:
        t.grad = None
    with Tape():
        loss = _scalarize(f(), r)
    loss.backward()
    analytic = [t.grad.copy() for t in inputs]

    def value() -> float:
        return float(np.sum(f().data * r))

    worst, count = 0.0, 0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        ga = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = value()
            flat[i] = orig - h
            fm = value()
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            err = abs(num - ga[i]) / max(abs(num), abs(ga[i]), REL_FLOOR)
            worst = max(worst, err)
            count += 1
    return GradcheckResult(name, seed, worst, count, tol)


def run_gradcheck(cases: dict[str, Case] | None = None, seeds: Sequence[int] = range(5),
                  h: float = H_STEP, tol: float = TOLERANCE) -> list[GradcheckResult]:
    cases = CASES if cases is None else cases
    return [check(build, s, name, h, tol) for name, build in cases.items() for s in seeds]


def summarize(results: Sequence[GradcheckResult]) -> list[tuple[str, float, float, bool]]:
    """Collapse per-seed results into ``(name, worst error, tol, passed)`` rows."""
    rows: dict[str, list[GradcheckResult]] = {}
    for r in results:
        rows.setdefault(r.name, []).append(r)
    return [(name, max(r.max_rel_err for r in rs), rs[0].tol, all(r.passed for r in rs))
            for name, rs in rows.items()]


def format_table(rows) -> str:
    lines = [f"{'layer':<20} {'max_rel_err':>12} {'tol':>8}  status"]
    for name, err, tol, ok in rows:
        lines.append(f"{name:<20} {err:12.3e} {tol:8.0e}  {'PASS' if ok else 'FAIL'}")
    return "\n".join(lines)
