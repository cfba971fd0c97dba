"""Training loop, run configuration and reports."""
from __future__ import annotations

import json
import logging
import math
import platform
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import __version__
from .data import SliceSample, iter_batches
from .metrics import dice_bce_loss, dsc, evaluate_set
from .models import ModelSpec, Network, build, save_checkpoint
from .optim import (
    AdamState, CosineSchedule, NumericalError, adam_step, cosine_lr, optimizer_state_entries,
)
from .tensor import Tape, Tensor

logger = logging.getLogger(__name__)

TIMING_NOTE = "hardware-dependent, not comparable to published timings"

PRESETS = {
    "desk": {"input_size": 64, "base_channels": 16, "batch_size": 8, "epochs": 15},
    "full": {"input_size": 240, "base_channels": 64, "batch_size": 32, "epochs": 100},
}


@dataclass
class RunConfig:
    variant: str = "att_unet_aspp"
    depth: int = 4
    base_channels: int = 16
    input_size: int = 64
    aspp_rates: list = field(default_factory=lambda: [1, 6, 12, 18])
    spp_scales: list = field(default_factory=lambda: [1, 2, 4])
    aspp_repeats: int = 3
    epochs: int = 100
    batch_size: int = 8
    lr: float = 1e-3
    eta_min: float = 0.0
    t_i: Optional[int] = None
    restart: bool = False
    seed: int = 0
    train_manifest: Optional[str] = None
    val_manifest: Optional[str] = None
    test_manifest: Optional[str] = None
    manifest: Optional[str] = None
    split: list = field(default_factory=lambda: [200, 25, 25])
    out_dir: str = "runs/default"
    precision: str = "f32"
    threshold: float = 0.5
    preset: Optional[str] = None

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.precision not in ("f32", "f64"):
            raise ValueError("precision must be f32 or f64")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must be in (0, 1)")
        for key in ("train_manifest", "val_manifest", "test_manifest", "manifest"):
            path = getattr(self, key)
            if path is not None and not Path(path).is_file():
                raise FileNotFoundError(f"{key}: {path} does not exist")
        self.model_spec().validate()

    def model_spec(self) -> ModelSpec:
        return ModelSpec(variant=self.variant, depth=self.depth,
                         base_channels=self.base_channels, aspp_rates=list(self.aspp_rates),
                         spp_scales=list(self.spp_scales), aspp_repeats=self.aspp_repeats,
                         input_size=self.input_size)

    @property
    def dtype(self):
        return np.float64 if self.precision == "f64" else np.float32

    @property
    def cycle(self) -> int:
        return self.t_i if self.t_i else self.epochs

    @classmethod
    def from_mapping(cls, values: dict) -> "RunConfig":
        """Build from flat keys; dotted prefixes (``train.epochs``) are ignored."""
        names = {f.name for f in fields(cls)}
        kw = {}
        preset = values.get("preset")
        if preset is not None:
            if preset not in PRESETS:
                raise ValueError(f"unknown preset {preset!r}; choose from {list(PRESETS)}")
            kw.update(PRESETS[preset])
        for key, val in values.items():
            name = key.rsplit(".", 1)[-1]
            if name not in names:
                raise ValueError(f"unknown config key {key!r}")
            if val is not None:
                kw[name] = val
        return cls(**kw)


def load_config_file(path) -> dict:
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return data


def _to_tensor(a: np.ndarray, dtype) -> Tensor:
    return Tensor(a.astype(dtype, copy=False))


def train_step(net: Network, opt: AdamState, x: np.ndarray, y: np.ndarray, lr: float,
               dtype=np.float32) -> float:
    net.train()
    params = dict(net.named_parameters())
    with Tape():
        loss = dice_bce_loss(net(_to_tensor(x, dtype)), _to_tensor(y, dtype))
    value = loss.item()
    if not math.isfinite(value):
        raise NumericalError(f"loss is {value}")
    loss.backward()
    adam_step(params, opt, lr)
    net.zero_grad()
    return value


def predict_probs(net: Network, images: np.ndarray, dtype=np.float32) -> np.ndarray:
    net.eval()
    return net(_to_tensor(images, dtype)).data


def fit_batch(net: Network, x: np.ndarray, y: np.ndarray, steps: int = 300, lr: float = 1e-3,
              target_dsc: Optional[float] = None, check_every: int = 25) -> dict:
    """Optimize on a single fixed batch; stops early once ``target_dsc`` is reached."""
    opt = AdamState(lr=lr)
    losses, score, step = [], float("nan"), 0
    for step in range(1, steps + 1):
        losses.append(train_step(net, opt, x, y, lr))
        if target_dsc is not None and (step % check_every == 0 or step == steps):
            score = batch_dsc(net, x, y)
            if score >= target_dsc:
                break
    if target_dsc is None:
        score = batch_dsc(net, x, y)
    return {"steps": step, "losses": losses, "dsc": score}


def batch_dsc(net: Network, x: np.ndarray, y: np.ndarray, threshold: float = 0.5) -> float:
    prob = predict_probs(net, x)
    return float(np.mean([dsc(p[0] >= threshold, t[0] > 0) for p, t in zip(prob, y)]))


@dataclass
class RunReport:
    config: dict
    epochs: list = field(default_factory=list)
    lr_trace: list = field(default_factory=list)
    test: Optional[dict] = None
    best_epoch: Optional[int] = None
    notes: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    code_version: str = __version__

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=False)


def _model_fn(net: Network, dtype):
    def fn(x: Tensor) -> Tensor:
        net.eval()
        return net(_to_tensor(x.data, dtype))
    return fn


def train(cfg: RunConfig, train_set: Sequence[SliceSample], val_set: Sequence[SliceSample],
          test_set: Optional[Sequence[SliceSample]] = None, out_dir=None,
          log: Callable[[str], None] = logger.info) -> tuple[Network, RunReport]:
    """Train with Adam + per-epoch cosine annealing, keeping the best-val-DSC weights."""
    if not train_set or not val_set:
        raise ValueError("training and validation sets must be non-empty")
    spec = cfg.model_spec()
    spec.validate()
    size = train_set[0].image.shape
    if size != (spec.input_size, spec.input_size):
        raise ValueError(f"samples are {size} but the model expects "
                         f"{spec.input_size}x{spec.input_size}")
    dtype = cfg.dtype
    net = build(spec, cfg.seed, dtype=dtype)
    opt = AdamState(lr=cfg.lr)
    sched = CosineSchedule(eta_max=cfg.lr, eta_min=cfg.eta_min, t_i=cfg.cycle,
                           restart=cfg.restart)
    report = RunReport(config=asdict(cfg) | {"model": asdict(spec)})
    report.config["effective_aspp_rates"] = spec.effective_aspp_rates()
    report.config["effective_spp_scales"] = spec.effective_spp_scales()
    report.config["num_parameters"] = net.num_parameters()
    report.config["platform"] = platform.python_version()
    if spec.variant == "att_unet_aspp" and spec.effective_aspp_rates() != list(spec.aspp_rates):
        report.notes.append(
            f"ASPP rates {list(spec.aspp_rates)} clamped to {spec.effective_aspp_rates()} "
            f"for the {spec.bottleneck_size}x{spec.bottleneck_size} bottleneck")
    if spec.variant == "att_unet_spp":
        report.notes.append("SPP bottleneck follows the usual pyramid-pooling layout "
                            f"(grid scales {spec.effective_spp_scales()})")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    best_dsc = -1.0
    t_start = time.perf_counter()
    for epoch in range(cfg.epochs):
        lr = sched.lr_at()
        report.lr_trace.append(lr)
        t0 = time.perf_counter()
        rng = np.random.default_rng([cfg.seed, epoch])
        losses = []
        for step, (x, y) in enumerate(iter_batches(train_set, cfg.batch_size, rng)):
            try:
                losses.append(train_step(net, opt, x, y, lr, dtype))
            except NumericalError as exc:
                raise NumericalError(f"epoch {epoch} step {step}: {exc}") from None
        train_time = time.perf_counter() - t0
        val = evaluate_set(_model_fn(net, dtype), list(val_set), cfg.threshold).summary
        row = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses)),
               "val_dsc": val["dsc"], "val_miou": val["miou"], "val_acc": val["acc"],
               "seconds": train_time}
        report.epochs.append(row)
        log(f"epoch {epoch + 1}/{cfg.epochs} lr {lr:.3e} loss {row['train_loss']:.4f} "
            f"val dsc {val['dsc']:.4f} miou {val['miou']:.4f} acc {val['acc']:.4f}")
        if val["dsc"] > best_dsc:
            best_dsc = val["dsc"]
            report.best_epoch = epoch
            best_state = {k: v.copy() for k, v in net.state_dict().items()}
            if out is not None:
                save_checkpoint(out / "best.ckpt", best_state)
        sched.epoch_tick()
    report.timings = {"train_seconds": time.perf_counter() - t_start, "note": TIMING_NOTE}
    if out is not None:
        save_checkpoint(out / "last.ckpt", net.state_dict() | optimizer_state_entries(opt, sched))
    net.load_state_dict(best_state)
    net.eval()
    if test_set:
        t0 = time.perf_counter()
        ev = evaluate_set(_model_fn(net, dtype), list(test_set), cfg.threshold)
        report.timings["test_inference_seconds"] = time.perf_counter() - t0
        report.test = ev.summary
        if out is not None:
            (out / "test_metrics.csv").write_text(ev.to_csv())
            (out / "test_metrics.txt").write_text(ev.to_text() + "\n")
    if out is not None:
        (out / "report.json").write_text(report.to_json())
    return net, report


def lr_trace_matches(report: RunReport, tol: float = 1e-12) -> bool:
    c = report.config
    t_i = c["t_i"] or c["epochs"]
    sched = CosineSchedule(eta_max=c["lr"], eta_min=c["eta_min"], t_i=t_i, restart=c["restart"])
    for lr in report.lr_trace:
        if abs(lr - cosine_lr(c["eta_min"], c["lr"], sched.t_cur, t_i)) > tol:
            return False
        sched.epoch_tick()
    return len(report.lr_trace) == c["epochs"]
