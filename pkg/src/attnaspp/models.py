"""The four compared architectures and the binary checkpoint format.

All variants share the same encoder/decoder skeleton; they differ only in
whether the skip connections are gated and what sits after the bottleneck
double-conv (nothing, one SPP block, or a stack of ASPP blocks).
"""
from __future__ import annotations

import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .layers import (
    ASPP, SPP, AttentionGate, Conv2d, DoubleConv, Module, UpConv, clamp_rates, maxpool2,
)
from .tensor import ShapeError, Tensor, concat, sigmoid

logger = logging.getLogger(__name__)

VARIANTS = ("unet", "att_unet", "att_unet_spp", "att_unet_aspp")


@dataclass
class ModelSpec:
    variant: str = "att_unet_aspp"
    depth: int = 4
    base_channels: int = 16
    in_channels: int = 1
    out_channels: int = 1
    aspp_rates: list = field(default_factory=lambda: [1, 6, 12, 18])
    spp_scales: list = field(default_factory=lambda: [1, 2, 4])
    aspp_repeats: int = 3
    input_size: int = 64

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        if self.in_channels != 1 or self.out_channels != 1:
            raise ValueError("only single-channel input and output are supported")
        if self.input_size % (2 ** self.depth):
            raise ShapeError(
                f"input size {self.input_size} is not divisible by 2**{self.depth}")

    @property
    def gated(self) -> bool:
        return self.variant.startswith("att_")

    @property
    def bottleneck_size(self) -> int:
        return self.input_size // 2 ** self.depth

    def effective_aspp_rates(self) -> list:
        return clamp_rates(self.aspp_rates, self.bottleneck_size)

    def effective_spp_scales(self) -> list:
        b = self.bottleneck_size
        return [int(s) for s in self.spp_scales if b % int(s) == 0]


class Network(Module):
    """UNet-family network with optional attention gates and pyramid bottleneck."""

    def __init__(self, spec: ModelSpec, rng: np.random.Generator, dtype=np.float32):
        spec.validate()
        self.spec = spec
        widths = [spec.base_channels * 2 ** i for i in range(spec.depth + 1)]
        enc = []
        cin = spec.in_channels
        for w in widths[:-1]:
            enc.append(DoubleConv(cin, w, rng=rng, dtype=dtype))
            cin = w
        self.enc = enc
        self.bottleneck = DoubleConv(widths[-2], widths[-1], rng=rng, dtype=dtype)
        bw = widths[-1]
        self.aspp = []
        self.spp = None
        if spec.variant == "att_unet_aspp":
            rates = spec.effective_aspp_rates()
            if rates != [int(r) for r in spec.aspp_rates]:
                logger.info("ASPP rates %s clamped to %s for a %dx%d bottleneck",
                            spec.aspp_rates, rates, spec.bottleneck_size, spec.bottleneck_size)
            self.aspp = [ASPP(bw, rates, rng=rng, dtype=dtype) for _ in range(spec.aspp_repeats)]
        elif spec.variant == "att_unet_spp":
            scales = spec.effective_spp_scales()
            if not scales:
                raise ShapeError(f"no SPP scale in {spec.spp_scales} divides the "
                                 f"{spec.bottleneck_size}x{spec.bottleneck_size} bottleneck")
            self.spp = SPP(bw, scales, rng=rng, dtype=dtype)
        # decoder modules are stored fine-to-coarse (level 1 = full resolution)
        self.up = [UpConv(widths[i + 1], widths[i], rng=rng, dtype=dtype)
                   for i in range(spec.depth)]
        self.gate = ([AttentionGate(widths[i], widths[i], rng=rng, dtype=dtype)
                      for i in range(spec.depth)] if spec.gated else [])
        self.dec = [DoubleConv(2 * widths[i], widths[i], rng=rng, dtype=dtype)
                    for i in range(spec.depth)]
        self.head = Conv2d(widths[0], spec.out_channels, k=1, rng=rng, dtype=dtype)

    def _check_input(self, x: Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ShapeError(f"expected input N x {self.spec.in_channels} x H x W, "
                             f"got {x.shape}")
        h, w = x.shape[2:]
        f = 2 ** self.spec.depth
        if h % f or w % f:
            raise ShapeError(f"input {h}x{w} is not divisible by 2**{self.spec.depth} = {f}")

    def forward(self, x: Tensor, return_alphas: bool = False):
        self._check_input(x)
        skips = []
        h = x
        for block in self.enc:
            h = block(h)
            skips.append(h)
            h = maxpool2(h)
        h = self.bottleneck(h)
        for block in self.aspp:
            h = block(h)
        if self.spp is not None:
            h = self.spp(h)
        alphas = []
        for i in reversed(range(self.spec.depth)):
            u = self.up[i](h)
            s = skips[i]
            if self.gate:
                s, alpha = self.gate[i](s, u)
                alphas.append(alpha)
            h = self.dec[i](concat([s, u], axis=1))
        out = sigmoid(self.head(h))
        return (out, alphas) if return_alphas else out

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {f"spec.{k}": v for k, v in spec_to_arrays(self.spec).items()}
        for name, t in self.named_parameters():
            state[name] = t.data
        for name, t in self.named_buffers():
            state[name] = t.data
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        own.update(self.named_buffers())
        missing = [k for k in own if k not in state]
        if missing:
            raise KeyError(f"checkpoint is missing entries: {missing[:5]}")
        for name, t in own.items():
            arr = state[name]
            if arr.shape != t.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} != model {t.shape}")
            t.data = np.array(arr, dtype=t.dtype)


def build(spec: ModelSpec, rng_seed: int = 0, dtype=np.float32) -> Network:
    return Network(spec, np.random.default_rng(rng_seed), dtype=dtype)


def forward(net: Network, x: Tensor, mode: str = "eval") -> Tensor:
    net.train(mode == "train")
    return net(x)


def attention_maps(net: Network, x: Tensor) -> list[Tensor]:
    """Gate coefficient maps in decoder order, coarsest first."""
    if not net.spec.gated:
        raise ValueError(f"variant {net.spec.variant!r} has no attention gates")
    _, alphas = net(x, return_alphas=True)
    return alphas


def count_blocks(net: Network) -> dict[str, int]:
    counts = {"attention_gates": 0, "aspp_blocks": 0, "spp_blocks": 0}
    for _, m in net.named_modules():
        if isinstance(m, AttentionGate):
            counts["attention_gates"] += 1
        elif isinstance(m, ASPP):
            counts["aspp_blocks"] += 1
        elif isinstance(m, SPP):
            counts["spp_blocks"] += 1
    return counts


# ---------------------------------------------------------------- spec <-> arrays

_SCALAR_FIELDS = ("depth", "base_channels", "in_channels", "out_channels",
                  "aspp_repeats", "input_size")


def spec_to_arrays(spec: ModelSpec) -> dict[str, np.ndarray]:
    out = {"variant": np.array([VARIANTS.index(spec.variant)], dtype=np.float64)}
    for k in _SCALAR_FIELDS:
        out[k] = np.array([getattr(spec, k)], dtype=np.float64)
    out["aspp_rates"] = np.array(spec.aspp_rates, dtype=np.float64)
    out["spp_scales"] = np.array(spec.spp_scales, dtype=np.float64)
    return out


def spec_from_state(state: dict[str, np.ndarray]) -> ModelSpec:
    try:
        kw = {k: int(state[f"spec.{k}"][0]) for k in _SCALAR_FIELDS}
        kw["variant"] = VARIANTS[int(state["spec.variant"][0])]
        kw["aspp_rates"] = [int(v) for v in state["spec.aspp_rates"]]
        kw["spp_scales"] = [int(v) for v in state["spec.spp_scales"]]
    except KeyError as exc:
        raise KeyError(f"checkpoint has no model spec entry {exc}") from None
    return ModelSpec(**kw)


def spec_dict(spec: ModelSpec) -> dict:
    return asdict(spec)


# ---------------------------------------------------------------- checkpoint file

MAGIC = b"AASP1"
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


def encode_checkpoint(entries: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_CODES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:5] != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {buf[:5]!r}")
    pos = 5

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"checkpoint truncated at offset {pos} (need {n} bytes)")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dt = _CODE_DTYPES[code]
        n = int(np.prod(dims)) if ndim else 1
        out[name] = np.frombuffer(take(n * dt.itemsize), dtype=dt).reshape(dims).copy()
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after {count} entries")
    return out


def save_checkpoint(path, entries: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_checkpoint(entries))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    return decode_checkpoint(p.read_bytes())


def load_network(path, extra: Optional[dict] = None) -> Network:
    """Rebuild a network from a checkpoint file (spec entries + weights)."""
    state = load_checkpoint(path)
    if extra is not None:
        extra.update(state)
    net = build(spec_from_state(state), 0)
    net.load_state_dict(state)
    net.eval()
    return net
