"""Procedural tumour-like slices for desk-scale experiments.

Each sample draws from its own PCG32 stream (``stream = sample index``), so
datasets are reproducible and any subset can be regenerated independently.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .samples import SliceSample

MASK64 = (1 << 64) - 1
PCG_MULT = 6364136223846793005


class PCG32:
    """O'Neill's PCG-XSH-RR 32-bit generator (64-bit LCG state).

    Seeding follows the reference ``pcg32_srandom(initstate, initseq)``.
    """

    def __init__(self, seed: int, stream: int = 54):
        self.inc = ((int(stream) << 1) | 1) & MASK64
        self.state = 0
        self.next_u32()
        self.state = (self.state + int(seed)) & MASK64
        self.next_u32()

    def next_u32(self) -> int:
        old = self.state
        self.state = (old * PCG_MULT + self.inc) & MASK64
        xorshifted = (((old >> 18) ^ old) >> 27) & 0xFFFFFFFF
        rot = old >> 59
        return ((xorshifted >> rot) | (xorshifted << ((-rot) & 31))) & 0xFFFFFFFF

    def u32_array(self, n: int) -> np.ndarray:
        """The next ``n`` outputs at once, using LCG jump-ahead."""
        if n <= 0:
            return np.zeros(0, dtype=np.uint32)
        mult = np.uint64(PCG_MULT)
        inc = np.uint64(self.inc)
        a = np.ones(1, dtype=np.uint64)   # s_k = a[k] * s_0 + c[k]
        c = np.zeros(1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            while a.size < n + 1:
                am = a[-1] * mult
                cm = c[-1] * mult + inc
                a, c = np.concatenate([a, a * am]), np.concatenate([c, a * cm + c])
            states = a[:n + 1] * np.uint64(self.state) + c[:n + 1]
        self.state = int(states[n])
        old = states[:n]
        xorshifted = (((old >> np.uint64(18)) ^ old) >> np.uint64(27)).astype(np.uint32)
        rot = (old >> np.uint64(59)).astype(np.uint32)
        left = (np.uint32(32) - rot) & np.uint32(31)
        return (xorshifted >> rot) | (xorshifted << left)

    def uniform(self, n: int | None = None):
        if n is None:
            return self.next_u32() * 2.0 ** -32
        return self.u32_array(n) * 2.0 ** -32

    def normal(self, n: int) -> np.ndarray:
        """Box-Muller standard normals."""
        m = (n + 1) // 2
        u = self.u32_array(2 * m).astype(np.float64)
        u1 = (u[:m] + 1.0) * 2.0 ** -32
        u2 = u[m:] * 2.0 ** -32
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        return z[:n]


@dataclass
class SynthConfig:
    size: int = 64
    min_blobs: int = 1
    max_blobs: int = 2
    min_radius: float = 0.1   # fraction of size
    max_radius: float = 0.2
    contrast: float = 0.6
    texture: float = 0.15
    noise_sigma: float = 0.05
    warp: float = 0.15
    p_empty: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.size < 8:
            raise ValueError("size must be at least 8")
        if not 1 <= self.min_blobs <= self.max_blobs:
            raise ValueError("need 1 <= min_blobs <= max_blobs")
        if not 0 < self.min_radius <= self.max_radius < 0.5:
            raise ValueError("need 0 < min_radius <= max_radius < 0.5")
        if not 0 <= self.p_empty <= 1:
            raise ValueError("p_empty must be in [0, 1]")
        if not 0 <= self.warp < 1:
            raise ValueError("warp must be in [0, 1)")
        if self.noise_sigma < 0 or self.texture < 0:
            raise ValueError("noise_sigma and texture must be non-negative")


def _blob_mask(rng: PCG32, cfg: SynthConfig, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    h = cfg.size
    span = cfg.max_radius - cfg.min_radius
    a = (cfg.min_radius + span * rng.uniform()) * h
    b = (cfg.min_radius + span * rng.uniform()) * h
    margin = max(a, b) * (1 + cfg.warp) + 1
    cy = margin + (h - 2 * margin) * rng.uniform()
    cx = margin + (h - 2 * margin) * rng.uniform()
    theta = math.pi * rng.uniform()
    lobes = 2 + int(rng.uniform() * 4)
    phase = 2 * math.pi * rng.uniform()
    dy, dx = yy - cy, xx - cx
    u = (dx * math.cos(theta) + dy * math.sin(theta)) / a
    v = (-dx * math.sin(theta) + dy * math.cos(theta)) / b
    rho = np.hypot(u, v)
    ang = np.arctan2(v, u)
    return rho <= 1.0 + cfg.warp * np.sin(lobes * ang + phase)


def make_sample(cfg: SynthConfig, index: int) -> SliceSample:
    rng = PCG32(cfg.seed, stream=index)
    h = cfg.size
    yy, xx = np.mgrid[0:h, 0:h].astype(np.float64) + 0.5
    empty = rng.uniform() < cfg.p_empty
    image = np.full((h, h), 0.3)
    for _ in range(3):
        fy, fx = (rng.uniform() * 2 - 1) * 2, (rng.uniform() * 2 - 1) * 2
        ph = 2 * math.pi * rng.uniform()
        amp = cfg.texture * (0.5 + 0.5 * rng.uniform()) / 3
        image += amp * np.sin(2 * math.pi * (fy * yy + fx * xx) / h + ph)
    mask = np.zeros((h, h), dtype=bool)
    if not empty:
        count = cfg.min_blobs + int(rng.uniform() * (cfg.max_blobs - cfg.min_blobs + 1))
        for _ in range(count):
            mask |= _blob_mask(rng, cfg, yy, xx)
        image += cfg.contrast * mask
    image += cfg.noise_sigma * rng.normal(h * h).reshape(h, h)
    lo, hi = image.min(), image.max()
    image = (image - lo) / (hi - lo) if hi > lo else np.zeros_like(image)
    return SliceSample(image=image.astype(np.float32), mask=mask.astype(np.uint8),
                       id=f"synth_{cfg.seed}_{index:05d}", modality="synth")


def gen_synthetic(cfg: SynthConfig, n: int, start: int = 0) -> list[SliceSample]:
    cfg.validate()
    return [make_sample(cfg, i) for i in range(start, start + n)]
