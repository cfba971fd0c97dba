"""Slice samples, their on-disk formats, manifests, splitting and batching.

Images are stored as TEN1 tensor files and masks as binary PGM (P5) files.
TEN1 layout (little-endian): ``b"TEN1"``, u8 dtype code (0 f32, 1 f64),
u8 ndim, two zero bytes so the dims are 4-byte aligned, ``ndim`` u32 dims,
then the raw values.
A manifest is a tab-separated text file with one
``id, image_path, mask_path, modality`` line per sample.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

MODALITIES = ("t1c", "t2f", "t2w", "synth")
TEN_MAGIC = b"TEN1"
_TEN_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_TEN_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class FormatError(ValueError):
    pass


@dataclass
class SliceSample:
    image: np.ndarray  # H x W, float, in [0, 1]
    mask: np.ndarray   # H x W, {0, 1}
    id: str
    modality: str = "synth"

    def __post_init__(self):
        if self.image.shape != self.mask.shape:
            raise ValueError(f"{self.id}: image {self.image.shape} vs mask {self.mask.shape}")


# ---------------------------------------------------------------- TEN1

def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _TEN_CODES:
        raise FormatError(f"TEN1 supports f32/f64, got {arr.dtype}")
    head = TEN_MAGIC + struct.pack("<BBxx", _TEN_CODES[dt], arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=dt).tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if buf[:4] != TEN_MAGIC:
        raise FormatError(f"bad TEN1 magic {buf[:4]!r}")
    if len(buf) < 8:
        raise FormatError("TEN1 header truncated")
    code, ndim = struct.unpack_from("<BBxx", buf, 4)
    if code not in _TEN_DTYPES:
        raise FormatError(f"unknown TEN1 dtype code {code}")
    start = 8 + 4 * ndim
    if len(buf) < start:
        raise FormatError("TEN1 header truncated")
    dims = struct.unpack_from(f"<{ndim}I", buf, 8)
    dt = _TEN_DTYPES[code]
    n = int(np.prod(dims)) if ndim else 1
    if len(buf) - start != n * dt.itemsize:
        raise FormatError(f"TEN1 payload is {len(buf) - start} bytes, expected {n * dt.itemsize}")
    return np.frombuffer(buf, dtype=dt, offset=start).reshape(dims).astype(dt.newbyteorder("="))


def write_tensor(path, arr) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


# ---------------------------------------------------------------- PGM

def encode_pgm(mask: np.ndarray) -> bytes:
    """Binary P5 with maxval 255; non-zero mask pixels become 255."""
    m = np.asarray(mask)
    if m.ndim != 2:
        raise FormatError(f"PGM needs a 2-D mask, got shape {m.shape}")
    h, w = m.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.where(m > 0, 255, 0).astype(np.uint8).tobytes()


def encode_pgm_gray(values: np.ndarray) -> bytes:
    """Grey-level P5 of values in [0, 1] (used for attention maps)."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    h, w = v.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.round(v * 255).astype(np.uint8).tobytes()


def decode_pgm(buf: bytes) -> np.ndarray:
    """Parse a P5 file and return the raw 8-bit pixel array."""
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("PGM header truncated")
        tokens.append(buf[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(f"not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise FormatError("16-bit PGM is not supported")
    pos += 1  # single whitespace after maxval
    data = buf[pos:pos + w * h]
    if len(data) != w * h:
        raise FormatError(f"PGM pixel data truncated: {len(data)} of {w * h} bytes")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


def write_mask(path, mask) -> None:
    Path(path).write_bytes(encode_pgm(mask))


def read_mask(path) -> np.ndarray:
    """Load a PGM mask as {0, 1} uint8."""
    return (decode_pgm(Path(path).read_bytes()) > 0).astype(np.uint8)


# ---------------------------------------------------------------- manifests

@dataclass
class ManifestEntry:
    id: str
    image_path: str
    mask_path: str
    modality: str


def write_samples(samples: Sequence[SliceSample], out_dir, manifest_name: str = "manifest.tsv",
                  subdir: str = "samples") -> Path:
    """Write image/mask files and a manifest (paths relative to the manifest)."""
    out = Path(out_dir)
    (out / subdir).mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        img = f"{subdir}/{s.id}.ten"
        msk = f"{subdir}/{s.id}.pgm"
        write_tensor(out / img, np.asarray(s.image, dtype=np.float32))
        write_mask(out / msk, s.mask)
        lines.append(f"{s.id}\t{img}\t{msk}\t{s.modality}\n")
    path = out / manifest_name
    path.write_text("".join(lines))
    return path


def write_manifest(path, entries: Sequence[ManifestEntry]) -> None:
    Path(path).write_text("".join(
        f"{e.id}\t{e.image_path}\t{e.mask_path}\t{e.modality}\n" for e in entries))


def read_manifest(path) -> list[ManifestEntry]:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"manifest not found: {p}")
    out = []
    for lineno, line in enumerate(p.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise FormatError(f"{p}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
        out.append(ManifestEntry(*parts))
    return out


def load_samples(manifest_path) -> list[SliceSample]:
    root = Path(manifest_path).parent
    samples = []
    for e in read_manifest(manifest_path):
        image = read_tensor(root / e.image_path).astype(np.float32)
        mask = read_mask(root / e.mask_path)
        samples.append(SliceSample(image=image, mask=mask, id=e.id, modality=e.modality))
    return samples


# ---------------------------------------------------------------- split / batching

def dataset_split(samples: Sequence, counts=(200, 25, 25), seed: int = 0):
    """Seeded shuffle, then consecutive train/val/test slices of exact sizes."""
    total = int(np.sum(counts))
    if len(samples) < total:
        raise ValueError(f"need {total} samples for split {tuple(counts)}, have {len(samples)}")
    order = np.random.default_rng(seed).permutation(len(samples))
    parts, start = [], 0
    for c in counts:
        parts.append([samples[i] for i in order[start:start + c]])
        start += c
    return tuple(parts)


def iter_batches(samples: Sequence[SliceSample], batch_size: int,
                 rng: Optional[np.random.Generator] = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(images, masks)`` as ``N x 1 x H x W`` float32 arrays."""
    order = np.arange(len(samples)) if rng is None else rng.permutation(len(samples))
    for start in range(0, len(order), batch_size):
        chunk = [samples[i] for i in order[start:start + batch_size]]
        x = np.stack([s.image for s in chunk])[:, None].astype(np.float32)
        y = np.stack([s.mask for s in chunk])[:, None].astype(np.float32)
        yield x, y
