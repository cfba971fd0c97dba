"""Axial slice extraction from parsed NIfTI volumes."""
from __future__ import annotations

from typing import Optional

import numpy as np

from .nifti import NiftiVolume
from .samples import SliceSample


def normalize_slice(plane: np.ndarray, method: str = "minmax") -> np.ndarray:
    plane = plane.astype(np.float64)
    if method == "minmax":
        lo, hi = plane.min(), plane.max()
        return (plane - lo) / (hi - lo) if hi > lo else np.zeros_like(plane)
    if method == "zscore":
        sd = plane.std()
        return (plane - plane.mean()) / sd if sd > 0 else np.zeros_like(plane)
    raise ValueError(f"unknown normalization {method!r}")


def extract_axial(vol: NiftiVolume, label: Optional[NiftiVolume] = None, policy: str = "all",
                  modality: str = "t1c", prefix: str = "vol",
                  norm: str = "minmax") -> list[SliceSample]:
    """One sample per selected z plane; images are indexed ``[y, x]``.

    ``policy="all"`` keeps every plane, ``"max_area"`` keeps the plane with
    the largest labelled area (first one on ties).
    """
    if len(vol.dims) < 3:
        raise ValueError(f"expected a 3-D volume, got dims {vol.dims}")
    image = vol.scaled()
    if image.ndim > 3:
        image = image[..., 0]
    if label is not None:
        if tuple(label.dims[:3]) != tuple(vol.dims[:3]):
            raise ValueError(f"image dims {vol.dims[:3]} and label dims {label.dims[:3]} differ")
        seg = label.scaled()
        seg = (seg[..., 0] if seg.ndim > 3 else seg) > 0
    else:
        seg = np.zeros(image.shape, dtype=bool)
    nz = image.shape[2]
    if policy == "all":
        zs = list(range(nz))
    elif policy == "max_area":
        if label is None:
            raise ValueError("max_area policy needs a label volume")
        zs = [int(np.argmax(seg.sum(axis=(0, 1))))]
    else:
        raise ValueError(f"unknown slice policy {policy!r}")
    return [SliceSample(image=normalize_slice(image[:, :, z].T, norm).astype(np.float32),
                        mask=seg[:, :, z].T.astype(np.uint8),
                        id=f"{prefix}_z{z:03d}", modality=modality)
            for z in zs]
