"""Patch taxonomy: split a ground-truth mask into tampered, authentic and contour cells.

A cell is one spatial position of the block-1 feature grid, i.e. a
``stride x stride`` square of input pixels.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


class PatchLabel(enum.IntEnum):
    AUTHENTIC = 0
    TAMPERED = 1
    CONTOUR = 2


@dataclass(frozen=True)
class PatchLabelMap:
    labels: np.ndarray  # (Hp, Wp) int8 holding PatchLabel values
    stride: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def count(self, label: PatchLabel) -> int:
        return int(np.count_nonzero(self.labels == label))

    def counts(self) -> dict[PatchLabel, int]:
        return {lab: self.count(lab) for lab in PatchLabel}


def as_mask(mask) -> np.ndarray:
    """Validate a binary mask and return it as a 2-D uint8 array of 0/1."""
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError("mask must be at least 1x1")
    if not np.isin(arr, (0, 1)).all():
        raise ValueError("mask must contain only 0 and 1")
    return arr.astype(np.uint8, copy=False)


def pad_to_multiple(mask: np.ndarray, multiple: int) -> np.ndarray:
    """Zero-pad bottom/right so both sides are multiples of ``multiple``."""
    h, w = mask.shape
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return mask
    return np.pad(mask, ((0, ph), (0, pw)), mode="constant", constant_values=0)


def partition_patches(mask, stride: int = 4) -> PatchLabelMap:
    """Label every ``stride x stride`` block as TAMPERED, AUTHENTIC or CONTOUR.

    Blocks whose pixels are all 1 are tampered, all 0 authentic, anything
    else contour. Dimensions that are not multiples of ``stride`` are
    zero-padded (padding counts as authentic).
    """
    if int(stride) != stride or stride <= 0:
        raise ValueError(f"stride must be a positive integer, got {stride!r}")
    stride = int(stride)
    m = pad_to_multiple(as_mask(mask), stride)
    hp, wp = m.shape[0] // stride, m.shape[1] // stride
    ones = m.reshape(hp, stride, wp, stride).sum(axis=(1, 3), dtype=np.int64)

    labels = np.full((hp, wp), PatchLabel.CONTOUR, dtype=np.int8)
    labels[ones == 0] = PatchLabel.AUTHENTIC
    labels[ones == stride * stride] = PatchLabel.TAMPERED
    return PatchLabelMap(labels=labels, stride=stride)


def shrink_mask(mask, target: tuple[int, int], mode: str = "nearest") -> np.ndarray:
    """Downsample a binary mask by an integer factor per axis.

    ``mode="nearest"`` samples the pixel at each block centre (the upper-left
    of the two central pixels for even block sizes, which lines up with the
    sampling grid of a stride-f 3x3 conv). ``mode="area"`` averages the block
    and thresholds at 0.5.
    """
    m = as_mask(mask)
    th, tw = target
    h, w = m.shape
    if th <= 0 or tw <= 0 or h % th or w % tw:
        raise ValueError(f"target {target} must evenly divide mask shape {m.shape}")
    fh, fw = h // th, w // tw
    if mode == "nearest":
        return np.ascontiguousarray(m[(fh - 1) // 2 :: fh, (fw - 1) // 2 :: fw])
    if mode == "area":
        mean = m.reshape(th, fh, tw, fw).mean(axis=(1, 3))
        return (mean >= 0.5).astype(np.uint8)
    raise ValueError(f"unknown shrink mode {mode!r}")


def contour_pixel_map(labels: PatchLabelMap, target: tuple[int, int]) -> np.ndarray:
    """Mark every pixel of a ``target``-sized grid that falls in a CONTOUR cell."""
    hp, wp = labels.shape
    th, tw = target
    if th <= 0 or tw <= 0 or th % hp or tw % wp:
        raise ValueError(f"target {target} must be an integer multiple of label grid {labels.shape}")
    contour = (labels.labels == PatchLabel.CONTOUR).astype(np.uint8)
    return np.kron(contour, np.ones((th // hp, tw // wp), dtype=np.uint8))
