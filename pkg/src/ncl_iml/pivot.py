"""Dual-branch pivot network.

All contour-cell features of one image are reduced to a single embedding
and mapped by two independent branches to a hard-positive embedding
(``se_plus``) and a hard-negative embedding (``se_minus``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .taxonomy import PatchLabel, PatchLabelMap


class NoContourError(ValueError):
    """Raised when the pivot is asked to run on an image with no contour cells."""


@dataclass
class PivotPair:
    se_plus: torch.Tensor
    se_minus: torch.Tensor


def aggregate_contour(block1: torch.Tensor, labels: PatchLabelMap) -> torch.Tensor:
    """Gather the C-vectors at CONTOUR positions of a (C, Hf, Wf) map, row-major.

    Returns a (k, C) tensor; k may be zero.
    """
    if block1.dim() != 3:
        raise ValueError(f"expected a (C, H, W) feature map, got {tuple(block1.shape)}")
    if tuple(block1.shape[1:]) != labels.shape:
        raise ValueError(
            f"feature grid {tuple(block1.shape[1:])} does not match label grid {labels.shape}"
        )
    idx = np.flatnonzero(labels.labels.ravel() == PatchLabel.CONTOUR)
    flat = block1.flatten(1)  # (C, Hf*Wf)
    return flat[:, torch.from_numpy(idx).long()].t()


def pool_contours(features: torch.Tensor) -> torch.Tensor:
    """Mean over the k axis, summed in a canonical per-channel order.

    Sorting each column first makes the result bit-identical under any row
    permutation, which plain ``mean`` does not guarantee.
    """
    if features.dim() != 2:
        raise ValueError(f"expected (k, C) features, got {tuple(features.shape)}")
    k = features.shape[0]
    if k == 0:
        raise NoContourError("no contour cells in this image")
    ordered, _ = torch.sort(features, dim=0)
    return ordered.sum(dim=0) / k


class PivotBranch(nn.Module):
    """1x1 channel mixing -> batch norm -> ReLU on pooled contour embeddings."""

    def __init__(self, channels: int):
        super().__init__()
        self.mix = nn.Linear(channels, channels)
        self.bn = nn.BatchNorm1d(channels)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        bound = 1.0 / math.sqrt(self.mix.in_features)
        nn.init.uniform_(self.mix.weight, -bound, bound)
        nn.init.uniform_(self.mix.bias, -bound, bound)
        self.bn.reset_parameters()

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        x = self.mix(pooled)
        if self.training and x.shape[0] == 1:
            # batch statistics of one vector are degenerate; affine only
            x = x * self.bn.weight + self.bn.bias
        else:
            x = self.bn(x)
        return F.relu(x)


class PivotNet(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.plus = PivotBranch(channels)
        self.minus = PivotBranch(channels)

    def forward(self, pooled: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Map (B, C) pooled contour embeddings to (B, C) hard positives and negatives."""
        return self.plus(pooled), self.minus(pooled)


def pivot_forward(pivot: PivotNet, contours: torch.Tensor) -> PivotPair:
    """Run the pivot on one image's (k, C) contour features."""
    pooled = pool_contours(contours).unsqueeze(0)
    se_plus, se_minus = pivot(pooled)
    return PivotPair(se_plus=se_plus[0], se_minus=se_minus[0])
