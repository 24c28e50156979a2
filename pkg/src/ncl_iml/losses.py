"""NCL contrastive loss, pivot-consistent (PC) loss and their hybrid total."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .pivot import PivotPair

PROB_EPS = 1e-7
NORM_EPS = 1e-8


@dataclass
class LossBreakdown:
    ncl: float
    pc: float
    pc_per_stage: list[float]
    total: float
    term_counts: tuple[int, int, int]  # (m, n, k)
    extra: dict = field(default_factory=dict)

    def log_row(self, step: int) -> dict:
        m, n, k = self.term_counts
        return {"step": step, "ncl": self.ncl, "pc": self.pc, "total": self.total, "m": m, "n": n, "k": k}


def _normalize(x: torch.Tensor) -> torch.Tensor:
    return x / x.norm(dim=-1, keepdim=True).clamp_min(NORM_EPS)


def similarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of two C-vectors (zero vectors are eps-stabilized)."""
    return (_normalize(a) * _normalize(b)).sum(-1)


def _pairwise(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return _normalize(a) @ _normalize(b).t()


def _contrast(anchor_pos: torch.Tensor, rivals: torch.Tensor) -> torch.Tensor:
    """-log(e^x / (e^x + sum_i e^r_i)) for x = anchor_pos[...] and rivals over the last axis."""
    if rivals.shape[-1] == 0:
        return torch.zeros_like(anchor_pos)
    rival_lse = torch.logsumexp(rivals, dim=-1)
    return torch.logaddexp(anchor_pos, rival_lse) - anchor_pos


def ncl_loss(
    pos: torch.Tensor,
    neg: torch.Tensor,
    pivot: PivotPair | None = None,
    tau: float = 0.1,
) -> torch.Tensor:
    """Three-way contrastive loss over tampered, authentic and pivot embeddings for one image.

    Args:
        pos: (m, C) features of tampered cells.
        neg: (n, C) features of authentic cells.
        pivot: hard-positive / hard-negative embeddings, or None to skip the
            two pivot terms.
        tau: temperature inside the exponent.

    The three terms contrast {pos, neg}, {se_plus vs pos, against neg} and
    {se_minus vs neg, against pos}. Terms with an empty index set contribute 0.
    """
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    m, n = pos.shape[0], neg.shape[0]
    loss = pos.new_zeros(())

    if m >= 2:
        s_pp = _pairwise(pos, pos) / tau
        s_pn = _pairwise(pos, neg) / tau
        off_diag = ~torch.eye(m, dtype=torch.bool, device=pos.device)
        if n:
            rival = torch.logsumexp(s_pn, dim=1, keepdim=True).expand(m, m)
            per_pair = torch.logaddexp(s_pp, rival) - s_pp
        else:
            per_pair = torch.zeros_like(s_pp)
        loss = loss + per_pair[off_diag].mean()

    if pivot is not None:
        if m >= 1:
            plus = pivot.se_plus.unsqueeze(0)
            s_p = _pairwise(plus, pos)[0] / tau
            s_n = _pairwise(plus, neg)[0] / tau
            loss = loss + _contrast(s_p, s_n.expand(m, n)).mean()
        if n >= 1:
            minus = pivot.se_minus.unsqueeze(0)
            t_n = _pairwise(minus, neg)[0] / tau
            t_p = _pairwise(minus, pos)[0] / tau
            loss = loss + _contrast(t_n, t_p.expand(n, m)).mean()
    return loss


def bce(probs: torch.Tensor, gt: torch.Tensor, eps: float = PROB_EPS) -> torch.Tensor:
    """Element-wise binary cross-entropy on clamped probabilities."""
    p = probs.clamp(eps, 1.0 - eps)
    return -(gt * torch.log(p) + (1.0 - gt) * torch.log(1.0 - p))


def pc_stage_loss(probs: torch.Tensor, gt: torch.Tensor, contour: torch.Tensor, mu: float) -> torch.Tensor:
    """PC loss of one supervision stage; leading dims are images and are averaged.

    Per image: mu * mean BCE over contour pixels (0 if none) plus
    (1 - mu) * mean BCE over all pixels.
    """
    if probs.shape != gt.shape or probs.shape != contour.shape:
        raise ValueError(f"shape mismatch: probs {tuple(probs.shape)}, gt {tuple(gt.shape)}, contour {tuple(contour.shape)}")
    gt = gt.to(probs.dtype)
    contour = contour.to(probs.dtype)
    err = bce(probs, gt)
    n_contour = contour.sum(dim=(-2, -1))
    contour_term = (err * contour).sum(dim=(-2, -1)) / n_contour.clamp_min(1.0)
    all_term = err.mean(dim=(-2, -1))
    per_image = mu * contour_term + (1.0 - mu) * all_term
    return per_image.mean()


def pc_loss(stages, mu: float = 0.9) -> tuple[torch.Tensor, list[torch.Tensor]]:
    """Sum of per-stage PC losses.

    ``stages`` is a sequence of ``(probs, gt, contour)`` triples, one per
    auxiliary head. Returns the total and the per-stage list.
    """
    if not 0.0 <= mu <= 1.0:
        raise ValueError(f"mu must lie in [0, 1], got {mu}")
    stages = list(stages)
    if not stages:
        raise ValueError("pc_loss needs at least one stage")
    per_stage = [pc_stage_loss(p, g, c, mu) for p, g, c in stages]
    total = per_stage[0]
    for s in per_stage[1:]:
        total = total + s
    return total, per_stage


def total_loss(ncl, pc, omega: float = 0.01):
    return omega * ncl + pc
