"""The training objective: focal semantic loss, smooth-l1 vote loss,
centerness / IoU-box / classification losses for stage I, and the residual
plus IoU refinement loss for stage II.

Every term is differentiable through the autodiff graph; the rotated-IoU
term gets its per-box analytic gradient from the dual-number clipping pass
(finite differences only at flagged degeneracies).
"""
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from . import autodiff as ad
from . import geometry
from .autodiff import Var

__all__ = [
    "LossWeights", "LossReport", "NonFiniteLossError",
    "focal_loss", "smooth_l1", "binary_cross_entropy",
    "iou_loss_rows", "rebox_loss", "total_loss",
]

PROB_EPS = 1e-7
TERM_ORDER = ("sem", "vote", "cntr", "box", "cls", "rebox")


class NonFiniteLossError(RuntimeError):
    def __init__(self, term, value):
        super().__init__(f"loss term {term!r} is non-finite ({value})")
        self.term = term


@dataclass
class LossWeights:
    """Balancing factors; all 1.0 except the stage-II refinement at 0.5."""

    sem: float = 1.0
    vote: float = 1.0
    cntr: float = 1.0
    box: float = 1.0
    cls: float = 1.0
    rebox: float = 0.5

    def as_dict(self):
        return {k: getattr(self, k) for k in TERM_ORDER}


@dataclass
class LossReport:
    """Per-term scalar losses plus the weighted total (total is exactly the
    sum as accumulated, for bit-level reproducibility per run)."""

    terms: Dict[str, float]
    total: float
    counts: Dict[str, int] = field(default_factory=dict)

    def line(self) -> str:
        parts = " ".join(f"{k}={self.terms[k]:.6f}" for k in TERM_ORDER if k in self.terms)
        return f"total={self.total:.6f} {parts}"


def _as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(np.asarray(x, dtype=np.float64))


def focal_loss(probs, targets, gamma: float = 2.0, alpha_bal: float = 1.0) -> Var:
    """Mean over voxels of the summed per-class binary focal terms
    -alpha_bal * (1 - p_t)^gamma * log(p_t), with p_t = p for the target
    class and 1 - p elsewhere. Targets of -1 mean background (all-negative).
    """
    probs = _as_var(probs)
    n, k = probs.data.shape
    if n == 0:
        return Var(np.zeros(()))
    targets = np.asarray(targets, dtype=np.int64)
    onehot = np.zeros((n, k))
    fg = targets >= 0
    onehot[np.nonzero(fg)[0], targets[fg]] = 1.0
    p_t = probs * onehot + (1.0 - probs) * (1.0 - onehot)
    p_t = ad.clip(p_t, PROB_EPS, 1.0 - PROB_EPS)
    term = ad.log(p_t) * ((1.0 - p_t) ** gamma) * (-alpha_bal)
    return term.sum() * (1.0 / n)


def smooth_l1(pred, target, beta: float = 1.0) -> Var:
    """Elementwise 0.5 x^2/beta below beta else |x| - beta/2, averaged over
    all elements."""
    pred = _as_var(pred)
    diff = pred - np.asarray(target, dtype=np.float64)
    if diff.data.size == 0:
        return Var(np.zeros(()))
    return ad.huber(diff, beta).mean()


def binary_cross_entropy(probs, targets) -> Var:
    """Mean BCE with probability clamping at PROB_EPS."""
    probs = _as_var(probs)
    if probs.data.size == 0:
        return Var(np.zeros(()))
    y = np.asarray(targets, dtype=np.float64)
    p = ad.clip(probs, PROB_EPS, 1.0 - PROB_EPS)
    return (ad.log(p) * y + ad.log(1.0 - p) * (1.0 - y)).mean() * -1.0


def iou_loss_rows(decoded: Var, gt_params) -> Var:
    """Per-row 1 - iou3d(decoded, gt) with analytic backward.

    decoded: (N, 7) Var of box parameter rows; gt_params: (N, 7) constants.
    """
    gt = np.atleast_2d(np.asarray(gt_params, dtype=np.float64))
    n = decoded.data.shape[0]
    vals = np.empty(n)
    grads = np.empty((n, 7))
    for i in range(n):
        iou, g = geometry.iou3d_grad(decoded.data[i], gt[i])
        vals[i] = 1.0 - iou
        grads[i] = -g

    def bw(g):
        decoded._accum(g[:, None] * grads)

    return ad.custom(vals, (decoded,), bw)


def rebox_loss(pred_residuals: Var, targets, decoded_boxes: Var, gt_params,
               beta: float = 1.0) -> Var:
    """Refinement loss: the 8 residual components' smooth-l1 summed per
    proposal, plus 1 - IoU of the decoded refined box, both averaged over
    proposals."""
    pred_residuals = _as_var(pred_residuals)
    n = pred_residuals.data.shape[0]
    if n == 0:
        return Var(np.zeros(()))
    diff = pred_residuals - np.asarray(targets, dtype=np.float64)
    reg = ad.huber(diff, beta).sum() * (1.0 / n)
    iou_term = iou_loss_rows(decoded_boxes, gt_params).mean()
    return reg + iou_term


def total_loss(terms: Dict[str, Var], weights: LossWeights):
    """Weighted sum of the named terms in fixed order. A non-finite term
    aborts with a diagnostic naming it.

    Returns (total Var for backprop, LossReport).
    """
    wd = weights.as_dict()
    total: Optional[Var] = None
    scalars = {}
    for name in TERM_ORDER:
        if name not in terms:
            continue
        term = _as_var(terms[name])
        value = float(term.data)
        if not np.isfinite(value):
            raise NonFiniteLossError(name, value)
        scalars[name] = value
        piece = term * wd[name]
        total = piece if total is None else total + piece
    if total is None:
        total = Var(np.zeros(()))
    return total, LossReport(scalars, float(total.data))
