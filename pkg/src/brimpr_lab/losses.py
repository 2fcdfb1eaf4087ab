"""Alignment, masked-recombination and contrastive losses."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import gradcore as gc
from .gradcore import Tensor
from .stats import LayerGaussianStats, SourceStatsBank, disc

LOG_EPS = 1e-12


@dataclass(frozen=True)
class DiscReport:
    disc_a: float
    disc_v: float
    disc_j: float
    lambda_a: float
    lambda_v: float
    ada_tp: float


@dataclass
class LossBreakdown:
    pmgfa: float
    cmer: float
    iicl: float
    total: float
    tensor: Tensor | None = field(default=None, repr=False, compare=False)


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def adaptive_temperature(disc_j: float, tau0: float = 0.2, d0: float = 5.0) -> float:
    """1 + tau0 / (1 + exp(d0 - disc_j)), rising from 1 towards 1 + tau0 as the joint shift grows."""
    return 1.0 + tau0 * _sigmoid(disc_j - d0)


def compute_disc_report(disc_a: float, disc_v: float, disc_j: float,
                        tau0: float = 0.2, d0: float = 5.0, swap_lambdas: bool = False) -> DiscReport:
    """Detached loss coefficients for one batch.

    The milder-shifted modality's masked view gets the larger weight.  With
    ``swap_lambdas`` the two weights trade places (ablation only).
    """
    if min(disc_a, disc_v, disc_j) < 0:
        raise ValueError("discrepancies must be non-negative")
    if tau0 <= 0:
        raise ValueError("tau0 must be positive")
    s = disc_a + disc_v
    if s == 0:
        lam_a = lam_v = 0.5
    else:
        lam_a = 1.0 - disc_a / s
        lam_v = 1.0 - disc_v / s
    if swap_lambdas:
        lam_a, lam_v = lam_v, lam_a
    return DiscReport(float(disc_a), float(disc_v), float(disc_j), lam_a, lam_v,
                      adaptive_temperature(disc_j, tau0, d0))


def pmgfa_terms(bank: SourceStatsBank,
                target: Mapping[str, Sequence[LayerGaussianStats]]) -> dict[str, Tensor]:
    return {u: disc(bank[u], target[u]) for u in ("a", "v")}


def pmgfa_loss(bank: SourceStatsBank, target: Mapping[str, Sequence[LayerGaussianStats]]) -> Tensor:
    terms = pmgfa_terms(bank, target)
    return terms["a"] + terms["v"]


def calibrated_pseudo_label(logits, ada_tp: float) -> np.ndarray:
    """softmax(logits / ada_tp) as a constant array (no gradient path)."""
    if ada_tp <= 0:
        raise ValueError("temperature must be positive")
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64) / ada_tp
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def soft_cross_entropy(pred: Tensor, target: np.ndarray) -> Tensor:
    """Batch mean of -sum_k target_k log(pred_k + eps)."""
    ce = -(gc.log(pred + LOG_EPS) * target).sum(axis=-1)
    return ce.mean() if ce.ndim else ce


def cmer_loss(y_amv: Tensor, y_avm: Tensor, pseudo, report: DiscReport) -> Tensor:
    pseudo = np.asarray(pseudo, dtype=np.float64)
    if np.any(np.abs(pseudo.sum(axis=-1) - 1.0) > 1e-6) or np.any(pseudo < 0):
        raise ValueError("pseudo-labels must be probability vectors")
    return (soft_cross_entropy(y_amv, pseudo) * report.lambda_a
            + soft_cross_entropy(y_avm, pseudo) * report.lambda_v)


def _info_nce_rows(sim: Tensor, tau: float) -> Tensor:
    """Per-row -log softmax(sim / tau)[j, j]."""
    logits = sim * (1.0 / tau)
    shift = logits.data.max(axis=-1, keepdims=True)
    z = logits - shift
    B = sim.shape[0]
    pos = (z * np.eye(B)).sum(axis=-1)
    return gc.log(gc.exp(z).sum(axis=-1)) - pos


def iicl_loss(za, zv, tau: float) -> Tensor:
    """Symmetric InfoNCE over cosine similarities; row j of each modality is the positive for the other."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    za, zv = gc.as_tensor(za), gc.as_tensor(zv)
    if za.shape != zv.shape or za.ndim != 2:
        raise gc.ShapeError(f"iicl expects matching (B, d) features, got {za.shape} and {zv.shape}")
    B = za.shape[0]
    sim_av = gc.cosine_similarity(za.reshape(B, 1, -1), zv.reshape(1, B, -1))
    sim_va = sim_av.transpose(1, 0)
    return (_info_nce_rows(sim_av, tau).sum() + _info_nce_rows(sim_va, tau).sum()) * (1.0 / (2 * B))


def total_loss(pmgfa, cmer, iicl, weights: Sequence[float] = (1.0, 1.0, 1.0)) -> LossBreakdown:
    """Sum of the three terms (unweighted unless ``weights`` says otherwise)."""
    parts = [gc.as_tensor(p) for p in (pmgfa, cmer, iicl)]
    total = parts[0] * weights[0] + parts[1] * weights[1] + parts[2] * weights[2]
    vals = [p.item() for p in parts]
    return LossBreakdown(*vals, total=total.item(), tensor=total)
