"""Loss terms for gestural-score learning.

Sparseness of a length-n vector is the normalized L1/L2 statistic
(sqrt(n) - L1/L2) / (sqrt(n) - 1): exactly 1 for a one-hot vector, exactly
0 for a constant one, scale-invariant in between.  Scores are scored per
row (time dimension) and per column (gesture dimension), an entropy term
spreads activation across gestures, and the composite objectives combine
these with the reconstruction error and optionally a CTC term.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import ctc as ctc_mod
from .tensor import (
    NumericError,
    ShapeError,
    Tensor,
    as_tensor,
    custom_op,
    narrow,
    reshape,
    tmean,
    transpose,
    tsum,
)


def hoyer_rows(matrix: Tensor) -> Tensor:
    """Sparseness of every row of a 2-d tensor, as a vector.

    All-zero rows score 1 with zero gradient (an inactive row is maximally
    sparse and the formula's limit is undefined there).  Exactly-constant
    and single-nonzero rows are snapped to their exact values 0 and 1;
    everything else is clamped into [0, 1] against last-ulp rounding.
    """
    matrix = as_tensor(matrix)
    if matrix.ndim != 2:
        raise ShapeError(f"hoyer_rows expects a 2-d tensor, got {matrix.shape}")
    rows, n = matrix.shape
    if n < 2:
        raise ShapeError("sparseness needs vectors of length >= 2")
    x = matrix.data
    l1 = np.abs(x).sum(axis=1)
    l2 = np.sqrt((x * x).sum(axis=1))
    sqrt_n = np.sqrt(float(n))

    zero = l2 == 0.0
    onehot = np.count_nonzero(x, axis=1) == 1
    constant = (x.max(axis=1) == x.min(axis=1)) & ~zero
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (sqrt_n - l1 / l2) / (sqrt_n - 1.0)
    s = np.clip(s, 0.0, 1.0)
    s[constant] = 0.0
    s[onehot] = 1.0
    s[zero] = 1.0

    safe_l2 = np.where(zero, 1.0, l2)

    def backward(g):
        # d s / d x_j = -(sign(x_j)/l2 - l1 * x_j / l2^3) / (sqrt(n) - 1)
        coeff = -1.0 / (sqrt_n - 1.0)
        grad = coeff * (np.sign(x) / safe_l2[:, None]
                        - l1[:, None] * x / (safe_l2 ** 3)[:, None])
        grad[zero] = 0.0
        return (g[:, None] * grad,)

    return custom_op(s, (matrix,), backward)


def hoyer_sparseness(v) -> Tensor:
    """Sparseness of one vector in [0, 1]; scalar tensor."""
    v = as_tensor(v)
    if v.ndim != 1:
        raise ShapeError(f"hoyer_sparseness expects a vector, got {v.shape}")
    return reshape(hoyer_rows(reshape(v, (1, v.size))), (1,))


def time_sparsity(score: Tensor) -> Tensor:
    """Mean row sparseness of a (gestures x time) score."""
    score = as_tensor(score)
    if score.ndim != 2:
        raise ShapeError(f"time_sparsity expects (D, t), got {score.shape}")
    return tmean(hoyer_rows(score))


def channel_sparsity(score: Tensor) -> Tensor:
    """Mean column sparseness of a (gestures x time) score.

    The mean runs over the t columns (each a length-D vector), keeping the
    statistic scale-consistent with the row version.
    """
    score = as_tensor(score)
    if score.ndim != 2:
        raise ShapeError(f"channel_sparsity expects (D, t), got {score.shape}")
    if score.shape[0] < 2:
        raise ShapeError("channel sparseness needs at least 2 gestures")
    return tmean(hoyer_rows(transpose(score, (1, 0))))


def entropy_of_sparseness(score: Tensor) -> Tensor:
    """Entropy (natural log) of the row-sparseness distribution, scaled by 1/D.

    p_i = S(row_i) / sum_j S(row_j); E = (1/D) * sum_i -p_i ln p_i with the
    0 * ln 0 := 0 convention.  An all-constant score (every row sparseness
    zero) has no distribution to take an entropy of and raises.
    """
    score = as_tensor(score)
    s = hoyer_rows(score)
    rows = s.size

    total = float(s.data.sum())
    if total == 0.0:
        raise NumericError("degenerate score: every row has zero sparseness")
    p = s.data / total
    pos = p > 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(pos, p * np.log(np.where(pos, p, 1.0)), 0.0)
    value = -plogp.sum() / rows
    ent_sum = -plogp.sum()

    def backward(g):
        # dE/ds_k = (-ln p_k - sum_i -p_i ln p_i) / (D * T); 0 where p_k = 0
        grad = np.zeros(rows)
        grad[pos] = (-np.log(p[pos]) - ent_sum) / (rows * total)
        return (g * grad,)

    return reshape(custom_op(np.array(value), (s,), backward), (1,))


def _norm_from_square(sq: Tensor) -> Tensor:
    """sqrt with the zero-subgradient convention at an exactly-zero input."""
    root = float(np.sqrt(sq.data.reshape(-1)[0]))

    def backward(g):
        if root == 0.0:
            return (np.zeros(sq.shape),)
        return (g * 0.5 / root,)

    return custom_op(np.array(root), (sq,), backward)


class ReconstructionLoss(NamedTuple):
    mse: Tensor          # per-element mean squared error
    relative_pct: float  # reported metric, ||X - Xhat||_F / ||X||_F * 100
    norm: Tensor         # ||X - Xhat||_F, the default training objective


def reconstruction_loss(x: Tensor, xhat: Tensor) -> ReconstructionLoss:
    """Reconstruction error three ways: MSE, relative %, and the L2 norm.

    The norm is the default optimization objective (it keeps its gradient
    magnitude commensurate with weight-10 sparsity terms); the relative
    percentage is the reporting metric.
    """
    x, xhat = as_tensor(x), as_tensor(xhat)
    if x.shape != xhat.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs {xhat.shape}")
    diff = x - xhat
    sq = tsum(diff * diff)
    mse = sq * (1.0 / x.size)
    ref = float(np.linalg.norm(x.data))
    if ref == 0.0:
        raise NumericError("relative reconstruction error undefined for zero input")
    rel = float(np.linalg.norm(x.data - xhat.data)) / ref * 100.0
    return ReconstructionLoss(mse, rel, _norm_from_square(sq))


@dataclass
class LossWeights:
    """Balance factors: sparsity terms enter negatively, entropy and CTC positively."""
    lambda1: float = 10.0
    lambda2: float = 10.0
    lambda3: float = 10.0
    lambda4: float = 1.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda4"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


CSV_HEADER = "step,rec,s1,s2,entropy,ctc,total"


@dataclass
class LossReport:
    """Mini-batch averages of every loss component.

    ``total`` always reproduces rec - l1*s1 - l2*s2 + l3*entropy (+ l4*ctc)
    from the stored components.  ``objective`` is the live tensor to
    backpropagate; ``rec_relative_pct`` is the reporting metric twin of rec.
    """
    rec: float
    s1: float
    s2: float
    entropy: float
    total: float
    ctc: float | None = None
    rec_relative_pct: float = 0.0
    objective: Tensor | None = field(default=None, repr=False, compare=False)

    def to_csv_row(self, step: int) -> str:
        ctc = "" if self.ctc is None else repr(self.ctc)
        return (f"{step},{self.rec!r},{self.s1!r},{self.s2!r},"
                f"{self.entropy!r},{ctc},{self.total!r}")


def _batched(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 2:
        return reshape(x, (1,) + x.shape)
    if x.ndim != 3:
        raise ShapeError(f"expected (B, C, t) or (C, t), got {x.shape}")
    return x


def _sample(x: Tensor, b: int, length: int | None) -> Tensor:
    one = reshape(narrow(x, 0, b, 1), x.shape[1:])
    if length is not None and length < one.shape[1]:
        one = narrow(one, 1, 0, length)
    return one


def resynthesis_loss(x: Tensor, xhat: Tensor, score: Tensor, weights: LossWeights,
                     lengths: Sequence[int] | None = None,
                     rec_objective: str = "norm") -> LossReport:
    """Batch-mean of rec - l1*S1 - l2*S2 + l3*E over the valid region.

    ``rec_objective`` picks the per-sample reconstruction term: the L2
    error norm (default) or per-element MSE.  ``lengths`` marks the real
    frame count of zero-padded samples; loss terms are computed on the
    unpadded slice so padding never leaks in.
    """
    if rec_objective not in ("norm", "mse"):
        raise ValueError(f"unknown rec_objective {rec_objective!r}")
    x, xhat, score = _batched(x), _batched(xhat), _batched(score)
    batch = x.shape[0]
    if xhat.shape != x.shape or score.shape[0] != batch or score.shape[2] != x.shape[2]:
        raise ShapeError("batch/time dims of x, xhat and score must agree")

    rec_terms, s1_terms, s2_terms, ent_terms = [], [], [], []
    rel_num_sq = rel_den_sq = 0.0
    for b in range(batch):
        length = None if lengths is None else int(lengths[b])
        xb = _sample(x, b, length)
        xhb = _sample(xhat, b, length)
        hb = _sample(score, b, length)
        rec = reconstruction_loss(xb, xhb)
        rec_terms.append(rec.norm if rec_objective == "norm" else rec.mse)
        rel_num_sq += float(((xb.data - xhb.data) ** 2).sum())
        rel_den_sq += float((xb.data ** 2).sum())
        s1_terms.append(time_sparsity(hb))
        s2_terms.append(channel_sparsity(hb))
        ent_terms.append(entropy_of_sparseness(hb))

    def batch_mean(terms):
        acc = terms[0]
        for t in terms[1:]:
            acc = acc + t
        return acc * (1.0 / batch)

    rec = batch_mean(rec_terms)
    s1 = batch_mean(s1_terms)
    s2 = batch_mean(s2_terms)
    ent = batch_mean(ent_terms)
    total = rec - weights.lambda1 * s1 - weights.lambda2 * s2 + weights.lambda3 * ent
    rel = 100.0 * float(np.sqrt(rel_num_sq / rel_den_sq)) if rel_den_sq > 0 else 0.0
    return LossReport(rec=rec.item(), s1=s1.item(), s2=s2.item(), entropy=ent.item(),
                      total=total.item(), rec_relative_pct=rel, objective=total)


def joint_loss(x: Tensor, xhat: Tensor, score: Tensor,
               log_probs, targets, weights: LossWeights,
               lengths: Sequence[int] | None = None,
               rec_objective: str = "norm") -> LossReport:
    """Resynthesis objective plus lambda4 times the batch-mean CTC loss.

    ``log_probs`` / ``targets``: one (t x (A+1)) log-prob tensor and one
    label-index sequence per batch element (singulars accepted).
    """
    if isinstance(log_probs, Tensor):
        log_probs, targets = [log_probs], [targets]
    res = resynthesis_loss(x, xhat, score, weights, lengths, rec_objective)
    ctc_terms = [ctc_mod.ctc_loss(lp, tgt) for lp, tgt in zip(log_probs, targets)]
    acc = ctc_terms[0]
    for t in ctc_terms[1:]:
        acc = acc + t
    ctc = acc * (1.0 / len(ctc_terms))
    total = res.objective + weights.lambda4 * ctc
    return LossReport(rec=res.rec, s1=res.s1, s2=res.s2, entropy=res.entropy,
                      ctc=ctc.item(), total=total.item(),
                      rec_relative_pct=res.rec_relative_pct, objective=total)
