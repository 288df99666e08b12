"""Curvature estimates from a memory of gradients and the quasi-Newton proposal.

The curvature matrix B tracks the negative Hessian of the log-target, so pairs are
fed as s = theta_l - theta_{l-1} and z = -(G_l - G_{l-1}) unless the gradient-difference
convention is selected. B is kept unscaled; the step size enters only when the
Gaussian proposal N(mu, eps^2 B^{-1}) is built.
"""
from __future__ import annotations

import logging
import math
from collections import deque
from typing import Iterable, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy import linalg

from data.models.chain_models import (
    CorrectionMethod,
    CurvatureEstimate,
    H0Policy,
    PairConvention,
    QuasiNewtonStrategy,
)

logger = logging.getLogger(__name__)

DAMPING_THRESHOLD = 0.2
SKIP_TOLERANCE = 1e-12


# ============================================================
# Gradient memory
# ============================================================

class MemoryEntry(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    iteration: int
    theta: np.ndarray
    gradient: np.ndarray
    log_target: float


class GradientMemory:
    """Ring buffer of the last M (theta, gradient, log-target) triples of one chain."""

    def __init__(self, length: int, entries: Optional[Iterable[MemoryEntry]] = None):
        if length < 1:
            raise ValueError(f"memory length must be positive, got {length}")
        self.length = length
        self._entries = deque(entries or [], maxlen=length)

    def push(self, entry: MemoryEntry) -> None:
        self._entries.append(entry)

    def add(self, iteration: int, theta: np.ndarray, gradient: np.ndarray, log_target: float) -> None:
        self.push(MemoryEntry(
            iteration=iteration,
            theta=np.array(theta, dtype=float),
            gradient=np.array(gradient, dtype=float),
            log_target=float(log_target),
        ))

    def appended(self, entry: MemoryEntry) -> "GradientMemory":
        """Copy with ``entry`` appended and the oldest entry dropped when full."""
        copy = GradientMemory(self.length, self._entries)
        copy.push(entry)
        return copy

    @property
    def entries(self) -> List[MemoryEntry]:
        return list(self._entries)

    @property
    def anchor(self) -> MemoryEntry:
        """Oldest entry, theta_{k-M}; the quasi-Newton proposal is centred there."""
        return self._entries[0]

    @property
    def is_full(self) -> bool:
        return len(self._entries) == self.length

    def __len__(self) -> int:
        return len(self._entries)


def extract_sorted_unique(memory: GradientMemory) -> List[MemoryEntry]:
    """
    Drop repeated parameter points (exact equality; rejections repeat states) and sort
    the rest by ascending log-target. The newest copy of a repeated point is kept.
    """
    unique = {}
    for entry in memory.entries:
        unique[entry.theta.tobytes()] = entry
    return sorted(unique.values(), key=lambda e: e.log_target)


def curvature_pairs(
    entries: List[MemoryEntry],
    convention: PairConvention = PairConvention.NEGATED_GRADIENT,
) -> List[Tuple[np.ndarray, np.ndarray]]:
    sign = -1.0 if PairConvention(convention) == PairConvention.NEGATED_GRADIENT else 1.0
    return [
        (cur.theta - prev.theta, sign * (cur.gradient - prev.gradient))
        for prev, cur in zip(entries[:-1], entries[1:])
    ]


# ============================================================
# Updates
# ============================================================

def _rank_two_update(B: np.ndarray, s: np.ndarray, z: np.ndarray, Bs: np.ndarray, sBs: float) -> np.ndarray:
    # B - Bs s'B / (s'Bs) + z z' / (z's)
    updated = B - np.outer(Bs, Bs) / sBs + np.outer(z, z) / float(z @ s)
    return 0.5 * (updated + updated.T)


def bfgs_update(B: np.ndarray, s: np.ndarray, z: np.ndarray) -> Optional[np.ndarray]:
    """
    BFGS update B' = B - B s s'B / (s'Bs) + z z' / (z's), which satisfies the secant
    condition B' s = z. Returns None (skip) when s'z or s'Bs is negligible relative
    to the norms involved; the sign of s'z is not checked.
    """
    B = np.asarray(B, dtype=float)
    s = np.asarray(s, dtype=float)
    z = np.asarray(z, dtype=float)
    sz = float(s @ z)
    if abs(sz) <= SKIP_TOLERANCE * np.linalg.norm(s) * np.linalg.norm(z):
        return None
    Bs = B @ s
    sBs = float(s @ Bs)
    if abs(sBs) <= SKIP_TOLERANCE * np.linalg.norm(s) * np.linalg.norm(Bs):
        return None
    return _rank_two_update(B, s, z, Bs, sBs)


def damped_bfgs_update(B: np.ndarray, s: np.ndarray, z: np.ndarray) -> Tuple[Optional[np.ndarray], bool]:
    """
    Damped update: z is replaced by r = beta z + (1 - beta) B s so that
    s'r >= 0.2 s'Bs > 0, which keeps B positive definite. Returns (B', damped).
    """
    B = np.asarray(B, dtype=float)
    s = np.asarray(s, dtype=float)
    z = np.asarray(z, dtype=float)
    if not np.any(s):
        return None, False
    Bs = B @ s
    sBs = float(s @ Bs)
    sz = float(s @ z)
    if sz >= DAMPING_THRESHOLD * sBs:
        return _rank_two_update(B, s, z, Bs, sBs), False
    beta = (1.0 - DAMPING_THRESHOLD) * sBs / (sBs - sz)
    r = beta * z + (1.0 - beta) * Bs
    return _rank_two_update(B, s, r, Bs, sBs), True


# ============================================================
# Corrections
# ============================================================

def _symmetric_eigh(B: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return np.linalg.eigh(0.5 * (B + B.T))


def _correct(B: np.ndarray, method: CorrectionMethod, empirical_covariance: Optional[np.ndarray], delta: float) -> Tuple[np.ndarray, bool]:
    method = CorrectionMethod(method)
    p = B.shape[0]
    if method == CorrectionMethod.HYB:
        if empirical_covariance is None:
            raise ValueError("the hybrid correction needs an empirical covariance estimate")
        inverse = np.linalg.inv(empirical_covariance)
        return 0.5 * (inverse + inverse.T), False

    eigval, eigvec = _symmetric_eigh(B)
    scale = max(float(np.max(np.abs(eigval))), 1.0)
    zero = np.abs(eigval) <= 1e-12 * scale
    if method == CorrectionMethod.FLIP:
        corrected = (eigvec * np.abs(eigval)) @ eigvec.T
    elif method == CorrectionMethod.REG:
        lam_min = float(eigval[0])
        corrected = B - 2.0 * lam_min * np.eye(p) if lam_min < 0.0 else B.copy()
        zero = np.abs(eigval - 2.0 * min(lam_min, 0.0)) <= 1e-12 * scale
    else:
        raise ValueError(f"unknown correction method {method}")

    jittered = bool(np.any(zero))
    if jittered:
        corrected = corrected + delta * np.eye(p)
    return 0.5 * (corrected + corrected.T), jittered


def correct_curvature(
    B_indef: np.ndarray,
    method: CorrectionMethod,
    empirical_covariance: Optional[np.ndarray] = None,
    delta: float = 1.0,
) -> np.ndarray:
    """
    Make a symmetric estimate positive definite: flip takes |eigenvalues|, reg shifts
    by -2 lambda_min when lambda_min < 0, hyb replaces the estimate by Sigma_emp^{-1}.
    Zero eigenvalues that survive get a delta * I jitter.
    """
    corrected, _ = _correct(np.asarray(B_indef, dtype=float), method, empirical_covariance, delta)
    return corrected


# ============================================================
# Curvature construction
# ============================================================

def _initial_matrix(pairs, dim: int, policy: H0Policy, delta: float) -> np.ndarray:
    if H0Policy(policy) == H0Policy.SECANT_SCALED:
        for s, z in pairs:
            sz = float(s @ z)
            if sz > 0.0:
                return float(z @ z) / sz * np.eye(dim)
    return delta * np.eye(dim)


def build_curvature(
    memory: GradientMemory,
    strategy: QuasiNewtonStrategy = QuasiNewtonStrategy.DAMPED,
    h0_policy: H0Policy = H0Policy.SCALED_IDENTITY,
    delta: float = 100.0,
    correction: CorrectionMethod = CorrectionMethod.FLIP,
    empirical_covariance: Optional[np.ndarray] = None,
    pair_convention: PairConvention = PairConvention.NEGATED_GRADIENT,
) -> CurvatureEstimate:
    """
    Limited-memory curvature estimate from the sorted unique memory entries. With
    gradient-difference pairs a concave log-target gives s'z < 0, so undamped updates
    drive B indefinite and the correction does the work.
    """
    if delta <= 0.0:
        raise ValueError(f"delta must be positive, got {delta}")
    strategy = QuasiNewtonStrategy(strategy)
    entries = extract_sorted_unique(memory)
    dim = entries[0].theta.size if entries else 0
    if len(entries) < 2:
        return CurvatureEstimate(matrix=delta * np.eye(dim), fallback_identity=True, min_eigenvalue=delta)

    pairs = curvature_pairs(entries, pair_convention)
    B = _initial_matrix(pairs, dim, h0_policy, delta)
    damped_used = False
    skipped = 0
    for s, z in pairs:
        if strategy == QuasiNewtonStrategy.DAMPED:
            updated, damped = damped_bfgs_update(B, s, z)
            damped_used = damped_used or damped
        elif strategy == QuasiNewtonStrategy.ENFORCE and float(s @ z) <= 0.0:
            updated = None
        else:
            updated = bfgs_update(B, s, z)
        if updated is None:
            skipped += 1
            continue
        B = updated

    corrected = CorrectionMethod.NONE
    jittered = False
    eigval = np.linalg.eigvalsh(B) if np.all(np.isfinite(B)) else np.array([-np.inf])
    if strategy != QuasiNewtonStrategy.DAMPED and not eigval[0] > 0.0:
        method = CorrectionMethod(correction)
        if method == CorrectionMethod.NONE:
            method = CorrectionMethod.FLIP
        if not np.all(np.isfinite(B)):
            B = delta * np.eye(dim)
        B, jittered = _correct(B, method, empirical_covariance, delta)
        corrected = method
        eigval = np.linalg.eigvalsh(B)

    return CurvatureEstimate(
        matrix=B,
        damped_used=damped_used,
        corrected=corrected,
        jittered=jittered,
        min_eigenvalue=float(eigval[0]),
        n_pairs=len(pairs),
        n_skipped=skipped,
    )


# ============================================================
# Gaussian proposal
# ============================================================

class GaussianProposal:
    """N(mean, eps^2 B^{-1}) parametrized by the Cholesky factor of B / eps^2."""

    def __init__(self, mean: np.ndarray, precision_cholesky: np.ndarray):
        self.mean = mean
        self._chol = precision_cholesky

    @classmethod
    def from_precision(cls, mean: np.ndarray, precision: np.ndarray) -> "GaussianProposal":
        return cls(np.asarray(mean, dtype=float), linalg.cholesky(precision, lower=True))

    @classmethod
    def from_covariance(cls, mean: np.ndarray, covariance: np.ndarray) -> "GaussianProposal":
        return cls.from_precision(mean, np.linalg.inv(covariance))

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        xi = rng.standard_normal(self.mean.size)
        return self.mean + linalg.solve_triangular(self._chol.T, xi, lower=False)

    def log_density(self, x: np.ndarray) -> float:
        w = self._chol.T @ (np.asarray(x, dtype=float) - self.mean)
        return float(
            -0.5 * self.mean.size * math.log(2.0 * math.pi)
            + np.sum(np.log(np.diag(self._chol)))
            - 0.5 * w @ w
        )


class QuasiNewtonProposal(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    proposal: GaussianProposal
    curvature: CurvatureEstimate


def build_qn_proposal(
    memory: GradientMemory,
    step_size: float,
    anchor: Optional[MemoryEntry] = None,
    strategy: QuasiNewtonStrategy = QuasiNewtonStrategy.DAMPED,
    correction: CorrectionMethod = CorrectionMethod.NONE,
    delta: float = 100.0,
    h0_policy: H0Policy = H0Policy.SCALED_IDENTITY,
    empirical_covariance: Optional[np.ndarray] = None,
    pair_convention: PairConvention = PairConvention.NEGATED_GRADIENT,
) -> QuasiNewtonProposal:
    """
    Proposal N(mu_QN, eps^2 B^{-1}) with mu_QN = anchor + eps^2/2 B^{-1} G(anchor).
    The anchor defaults to the oldest memory entry. A failed factorization of B is
    retried once with B + delta I before falling back to delta I.
    """
    anchor = anchor or memory.anchor
    curvature = build_curvature(memory, strategy, h0_policy, delta, correction, empirical_covariance, pair_convention)
    eps2 = step_size ** 2
    B = curvature.matrix
    chol = None
    for attempt, candidate in enumerate((B, B + delta * np.eye(B.shape[0]))):
        try:
            chol = linalg.cholesky(candidate, lower=True)
        except (linalg.LinAlgError, ValueError):
            logger.debug("Cholesky of the curvature failed (attempt %d)", attempt + 1)
            continue
        if attempt == 1:
            curvature = curvature.model_copy(update={"matrix": candidate, "jittered": True})
        break
    if chol is None:
        dim = B.shape[0]
        curvature = curvature.model_copy(update={
            "matrix": delta * np.eye(dim),
            "fallback_identity": True,
            "min_eigenvalue": delta,
        })
        chol = math.sqrt(delta) * np.eye(dim)

    drift = 0.5 * eps2 * linalg.cho_solve((chol, True), anchor.gradient)
    mean = anchor.theta + drift
    proposal = GaussianProposal(mean, chol / step_size)
    return QuasiNewtonProposal(proposal=proposal, curvature=curvature)


def qn_propose(memory: GradientMemory, step_size: float, rng: np.random.Generator, **settings) -> Tuple[np.ndarray, float, CurvatureEstimate]:
    """Draw theta' from the quasi-Newton proposal anchored at the oldest memory entry."""
    built = build_qn_proposal(memory, step_size, **settings)
    candidate = built.proposal.sample(rng)
    return candidate, built.proposal.log_density(candidate), built.curvature


def qn_log_density(x: np.ndarray, memory: GradientMemory, step_size: float, anchor: Optional[MemoryEntry] = None, **settings) -> float:
    """log q(x | memory) for the proposal anchored at ``anchor`` (default: oldest entry)."""
    return build_qn_proposal(memory, step_size, anchor=anchor, **settings).proposal.log_density(x)
