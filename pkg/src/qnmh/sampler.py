"""Metropolis-Hastings kernels.

pMH0/pMH1 run the usual first-order chain. qMH treats the last M states as the
chain state: the proposal is anchored at theta_{k-M}, built from the gradient
memory, and a rejection sends the chain back to theta_{k-M}.
"""
from __future__ import annotations

import logging
import math
import time
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from data.models.chain_models import (
    ChainTrace,
    CorrectionMethod,
    ProposalConfig,
    ProposalKind,
)
from data.models.ssm_models import DataSet, ParameterVector, PriorSpec
from src.qnmh.errors import InsufficientSamplesError, ModelSupportError, QNMHError
from src.qnmh.models import LikelihoodBackend, StateSpaceModel, TargetEvaluation
from src.qnmh.quasi_newton import (
    GaussianProposal,
    GradientMemory,
    MemoryEntry,
    build_qn_proposal,
)
from src.qnmh.utils import make_rng, spawn_seeds

logger = logging.getLogger(__name__)

TargetFn = Callable[[np.ndarray, bool], TargetEvaluation]

# natural-coordinate starting points when none is given
DEFAULT_START = {
    3: np.array([0.0, 0.5, 1.0]),
    4: np.array([0.0, 0.9, 0.2, 0.0]),
}


# ============================================================
# Acceptance and first-order proposals
# ============================================================

def mh_accept(log_target_new: float, log_target_old: float, log_q_rev: float, log_q_fwd: float, u: float) -> bool:
    """accept iff log u <= min(0, log pi' - log pi + log q_rev - log q_fwd)"""
    if not 0.0 <= u < 1.0:
        raise ValueError(f"u must lie in [0, 1), got {u}")
    if log_target_new == -math.inf or math.isnan(log_target_new):
        return False
    if log_target_old == -math.inf:
        return True
    log_alpha = min(0.0, (log_target_new - log_target_old) + (log_q_rev - log_q_fwd))
    if u == 0.0:
        return True
    return math.log(u) <= log_alpha


def pmh_proposal(theta_bar: np.ndarray, gradient: Optional[np.ndarray], config: ProposalConfig) -> GaussianProposal:
    """N(theta + eps^2/2 P G, eps^2 P); pMH0 ignores the gradient."""
    theta_bar = np.asarray(theta_bar, dtype=float)
    P = config.preconditioner if config.preconditioner is not None else np.eye(theta_bar.size)
    eps2 = config.step_size ** 2
    mean = theta_bar.copy()
    if config.kind == ProposalKind.PMH1:
        if gradient is None:
            raise ValueError("pMH1 needs the gradient at the current state")
        mean = mean + 0.5 * eps2 * P @ gradient
    return GaussianProposal.from_covariance(mean, eps2 * P)


def pmh_propose(
    theta_bar: np.ndarray,
    config: ProposalConfig,
    rng: np.random.Generator,
    gradient: Optional[np.ndarray] = None,
    gradient_at: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> Tuple[np.ndarray, float, float]:
    """
    Draw theta' and return (theta', log q(theta'|theta), log q(theta|theta')).
    For pMH1 the reverse term needs G(theta'), supplied through ``gradient_at``.
    """
    theta_bar = np.asarray(theta_bar, dtype=float)
    forward = pmh_proposal(theta_bar, gradient, config)
    candidate = forward.sample(rng)
    log_q_fwd = forward.log_density(candidate)
    candidate_gradient = None
    if config.kind == ProposalKind.PMH1:
        if gradient_at is None:
            raise ValueError("pMH1 needs a gradient evaluator for the reverse density")
        candidate_gradient = gradient_at(candidate)
    log_q_rev = pmh_proposal(candidate, candidate_gradient, config).log_density(theta_bar)
    return candidate, log_q_fwd, log_q_rev


# ============================================================
# Chain
# ============================================================

def _safe_evaluate(target: TargetFn, theta_bar: np.ndarray, need_gradient: bool) -> TargetEvaluation:
    """Backend failures become zero-density evaluations flagged as failed."""
    try:
        evaluation = target(theta_bar, need_gradient)
    except (QNMHError, ValueError, FloatingPointError, ArithmeticError, np.linalg.LinAlgError) as exc:
        return TargetEvaluation(
            log_target=-math.inf,
            log_likelihood=-math.inf,
            backend_failed=True,
            message=f"{type(exc).__name__}: {exc}",
        )
    if math.isnan(evaluation.log_target) or evaluation.log_target == math.inf:
        return evaluation.model_copy(update={"log_target": -math.inf, "backend_failed": True, "message": "non-finite log-target"})
    if need_gradient and evaluation.log_target > -math.inf:
        if evaluation.gradient is None or not np.all(np.isfinite(evaluation.gradient)):
            return evaluation.model_copy(update={"log_target": -math.inf, "backend_failed": True, "message": "non-finite gradient"})
    return evaluation


def _spd_covariance(samples: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    if np.unique(samples, axis=0).shape[0] < 2:
        raise InsufficientSamplesError(f"need at least 2 distinct samples, got {np.unique(samples, axis=0).shape[0]}")
    cov = np.atleast_2d(np.cov(samples, rowvar=False))
    cov = 0.5 * (cov + cov.T)
    eigval, eigvec = np.linalg.eigh(cov)
    threshold = floor * max(float(np.max(eigval)), 1.0)
    if eigval[0] <= threshold:
        eigval = np.maximum(eigval, threshold)
        cov = (eigvec * eigval) @ eigvec.T
        cov = 0.5 * (cov + cov.T)
    return cov


class ChainRecorder:
    """Preallocated per-iteration arrays of a chain of length K."""

    def __init__(self, K: int, dim: int):
        self.states = np.empty((K, dim))
        self.log_target = np.empty(K)
        self.gradients = np.full((K, dim), np.nan)
        self.candidates = np.full((K, dim), np.nan)
        self.accepted = np.zeros(K, dtype=bool)
        self.corrected = np.zeros(K, dtype=bool)
        self.fallback = np.zeros(K, dtype=bool)
        self.backend_failed = np.zeros(K, dtype=bool)
        self.kinds: List[str] = [""] * K
        self.time_us = np.zeros(K, dtype=np.int64)

    def set_state(self, k: int, theta: np.ndarray, log_target: float, gradient: Optional[np.ndarray]) -> None:
        self.states[k] = theta
        self.log_target[k] = log_target
        if gradient is not None:
            self.gradients[k] = gradient


def run_target_chain(
    target: TargetFn,
    theta0_bar: np.ndarray,
    proposal: ProposalConfig,
    K: int,
    seed: int,
    burn_in: int = 0,
    parameter_names: Optional[Sequence[str]] = None,
    to_natural: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    record_timing: bool = True,
) -> ChainTrace:
    """
    Run K iterations (state 0 is the start) on an arbitrary log-target given as
    ``target(theta_bar, need_gradient) -> TargetEvaluation``.
    """
    if K < 2:
        raise ValueError(f"K must be >= 2, got {K}")
    if not 0 <= burn_in < K:
        raise ValueError(f"burn-in {burn_in} must lie in [0, K={K})")
    theta0_bar = np.asarray(theta0_bar, dtype=float)
    dim = theta0_bar.size
    names = list(parameter_names or [f"theta_{j + 1}" for j in range(dim)])
    is_qmh = proposal.kind == ProposalKind.QMH
    need_gradient = proposal.kind != ProposalKind.PMH0
    proposal_seed, uniform_seed = spawn_seeds(seed, 2)
    rng = make_rng(proposal_seed)
    u_rng = make_rng(uniform_seed)
    rec = ChainRecorder(K, dim)

    start = _safe_evaluate(target, theta0_bar, need_gradient)
    if start.log_target == -math.inf:
        raise ModelSupportError(f"zero posterior density at the starting point: {start.message or 'outside the prior support'}")
    rec.set_state(0, theta0_bar, start.log_target, start.gradient)
    rec.kinds[0] = "start"

    theta, ell, grad = theta0_bar.copy(), start.log_target, start.gradient
    memory = GradientMemory(proposal.memory_length) if is_qmh else None
    if memory is not None:
        memory.add(0, theta, grad, ell)
    warmup = min(proposal.memory_length, K - 1) if is_qmh else 0
    empirical_covariance = proposal.empirical_covariance
    hyb_pending = is_qmh and proposal.correction == CorrectionMethod.HYB and empirical_covariance is None
    if hyb_pending:
        logger.warning("no empirical covariance for the hybrid correction; flip stands in until the burn-in estimate")

    logger.info("Running %s chain: K=%d, burn-in=%d, seed=%d", proposal.label, K, burn_in, seed)
    n_failed = 0
    for k in range(1, K):
        tic = time.perf_counter_ns()

        if hyb_pending and k == burn_in and k >= 4:
            try:
                empirical_covariance = _spd_covariance(rec.states[burn_in // 2:burn_in])
                hyb_pending = False
                logger.info("Hybrid correction: empirical covariance estimated from iterations %d-%d", burn_in // 2, burn_in - 1)
            except InsufficientSamplesError as exc:
                logger.warning("Hybrid correction keeps flip: %s", exc)

        corrected = fallback = False
        if is_qmh and k <= warmup:
            # symmetric random walk seeds the memory
            kind = "warmup"
            base_theta, base_ell, base_grad = theta, ell, grad
            candidate = theta + proposal.warmup_step * rng.standard_normal(dim)
            evaluation = _safe_evaluate(target, candidate, True)
            log_q_fwd = log_q_rev = 0.0
        elif is_qmh:
            kind = proposal.label
            anchor = memory.anchor
            base_theta, base_ell, base_grad = anchor.theta, anchor.log_target, anchor.gradient
            settings = dict(
                strategy=proposal.strategy,
                correction=CorrectionMethod.FLIP if hyb_pending else proposal.correction,
                delta=proposal.delta,
                h0_policy=proposal.h0_policy,
                empirical_covariance=empirical_covariance,
                pair_convention=proposal.pair_convention,
            )
            built = build_qn_proposal(memory, proposal.step_size, **settings)
            corrected = built.curvature.corrected != CorrectionMethod.NONE
            fallback = built.curvature.fallback_identity
            if fallback:
                logger.debug("k=%d: curvature fell back to delta*I", k)
            candidate = built.proposal.sample(rng)
            log_q_fwd = built.proposal.log_density(candidate)
            evaluation = _safe_evaluate(target, candidate, True)
            log_q_rev = 0.0
            if evaluation.log_target > -math.inf:
                entry = MemoryEntry(iteration=k, theta=candidate, gradient=evaluation.gradient, log_target=evaluation.log_target)
                reverse = build_qn_proposal(memory.appended(entry), proposal.step_size, anchor=entry, **settings)
                log_q_rev = reverse.proposal.log_density(anchor.theta)
        else:
            kind = proposal.label
            base_theta, base_ell, base_grad = theta, ell, grad
            forward = pmh_proposal(theta, grad, proposal)
            candidate = forward.sample(rng)
            log_q_fwd = forward.log_density(candidate)
            evaluation = _safe_evaluate(target, candidate, need_gradient)
            log_q_rev = log_q_fwd
            if evaluation.log_target > -math.inf:
                log_q_rev = pmh_proposal(candidate, evaluation.gradient, proposal).log_density(theta)

        if evaluation.backend_failed:
            n_failed += 1
            logger.warning("k=%d: backend failed at the candidate (%s); rejecting", k, evaluation.message)

        accept = mh_accept(evaluation.log_target, base_ell, log_q_rev, log_q_fwd, u_rng.uniform())
        if accept:
            theta, ell, grad = candidate, evaluation.log_target, evaluation.gradient
        else:
            theta, ell, grad = base_theta, base_ell, base_grad
        if memory is not None:
            memory.add(k, theta, grad, ell)

        rec.set_state(k, theta, ell, grad)
        rec.candidates[k] = candidate
        rec.accepted[k] = accept
        rec.corrected[k] = corrected
        rec.fallback[k] = fallback
        rec.backend_failed[k] = evaluation.backend_failed
        rec.kinds[k] = kind
        if record_timing:
            rec.time_us[k] = (time.perf_counter_ns() - tic) // 1000

    to_natural = to_natural or (lambda v: np.asarray(v, dtype=float))
    natural = np.vstack([to_natural(row) for row in rec.states])
    acc_rate = float(np.mean(rec.accepted[1 + warmup:])) if K > 1 + warmup else float("nan")
    logger.info("Finished %s chain: acceptance %.3f, %d backend failures", proposal.label, acc_rate, n_failed)

    return ChainTrace(
        parameter_names=names,
        states=rec.states,
        natural=natural,
        log_target=rec.log_target,
        gradients=rec.gradients,
        candidates=rec.candidates,
        accepted=rec.accepted,
        corrected=rec.corrected,
        fallback=rec.fallback,
        backend_failed=rec.backend_failed,
        proposal_kinds=rec.kinds,
        time_us=rec.time_us,
        burn_in=burn_in,
        warmup=warmup,
        anchor_lag=proposal.memory_length if is_qmh else 1,
        proposal_label=proposal.label,
        seed=int(seed),
    )


def run_chain(
    model: StateSpaceModel,
    data: DataSet,
    backend: LikelihoodBackend,
    proposal: ProposalConfig,
    K: int,
    seed: int,
    burn_in: int = 0,
    prior: Optional[PriorSpec] = None,
    theta0: Optional[ParameterVector] = None,
    record_timing: bool = True,
) -> ChainTrace:
    """
    Posterior sampling for a state-space model. The chain lives in unconstrained
    coordinates and starts from ``theta0`` (natural coordinates).
    """
    prior = prior or model.default_prior()
    start = theta0 if theta0 is not None else ParameterVector.natural(DEFAULT_START[model.dim])
    theta0_bar = model.to_unconstrained(start).values
    backend_rng = make_rng(spawn_seeds(seed, 3)[2])

    def target(theta_bar: np.ndarray, need_gradient: bool) -> TargetEvaluation:
        return backend.evaluate(theta_bar, data, prior, rng=backend_rng, need_gradient=need_gradient)

    return run_target_chain(
        target,
        theta0_bar,
        proposal,
        K,
        seed,
        burn_in=burn_in,
        parameter_names=model.parameter_names,
        to_natural=model.natural_values,
        record_timing=record_timing,
    )


def pilot_preconditioner(trace: ChainTrace, start: Optional[int] = None, stop: Optional[int] = None) -> np.ndarray:
    """
    Sample covariance of the unconstrained states in [start, stop), by default the
    latter half of the burn-in (the latter half of the trace when there is none).
    Raised to SPD with an eigenvalue floor when rank-deficient.
    """
    if stop is None:
        stop = trace.burn_in if trace.burn_in > 0 else trace.length
    if start is None:
        start = max(stop // 2, trace.warmup)
    return _spd_covariance(trace.states[start:stop])
