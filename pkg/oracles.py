import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from helpers import ModelKindMismatch, NoConvergence, SimulationError, sgn
from losses import LassoModel, QuadraticModel, RiskConstants, RiskModel
from topology import WeightingScheme

logger = logging.getLogger(__name__)


class UnstableConfiguration(SimulationError):
    """Some predicted per-agent rate alpha_k falls outside (0, 1)."""
    pass


class OptimumMethod(Enum):
    CLOSED_FORM = "closed_form"
    NUMERICAL = "numerical"
    GRID = "grid"


@dataclass(frozen=True, eq=False)
class NetworkOptimum:
    w_star: np.ndarray
    risk_star: float
    method: OptimumMethod
    iterations: int = 0


@dataclass(frozen=True, eq=False)
class RatePrediction:
    alpha: float
    alpha_k: np.ndarray
    floor_terms: List[Optional[Tuple[float, float, float]]]

    @property
    def risk_decay_bracket(self) -> Tuple[float, float]:
        """Range for the fitted decay of the smoothed excess risk: (min_k alpha_k^2, alpha).

        alpha bounds the rate from above. The coupled network follows its mean
        rate, which is never faster than the squared rate of its fastest agent.
        """
        return float(np.min(self.alpha_k)) ** 2, self.alpha


def soft_threshold(x: np.ndarray, eps: float) -> np.ndarray:
    """Elementwise shrinkage sgn(x) max{0, |x| - eps}."""
    if eps < 0:
        raise ValueError(f"Threshold must be nonnegative, got {eps}")
    x = np.asarray(x, dtype=float)
    return np.sign(x) * np.maximum(0.0, np.abs(x) - eps)


def aggregate_risk(models: Sequence[RiskModel], q: Sequence[float], w: np.ndarray) -> float:
    return float(sum(q_k * model.true_risk(w) for q_k, model in zip(q, models)))


def aggregate_subgradient(models: Sequence[RiskModel], q: Sequence[float], w: np.ndarray) -> np.ndarray:
    return sum(q_k * model.true_subgradient(w) for q_k, model in zip(q, models))


def _lasso_population(models: Sequence[RiskModel], q: Sequence[float]):
    if not models or not all(isinstance(m, LassoModel) for m in models):
        raise ModelKindMismatch("Closed-form LASSO optimum needs LASSO models for every agent")
    if len({m.dim for m in models}) != 1 or len({m.delta for m in models}) != 1:
        raise ModelKindMismatch("LASSO agents must share dimension and regularization weight")
    q = np.asarray(q, dtype=float)
    sigma = np.array([m.sigma_h_sq for m in models])
    sigma_bar = float(q @ sigma)
    centre = (q * sigma) @ np.array([m.w_true for m in models]) / sigma_bar
    return q, sigma, sigma_bar, centre, models[0].delta


def lasso_network_optimum(models: Sequence[RiskModel], q: Sequence[float]) -> NetworkOptimum:
    """w* = S_eps(sum q_k s_k w_k / sum q_k s_k) with eps = delta / sum q_k s_k, s_k = sigma_h_sq."""
    q, _, sigma_bar, centre, delta = _lasso_population(models, q)
    w_star = soft_threshold(centre, delta / sigma_bar)
    return NetworkOptimum(w_star=w_star, risk_star=aggregate_risk(models, q, w_star),
                          method=OptimumMethod.CLOSED_FORM)


def lasso_stationarity_gap(models: Sequence[RiskModel], q: Sequence[float], w: np.ndarray) -> float:
    """Largest violation of 0 in the aggregate subdifferential at w (0 at the optimum)."""
    q, _, sigma_bar, centre, delta = _lasso_population(models, q)
    smooth = sigma_bar * (w - centre)
    on_support = w != 0
    gaps = np.where(on_support, np.abs(smooth + delta * np.sign(w)), np.maximum(0.0, np.abs(smooth) - delta))
    return float(gaps.max()) if gaps.size else 0.0


def quadratic_network_optimum(models: Sequence[RiskModel], q: Sequence[float]) -> NetworkOptimum:
    if not all(isinstance(m, QuadraticModel) for m in models):
        raise ModelKindMismatch("Closed-form quadratic optimum needs quadratic models for every agent")
    q = np.asarray(q, dtype=float)
    eta = np.array([m.eta for m in models])
    w_star = (q * eta) @ np.array([m.w_true for m in models]) / float(q @ eta)
    return NetworkOptimum(w_star=w_star, risk_star=aggregate_risk(models, q, w_star),
                          method=OptimumMethod.CLOSED_FORM)


def numerical_optimum(risk: Callable[[np.ndarray], float],
                      subgradient: Callable[[np.ndarray], np.ndarray],
                      dim: int,
                      tolerance: float = 1e-10,
                      max_iter: int = 100000,
                      step: float = 1.0,
                      prox: Optional[Callable[[np.ndarray, float], np.ndarray]] = None,
                      patience: int = 1000,
                      w0: Optional[np.ndarray] = None) -> NetworkOptimum:
    """Deterministic full-information descent.

    With `prox`, `subgradient` is the gradient of the smooth part and the
    iteration is proximal gradient with the fixed `step`; it stops once the
    risk changes by at most `tolerance`. Without `prox` the step is `step / i`
    and the best iterate is kept; it stops once the best risk has not improved
    by more than `tolerance` for `patience` iterations.
    """
    w = np.zeros(dim) if w0 is None else np.array(w0, dtype=float)
    current = risk(w)
    best_w, best_risk, stale = w.copy(), current, 0
    for i in range(1, max_iter + 1):
        if prox is not None:
            w = prox(w - step * subgradient(w), step)
            previous, current = current, risk(w)
            if abs(previous - current) <= tolerance:
                return NetworkOptimum(w_star=w, risk_star=current, method=OptimumMethod.NUMERICAL, iterations=i)
            continue
        w = w - (step / i) * subgradient(w)
        current = risk(w)
        if current < best_risk - tolerance:
            best_w, best_risk, stale = w.copy(), current, 0
        else:
            if current < best_risk:
                best_w, best_risk = w.copy(), current
            stale += 1
            if stale >= patience:
                return NetworkOptimum(w_star=best_w, risk_star=best_risk, method=OptimumMethod.NUMERICAL, iterations=i)
    raise NoConvergence(f"Numerical optimum not reached within {max_iter} iterations")


def lasso_numerical_optimum(models: Sequence[RiskModel], q: Sequence[float],
                            tolerance: float = 1e-14, max_iter: int = 100000,
                            step_fraction: float = 0.5) -> NetworkOptimum:
    """Proximal-gradient oracle on the aggregate closed-form LASSO risk."""
    q, sigma, sigma_bar, _, delta = _lasso_population(models, q)
    targets = np.array([m.w_true for m in models])
    weights = q * sigma

    def smooth_gradient(w):
        return sigma_bar * w - weights @ targets

    step = step_fraction / sigma_bar
    return numerical_optimum(lambda w: aggregate_risk(models, q, w), smooth_gradient, models[0].dim,
                             tolerance=tolerance, max_iter=max_iter, step=step,
                             prox=lambda v, t: soft_threshold(v, t * delta))


def network_optimum(models: Sequence[RiskModel], q: Sequence[float],
                    tolerance: float = 1e-10, max_iter: int = 100000) -> NetworkOptimum:
    kinds = {m.kind for m in models}
    if len(kinds) != 1:
        raise ModelKindMismatch(f"Agents mix model kinds {sorted(kinds)}")
    kind = kinds.pop()
    if kind == 'lasso':
        return lasso_network_optimum(models, q)
    if kind == 'quadratic':
        return quadratic_network_optimum(models, q)
    # Pegasos-style mu(i) = 1 / (eta i) on the strongly convex aggregate.
    eta = float(np.asarray(q) @ np.array([m.constants().eta for m in models]))
    optimum = numerical_optimum(lambda w: aggregate_risk(models, q, w),
                                lambda w: aggregate_subgradient(models, q, w),
                                models[0].dim, tolerance=tolerance, max_iter=max_iter, step=1.0 / eta)
    logger.info(f"Numerical optimum: risk {optimum.risk_star:.10g} after {optimum.iterations} iterations")
    return optimum


def grid_search_optimum(batch_risk: Callable[[np.ndarray], np.ndarray],
                        bounds: Sequence[Tuple[float, float]],
                        resolution: float,
                        chunk: int = 200000) -> NetworkOptimum:
    """Exhaustive grid minimum; `batch_risk` maps a (K, dim) array to K risks."""
    if len(bounds) > 3:
        raise ValueError("Grid search is limited to three dimensions")
    axes = [np.arange(low, high + resolution / 2, resolution) for low, high in bounds]
    shape = tuple(len(a) for a in axes)
    total = int(np.prod(shape))
    best_risk, best_w = np.inf, None
    for start in range(0, total, chunk):
        flat = np.arange(start, min(start + chunk, total))
        points = np.column_stack([axes[d][idx] for d, idx in enumerate(np.unravel_index(flat, shape))])
        risks = batch_risk(points)
        j = int(np.argmin(risks))
        if risks[j] < best_risk:
            best_risk, best_w = float(risks[j]), points[j].copy()
    return NetworkOptimum(w_star=best_w, risk_star=best_risk, method=OptimumMethod.GRID, iterations=total)


def aggregate_subgradient_at_optimum(models: Sequence[RiskModel], q: Sequence[float],
                                     w_star: np.ndarray) -> np.ndarray:
    """Per-agent subgradients g'_k(w*) (rows), chosen so that sum_k q_k g'_k(w*) = 0 where possible.

    LASSO agents share one l1 selection: sgn(w*_m) on the support and
    -sigma_bar (w* - centre)_m / delta off it. Quadratic agents have a unique
    gradient. SVM agents use the deterministic indicator convention, which does
    not guarantee the zero-sum property.
    """
    kind = models[0].kind
    if kind == 'lasso':
        q, _, sigma_bar, centre, delta = _lasso_population(models, q)
        inactive = np.clip(-sigma_bar * (w_star - centre) / delta, -1.0, 1.0) if delta > 0 else np.zeros_like(w_star)
        selection = np.where(w_star != 0, sgn(w_star), inactive)
        return np.array([m.sigma_h_sq * (w_star - m.w_true) + delta * selection for m in models])
    if kind == 'svm':
        logger.warning("Subgradient selection at w* for SVM agents uses the I[margin <= 1] convention; "
                       "sum_k q_k g'_k(w*) may be nonzero")
    return np.array([m.true_subgradient(w_star) for m in models])


def predict_rate(scheme: WeightingScheme, constants: Sequence[RiskConstants], h: float,
                 subgradient_norms_sq: Optional[Sequence[float]] = None) -> RatePrediction:
    """alpha_k = 1 - mu_k (eta_k - mu_o e_k^2 - mu_o beta_k^2 - 2 mu_o h e_k^2); alpha = max_k alpha_k."""
    mu_o = scheme.mu_o
    alpha_k = np.empty(len(constants))
    floor_terms: List[Optional[Tuple[float, float, float]]] = []
    missing = []
    for k, c in enumerate(constants):
        e_sq = c.e_sq if c.e_sq is not None else 0.0
        beta_sq = c.beta_sq if c.beta_sq is not None else 0.0
        if c.e_sq is None or c.beta_sq is None:
            missing.append(k)
        alpha_k[k] = 1.0 - scheme.mu[k] * (c.eta - mu_o * e_sq - mu_o * beta_sq - 2.0 * mu_o * h * e_sq)
        q_k = float(scheme.q[k])
        if c.f_sq is not None and c.sigma_sq is not None and subgradient_norms_sq is not None:
            floor_terms.append((q_k * c.f_sq, q_k * c.sigma_sq,
                                2.0 * h * q_k * (c.f_sq + float(subgradient_norms_sq[k]) + 0.5)))
        else:
            floor_terms.append(None)
    if missing:
        logger.warning(f"Rate prediction treats missing e^2/beta^2 as 0 for {len(missing)} agent(s)")
    unstable = np.flatnonzero((alpha_k <= 0.0) | (alpha_k >= 1.0))
    if unstable.size:
        raise UnstableConfiguration(f"alpha_k outside (0, 1) for agents {unstable.tolist()}: "
                                    f"{alpha_k[unstable].tolist()}")
    return RatePrediction(alpha=float(alpha_k.max()), alpha_k=alpha_k, floor_terms=floor_terms)
