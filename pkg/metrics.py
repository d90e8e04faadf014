import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import statsmodels.api as sm
from scipy.optimize import nnls

from helpers import SimulationError, agent_stream, INIT_STREAM
from losses import RiskConstants, RiskModel
from oracles import NetworkOptimum

logger = logging.getLogger(__name__)

TRACE_COLUMNS = [
    'iteration',
    'excess_risk_raw',
    'excess_risk_smoothed',
    'pocket_excess',
    'disagreement',
    'iterate_norm_max',
    'disagreement_mean',
    'network_excess_smoothed',
]
FLOAT_FORMAT = '%.17g'
FLOOR_FRACTION = 0.05
NEGATIVE_SLACK = -1e-9


class DegenerateWindow(SimulationError):
    """The fit window has too few points above the estimated floor."""
    pass


class MetricsTrace:
    """Rows of recorded metrics, one per recorded iteration."""

    def __init__(self, rows: Optional[List[Dict[str, float]]] = None):
        self.rows: List[Dict[str, float]] = list(rows or [])

    def append(self, row: Dict[str, float]):
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=TRACE_COLUMNS)

    def column(self, name: str) -> np.ndarray:
        return self.frame[name].to_numpy(dtype=float)

    def to_csv(self, path: str):
        self.frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> 'MetricsTrace':
        trace = cls(frame[TRACE_COLUMNS].to_dict('records'))
        for row in trace.rows:
            row['iteration'] = int(row['iteration'])
        return trace

    @classmethod
    def read_csv(cls, path: str) -> 'MetricsTrace':
        return cls.from_frame(pd.read_csv(path))


@dataclass
class PocketTracker:
    """Running minimum of J_k over every iterate w_{k,j}, j <= i, per agent."""
    best_risk: np.ndarray
    best_iterate: np.ndarray

    @classmethod
    def empty(cls, n_agents: int, dim: int) -> 'PocketTracker':
        return cls(best_risk=np.full(n_agents, np.inf), best_iterate=np.zeros((n_agents, dim)))

    def update(self, risks: np.ndarray, iterates: np.ndarray):
        better = risks < self.best_risk
        self.best_risk = np.where(better, risks, self.best_risk)
        self.best_iterate[better] = iterates[better]


@dataclass(frozen=True)
class RateFit:
    alpha_hat: float
    floor_hat: float
    fit_window: Tuple[int, int]
    r_squared: float


def agent_risks(models: Sequence[RiskModel], W: np.ndarray) -> np.ndarray:
    """J_k(w_k) for every agent k (row k of W)."""
    return np.array([model.risk_rows(W[k:k + 1])[0] for k, model in enumerate(models)])


def network_risks(models: Sequence[RiskModel], q: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Aggregate risk sum_l q_l J_l(w_k) of every row w_k of W."""
    return sum(q_l * model.risk_rows(W) for q_l, model in zip(q, models))


def record(state, models: Sequence[RiskModel], optimum: NetworkOptimum, q: np.ndarray, p: np.ndarray,
           pocket: PocketTracker, optimum_risks: Optional[np.ndarray] = None,
           raw: Optional[np.ndarray] = None) -> Dict[str, float]:
    """Evaluate one trace row at `state`.

    The pockets are read, not advanced: the caller updates them on every
    iteration (including this one) before recording.
    """
    if optimum_risks is None:
        optimum_risks = np.array([model.true_risk(optimum.w_star) for model in models])
    raw = agent_risks(models, state.iterates) if raw is None else raw
    smoothed = agent_risks(models, state.smoothed)
    average = p @ state.iterates
    spread = np.sum((state.iterates - average) ** 2, axis=1)
    return {
        'iteration': int(state.iteration),
        'excess_risk_raw': float(q @ (raw - optimum_risks)),
        'excess_risk_smoothed': float(q @ (smoothed - optimum_risks)),
        'pocket_excess': float(q @ (pocket.best_risk - optimum_risks)),
        'disagreement': float(spread.max()),
        'iterate_norm_max': float(np.sqrt(np.sum(state.iterates ** 2, axis=1)).max()),
        'disagreement_mean': float(spread.mean()),
        'network_excess_smoothed': float(network_risks(models, q, state.smoothed).mean() - optimum.risk_star),
    }


class MetricsRecorder:
    """Single-writer trace builder driven by the engine loop."""

    def __init__(self, models: Sequence[RiskModel], optimum: NetworkOptimum, q: np.ndarray, p: np.ndarray):
        self.models = models
        self.optimum = optimum
        self.q = np.asarray(q, dtype=float)
        self.p = np.asarray(p, dtype=float)
        self.optimum_risks = np.array([model.true_risk(optimum.w_star) for model in models])
        self.pocket = PocketTracker.empty(len(models), optimum.w_star.shape[0])
        self.trace = MetricsTrace()
        self._warned = False
        self._observed: Optional[Tuple[int, np.ndarray]] = None

    def observe(self, state) -> np.ndarray:
        """Advance the pockets with the iterates of `state`; called once per iteration."""
        raw = agent_risks(self.models, state.iterates)
        self.pocket.update(raw, state.iterates)
        self._observed = (int(state.iteration), raw)
        return raw

    def record(self, state) -> Dict[str, float]:
        if self._observed is not None and self._observed[0] == state.iteration:
            raw = self._observed[1]
        else:
            raw = self.observe(state)
        row = record(state, self.models, self.optimum, self.q, self.p, self.pocket, self.optimum_risks, raw)
        if not self._warned and min(row['excess_risk_raw'], row['excess_risk_smoothed']) < NEGATIVE_SLACK:
            logger.warning(f"Weighted excess risk below zero at iteration {row['iteration']} "
                           f"({row['excess_risk_raw']:.3e}); agents disagree around w*")
            self._warned = True
        self.trace.append(row)
        return row


def floor_estimate(trace: MetricsTrace, column: str = 'excess_risk_smoothed',
                   tail_fraction: float = FLOOR_FRACTION) -> float:
    values = trace.column(column)
    if values.size == 0:
        raise DegenerateWindow("Empty trace")
    tail = max(1, int(round(tail_fraction * values.size)))
    return float(values[-tail:].mean())


def steady_state_mean(trace: MetricsTrace, column: str, tail_fraction: float = 0.5) -> float:
    return floor_estimate(trace, column, tail_fraction)


def decay_window(trace: MetricsTrace, column: str = 'excess_risk_smoothed', floor: Optional[float] = None,
                 factor: float = 10.0) -> Tuple[int, int]:
    """From the first recorded iteration to the last one before excess - floor drops to factor * floor."""
    floor = floor_estimate(trace, column) if floor is None else floor
    frame = trace.frame
    above = (frame[column] - floor).to_numpy() > factor * abs(floor)
    if not above.any():
        raise DegenerateWindow("Trace never rises above the floor band")
    stop = int(np.argmin(above)) if not above.all() else above.size
    iterations = frame['iteration'].to_numpy()
    return int(iterations[0]), int(iterations[max(stop - 1, 0)])


def fit_rate(trace: MetricsTrace, window: Optional[Tuple[int, int]] = None,
             column: str = 'excess_risk_smoothed', tail_fraction: float = FLOOR_FRACTION) -> RateFit:
    """Least-squares line through log(excess - floor) against the iteration index."""
    floor = floor_estimate(trace, column, tail_fraction)
    if window is None:
        window = decay_window(trace, column, floor)
    frame = trace.frame
    inside = frame[(frame['iteration'] >= window[0]) & (frame['iteration'] <= window[1])]
    excess = inside[column].to_numpy() - floor
    keep = excess > 0
    if keep.sum() < 3:
        raise DegenerateWindow(f"Only {int(keep.sum())} point(s) above the floor {floor:.3e} in window {window}")
    x = inside['iteration'].to_numpy(dtype=float)[keep]
    y = np.log(excess[keep])
    result = sm.OLS(y, sm.add_constant(x)).fit()
    slope = float(result.params[1])
    logger.info(f"Rate fit over iterations {window}: slope {slope:.4e}, floor {floor:.4e} "
                f"(mean of trailing {tail_fraction:.0%})")
    return RateFit(alpha_hat=float(np.exp(slope)), floor_hat=floor, fit_window=(int(window[0]), int(window[1])),
                   r_squared=float(result.rsquared))


def estimate_h(trace: MetricsTrace, mu_o: float) -> float:
    """max over the late half of sqrt(disagreement) / mu_o."""
    values = trace.column('disagreement')
    if values.size == 0:
        return 0.0
    late = values[values.size // 2:]
    return float(np.sqrt(late.max()) / mu_o)


def disagreement_scaling(trace_mu: MetricsTrace, trace_half_mu: MetricsTrace, tail_fraction: float = 0.5) -> float:
    """Steady-state disagreement at mu_o over the one at mu_o / 2 (about 4 when it scales as mu_o^2)."""
    return (steady_state_mean(trace_mu, 'disagreement', tail_fraction)
            / steady_state_mean(trace_half_mu, 'disagreement', tail_fraction))


def floor_ratio(trace_mu: MetricsTrace, trace_half_mu: MetricsTrace, column: str = 'excess_risk_smoothed',
                tail_fraction: float = FLOOR_FRACTION) -> float:
    return floor_estimate(trace_mu, column, tail_fraction) / floor_estimate(trace_half_mu, column, tail_fraction)


def ensemble_average(traces: Sequence[MetricsTrace]) -> MetricsTrace:
    """Row-wise mean of traces recorded on the same iterations."""
    frames = [trace.frame for trace in traces]
    averaged = pd.concat(frames).groupby('iteration', sort=True).mean().reset_index()
    return MetricsTrace.from_frame(averaged)


def estimate_noise_constants(model: RiskModel, w_star: np.ndarray, seed: int = 0, agent: int = 0,
                             radii: Sequence[float] = (0.0, 0.25, 0.5, 1.0), directions: int = 2,
                             samples: int = 400) -> RiskConstants:
    """Fit E||g_hat - g||^2 = beta^2 ||w* - w||^2 + sigma^2 by nonnegative least squares.

    Points are w* + r u for unit directions u; each point averages `samples`
    instantaneous subgradients drawn i.i.d. from the model.
    """
    rng = agent_stream(seed, agent, 0, purpose=INIT_STREAM)
    rows, targets = [], []
    for radius in radii:
        for _ in range(directions if radius > 0 else 1):
            u = rng.normal(size=w_star.shape[0])
            w = w_star + radius * u / np.linalg.norm(u)
            gammas, H = model.draw(rng, samples)
            noise = model.sample_subgradients(w, gammas, H) - model.true_subgradient(w)
            rows.append([radius ** 2, 1.0])
            targets.append(float(np.mean(np.sum(noise ** 2, axis=1))))
    (beta_sq, sigma_sq), _ = nnls(np.array(rows), np.array(targets))
    logger.debug(f"Noise constants for agent {agent}: beta^2={beta_sq:.4g}, sigma^2={sigma_sq:.4g} "
                 f"from {len(rows)} points x {samples} samples")
    constants = model.constants()
    return replace(constants,
                   beta_sq=constants.beta_sq if constants.beta_sq is not None else float(beta_sq),
                   sigma_sq=constants.sigma_sq if constants.sigma_sq is not None else float(sigma_sq))
