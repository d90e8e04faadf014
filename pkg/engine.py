import logging
import threading
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import partial
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from config_manager import ExperimentConfig
from datasets import prediction_accuracy
from experiment import Experiment, build_experiment
from helpers import ModelKindMismatch, SimulationError, is_finite, sgn
from losses import LassoModel, RiskConstants, RiskModel
from metrics import MetricsRecorder, MetricsTrace, ensemble_average, estimate_noise_constants
from oracles import NetworkOptimum, RatePrediction, UnstableConfiguration, aggregate_subgradient_at_optimum, predict_rate
from topology import CombinationMatrix, PerronWeights, WeightingScheme, stability_bound

logger = logging.getLogger(__name__)

THETA_FLOOR = 1e-6
THETA_CEILING = 1.0 - 1e-12


class NonFiniteIterate(SimulationError):
    """An iterate became NaN or infinite; `report` holds what was recorded until then."""

    def __init__(self, message: str, iteration: int, agents: Sequence[int]):
        super().__init__(message)
        self.iteration = iteration
        self.agents = list(agents)
        self.report: Optional['RunReport'] = None
        self.trace: Optional[MetricsTrace] = None
        self.state: Optional['NetworkState'] = None


class ThetaOutOfRange(SimulationError):
    pass


class StrategyKind(Enum):
    DIFFUSION_SUBGRADIENT = 'diffusion_subgradient'
    DIFFUSION_LMS = 'diffusion_lms'
    SPARSE_DIFFUSION_LMS = 'sparse_diffusion_lms'
    NON_COOPERATIVE = 'non_cooperative'


@dataclass(frozen=True, eq=False)
class NetworkState:
    iterates: np.ndarray
    smoothed: np.ndarray
    smoothing_sum: float
    iteration: int

    @classmethod
    def initial(cls, n_agents: int, dim: int) -> 'NetworkState':
        """w_{k,0} = 0, smoothed w_{k,0} = 0, S_0 = 1."""
        return cls(iterates=np.zeros((n_agents, dim)), smoothed=np.zeros((n_agents, dim)),
                   smoothing_sum=1.0, iteration=0)


@dataclass(eq=False)
class RunReport:
    trace: MetricsTrace
    final_state: NetworkState
    config_echo: ExperimentConfig
    wall_time: float
    theta: float = 0.0
    optimum: Optional[NetworkOptimum] = None
    scheme: Optional[WeightingScheme] = None
    perron: Optional[PerronWeights] = None
    prediction: Optional[RatePrediction] = None
    constants: List[RiskConstants] = field(default_factory=list)
    test_accuracy: Optional[float] = None
    split: str = ""
    partial: bool = False
    seeds: List[int] = field(default_factory=list)


def combine(A: CombinationMatrix, psi: np.ndarray) -> np.ndarray:
    """Row k becomes sum_l a_{lk} psi_l."""
    return A.weights.T @ psi


def _finish_step(state: NetworkState, psi: np.ndarray, A: CombinationMatrix) -> NetworkState:
    iterates = combine(A, psi)
    i = state.iteration + 1
    if not is_finite(iterates):
        bad = np.flatnonzero(~np.all(np.isfinite(iterates), axis=1))
        raise NonFiniteIterate(f"Non-finite iterate at iteration {i} for agents {bad.tolist()}", i, bad.tolist())
    return replace(state, iterates=iterates, iteration=i)


def atc_step(state: NetworkState, A: CombinationMatrix, mu: np.ndarray, models: Sequence[RiskModel],
             seed: int, batch_size: int = 1) -> NetworkState:
    """Adapt with each agent's own stream (seed, k, i), then combine with the column-k weights."""
    i = state.iteration + 1
    psi = np.empty_like(state.iterates)
    for k, model in enumerate(models):
        w = state.iterates[k]
        gammas, H = model.draw_sample(seed, k, i, batch_size)
        psi[k] = w - mu[k] * model.stochastic_subgradient(w, gammas, H)
    return _finish_step(state, psi, A)


def lms_step(state: NetworkState, A: CombinationMatrix, mu: np.ndarray, models: Sequence[RiskModel],
             seed: int, batch_size: int = 1, sparse: bool = False) -> NetworkState:
    """psi = w + mu h (gamma - h^T w), minus mu delta sgn(w) when `sparse`; same combine as atc_step."""
    if not all(isinstance(m, LassoModel) for m in models):
        raise ModelKindMismatch("Diffusion LMS needs LASSO-type models")
    i = state.iteration + 1
    psi = np.empty_like(state.iterates)
    for k, model in enumerate(models):
        w = state.iterates[k]
        gammas, H = model.draw_sample(seed, k, i, batch_size)
        psi[k] = w + mu[k] * model.lms_direction(w, gammas, H)
        if sparse:
            psi[k] -= mu[k] * model.delta * sgn(w)
    return _finish_step(state, psi, A)


def smoothing_step(state: NetworkState, theta: float) -> NetworkState:
    """S_i = theta S_{i-1} + 1; smoothed = (1 - 1/S_i) smoothed + iterates / S_i."""
    if not 0.0 < theta < 1.0:
        raise ThetaOutOfRange(f"theta must lie in (0, 1), got {theta}")
    total = theta * state.smoothing_sum + 1.0
    smoothed = (1.0 - 1.0 / total) * state.smoothed + state.iterates / total
    return replace(state, smoothed=smoothed, smoothing_sum=total)


def theta_default(models: Sequence[RiskModel], mu_o: float, rule: str = 'mean_eta', scale: float = 0.9) -> float:
    """mean_eta: 1 - 2 mu_o mean(eta_k); scaled_eta: 1 - scale mu_o mean(eta_k). Clamped into (0, 1)."""
    eta = float(np.mean([m.constants().eta for m in models]))
    if rule == 'mean_eta':
        theta = 1.0 - 2.0 * mu_o * eta
    elif rule == 'scaled_eta':
        theta = 1.0 - scale * mu_o * eta
    else:
        raise ValueError(f"Unknown theta rule '{rule}'")
    clamped = min(max(theta, THETA_FLOOR), THETA_CEILING)
    if clamped != theta:
        logger.warning(f"Default theta {theta!r} clamped to {clamped!r}")
    return clamped


StepFunction = Callable[..., NetworkState]

STEPS: Dict[StrategyKind, StepFunction] = {
    StrategyKind.DIFFUSION_SUBGRADIENT: atc_step,
    StrategyKind.NON_COOPERATIVE: atc_step,
    StrategyKind.DIFFUSION_LMS: partial(lms_step, sparse=False),
    StrategyKind.SPARSE_DIFFUSION_LMS: partial(lms_step, sparse=True),
}


def resolve_constants(experiment: Experiment, seed: int, estimate: bool) -> List[RiskConstants]:
    constants = []
    for k, model in enumerate(experiment.models):
        known = model.constants()
        if estimate and (known.beta_sq is None or known.sigma_sq is None):
            known = estimate_noise_constants(model, experiment.optimum.w_star, seed=seed, agent=k)
        constants.append(known)
    if estimate:
        logger.info("Gradient-noise constants estimated by Monte-Carlo at w* + r u, fitted with NNLS; "
                    f"mean beta^2={np.mean([c.beta_sq for c in constants]):.4g}, "
                    f"mean sigma^2={np.mean([c.sigma_sq for c in constants]):.4g}")
    return constants


def _zero_if_missing(values):
    return [0.0 if v is None else v for v in values]


def check_stability(experiment: Experiment, constants: Sequence[RiskConstants], h: float) -> Optional[RatePrediction]:
    """Warn, never abort, when step-sizes leave the stable range."""
    scheme = experiment.scheme
    bound = stability_bound([c.eta for c in constants], _zero_if_missing([c.beta_sq for c in constants]),
                            _zero_if_missing([c.e_sq for c in constants]), scheme.q, experiment.perron.p, h)
    over = np.flatnonzero(scheme.mu > bound)
    if over.size:
        logger.warning(f"UnstableConfiguration: mu_k exceeds the stability bound for agents {over.tolist()} "
                       f"(max ratio {float(np.max(scheme.mu[over] / bound[over])):.3g})")
    selection = aggregate_subgradient_at_optimum(experiment.models, scheme.q, experiment.optimum.w_star)
    norms_sq = np.sum(selection ** 2, axis=1)
    logger.info(f"Floor uses ||g'_k(w*)||^2 from the zero-sum {experiment.models[0].kind} selection "
                f"(max {float(norms_sq.max()):.4g})")
    try:
        return predict_rate(scheme, constants, h, norms_sq)
    except UnstableConfiguration as e:
        logger.warning(f"UnstableConfiguration: {e}")
        return None


def simulate(experiment: Experiment, theta: float, seed: int,
             stop_event: Optional[threading.Event] = None) -> Tuple[MetricsTrace, NetworkState, bool]:
    """Run the configured horizon; returns (trace, final state, interrupted)."""
    run = experiment.config.run
    step = STEPS[StrategyKind(run.strategy)]
    state = NetworkState.initial(experiment.n_agents, experiment.dim)
    recorder = MetricsRecorder(experiment.models, experiment.optimum, experiment.scheme.q, experiment.perron.p)
    for _ in range(run.horizon):
        if stop_event is not None and stop_event.is_set():
            logger.warning(f"Run interrupted after {state.iteration} iterations")
            return recorder.trace, state, True
        try:
            state = step(state, experiment.topology, experiment.scheme.mu, experiment.models, seed, run.batch_size)
        except NonFiniteIterate as e:
            e.trace = recorder.trace
            e.state = state
            raise
        state = smoothing_step(state, theta)
        recorder.observe(state)
        if state.iteration % run.record_every == 0:
            recorder.record(state)
    return recorder.trace, state, False


def holdout_accuracy(experiment: Experiment, state: NetworkState) -> Optional[float]:
    """Mean over agents of the correct-prediction percentage of the smoothed models."""
    test = experiment.test_set
    if test is None or test.n_samples == 0:
        return None
    features = test.compact_features()
    return float(np.mean([prediction_accuracy(features, test.labels, w) for w in state.smoothed]))


def run(config: ExperimentConfig, stop_event: Optional[threading.Event] = None,
        experiment: Optional[Experiment] = None) -> RunReport:
    start = time.perf_counter()
    run_config = config.run
    experiment = experiment or build_experiment(config)
    theta = (run_config.theta if run_config.theta is not None
             else theta_default(experiment.models, run_config.mu_o, run_config.theta_rule, run_config.theta_scale))
    constants = resolve_constants(experiment, run_config.seed, run_config.estimate_noise)
    prediction = check_stability(experiment, constants, run_config.h)
    logger.info(f"Starting {run_config.strategy}: N={experiment.n_agents}, M={experiment.dim}, "
                f"mu_o={run_config.mu_o}, theta={theta!r}, horizon={run_config.horizon}")

    def report_for(trace, state, partial, seeds):
        return RunReport(trace=trace, final_state=state, config_echo=config, wall_time=time.perf_counter() - start,
                         theta=theta, optimum=experiment.optimum, scheme=experiment.scheme,
                         perron=experiment.perron, prediction=prediction, constants=constants,
                         test_accuracy=holdout_accuracy(experiment, state), split=experiment.split,
                         partial=partial, seeds=seeds)

    traces, states, seeds = [], [], []
    interrupted = False
    for member in range(run_config.ensemble):
        seed = run_config.seed + member
        try:
            trace, state, interrupted = simulate(experiment, theta, seed, stop_event)
        except NonFiniteIterate as e:
            logger.error(f"Aborting run: {e}")
            e.report = report_for(e.trace, e.state, True, seeds + [seed])
            raise
        traces.append(trace)
        states.append(state)
        seeds.append(seed)
        if interrupted:
            break
    trace = traces[0] if len(traces) == 1 else ensemble_average(traces)
    report = report_for(trace, states[0], interrupted, seeds)
    logger.info(f"Finished {len(seeds)} run(s) in {report.wall_time:.2f} s, {len(trace)} recorded rows")
    return report
