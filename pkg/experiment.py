import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from config_manager import ExperimentConfig, LassoConfig, QuadraticConfig
from datasets import LabeledDataset, holdout_split, load_libsvm, shard
from losses import EmptyShard, LassoModel, QuadraticModel, RiskModel, SvmModel
from oracles import NetworkOptimum, network_optimum
from topology import (CombinationMatrix, PerronWeights, WeightingScheme, describe_topology, generate_topology,
                      identity_combination, load_combination_matrix, perron_vector, step_sizes)

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Experiment:
    """Everything a run needs that does not change from one iteration to the next."""
    config: ExperimentConfig
    topology: CombinationMatrix
    perron: PerronWeights
    models: List[RiskModel]
    scheme: WeightingScheme
    optimum: NetworkOptimum
    test_set: Optional[LabeledDataset] = None
    split: str = ""

    @property
    def n_agents(self) -> int:
        return self.topology.n_agents

    @property
    def dim(self) -> int:
        return self.models[0].dim


def build_topology(config: ExperimentConfig) -> Tuple[CombinationMatrix, PerronWeights]:
    """Combination matrix and the Perron vector of the configured network.

    For the non-cooperative strategy A becomes I, but p (and so q and mu_k)
    still come from the configured network, so both strategies minimize the
    same aggregate risk.
    """
    topology = config.topology
    if topology.path:
        matrix = load_combination_matrix(topology.path)
    else:
        matrix = generate_topology(topology.generator, topology.n_agents, topology.radius, topology.seed)
    perron = perron_vector(matrix)
    logger.info("Topology summary\n" + describe_topology(matrix, perron))
    if config.run.strategy == 'non_cooperative':
        logger.info(f"Non-cooperative strategy: replacing the combination matrix with I_{matrix.n_agents}")
        return identity_combination(matrix.n_agents), perron
    return matrix, perron


def _sparse_vector(rng: np.random.Generator, config: LassoConfig) -> np.ndarray:
    w = np.zeros(config.dim)
    support = rng.choice(config.dim, size=config.sparsity, replace=False)
    w[support] = rng.uniform(*config.support_range, size=config.sparsity)
    return w


def build_lasso_models(config: LassoConfig, n_agents: int) -> List[LassoModel]:
    """Sparse targets first (one shared, or one per agent), then per-agent variances."""
    rng = np.random.default_rng(config.seed)
    if config.models == 'common':
        shared = _sparse_vector(rng, config)
        targets = [shared] * n_agents
    else:
        targets = [_sparse_vector(rng, config) for _ in range(n_agents)]
    sigma_h_sq = rng.uniform(*config.sigma_h_sq_range, size=n_agents)
    sigma_n_sq = rng.uniform(*config.sigma_n_sq_range, size=n_agents)
    logger.info(f"LASSO population ({config.models}): M={config.dim}, delta={config.delta}, "
                f"mean sigma_h^2={sigma_h_sq.mean():.4f}")
    return [LassoModel(dim=config.dim, delta=config.delta, sigma_h_sq=float(sigma_h_sq[k]),
                       sigma_n_sq=float(sigma_n_sq[k]), w_true=targets[k].copy())
            for k in range(n_agents)]


def build_quadratic_models(config: QuadraticConfig, n_agents: int) -> List[QuadraticModel]:
    rng = np.random.default_rng(config.seed)
    targets = rng.normal(size=(n_agents, config.dim))
    eta = rng.uniform(*config.eta_range, size=n_agents)
    return [QuadraticModel(dim=config.dim, eta=float(eta[k]), noise_sq=config.noise_sq, w_true=targets[k])
            for k in range(n_agents)]


def load_svm_data(config: ExperimentConfig) -> Tuple[LabeledDataset, Optional[LabeledDataset], str]:
    """Training data plus the test set: the companion file when given, else a seeded holdout."""
    svm = config.model.svm
    train = load_libsvm(svm.dataset_path, svm.dim)
    if svm.test_path:
        test = load_libsvm(svm.test_path)
        dim = max(train.n_features, test.n_features, svm.dim)
        if train.n_features != dim:
            train = load_libsvm(svm.dataset_path, dim)
        if test.n_features != dim:
            test = load_libsvm(svm.test_path, dim)
        return train, test, f"companion test file {svm.test_path}"
    if svm.holdout_fraction > 0:
        train, test = holdout_split(train, svm.holdout_fraction, config.run.seed)
        split = f"seeded holdout ({1 - svm.holdout_fraction:.0%}/{svm.holdout_fraction:.0%}, seed {config.run.seed})"
        return train, test, split
    return train, None, "none"


def build_svm_models(train: LabeledDataset, rho: float, n_agents: int, policy: str, seed: int) -> List[SvmModel]:
    models = []
    for k, part in enumerate(shard(train, n_agents, policy, seed)):
        if part.n_samples == 0:
            raise EmptyShard(f"Agent {k} received no samples ({train.n_samples} samples over {n_agents} agents)")
        models.append(SvmModel(dim=train.n_features, rho=rho, features=part.compact_features(), labels=part.labels))
    logger.info(f"Sharded {train.n_samples} samples over {n_agents} agents ({policy}), "
                f"sizes {min(m.n_samples for m in models)}..{max(m.n_samples for m in models)}")
    return models


def build_weights(config: ExperimentConfig, perron: PerronWeights) -> np.ndarray:
    rule = config.weights.rule
    if rule == 'perron':
        return perron.p.copy()
    if rule == 'uniform':
        return np.full(perron.p.size, 1.0 / perron.p.size)
    return np.asarray(config.weights.values, dtype=float)


def build_experiment(config: ExperimentConfig) -> Experiment:
    matrix, perron = build_topology(config)
    n_agents = matrix.n_agents
    kind = config.model.kind
    test_set, split = None, ""
    if kind == 'lasso':
        models: List[RiskModel] = list(build_lasso_models(config.model.lasso, n_agents))
    elif kind == 'quadratic':
        models = list(build_quadratic_models(config.model.quadratic, n_agents))
    else:
        train, test_set, split = load_svm_data(config)
        models = list(build_svm_models(train, config.model.svm.rho, n_agents,
                                       config.model.svm.shard_policy, config.run.seed))
    q = build_weights(config, perron)
    scheme = step_sizes(perron, q, config.run.mu_o)
    optimum = network_optimum(models, scheme.q, config.oracle.tolerance, config.oracle.max_iter)
    logger.info(f"Network optimum ({optimum.method.value}): risk {optimum.risk_star:.10g}, "
                f"||w*||_0 = {int(np.count_nonzero(optimum.w_star))}")
    return Experiment(config=config, topology=matrix, perron=perron, models=models, scheme=scheme,
                      optimum=optimum, test_set=test_set, split=split)
