import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union

import networkx as nx
import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import breadth_first_order

from helpers import NoConvergence, SimulationError

logger = logging.getLogger(__name__)

INPUT_TOLERANCE = 1e-9
INTERNAL_TOLERANCE = 1e-12
PERRON_TOLERANCE = 1e-12
PERRON_MAX_ITER = 10 ** 6
DEFAULT_H = 1.25


class NotLeftStochastic(SimulationError):
    """A column sum deviates from one or an entry is negative."""
    pass


class NotStronglyConnected(SimulationError):
    """Some agent cannot reach (or be reached from) every other agent."""
    pass


class NotPrimitive(SimulationError):
    """No agent has a self-loop."""
    pass


class WeightMismatch(SimulationError):
    """Aggregate-cost weights are not positive or do not add up to one."""
    pass


class TopologyFormatError(SimulationError):
    """A combination-matrix file does not follow the documented text format."""
    pass


@dataclass(frozen=True)
class CombinationMatrix:
    """Left-stochastic weights; column k holds the weights agent k applies to its neighbors."""
    n_agents: int
    weights: np.ndarray
    neighbor_lists: List[List[int]] = field(compare=False)

    def neighbors(self, agent: int) -> List[int]:
        return self.neighbor_lists[agent]

    @property
    def edge_count(self) -> int:
        off_diagonal = (self.weights > 0) & ~np.eye(self.n_agents, dtype=bool)
        return int(off_diagonal.sum())

    @property
    def self_loops(self) -> int:
        return int((np.diag(self.weights) > 0).sum())


@dataclass(frozen=True)
class PerronWeights:
    p: np.ndarray
    residual: float
    iterations: int = 0


@dataclass(frozen=True)
class WeightingScheme:
    q: np.ndarray
    mu_o: float
    mu: np.ndarray


def _neighbor_lists(weights: np.ndarray) -> List[List[int]]:
    n = weights.shape[0]
    return [sorted(set(np.flatnonzero(weights[:, k] > 0).tolist()) | {k}) for k in range(n)]


def _reaches_everyone(adjacency: csr_matrix) -> bool:
    order = breadth_first_order(adjacency, 0, directed=True, return_predecessors=False)
    return len(order) == adjacency.shape[0]


def validate_combination_matrix(raw: Union[np.ndarray, Sequence[Sequence[float]]]) -> CombinationMatrix:
    """Check a raw N×N matrix and return it as a validated combination matrix.

    Columns are renormalized to sum to one after the 1e-9 input check, strong
    connectivity is established by forward and backward reachability from
    agent 0, and primitivity by strong connectivity plus a positive diagonal.
    """
    weights = np.array(raw, dtype=float)
    if weights.ndim != 2 or weights.shape[0] != weights.shape[1] or weights.shape[0] < 1:
        raise NotLeftStochastic(f"Combination matrix must be square with N >= 1, got shape {weights.shape}")
    if np.any(weights < 0):
        raise NotLeftStochastic("Combination matrix has negative entries")
    column_error = np.abs(weights.sum(axis=0) - 1.0)
    if np.any(column_error > INPUT_TOLERANCE):
        worst = int(np.argmax(column_error))
        raise NotLeftStochastic(f"Column {worst} sums to {weights[:, worst].sum():.12g}, expected 1")
    weights = weights / weights.sum(axis=0, keepdims=True)

    # Edge ℓ -> k whenever a_{ℓk} > 0.
    adjacency = csr_matrix((weights > 0).astype(np.int8))
    if not (_reaches_everyone(adjacency) and _reaches_everyone(adjacency.T.tocsr())):
        raise NotStronglyConnected("Graph of nonzero weights is not strongly connected")
    if not np.any(np.diag(weights) > 0):
        raise NotPrimitive("No agent has a positive self-weight")

    n = weights.shape[0]
    weights.setflags(write=False)
    matrix = CombinationMatrix(n_agents=n, weights=weights, neighbor_lists=_neighbor_lists(weights))
    logger.debug(f"Validated combination matrix: N={n}, edges={matrix.edge_count}, self-loops={matrix.self_loops}")
    return matrix


def identity_combination(n_agents: int) -> CombinationMatrix:
    """Non-cooperative combination A = I; bypasses validation on purpose."""
    weights = np.eye(n_agents)
    weights.setflags(write=False)
    return CombinationMatrix(n_agents=n_agents, weights=weights, neighbor_lists=[[k] for k in range(n_agents)])


def perron_vector(matrix: CombinationMatrix,
                  tolerance: float = PERRON_TOLERANCE,
                  max_iter: int = PERRON_MAX_ITER) -> PerronWeights:
    """Power iteration p <- A p from the uniform vector until ||Ap - p||_inf <= tolerance."""
    A = matrix.weights
    p = np.full(matrix.n_agents, 1.0 / matrix.n_agents)
    for iteration in range(1, max_iter + 1):
        nxt = A @ p
        nxt /= nxt.sum()
        p = nxt
        residual = float(np.max(np.abs(A @ p - p)))
        if residual <= tolerance:
            break
    else:
        raise NoConvergence(f"Power iteration did not reach {tolerance} within {max_iter} iterations "
                            f"(residual {residual:.3g}); matrix is close to reducible")
    residual = float(np.linalg.norm(A @ p - p))
    return PerronWeights(p=p, residual=residual, iterations=iteration)


def step_sizes(perron: PerronWeights, q: Sequence[float], mu_o: float) -> WeightingScheme:
    """Per-agent step-sizes mu_k = (q_k / p_k) mu_o."""
    q = np.asarray(q, dtype=float)
    if q.shape != perron.p.shape:
        raise WeightMismatch(f"q has {q.size} entries, network has {perron.p.size} agents")
    if np.any(q <= 0):
        raise WeightMismatch("Aggregate-cost weights q must be strictly positive")
    if abs(q.sum() - 1.0) > INPUT_TOLERANCE:
        raise WeightMismatch(f"Aggregate-cost weights sum to {q.sum():.12g}, expected 1")
    if mu_o <= 0:
        raise WeightMismatch(f"Nominal step-size must be positive, got {mu_o}")
    q = q / q.sum()
    mu = (q / perron.p) * mu_o
    weighted = float(perron.p @ mu)
    if abs(weighted - mu_o) > INTERNAL_TOLERANCE * max(1.0, mu_o):
        logger.warning(f"Weighted step-size {weighted!r} differs from mu_o={mu_o!r}")
    return WeightingScheme(q=q, mu_o=mu_o, mu=mu)


def stability_bound(eta: Sequence[float], beta_sq: Sequence[float], e_sq: Sequence[float],
                    q: Sequence[float], p: Sequence[float], h: float = DEFAULT_H) -> np.ndarray:
    """Largest step-size per agent keeping alpha_k in (0, 1):
    min{1/eta_k, eta_k q_k / (p_k beta_k^2 + (1 + 2h) p_k e_k^2)}.
    """
    eta, beta_sq, e_sq, q, p = (np.asarray(v, dtype=float) for v in (eta, beta_sq, e_sq, q, p))
    first = 1.0 / eta
    denominator = p * beta_sq + (1.0 + 2.0 * h) * p * e_sq
    with np.errstate(divide='ignore'):
        second = np.where(denominator > 0, eta * q / np.where(denominator > 0, denominator, 1.0), np.inf)
    return np.minimum(first, second)


# Generators

def metropolis_weights(graph: nx.Graph) -> np.ndarray:
    """Metropolis-Hastings weights a_{lk} = 1/max(n_k, n_l) with n_k = |N_k| including k."""
    n = graph.number_of_nodes()
    size = np.array([graph.degree(k) + 1 for k in range(n)], dtype=float)
    weights = np.zeros((n, n))
    for k, l in graph.edges():
        if k == l:
            continue
        weights[k, l] = weights[l, k] = 1.0 / max(size[k], size[l])
    weights[np.diag_indices(n)] = 1.0 - weights.sum(axis=0)
    return weights


def geometric_topology(n_agents: int, radius: float = 0.3, seed: int = 0,
                       max_attempts: int = 100) -> CombinationMatrix:
    """Random geometric graph on the unit square with Metropolis weights.

    Graphs are redrawn with seeds seed, seed+1, ... until one is connected; the
    radius grows by 10% every ten failed draws.
    """
    if n_agents == 1:
        return validate_combination_matrix([[1.0]])
    current = radius
    for attempt in range(max_attempts):
        graph = nx.random_geometric_graph(n_agents, current, seed=seed + attempt)
        if nx.is_connected(graph):
            logger.debug(f"Geometric topology connected after {attempt + 1} draw(s), radius {current:.3f}")
            return validate_combination_matrix(metropolis_weights(graph))
        if (attempt + 1) % 10 == 0:
            current *= 1.1
    raise NotStronglyConnected(f"No connected geometric graph with N={n_agents} after {max_attempts} draws")


def ring_topology(n_agents: int) -> CombinationMatrix:
    if n_agents <= 2:
        return complete_topology(n_agents)
    return validate_combination_matrix(metropolis_weights(nx.cycle_graph(n_agents)))


def complete_topology(n_agents: int) -> CombinationMatrix:
    return validate_combination_matrix(np.full((n_agents, n_agents), 1.0 / n_agents))


GENERATORS = {
    'geometric': geometric_topology,
    'ring': lambda n_agents, radius=0.0, seed=0: ring_topology(n_agents),
    'complete': lambda n_agents, radius=0.0, seed=0: complete_topology(n_agents),
}


def generate_topology(name: str, n_agents: int, radius: float = 0.3, seed: int = 0) -> CombinationMatrix:
    if name not in GENERATORS:
        raise TopologyFormatError(f"Unknown topology generator '{name}', expected one of {sorted(GENERATORS)}")
    return GENERATORS[name](n_agents, radius=radius, seed=seed)


# Plain-text format: first line N, then N rows of N reals; column k = weights into agent k.

def parse_combination_matrix(text: str, source: str = '<string>') -> np.ndarray:
    lines = [line.split('#', 1)[0].strip() for line in text.splitlines()]
    lines = [line for line in lines if line]
    if not lines:
        raise TopologyFormatError(f"{source}: empty combination-matrix file")
    try:
        n = int(lines[0])
    except ValueError:
        raise TopologyFormatError(f"{source}: first line must be the agent count, got '{lines[0]}'")
    if len(lines) - 1 != n:
        raise TopologyFormatError(f"{source}: expected {n} rows, found {len(lines) - 1}")
    rows = []
    for number, line in enumerate(lines[1:], start=2):
        try:
            row = [float(token) for token in line.split()]
        except ValueError as e:
            raise TopologyFormatError(f"{source}: row {number}: {e}")
        if len(row) != n:
            raise TopologyFormatError(f"{source}: row {number} has {len(row)} entries, expected {n}")
        rows.append(row)
    return np.array(rows)


def load_combination_matrix(path: str) -> CombinationMatrix:
    try:
        with open(path, 'r') as f:
            text = f.read()
    except IOError as e:
        raise TopologyFormatError(f"Error reading combination matrix: {e}")
    return validate_combination_matrix(parse_combination_matrix(text, source=path))


def save_combination_matrix(matrix: CombinationMatrix, path: str) -> None:
    with open(path, 'w') as f:
        f.write(f"{matrix.n_agents}\n")
        for row in matrix.weights:
            f.write(' '.join(repr(float(v)) for v in row) + '\n')


def describe_topology(matrix: CombinationMatrix, perron: Optional[PerronWeights] = None) -> str:
    perron = perron or perron_vector(matrix)
    lines = [
        f"agents: {matrix.n_agents}",
        f"directed edges: {matrix.edge_count}",
        f"self-loops: {matrix.self_loops}",
        f"doubly stochastic: {bool(np.allclose(matrix.weights.sum(axis=1), 1.0, atol=1e-10))}",
        f"perron residual: {perron.residual:.3e}",
        "perron vector: " + ' '.join(f"{v:.6f}" for v in perron.p),
    ]
    return '\n'.join(lines)
