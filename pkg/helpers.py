# helpers.py

import numpy as np
from typing import Union

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

# Philox counter word reserved for the stream purpose (samples, shuffles, ...).
SAMPLE_STREAM = 0
SHUFFLE_STREAM = 1
INIT_STREAM = 2


class SimulationError(Exception):
    """Base class for errors raised while building or running a simulation."""
    pass


class NoConvergence(SimulationError):
    """An iterative routine hit its iteration cap before meeting its tolerance."""
    pass


def agent_stream(seed: int, agent: int, iteration: int, purpose: int = SAMPLE_STREAM) -> np.random.Generator:
    """Return the counter-based generator owned by (seed, agent, iteration).

    The Philox key is (seed, agent) and the counter starts at
    (0, 0, purpose, iteration), so every (agent, iteration) pair gets its own
    stream no matter how agents are scheduled.
    """
    key = np.array([seed, agent], dtype=np.uint64)
    counter = np.array([0, 0, purpose, iteration], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def sgn(x: Union[np.ndarray, float]) -> Union[np.ndarray, float]:
    """Three-case sign: +1 for positive, 0 at zero, -1 for negative."""
    return np.sign(x)


def format_number(number: float, decimals: int = 6) -> str:
    """Format a number with the specified number of significant decimals."""
    return f"{number:.{decimals}g}"


def is_finite(array: np.ndarray) -> bool:
    return bool(np.all(np.isfinite(array)))


class ModelKindMismatch(SimulationError):
    """An operation was given risk models of a kind it does not support."""
    pass
