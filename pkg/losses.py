import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Tuple, Union

import numpy as np
from scipy.sparse import issparse, spmatrix

from helpers import SHUFFLE_STREAM, SimulationError, agent_stream, sgn

logger = logging.getLogger(__name__)

Features = Union[np.ndarray, spmatrix]
Sample = Tuple[Optional[np.ndarray], Features]


class DimensionMismatch(SimulationError):
    """A vector does not have the model dimension."""
    pass


class EmptyShard(SimulationError):
    """An SVM agent was handed no training samples."""
    pass


@dataclass(frozen=True)
class SubgradientSample:
    vector: np.ndarray
    agent: int
    iteration: int


@dataclass(frozen=True)
class RiskConstants:
    eta: float
    e_sq: Optional[float] = None
    f_sq: Optional[float] = None
    beta_sq: Optional[float] = None
    sigma_sq: Optional[float] = None


def _check_dim(w: np.ndarray, dim: int) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.shape != (dim,):
        raise DimensionMismatch(f"Expected a vector of length {dim}, got shape {w.shape}")
    return w


def _as_batch(gammas, features) -> Tuple[np.ndarray, Features]:
    if not issparse(features):
        features = np.atleast_2d(np.asarray(features, dtype=float))
    gammas = np.atleast_1d(np.asarray(gammas, dtype=float)) if gammas is not None else None
    return gammas, features


@dataclass(frozen=True, eq=False)
class LassoModel:
    """Streaming linear model gamma = h^T w_true + n with h ~ N(0, sigma_h_sq I).

    The true risk is the Gaussian closed form
    0.5 sigma_h_sq ||w - w_true||^2 + 0.5 sigma_n_sq + delta ||w||_1.
    """
    dim: int
    delta: float
    sigma_h_sq: float
    sigma_n_sq: float
    w_true: np.ndarray

    kind = 'lasso'

    def true_risk(self, w: np.ndarray) -> float:
        w = _check_dim(w, self.dim)
        diff = w - self.w_true
        return float(0.5 * self.sigma_h_sq * diff @ diff + 0.5 * self.sigma_n_sq + self.delta * np.abs(w).sum())

    def risk_rows(self, W: np.ndarray) -> np.ndarray:
        diff = W - self.w_true
        return (0.5 * self.sigma_h_sq * np.einsum('ij,ij->i', diff, diff)
                + 0.5 * self.sigma_n_sq + self.delta * np.abs(W).sum(axis=1))

    def true_subgradient(self, w: np.ndarray) -> np.ndarray:
        return self.sigma_h_sq * (w - self.w_true) + self.delta * sgn(w)

    def draw(self, rng: np.random.Generator, batch_size: int = 1) -> Sample:
        H = rng.normal(0.0, np.sqrt(self.sigma_h_sq), size=(batch_size, self.dim))
        noise = rng.normal(0.0, np.sqrt(self.sigma_n_sq), size=batch_size)
        return H @ self.w_true + noise, H

    def draw_sample(self, seed: int, agent: int, iteration: int, batch_size: int = 1) -> Sample:
        return self.draw(agent_stream(seed, agent, iteration), batch_size)

    def stochastic_subgradient(self, w: np.ndarray, gammas, H) -> np.ndarray:
        gammas, H = _as_batch(gammas, H)
        residual = gammas - H @ w
        return -(H.T @ residual) / len(gammas) + self.delta * sgn(w)

    def sample_subgradients(self, w: np.ndarray, gammas, H) -> np.ndarray:
        """One instantaneous subgradient per sample (rows)."""
        gammas, H = _as_batch(gammas, H)
        return -H * (gammas - H @ w)[:, None] + self.delta * sgn(w)

    def lms_direction(self, w: np.ndarray, gammas, H) -> np.ndarray:
        """LMS correction h (gamma - h^T w), averaged over the batch."""
        gammas, H = _as_batch(gammas, H)
        return (H.T @ (gammas - H @ w)) / len(gammas)

    def constants(self) -> RiskConstants:
        return RiskConstants(eta=self.sigma_h_sq)


@lru_cache(maxsize=4096)
def _epoch_permutation(seed: int, agent: int, epoch: int, n_samples: int) -> np.ndarray:
    order = agent_stream(seed, agent, epoch, purpose=SHUFFLE_STREAM).permutation(n_samples)
    order.setflags(write=False)
    return order


@dataclass(frozen=True, eq=False)
class SvmModel:
    """Regularized hinge loss on a fixed shard; the shard average stands in for the expectation."""
    dim: int
    rho: float
    features: Features
    labels: np.ndarray

    kind = 'svm'

    @property
    def n_samples(self) -> int:
        return int(self.labels.shape[0])

    def _require_samples(self) -> None:
        if self.n_samples == 0:
            raise EmptyShard("SVM agent has an empty shard")

    def true_risk(self, w: np.ndarray) -> float:
        w = _check_dim(w, self.dim)
        self._require_samples()
        margins = self.labels * (self.features @ w)
        return float(0.5 * self.rho * w @ w + np.maximum(0.0, 1.0 - margins).mean())

    def risk_rows(self, W: np.ndarray) -> np.ndarray:
        self._require_samples()
        margins = self.labels[:, None] * np.asarray(self.features @ W.T)
        return 0.5 * self.rho * np.einsum('ij,ij->i', W, W) + np.maximum(0.0, 1.0 - margins).mean(axis=0)

    def true_subgradient(self, w: np.ndarray) -> np.ndarray:
        self._require_samples()
        return self.stochastic_subgradient(w, self.labels, self.features)

    def draw(self, rng: np.random.Generator, batch_size: int = 1) -> Sample:
        """Uniform i.i.d. draw from the shard."""
        self._require_samples()
        rows = rng.integers(0, self.n_samples, size=batch_size)
        return self.labels[rows], self.features[rows]

    def draw_sample(self, seed: int, agent: int, iteration: int, batch_size: int = 1) -> Sample:
        """Streaming order: each epoch walks a fresh seeded permutation of the shard."""
        self._require_samples()
        n = self.n_samples
        start = (iteration - 1) * batch_size
        rows = np.empty(batch_size, dtype=np.int64)
        for j, position in enumerate(range(start, start + batch_size)):
            epoch, offset = divmod(position, n)
            rows[j] = _epoch_permutation(seed, agent, epoch, n)[offset]
        return self.labels[rows], self.features[rows]

    def stochastic_subgradient(self, w: np.ndarray, gammas, H) -> np.ndarray:
        gammas, H = _as_batch(gammas, H)
        active = (gammas * np.asarray(H @ w).ravel() <= 1.0).astype(float)
        return self.rho * w - np.asarray(H.T @ (gammas * active)).ravel() / len(gammas)

    def sample_subgradients(self, w: np.ndarray, gammas, H) -> np.ndarray:
        gammas, H = _as_batch(gammas, H)
        active = (gammas * np.asarray(H @ w).ravel() <= 1.0).astype(float)
        rows = H.toarray() if issparse(H) else H
        return self.rho * w - rows * (gammas * active)[:, None]

    def constants(self) -> RiskConstants:
        return RiskConstants(eta=self.rho, e_sq=2.0 * self.rho ** 2)


@dataclass(frozen=True, eq=False)
class QuadraticModel:
    """J(w) = 0.5 eta ||w - w_true||^2 + 0.5 noise_sq; gradient observed with additive N(0, noise_sq I) noise."""
    dim: int
    eta: float
    noise_sq: float
    w_true: np.ndarray

    kind = 'quadratic'

    def true_risk(self, w: np.ndarray) -> float:
        w = _check_dim(w, self.dim)
        diff = w - self.w_true
        return float(0.5 * self.eta * diff @ diff + 0.5 * self.noise_sq)

    def risk_rows(self, W: np.ndarray) -> np.ndarray:
        diff = W - self.w_true
        return 0.5 * self.eta * np.einsum('ij,ij->i', diff, diff) + 0.5 * self.noise_sq

    def true_subgradient(self, w: np.ndarray) -> np.ndarray:
        return self.eta * (w - self.w_true)

    def draw(self, rng: np.random.Generator, batch_size: int = 1) -> Sample:
        return None, rng.normal(0.0, np.sqrt(self.noise_sq), size=(batch_size, self.dim))

    def draw_sample(self, seed: int, agent: int, iteration: int, batch_size: int = 1) -> Sample:
        return self.draw(agent_stream(seed, agent, iteration), batch_size)

    def stochastic_subgradient(self, w: np.ndarray, gammas, noise) -> np.ndarray:
        return self.eta * (w - self.w_true) + np.atleast_2d(noise).mean(axis=0)

    def sample_subgradients(self, w: np.ndarray, gammas, noise) -> np.ndarray:
        return self.eta * (w - self.w_true) + np.atleast_2d(noise)

    def constants(self) -> RiskConstants:
        return RiskConstants(eta=self.eta, e_sq=self.eta ** 2, f_sq=0.0,
                             beta_sq=0.0, sigma_sq=self.dim * self.noise_sq)


RiskModel = Union[LassoModel, SvmModel, QuadraticModel]


def lasso_true_risk(model: LassoModel, w: np.ndarray) -> float:
    return model.true_risk(w)


def lasso_stochastic_subgradient(model: LassoModel, w: np.ndarray, sample: Sample,
                                 agent: int = 0, iteration: int = 0) -> SubgradientSample:
    """Instantaneous subgradient -h (gamma - h^T w) + delta sgn(w), with sgn(0) = 0."""
    w = _check_dim(w, model.dim)
    gamma, h = sample
    return SubgradientSample(vector=model.stochastic_subgradient(w, gamma, h), agent=agent, iteration=iteration)


def svm_stochastic_subgradient(model: SvmModel, w: np.ndarray, sample: Sample,
                               agent: int = 0, iteration: int = 0) -> SubgradientSample:
    """rho w - gamma h I[gamma h^T w <= 1]; the indicator is non-strict."""
    w = _check_dim(w, model.dim)
    gamma, h = sample
    return SubgradientSample(vector=model.stochastic_subgradient(w, gamma, h), agent=agent, iteration=iteration)


def svm_empirical_risk(model: SvmModel, w: np.ndarray) -> float:
    return model.true_risk(w)


def risk_constants(model: RiskModel) -> RiskConstants:
    """Constants derivable in closed form; the rest are left as None for empirical estimation."""
    return model.constants()
