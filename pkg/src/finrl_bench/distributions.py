"""Action distributions with closed-form log-probabilities and KL divergences."""
import math

import numpy as np

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class DiagGaussian:
    """Diagonal Gaussian over K action components, batched over rows.

    Args:
        mean (np.ndarray): Means of shape (n, K).
        log_std (np.ndarray): Log standard deviations, (K,) or (n, K).
    """

    def __init__(self, mean: np.ndarray, log_std: np.ndarray):
        self.mean = np.atleast_2d(np.asarray(mean, dtype=float))
        self.log_std = np.broadcast_to(np.asarray(log_std, dtype=float), self.mean.shape)
        self.std = np.exp(self.log_std)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self.mean + self.std * rng.standard_normal(self.mean.shape)

    def log_prob(self, x: np.ndarray) -> np.ndarray:
        z = (np.atleast_2d(x) - self.mean) / self.std
        return (-0.5 * z * z - self.log_std - LOG_SQRT_2PI).sum(axis=1)

    def log_prob_grads(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """d log p / d mean and d log p / d log_std, per row and component."""
        diff = np.atleast_2d(x) - self.mean
        variance = self.std * self.std
        return diff / variance, diff * diff / variance - 1.0

    def entropy(self) -> np.ndarray:
        return (self.log_std + 0.5 + LOG_SQRT_2PI).sum(axis=1)

    def kl(self, other: "DiagGaussian") -> np.ndarray:
        """KL(self || other) per row."""
        variance = self.std * self.std
        other_variance = other.std * other.std
        diff = self.mean - other.mean
        return (
            other.log_std - self.log_std + (variance + diff * diff) / (2.0 * other_variance) - 0.5
        ).sum(axis=1)

    def kl_grads_wrt_other(self, other: "DiagGaussian") -> tuple[np.ndarray, np.ndarray]:
        """d KL(self || other) / d other.mean and / d other.log_std."""
        other_variance = other.std * other.std
        diff = self.mean - other.mean
        return -diff / other_variance, 1.0 - (self.std * self.std + diff * diff) / other_variance


class Categorical:
    """Categorical distributions over A choices, batched over rows.

    Args:
        logits (np.ndarray): Unnormalized log-probabilities of shape (n, A).
    """

    def __init__(self, logits: np.ndarray):
        logits = np.atleast_2d(np.asarray(logits, dtype=float))
        shifted = logits - logits.max(axis=1, keepdims=True)
        self.log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        self.probs = np.exp(self.log_probs)

    @classmethod
    def from_probs(cls, probs: np.ndarray) -> "Categorical":
        with np.errstate(divide="ignore"):
            return cls(np.log(np.asarray(probs, dtype=float)))

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        cumulative = np.cumsum(self.probs, axis=1)
        draws = rng.random((self.probs.shape[0], 1))
        return np.minimum((cumulative < draws).sum(axis=1), self.probs.shape[1] - 1)

    def log_prob(self, index: np.ndarray) -> np.ndarray:
        index = np.asarray(index, dtype=int).reshape(-1)
        return self.log_probs[np.arange(index.size), index]

    def entropy(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            terms = self.probs * np.where(self.probs > 0, self.log_probs, 0.0)
        return -terms.sum(axis=1)

    def kl(self, other: "Categorical") -> np.ndarray:
        """KL(self || other) per row; zero-probability terms contribute 0."""
        with np.errstate(invalid="ignore"):
            terms = np.where(self.probs > 0, self.probs * (self.log_probs - other.log_probs), 0.0)
        return terms.sum(axis=1)
