"""Score-function gradient of an expectation under a softmax categorical.

The distillation loss replaces the gradient of ``E_p[c]`` with the
expectation of ``c * grad log p``. These helpers compute both sides for a
categorical ``p = softmax(logits)`` so the identity can be checked.
"""
import numpy as np
from scipy.special import softmax


def expected_payoff_gradient(logits, payoff) -> np.ndarray:
    """Exact d/d(logits) of ``sum_k p_k c_k``: ``p * (c - E_p[c])``."""
    p = softmax(np.asarray(logits, float))
    c = np.asarray(payoff, float)
    return p * (c - p @ c)


def score_function_gradient(logits, payoff, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    """Monte Carlo ``mean_i c_{k_i} * grad log p_{k_i}`` with ``k_i ~ p``."""
    p = softmax(np.asarray(logits, float))
    c = np.asarray(payoff, float)
    counts = np.bincount(rng.choice(len(p), size=n_samples, p=p), minlength=len(p))
    freq = counts / n_samples
    # grad log p_k w.r.t. logits is onehot(k) - p
    return freq * c - (freq @ c) * p
