"""Dense numeric primitives: stable softmax/cross-entropy, Adam, gradient checking.

All arithmetic is float64. Matrices are 2-D numpy arrays in row-major order.
"""
from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .errors import DomainError

GradDict = dict[str, np.ndarray]


def check_finite(a: np.ndarray, what: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise DomainError(f"{what} contains non-finite entries")
    return a


def softmax_rows(m: np.ndarray) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction.

    Works on any array whose last axis holds the logits; rows of the output
    are nonnegative and sum to 1.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.size == 0:
        raise DomainError("softmax of an empty matrix")
    check_finite(m, "softmax input")
    shifted = m - m.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax_rows(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.size == 0:
        raise DomainError("log-softmax of an empty matrix")
    shifted = m - m.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits: np.ndarray, label: int) -> float:
    """Negative log softmax probability of ``label`` for a single logit row."""
    row = np.asarray(logits, dtype=np.float64).reshape(-1)
    k = row.shape[0]
    if not 0 <= label < k:
        raise DomainError(f"label {label} out of range for {k} classes")
    return float(-log_softmax_rows(row[None, :])[0, label])


def cross_entropy_batch(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over a batch plus its gradient w.r.t. the logits.

    ``logits`` is (B, K), ``labels`` is (B,) of class indices. Returns the
    scalar loss and d(loss)/d(logits) = (softmax - onehot) / B.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    b, k = logits.shape
    if labels.shape != (b,):
        raise DomainError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise DomainError("label index out of range")
    logp = log_softmax_rows(logits)
    loss = float(-logp[np.arange(b), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(b), labels] -= 1.0
    grad /= b
    return loss, grad


class Adam:
    """Bias-corrected Adam over a named set of parameter arrays.

    Moment buffers are zero-initialized and shape-locked to the parameter set
    given at construction; ``step`` applies the update in place.
    """

    def __init__(self, params: Mapping[str, np.ndarray], learning_rate: float,
                 beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        if not 0.0 < beta1 < 1.0 or not 0.0 < beta2 < 1.0:
            raise DomainError("Adam betas must lie in (0, 1)")
        if learning_rate <= 0.0 or epsilon <= 0.0:
            raise DomainError("learning rate and epsilon must be positive")
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step_count = 0
        self._shapes = {k: v.shape for k, v in params.items()}
        self.first_moment: GradDict = {k: np.zeros_like(v) for k, v in params.items()}
        self.second_moment: GradDict = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        if set(params) != set(self._shapes):
            raise DomainError("parameter set does not match optimizer state")
        for name, p in params.items():
            if p.shape != self._shapes[name] or grads[name].shape != p.shape:
                raise DomainError(f"shape mismatch for parameter {name!r}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in params.items():
            g = grads[name]
            m = self.first_moment[name]
            v = self.second_moment[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            p -= self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.epsilon)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: Adam) -> None:
    """Apply one Adam update in place. Convenience wrapper around ``Adam.step``."""
    state.step(params, grads)


def finite_diff_check(loss_fn: Callable[[], float], params: Mapping[str, np.ndarray],
                      analytic_grads: Mapping[str, np.ndarray], h: float = 1e-5) -> float:
    """Compare analytic gradients with central finite differences.

    ``loss_fn`` is re-evaluated while entries of ``params`` are perturbed in
    place (and restored). Returns the max over coordinates of
    ``|analytic - numeric| / max(1e-8, |numeric|)``.
    """
    worst = 0.0
    for name, arr in params.items():
        ana = analytic_grads[name]
        if ana.shape != arr.shape:
            raise DomainError(f"analytic gradient shape mismatch for {name!r}")
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            f_plus = loss_fn()
            arr[idx] = orig - h
            f_minus = loss_fn()
            arr[idx] = orig
            if not np.isfinite(f_plus) or not np.isfinite(f_minus):
                raise DomainError(f"non-finite loss while perturbing {name}[{idx}]")
            numeric = (f_plus - f_minus) / (2.0 * h)
            rel = abs(ana[idx] - numeric) / max(1e-8, abs(numeric))
            worst = max(worst, rel)
    return worst
