"""Dense float64 kernel: matmul, gate nonlinearities, Adam, finite differences.

All functions are pure: inputs are never mutated, identical inputs give
bit-identical outputs on a given machine. Arrays are float64 throughout;
anything else is converted on entry.
"""

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit

from .errors import ContractViolation, OracleError


def as_tensor(x):
    """Coerce to a C-contiguous float64 ndarray."""
    return np.ascontiguousarray(x, dtype=np.float64)


def matmul(a, b):
    """Matrix product of a (r x k) and b (k x c)."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ContractViolation(f"matmul expects 2-d operands, got {a.ndim}-d and {b.ndim}-d")
    if a.shape[1] != b.shape[0]:
        raise ContractViolation(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    return a @ b


def sigmoid(x):
    return expit(as_tensor(x))


def tanh(x):
    return np.tanh(as_tensor(x))


def relu(x):
    return np.maximum(as_tensor(x), 0.0)


_ELEMENTWISE = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}


def elementwise(op, x):
    """Apply one of {sigmoid, tanh, relu} by name, preserving shape."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractViolation(f"unknown elementwise op {op!r}") from None
    return fn(x)


@dataclass(frozen=True)
class AdamState:
    """First/second moment estimates plus hyperparameters for one tensor."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, shape, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(m=np.zeros(shape), v=np.zeros(shape), t=0,
                   lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(param, grad, state):
    """One Adam update. Returns (new_param, new_state); nothing is mutated."""
    param = as_tensor(param)
    grad = as_tensor(grad)
    if not (param.shape == grad.shape == state.m.shape == state.v.shape):
        raise ContractViolation(
            f"adam_step shape mismatch: param {param.shape}, grad {grad.shape}, "
            f"m {state.m.shape}, v {state.v.shape}")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_param = param - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_param, replace(state, m=m, v=v, t=t)


def finite_diff_grad(f, x, h=1e-5):
    """Central-difference gradient of a scalar function at x.

    The oracle against which every hand-written backward pass is checked;
    it never shares code with those passes.
    """
    if h <= 0:
        raise ContractViolation("finite_diff_grad requires h > 0")
    x = as_tensor(x).copy()
    grad = np.empty_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        f_plus = float(f(x))
        flat[k] = orig - h
        f_minus = float(f(x))
        flat[k] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise OracleError(f"non-finite function value near coordinate {k}")
        gflat[k] = (f_plus - f_minus) / (2.0 * h)
    return grad
