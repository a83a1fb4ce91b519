"""Independent reference models with closed-form answers."""

import numpy as np

from rfl import tensor as T
from rfl.tensor import Tensor


class Logistic:
    """Two-class linear model ``z = W x + c`` on flattened pixels."""

    def __init__(self, w: np.ndarray, c: np.ndarray, dtype=np.float32):
        self.w = w.astype(dtype)
        self.c = c.astype(dtype)
        self.dtype = np.dtype(dtype)
        self.num_classes = w.shape[0]

    def __call__(self, x, strict: bool = True):
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        flat = x.reshape(x.shape[0], -1)
        return T.matmul(flat, Tensor(self.w.T)) + Tensor(self.c)


def box_optimal_delta(model: Logistic, x0: np.ndarray, y: np.ndarray, eps: float) -> np.ndarray:
    """Maximiser of the cross-entropy over the eps-box within [0, 1].

    The loss only depends on the margin ``(w_y - w_o) . x``, which it
    decreases in, so each pixel moves against ``sign(w_y - w_o)`` as far as
    both boxes allow.
    """
    x = x0.reshape(len(x0), -1).astype(np.float64)
    v = model.w[y].astype(np.float64) - model.w[1 - y].astype(np.float64)
    lo = np.maximum(0.0, x - eps)
    hi = np.minimum(1.0, x + eps)
    target = np.where(v > 0, lo, np.where(v < 0, hi, x))
    return (target - x).reshape(x0.shape)
