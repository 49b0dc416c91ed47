import numpy as np

from lrdet import tensor as T


def rng(seed=0):
    return np.random.default_rng(seed)


def tensors_close(a, b, tol=1e-9):
    a = a.data if isinstance(a, T.Tensor) else np.asarray(a)
    b = b.data if isinstance(b, T.Tensor) else np.asarray(b)
    return a.shape == b.shape and np.allclose(a, b, rtol=tol, atol=tol)
