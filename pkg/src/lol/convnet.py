"""Weight-shared (convolutional) variant of the two-layer ReLU model.

The concatenated input of length 2d is split into k disjoint patches of equal
width; one filter bank F of m/k channels is shared across patches, and each
patch owns its own chunk of the frozen second layer:

    f(x) = sum_{i < k} u_i . relu(F @ x_(i)),   u_i = u[i*c : (i+1)*c]

With k = 1 the single patch is the whole concatenated input, which is exactly
the dense single-layer evaluation (the trainer realizes Conv{1} as the
block-dense model so traces coincide bitwise). For k >= 2 the split of the
output into a block-1 part and a block-2 part stays exact as long as the ray
pattern is supported on the last d/k coordinates of block 2, because then
only the final patch ever sees a nonzero x2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .network import logistic_loss, loss_derivative

__all__ = [
    "ConvNetwork",
    "init_conv_network",
    "conv_forward",
    "conv_forward_batch",
    "conv_r_component",
    "conv_g_component",
    "conv_gradient",
    "conv_pattern_bits",
]


@dataclass
class ConvNetwork:
    """Shared filter bank F of shape (m/k, 2d/k) plus the frozen second layer."""

    m: int
    d: int
    k: int
    u: np.ndarray
    F: np.ndarray

    @property
    def channels(self) -> int:
        return self.m // self.k

    @property
    def patch_width(self) -> int:
        return 2 * self.d // self.k

    @property
    def u2(self) -> np.ndarray:
        """Second layer reshaped to (k, channels): chunk i pairs with patch i."""
        return self.u.reshape(self.k, self.channels)

    def copy(self) -> "ConvNetwork":
        return ConvNetwork(self.m, self.d, self.k, self.u.copy(), self.F.copy())

    def frob_sq(self) -> float:
        return float(np.sum(self.F**2))


def validate_conv_shape(m: int, d: int, k: int) -> None:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if d % k != 0:
        raise ValueError(f"k must divide d, got k={k}, d={d}")
    if m % k != 0:
        raise ValueError(f"k must divide m, got k={k}, m={m}")


def init_conv_network(
    m: int, d: int, k: int, tau0: float, rng: np.random.Generator
) -> ConvNetwork:
    """Random conv network; draw order is u then F, entries N(0, tau0^2)."""
    validate_conv_shape(m, d, k)
    if m < 2 or m % 2 != 0:
        raise ValueError(f"m must be even and >= 2, got {m}")
    if tau0 <= 0.0:
        raise ValueError(f"tau0 must be positive, got {tau0}")
    u = (2 * rng.integers(0, 2, size=m) - 1) / math.sqrt(m)
    F = tau0 * rng.standard_normal((m // k, 2 * d // k))
    return ConvNetwork(m=m, d=d, k=k, u=u, F=F)


def _patches(net: ConvNetwork, x: np.ndarray) -> np.ndarray:
    return x.reshape(net.k, net.patch_width)


def conv_forward(net: ConvNetwork, x: np.ndarray) -> float:
    """Shared-weight forward over the k patches of a concatenated input."""
    if x.shape[0] != 2 * net.d:
        raise ValueError(f"expected input of length {2 * net.d}, got {x.shape[0]}")
    S = net.F @ _patches(net, x).T
    return float(np.sum(net.u2 * np.maximum(S, 0.0).T))


def conv_forward_batch(net: ConvNetwork, X: np.ndarray) -> np.ndarray:
    n = X.shape[0]
    Xnk = X.reshape(n * net.k, net.patch_width)
    ST = np.maximum(Xnk @ net.F.T, 0.0)
    return ST.reshape(n, net.m) @ net.u2.ravel()


def conv_r_component(net: ConvNetwork, x1: np.ndarray) -> float:
    """Contribution of every patch except the last (depends only on block 1
    when the ray pattern sits in the final patch)."""
    x = np.concatenate([x1, np.zeros(net.d)])
    S = net.F @ _patches(net, x).T
    vals = np.sum(net.u2 * np.maximum(S, 0.0).T, axis=1)
    return float(np.sum(vals[: net.k - 1])) if net.k > 1 else float(vals[0])


def conv_g_component(net: ConvNetwork, x2: np.ndarray) -> float:
    """Contribution of the last patch, fed with block 2 alone."""
    if net.k == 1:
        # single patch: the block-2 part is the forward on (0, x2)
        return conv_forward(net, np.concatenate([np.zeros(net.d), x2]))
    x = np.concatenate([np.zeros(net.d), x2])
    patch = _patches(net, x)[net.k - 1]
    return float(net.u2[net.k - 1] @ np.maximum(net.F @ patch, 0.0))


def conv_gradient(net: ConvNetwork, dataset, subset=None) -> np.ndarray:
    """Exact gradient of the mean logistic loss w.r.t. the shared filters."""
    idx = np.arange(dataset.n) if subset is None else np.asarray(subset)
    if idx.size == 0:
        raise ValueError("subset must be nonempty")
    X = dataset.X[idx]
    y = dataset.y[idx]
    n = len(idx)
    Xnk = X.reshape(n * net.k, net.patch_width)
    ST = Xnk @ net.F.T
    f = np.maximum(ST, 0.0).reshape(n, net.m) @ net.u2.ravel()
    coef = loss_derivative(f, y) / n
    T = (ST >= 0).astype(np.float64).reshape(n, net.k, net.channels)
    T *= net.u2[None, :, :]
    T *= coef[:, None, None]
    return T.reshape(n * net.k, net.channels).T @ Xnk


def conv_pattern_bits(F: np.ndarray, k: int, X: np.ndarray) -> np.ndarray:
    """Activation patterns of all m = k * channels units, shape (n, m)."""
    n = X.shape[0]
    w = X.shape[1] // k
    Xnk = X.reshape(n * k, w)
    return (Xnk @ F.T >= 0).reshape(n, k * F.shape[0])
