"""Two-layer ReLU network with a frozen second layer and block-sparse first layer.

The first layer U is (m x 2d): the first n_w rows (the W block) act only on
input block 1, the remaining rows (the V block) only on block 2. The frozen
second layer u has entries of magnitude exactly 1/sqrt(m). The model output
is u . (step(Ux) * Ux) with the inclusive step 1(t >= 0), which makes the
network the exact sum of a block-1 part and a block-2 part:

    forward(x) = r_component(x1) + g_component(x2)

The generalized evaluator `forward_pattern(net, A, B, x)` computes activation
patterns from one matrix A while contracting the values of another matrix B,
which is the object every decoupling diagnostic is built on. It is linear in
B for fixed (A, x).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

__all__ = [
    "Network",
    "init_network",
    "zero_network",
    "forward_pattern",
    "forward",
    "forward_batch",
    "g_component",
    "r_component",
    "g_component_batch",
    "r_component_batch",
    "logistic_loss",
    "loss_derivative",
    "batch_loss",
    "regularized_loss",
    "gradient",
    "network_to_json",
    "network_from_json",
]


@dataclass
class Network:
    """First-layer blocks W, V plus the frozen second layer u.

    u[:n_w] pairs with the rows of W, u[n_w:] with the rows of V. The
    assembled (m, 2d) first layer is available as `.U`; out-of-block entries
    there are identically zero.
    """

    m: int
    d: int
    u: np.ndarray
    W: np.ndarray
    V: np.ndarray

    @property
    def n_w(self) -> int:
        return self.W.shape[0]

    @property
    def u_w(self) -> np.ndarray:
        return self.u[: self.n_w]

    @property
    def u_v(self) -> np.ndarray:
        return self.u[self.n_w :]

    @property
    def U(self) -> np.ndarray:
        full = np.zeros((self.m, 2 * self.d))
        full[: self.n_w, : self.d] = self.W
        full[self.n_w :, self.d :] = self.V
        return full

    def copy(self) -> "Network":
        return Network(self.m, self.d, self.u.copy(), self.W.copy(), self.V.copy())

    def frob_sq(self) -> float:
        return float(np.sum(self.W**2) + np.sum(self.V**2))


def init_network(
    m: int,
    d: int,
    tau0: float,
    rng: np.random.Generator,
    n_w: int | None = None,
) -> Network:
    """Random network: in-block weights i.i.d. N(0, tau0^2), u i.i.d. +-1/sqrt(m).

    Draw order is u, W, V. The row split defaults to half W, half V but is
    configurable through n_w.
    """
    if m < 2 or m % 2 != 0:
        raise ValueError(f"m must be even and >= 2, got {m}")
    if tau0 <= 0.0:
        raise ValueError(f"tau0 must be positive, got {tau0}")
    if n_w is None:
        n_w = m // 2
    if not 1 <= n_w <= m - 1:
        raise ValueError(f"n_w must be in [1, m-1], got {n_w}")
    u = (2 * rng.integers(0, 2, size=m) - 1) / math.sqrt(m)
    W = tau0 * rng.standard_normal((n_w, d))
    V = tau0 * rng.standard_normal((m - n_w, d))
    return Network(m=m, d=d, u=u, W=W, V=V)


def zero_network(m: int, d: int, rng: np.random.Generator | None = None) -> Network:
    """All-zero first layer (u still random unless rng is omitted, then +1/sqrt(m))."""
    if rng is None:
        u = np.full(m, 1 / math.sqrt(m))
    else:
        u = (2 * rng.integers(0, 2, size=m) - 1) / math.sqrt(m)
    return Network(m=m, d=d, u=u, W=np.zeros((m // 2, d)), V=np.zeros((m - m // 2, d)))


def forward_pattern(
    net: Network,
    pattern_source: np.ndarray,
    weights,
    x: np.ndarray,
) -> float:
    """sum_i u_i * 1(<A_i, x> >= 0) * <B_i, x> with A = pattern_source, B = weights.

    The standard forward pass is forward_pattern(net, U, U, x). The step at 0
    is inclusive. `weights` may be a scalar (broadcast), so a zero B is legal.
    """
    A = np.asarray(pattern_source, dtype=np.float64)
    B = np.broadcast_to(np.asarray(weights, dtype=np.float64), A.shape)
    x = np.asarray(x, dtype=np.float64)
    if A.shape != (net.m, x.shape[0]):
        raise ValueError(f"shape mismatch: A {A.shape}, x {x.shape}, m={net.m}")
    gate = (A @ x) >= 0
    return float(net.u @ (gate * (B @ x)))


def forward_pattern_batch(
    net: Network, pattern_source: np.ndarray, weights: np.ndarray, X: np.ndarray
) -> np.ndarray:
    """Row-wise forward_pattern over a batch X of shape (n, dim)."""
    SA = pattern_source @ X.T
    SB = weights @ X.T
    return net.u @ np.where(SA >= 0, SB, 0.0)


def r_component(net: Network, x1: np.ndarray) -> float:
    """Block-1 part of the output: the sub-network acting on x1."""
    s = net.W @ x1
    return float(net.u_w @ np.maximum(s, 0.0))


def g_component(net: Network, x2: np.ndarray) -> float:
    """Block-2 part of the output: the sub-network acting on x2."""
    s = net.V @ x2
    return float(net.u_v @ np.maximum(s, 0.0))


def r_component_batch(net: Network, X1: np.ndarray) -> np.ndarray:
    return net.u_w @ np.maximum(net.W @ X1.T, 0.0)


def g_component_batch(net: Network, X2: np.ndarray) -> np.ndarray:
    return net.u_v @ np.maximum(net.V @ X2.T, 0.0)


def forward(net: Network, x: np.ndarray) -> float:
    """Full output on a concatenated input x of length 2d."""
    return r_component(net, x[: net.d]) + g_component(net, x[net.d :])


def forward_batch(net: Network, X1: np.ndarray, X2: np.ndarray) -> np.ndarray:
    return r_component_batch(net, X1) + g_component_batch(net, X2)


def logistic_loss(f, y):
    """log(1 + exp(-y f)), overflow-safe for any magnitude of f."""
    return np.logaddexp(0.0, -np.asarray(y) * np.asarray(f, dtype=np.float64))


def loss_derivative(f, y):
    """d/df of the logistic loss: -y * s with s = 1 / (1 + exp(y f))."""
    y = np.asarray(y)
    return -y * expit(-y * np.asarray(f, dtype=np.float64))


def _resolve_subset(dataset, subset) -> np.ndarray:
    if subset is None:
        return np.arange(dataset.n)
    idx = np.asarray(subset, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("subset must be nonempty")
    return idx


def batch_loss(net: Network, dataset, subset=None) -> float:
    """Mean logistic loss over the subset (default: the whole dataset)."""
    idx = _resolve_subset(dataset, subset)
    f = forward_batch(net, dataset.X1[idx], dataset.X2[idx])
    return float(np.mean(logistic_loss(f, dataset.y[idx])))


def regularized_loss(net: Network, dataset, lam: float) -> float:
    """batch_loss plus the ridge penalty (lam / 2) ||U||_F^2."""
    return batch_loss(net, dataset) + 0.5 * lam * net.frob_sq()


def gradient(net: Network, dataset, subset=None) -> np.ndarray:
    """Exact gradient of the mean logistic loss w.r.t. the (m, 2d) first layer.

    Row i is E_hat[ l'(f) * u_i * 1(<U_i, x> >= 0) * x ]; out-of-block
    columns stay identically zero, and every row norm is bounded by
    max ||x|| / sqrt(m) because |l'| < 1 and |u_i| = 1/sqrt(m).
    """
    idx = _resolve_subset(dataset, subset)
    X1, X2, y = dataset.X1[idx], dataset.X2[idx], dataset.y[idx]
    f = forward_batch(net, X1, X2)
    c = loss_derivative(f, y) / len(idx)
    S1 = net.W @ X1.T
    S2 = net.V @ X2.T
    G = np.zeros((net.m, 2 * net.d))
    G[: net.n_w, : net.d] = net.u_w[:, None] * ((S1 >= 0) @ (c[:, None] * X1))
    G[net.n_w :, net.d :] = net.u_v[:, None] * ((S2 >= 0) @ (c[:, None] * X2))
    return G


def network_to_json(net: Network) -> str:
    """Checkpoint encoding: second layer plus the assembled row-major first layer."""
    return json.dumps(
        {
            "m": net.m,
            "d": net.d,
            "n_w": net.n_w,
            "u": net.u.tolist(),
            "U": net.U.tolist(),
        }
    )


def network_from_json(text: str) -> Network:
    obj = json.loads(text)
    m, d, n_w = int(obj["m"]), int(obj["d"]), int(obj["n_w"])
    U = np.asarray(obj["U"], dtype=np.float64)
    if U.shape != (m, 2 * d):
        raise ValueError(f"bad first-layer shape {U.shape}, expected {(m, 2 * d)}")
    return Network(
        m=m,
        d=d,
        u=np.asarray(obj["u"], dtype=np.float64),
        W=U[:n_w, :d].copy(),
        V=U[n_w:, d:].copy(),
    )
