"""Diagnostics that make the learning order of the two patterns observable.

Every quantity here is a pure function of a network and data: subset losses
split by which block an example carries, the activation-pattern Hamming
distance between two weight matrices, the curvature of the block-2 component
across the three rays (zero iff that component is still affine there, i.e.
the ray pattern is unmemorized), the average residual loss derivative on
ray-carrying examples, the antisymmetric-part span residual of the block-1
component, and plain test evaluation split by example kind.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, fields

import numpy as np
from scipy.special import expit

from .convnet import (
    ConvNetwork,
    conv_forward_batch,
    conv_g_component,
    conv_r_component,
)
from .distribution import Dataset, DistributionParams, Kind
from .network import (
    Network,
    forward_batch,
    g_component,
    g_component_batch,
    logistic_loss,
    r_component,
    r_component_batch,
)

__all__ = [
    "MetricsRecord",
    "CSV_COLUMNS",
    "almost_linearity",
    "rho",
    "activation_hamming",
    "subset_losses",
    "margin_profile",
    "antisym_span_residual",
    "evaluate",
]


@dataclass
class MetricsRecord:
    """One row of the per-interval diagnostic trace.

    train_loss is the loss the running algorithm monitors (for the
    pre-activation-noise algorithm that is the noisy-model loss); every other
    model diagnostic is computed on the clean network. Optional fields are
    None when their subset is empty, no test set was supplied, or (for the
    span fields) the record is not the final one of a run.
    """

    t: int
    lr: float
    train_loss: float
    reg_loss: float
    loss_m1_r: float | None
    loss_m1bar_g: float | None
    loss_m2bar: float | None
    rho: float
    almost_lin: float
    u_bar_fro: float
    w_bar_fro: float
    v_bar_fro: float
    hamming_frac: float
    test_err: float | None
    test_loss: float | None
    test_err_p_only: float | None
    test_err_q_only: float | None
    test_err_both: float | None
    span_residual: float | None = None
    alpha_norm: float | None = None


CSV_COLUMNS: tuple[str, ...] = tuple(f.name for f in fields(MetricsRecord))


def _is_conv(net) -> bool:
    return isinstance(net, ConvNetwork)


def _g_single(net, x2: np.ndarray) -> float:
    return conv_g_component(net, x2) if _is_conv(net) else g_component(net, x2)


def _full_forward(net, dataset: Dataset, idx: np.ndarray) -> np.ndarray:
    if _is_conv(net):
        return conv_forward_batch(net, dataset.X[idx])
    return forward_batch(net, dataset.X1[idx], dataset.X2[idx])


def almost_linearity(net, params: DistributionParams) -> float:
    """|g(z + zeta) + g(z - zeta) - 2 g(z)|: second difference of the block-2
    component across the three rays.

    Zero iff that component acts affinely on the ray directions, i.e. it has
    not learned the one feature that separates the center ray from the offset
    rays. Changes confined to the block-1 side cannot move this quantity.
    """
    z, zeta = params.z, params.zeta
    return abs(
        _g_single(net, z + zeta) + _g_single(net, z - zeta) - 2.0 * _g_single(net, z)
    )


def rho_from_f(f_m2: np.ndarray, y_m2: np.ndarray, n_total: int) -> float:
    return float(np.sum(expit(-y_m2 * f_m2))) / n_total


def rho(net, dataset: Dataset) -> float:
    """Average |loss derivative| over examples carrying block 2, normalized by
    the full dataset size N (not by |M2|)."""
    if len(dataset.m2) == 0:
        return 0.0
    f = _full_forward(net, dataset, dataset.m2)
    return rho_from_f(f, dataset.y[dataset.m2], dataset.n)


def activation_hamming(A: np.ndarray, B: np.ndarray, probe: np.ndarray) -> float:
    """Mean fraction of units whose activation pattern differs between A and B
    over the probe inputs."""
    probe = np.atleast_2d(np.asarray(probe, dtype=np.float64))
    if probe.shape[0] == 0:
        raise ValueError("probe must be nonempty")
    bits_a = probe @ A.T >= 0
    bits_b = probe @ B.T >= 0
    return float(np.mean(bits_a != bits_b))


def subset_losses_from_values(
    r_vals: np.ndarray,
    g_vals: np.ndarray,
    f_vals: np.ndarray,
    y: np.ndarray,
    m1: np.ndarray,
    m1_bar: np.ndarray,
    m2: np.ndarray,
    m2_bar: np.ndarray,
) -> dict:
    def mean_loss(vals, idx):
        if len(idx) == 0:
            return None
        return float(np.mean(logistic_loss(vals[idx], y[idx])))

    return {
        "loss_m1_r": mean_loss(r_vals, m1),
        "loss_m1bar_g": mean_loss(g_vals, m1_bar),
        "loss_m2": mean_loss(f_vals, m2),
        "loss_m2bar": mean_loss(f_vals, m2_bar),
    }


def subset_losses(net, dataset: Dataset) -> dict:
    """Losses of the per-block components on their diagnostic subsets.

    loss_m1_r scores the block-1 component alone on examples carrying block 1;
    loss_m1bar_g scores the block-2 component alone on examples carrying only
    block 2 (exact there, since block 1 is zero); the other two use the full
    forward. Empty subsets report None, never 0.
    """
    if _is_conv(net):
        g_vals = np.array([conv_g_component(net, x2) for x2 in dataset.X2])
        r_vals = np.array([conv_r_component(net, x1) for x1 in dataset.X1])
        f_vals = conv_forward_batch(net, dataset.X)
    else:
        r_vals = r_component_batch(net, dataset.X1)
        g_vals = g_component_batch(net, dataset.X2)
        f_vals = r_vals + g_vals
    return subset_losses_from_values(
        r_vals, g_vals, f_vals, dataset.y,
        dataset.m1, dataset.m1_bar, dataset.m2, dataset.m2_bar,
    )


def margin_profile(net, X2: np.ndarray, y: np.ndarray) -> dict:
    """Scale-free margins of the block-2 component: y * g(x2) / ||x2||.

    Positive homogeneity makes the ratio independent of the ray scaling, so
    the profile summarizes how well the three directions are separated.
    Returns the min and median ratio plus the fraction of inputs violating
    y * g(x2) > 0 (a zero output counts as a violation).
    """
    X2 = np.atleast_2d(X2)
    norms = np.linalg.norm(X2, axis=1)
    if np.any(norms == 0):
        raise ValueError("margin_profile requires nonzero block-2 inputs")
    if _is_conv(net):
        g_vals = np.array([conv_g_component(net, x2) for x2 in X2])
    else:
        g_vals = g_component_batch(net, X2)
    ratios = np.asarray(y) * g_vals / norms
    return {
        "min_ratio": float(np.min(ratios)),
        "median_ratio": float(np.median(ratios)),
        "violation_frac": float(np.mean(np.asarray(y) * g_vals <= 0)),
    }


def antisym_span_residual(
    net, dataset: Dataset, probe: np.ndarray
) -> tuple[float, np.ndarray, float]:
    """How close the odd part of the block-1 component is to a linear map with
    coefficient vector confined to the span of the block-1-only training inputs.

    Builds h(x) = (r(x) - r(-x)) / 2 on the probe and least-squares fits
    h(x) ~ <alpha, x> with alpha restricted to span{x1_i : i in M2_bar},
    solving the |M2_bar|-dimensional normal equations. Returns the relative
    residual ||h - fit|| / ||h|| (0 for h = 0 by convention), alpha, and
    ||alpha||. Rank-deficient normal equations are re-solved with ridge 1e-10
    and reported through a warning.
    """
    basis_idx = dataset.m2_bar
    if len(basis_idx) < 1:
        raise ValueError("need at least one block-1-only training example")
    probe = np.atleast_2d(probe)
    if probe.shape[0] < 10 * len(basis_idx):
        raise ValueError(
            f"probe size {probe.shape[0]} < 10 * |M2_bar| = {10 * len(basis_idx)}"
        )
    if _is_conv(net):
        h = 0.5 * (
            np.array([conv_r_component(net, x) for x in probe])
            - np.array([conv_r_component(net, -x) for x in probe])
        )
    else:
        h = 0.5 * (r_component_batch(net, probe) - r_component_batch(net, -probe))
    hn = float(np.linalg.norm(h))
    d = probe.shape[1]
    if hn == 0.0:
        return 0.0, np.zeros(d), 0.0
    basis = dataset.X1[basis_idx]
    P = probe @ basis.T
    A = P.T @ P
    b = P.T @ h
    try:
        coef = np.linalg.solve(A, b)
        if not np.all(np.isfinite(coef)):
            raise np.linalg.LinAlgError("non-finite solution")
    except np.linalg.LinAlgError:
        warnings.warn(
            "rank-deficient span basis, solving with ridge 1e-10", RuntimeWarning
        )
        coef = np.linalg.solve(A + 1e-10 * np.eye(A.shape[0]), b)
    alpha = basis.T @ coef
    residual = float(np.linalg.norm(h - P @ coef)) / hn
    return residual, alpha, float(np.linalg.norm(alpha))


_KIND_KEYS = {
    Kind.P_ONLY: "test_err_p_only",
    Kind.Q_ONLY: "test_err_q_only",
    Kind.BOTH: "test_err_both",
}


def evaluate_from_values(f: np.ndarray, y: np.ndarray, kind_codes: np.ndarray) -> dict:
    margins = y * f
    out = {
        "test_err": float(np.mean(margins <= 0)),
        "test_loss": float(np.mean(logistic_loss(f, y))),
    }
    for code, key in enumerate(
        ("test_err_p_only", "test_err_q_only", "test_err_both")
    ):
        mask = kind_codes == code
        out[key] = float(np.mean(margins[mask] <= 0)) if mask.any() else None
    return out


def kind_codes(dataset: Dataset) -> np.ndarray:
    order = {Kind.P_ONLY: 0, Kind.Q_ONLY: 1, Kind.BOTH: 2}
    return np.array([order[ex.kind] for ex in dataset.examples], dtype=np.int64)


def evaluate(net, test_set: Dataset) -> dict:
    """Classification error (ties y*f = 0 count as errors), mean test loss,
    and the error conditioned on each example kind."""
    f = _full_forward(net, test_set, np.arange(test_set.n))
    return evaluate_from_values(f, test_set.y, kind_codes(test_set))
