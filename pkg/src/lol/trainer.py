"""Noisy full-batch gradient descent with a signal/noise weight decomposition.

The update is

    U_{t+1} = (1 - gamma * lam) U_t - gamma * (grad L(U_t) + xi_t),
    xi_t ~ N(0, tau_xi^2) i.i.d. on every in-block entry,

tracked together with the exactly decoupled iterates

    Ubar_{t+1}   = (1 - gamma * lam) Ubar_t   - gamma * grad L(U_t)
    Utilde_{t+1} = (1 - gamma * lam) Utilde_t - gamma * xi_t

so U_t = Ubar_t + Utilde_t holds up to float drift (monitored). With tau_xi
chosen by `solve_noise_std`, the noise part Utilde_t is stationary with the
initialization's entrywise variance.

Three schedules are provided: large learning rate annealed once a loss
threshold is reached ("ls"), a constant small learning rate ("s"), and the
small learning rate combined with fresh per-iteration pre-activation noise
that is annealed instead of the learning rate ("mitigation"). All three run
either the block-dense model or the weight-shared conv variant (conv with
k = 1 is realized as the block-dense model, so their traces coincide
bitwise).

Per-iteration randomness is consumed in a fixed documented order: the
pre-activation noise vector (only when its std is nonzero), then the
gradient noise for the block-1 rows, then for the block-2 rows. Loss
thresholds are evaluated on the full-batch unregularized loss at the current
iterate before each update; the annealing rule is only consulted from
iteration 1 on.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import diagnostics
from .convnet import (
    ConvNetwork,
    conv_pattern_bits,
    init_conv_network,
    validate_conv_shape,
)
from .distribution import Dataset, generate_dataset, sample_p
from .network import Network, init_network

__all__ = [
    "MitigationConfig",
    "TrainerConfig",
    "TrainerState",
    "DivergenceError",
    "InvariantViolation",
    "solve_noise_std",
    "init_state",
    "step",
    "run",
    "run_ls",
    "run_s",
    "run_mitigation",
    "save_checkpoint",
    "load_checkpoint",
]

LOG2 = math.log(2.0)

# sub-stream roles derived from a run seed; 0 and 1 are reserved for the
# train and test datasets (see runner)
_ROLE_INIT = 2
_ROLE_NOISE = 3
_ROLE_PROBE = 4

_ALGO_ALIASES = {
    "ls": "ls", "largethenanneal": "ls", "large_then_anneal": "ls",
    "s": "s", "smallconstant": "s", "small_constant": "s",
    "mitigation": "mitigation", "mitigationnoise": "mitigation",
    "mitigation_noise": "mitigation",
}
_MODEL_ALIASES = {
    "block_dense": "block_dense", "blockdense": "block_dense",
    "dense": "block_dense", "conv": "conv",
}


def stream(seed: int, role: int) -> np.random.Generator:
    """Independent per-run generator via counter-style seed splitting."""
    return np.random.default_rng(np.random.SeedSequence([seed % 2**63, role]))


class DivergenceError(RuntimeError):
    """Raised when the training loss stops being finite; carries the partial
    trace plus a final diagnostic record."""

    def __init__(self, message, state, trace, record):
        super().__init__(message)
        self.state = state
        self.trace = trace
        self.record = record


class InvariantViolation(AssertionError):
    """A monitored runtime invariant (decomposition drift, row-norm bound)
    failed; indicates a bug, not a bad run."""


def solve_noise_std(tau0: float, eta1: float, lam: float) -> float:
    """Gradient-noise std that makes the injected-noise process stationary.

    Solves (1 - eta1*lam)^2 tau0^2 + eta1^2 tau_xi^2 = tau0^2 for tau_xi, so
    the accumulated-noise iterate keeps the initialization's entrywise
    variance under learning rate eta1 and weight decay lam.
    """
    if tau0 <= 0:
        raise ValueError(f"tau0 must be positive, got {tau0}")
    x = eta1 * lam
    if not 0.0 < x < 1.0:
        raise ValueError(f"need 0 < eta1*lambda < 1, got {x}")
    return tau0 * math.sqrt(1.0 - (1.0 - x) ** 2) / eta1


@dataclass
class MitigationConfig:
    """Pre-activation-noise schedule for the mitigation algorithm.

    tau_act_init defaults to the weight-initialization std. anneal_at is
    either {"iteration": t} or {"loss": value}; None picks the loss rule at
    the same threshold the annealed-learning-rate algorithm uses,
    epsilon1 + q_emp * log 2.
    """

    tau_act_init: float | None = None
    tau_act_final: float = 0.0
    anneal_at: dict | None = None

    def to_dict(self) -> dict:
        return {
            "tau_act_init": self.tau_act_init,
            "tau_act_final": self.tau_act_final,
            "anneal_at": self.anneal_at,
        }

    @classmethod
    def from_dict(cls, obj: dict | None) -> "MitigationConfig":
        obj = obj or {}
        return cls(
            tau_act_init=obj.get("tau_act_init"),
            tau_act_final=obj.get("tau_act_final", 0.0),
            anneal_at=obj.get("anneal_at"),
        )


@dataclass
class TrainerConfig:
    """Everything a single training run needs besides the data.

    tau_xi = None derives the gradient-noise std from (tau0, eta1, lambda)
    via solve_noise_std; the derived value is kept across annealing and is
    also used by the constant-small-rate algorithm (an explicit tau_xi
    overrides it). epsilon2 = None uses the stopping loss
    sqrt(epsilon1 / q_emp) for the annealed algorithm.
    """

    m: int = 4096
    eta1: float = 0.5
    eta2: float = 5e-3
    lam: float = 1e-4
    tau0: float = 0.05
    tau_xi: float | None = None
    epsilon1: float = 0.05
    epsilon2: float | None = None
    epsilon2_prime: float = 0.05
    max_iters: int = 200_000
    eval_every: int = 50
    algorithm: str = "ls"
    mitigation: MitigationConfig = field(default_factory=MitigationConfig)
    model: str = "block_dense"
    conv_k: int = 1
    seed: int = 0

    def __post_init__(self):
        self.algorithm = _ALGO_ALIASES.get(
            str(self.algorithm).lower(), self.algorithm
        )
        self.model = _MODEL_ALIASES.get(str(self.model).lower(), self.model)

    def validate(self) -> None:
        if self.algorithm not in ("ls", "s", "mitigation"):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.model not in ("block_dense", "conv"):
            raise ValueError(f"unknown model {self.model!r}")
        if not (self.eta1 > 0 and self.eta2 > 0):
            raise ValueError("learning rates must be positive")
        if self.eta2 >= self.eta1:
            raise ValueError(f"need eta2 < eta1, got {self.eta2} >= {self.eta1}")
        if self.epsilon1 <= 0:
            raise ValueError(f"epsilon1 must be positive, got {self.epsilon1}")
        if self.lam < 0:
            raise ValueError(f"lambda must be nonnegative, got {self.lam}")
        if self.lam * self.eta1 >= 1:
            raise ValueError(
                f"need eta1*lambda < 1, got {self.lam * self.eta1}"
            )
        if self.tau0 <= 0:
            raise ValueError(f"tau0 must be positive, got {self.tau0}")
        if self.max_iters < 1 or self.eval_every < 1:
            raise ValueError("max_iters and eval_every must be >= 1")
        if self.m < 2 or self.m % 2:
            raise ValueError(f"m must be even and >= 2, got {self.m}")
        if self.model == "conv" and self.conv_k < 1:
            raise ValueError(f"conv_k must be >= 1, got {self.conv_k}")

    def resolved_tau_xi(self) -> float:
        if self.tau_xi is not None:
            return float(self.tau_xi)
        return solve_noise_std(self.tau0, self.eta1, self.lam)

    def to_dict(self) -> dict:
        return {
            "m": self.m, "eta1": self.eta1, "eta2": self.eta2,
            "lambda": self.lam, "tau0": self.tau0, "tau_xi": self.tau_xi,
            "epsilon1": self.epsilon1, "epsilon2": self.epsilon2,
            "epsilon2_prime": self.epsilon2_prime,
            "max_iters": self.max_iters, "eval_every": self.eval_every,
            "algorithm": self.algorithm, "mitigation": self.mitigation.to_dict(),
            "model": self.model, "conv_k": self.conv_k, "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainerConfig":
        obj = dict(obj)
        mit = MitigationConfig.from_dict(obj.pop("mitigation", None))
        if "lambda" in obj:
            obj["lam"] = obj.pop("lambda")
        known = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown trainer config keys: {sorted(unknown)}")
        return cls(mitigation=mit, **obj)


@dataclass
class TrainerState:
    """Current iterate, its signal/noise decomposition, and phase bookkeeping."""

    t: int
    net: Network | ConvNetwork
    net_bar: Network | ConvNetwork
    net_tilde: Network | ConvNetwork
    phase: str
    t0: int | None
    rng: np.random.Generator
    sum_gamma: float = 0.0
    converged: bool = False
    last_loss: float = math.nan
    _engine: object = None


def _blocks(net) -> list[np.ndarray]:
    if isinstance(net, ConvNetwork):
        return [net.F]
    return [net.W, net.V]


def _zeros_like_net(net):
    out = net.copy()
    for b in _blocks(out):
        b[:] = 0.0
    return out


class _RunContext:
    """Per-run probe inputs, derived deterministically from the config seed."""

    def __init__(self, cfg: TrainerConfig, dataset: Dataset):
        params = dataset.params
        rng = stream(cfg.seed, _ROLE_PROBE)
        # fixed probe for the activation-overlap trace (64 held-out examples)
        self.probe_X = generate_dataset(params, 64, rng).X
        # fresh block-1 marginal probe for the span-residual diagnostic
        n_span = max(10 * len(dataset.m2_bar), 512)
        span = np.empty((n_span, params.d))
        for i in range(n_span):
            yy = 1 if rng.random() < 0.5 else -1
            span[i] = sample_p(params, yy, rng)
        self.span_probe = span


class _Split:
    """Precomputed evaluation arrays for one dataset (train or test).

    When every block-2 input carries ray provenance (x2 = alpha * direction,
    verified bit-exactly), the block-2 side of a forward pass only needs the
    pre-activations on the three ray directions; positive homogeneity scales
    them per example. This removes the block-2 matrix product from the hot
    loop entirely.
    """

    def __init__(self, dataset: Dataset):
        params = dataset.params
        self.n = dataset.n
        self.y = dataset.y
        self.m1 = dataset.m1
        self.m1_bar = dataset.m1_bar
        self.m2 = dataset.m2
        self.m2_bar = dataset.m2_bar
        self.I1 = dataset.m1
        self.I2 = dataset.m2
        self.X1a = np.ascontiguousarray(dataset.X1[self.I1])
        self.D = params.directions
        self.kind_codes = diagnostics.kind_codes(dataset)
        kidx = dataset.dir_idx[self.I2]
        alph = dataset.alphas[self.I2]
        self.rays = bool(
            len(self.I2) == 0
            or (
                np.all(kidx >= 0)
                and np.array_equal(
                    dataset.X2[self.I2], alph[:, None] * self.D[kidx]
                )
            )
        )
        if self.rays:
            self.kidx = kidx
            self.alph = alph
        else:
            self.X2a = np.ascontiguousarray(dataset.X2[self.I2])
        self.max_x_norm = float(
            np.max(np.sqrt(np.sum(dataset.X1**2, 1) + np.sum(dataset.X2**2, 1)))
        )

    def dense_values(self, net: Network):
        """Clean (f, r, g) vectors for the whole split."""
        r = np.zeros(self.n)
        g = np.zeros(self.n)
        if len(self.I1):
            r[self.I1] = net.u_w @ np.maximum(net.W @ self.X1a.T, 0.0)
        if len(self.I2):
            if self.rays:
                gdir = net.u_v @ np.maximum(net.V @ self.D.T, 0.0)
                g[self.I2] = self.alph * gdir[self.kidx]
            else:
                g[self.I2] = net.u_v @ np.maximum(net.V @ self.X2a.T, 0.0)
        return r + g, r, g


class _DenseEngine:
    """Hot-loop implementation for the block-dense model."""

    model_kind = "block_dense"

    def __init__(self, cfg: TrainerConfig, dataset: Dataset, test_set: Dataset | None):
        self.cfg = cfg
        self.dataset = dataset
        self.params = dataset.params
        self.tau_xi = cfg.resolved_tau_xi()
        self.train = _Split(dataset)
        self.test = _Split(test_set) if test_set is not None else None
        self.ctx = _RunContext(cfg, dataset)
        self._cache = None

    def new_network(self, rng: np.random.Generator) -> Network:
        return init_network(self.cfg.m, self.params.d, self.cfg.tau0, rng)

    def forward_loss(self, state: TrainerState, tau_act: float) -> float:
        net = state.net
        tr = self.train
        xi_act = None
        if tau_act > 0.0:
            xi_act = tau_act * state.rng.standard_normal(net.m)
        S1 = net.W @ tr.X1a.T
        if xi_act is not None:
            S1 += xi_act[: net.n_w, None]
        f = np.zeros(tr.n)
        if len(tr.I1):
            f[tr.I1] = net.u_w @ np.maximum(S1, 0.0)
        pre3 = net.V @ tr.D.T
        SV = None
        if len(tr.I2):
            if tr.rays and xi_act is None:
                gdir = net.u_v @ np.maximum(pre3, 0.0)
                f[tr.I2] += tr.alph * gdir[tr.kidx]
            else:
                if tr.rays:
                    SV = pre3[:, tr.kidx] * tr.alph[None, :]
                else:
                    SV = net.V @ tr.X2a.T
                if xi_act is not None:
                    SV += xi_act[net.n_w :, None]
                f[tr.I2] += net.u_v @ np.maximum(SV, 0.0)
        loss = float(np.mean(np.logaddexp(0.0, -tr.y * f)))
        self._cache = (S1, pre3, SV, f)
        state.last_loss = loss
        return loss

    def apply_update(self, state: TrainerState, gamma: float) -> None:
        net, bar, tilde = state.net, state.net_bar, state.net_tilde
        tr = self.train
        S1, pre3, SV, f = self._cache
        self._cache = None
        c = -tr.y * expit(-tr.y * f) / tr.n
        # block-1 gradient rows
        G_W = (S1 >= 0).astype(np.float64) @ (c[tr.I1, None] * tr.X1a)
        G_W *= net.u_w[:, None]
        # block-2 gradient rows
        if len(tr.I2) == 0:
            G_V = np.zeros_like(net.V)
        elif SV is None:
            wk = np.bincount(tr.kidx, weights=c[tr.I2] * tr.alph, minlength=3)
            G_V = ((pre3 >= 0) * wk[None, :]) @ tr.D
            G_V *= net.u_v[:, None]
        elif tr.rays:
            B2 = np.zeros((len(tr.I2), 3))
            B2[np.arange(len(tr.I2)), tr.kidx] = c[tr.I2] * tr.alph
            G_V = ((SV >= 0).astype(np.float64) @ B2) @ tr.D
            G_V *= net.u_v[:, None]
        else:
            G_V = (SV >= 0).astype(np.float64) @ (c[tr.I2, None] * tr.X2a)
            G_V *= net.u_v[:, None]
        xi_W = state.rng.standard_normal(net.W.shape)
        xi_V = state.rng.standard_normal(net.V.shape)
        decay = 1.0 - gamma * self.cfg.lam
        scale = gamma * self.tau_xi
        for blk, G, xi in ((net.W, G_W, xi_W), (net.V, G_V, xi_V)):
            blk *= decay
            blk -= gamma * G
            blk -= scale * xi
        bar.W *= decay
        bar.W -= gamma * G_W
        bar.V *= decay
        bar.V -= gamma * G_V
        tilde.W *= decay
        tilde.W -= scale * xi_W
        tilde.V *= decay
        tilde.V -= scale * xi_V
        state.t += 1
        state.sum_gamma += gamma

    def clean_values(self, net: Network, split: _Split):
        return split.dense_values(net)

    def block_norms(self, net: Network):
        w = float(np.linalg.norm(net.W))
        v = float(np.linalg.norm(net.V))
        return math.hypot(w, v), w, v

    def hamming(self, state: TrainerState) -> float:
        return diagnostics.activation_hamming(
            state.net.U, state.net_tilde.U, self.ctx.probe_X
        )

    def row_norm_bound(self, state: TrainerState) -> tuple[float, float]:
        bar = state.net_bar
        rn = max(
            float(np.max(np.sum(bar.W**2, axis=1))),
            float(np.max(np.sum(bar.V**2, axis=1))),
        ) ** 0.5
        sm = math.sqrt(self.cfg.m)
        arm1 = math.inf if self.cfg.lam == 0 else 1.0 / (sm * self.cfg.lam)
        bound = self.train.max_x_norm * min(arm1, state.sum_gamma / sm)
        return rn, bound

    def decomposition_drift(self, state: TrainerState) -> float:
        return max(
            float(np.max(np.abs(state.net.W - state.net_bar.W - state.net_tilde.W))),
            float(np.max(np.abs(state.net.V - state.net_bar.V - state.net_tilde.V))),
        )


class _ConvSplit:
    """Patch-major evaluation arrays for the conv model."""

    def __init__(self, dataset: Dataset, k: int):
        self.n = dataset.n
        self.y = dataset.y
        self.m1 = dataset.m1
        self.m1_bar = dataset.m1_bar
        self.m2 = dataset.m2
        self.m2_bar = dataset.m2_bar
        self.kind_codes = diagnostics.kind_codes(dataset)
        X = dataset.X
        self.w = X.shape[1] // k
        self.k = k
        self.Xnk = np.ascontiguousarray(X.reshape(self.n * k, self.w))
        self.max_patch_norm = float(np.max(np.linalg.norm(self.Xnk, axis=1)))
        self.max_x_norm = float(np.max(np.linalg.norm(X, axis=1)))


class _ConvEngine:
    """Hot-loop implementation for the weight-shared conv model (k >= 2)."""

    model_kind = "conv"

    def __init__(self, cfg: TrainerConfig, dataset: Dataset, test_set: Dataset | None):
        self.cfg = cfg
        self.dataset = dataset
        self.params = dataset.params
        k = cfg.conv_k
        validate_conv_shape(cfg.m, self.params.d, k)
        if self.params.q_support > self.params.d // k:
            raise ValueError(
                "conv model needs the ray pattern supported on the last d/k "
                f"block-2 coordinates: q_support={self.params.q_support} > "
                f"{self.params.d // k}"
            )
        self.k = k
        self.tau_xi = cfg.resolved_tau_xi()
        self.train = _ConvSplit(dataset, k)
        self.test = _ConvSplit(test_set, k) if test_set is not None else None
        self.ctx = _RunContext(cfg, dataset)
        self._cache = None

    def new_network(self, rng: np.random.Generator) -> ConvNetwork:
        return init_conv_network(self.cfg.m, self.params.d, self.k, self.cfg.tau0, rng)

    def forward_loss(self, state: TrainerState, tau_act: float) -> float:
        net = state.net
        tr = self.train
        ST = tr.Xnk @ net.F.T  # (n*k, channels)
        if tau_act > 0.0:
            xi_act = tau_act * state.rng.standard_normal(net.m)
            ST3 = ST.reshape(tr.n, self.k, net.channels)
            ST3 += xi_act.reshape(self.k, net.channels)[None, :, :]
        f = np.maximum(ST, 0.0).reshape(tr.n, net.m) @ net.u2.ravel()
        loss = float(np.mean(np.logaddexp(0.0, -tr.y * f)))
        self._cache = (ST, f)
        state.last_loss = loss
        return loss

    def apply_update(self, state: TrainerState, gamma: float) -> None:
        net, bar, tilde = state.net, state.net_bar, state.net_tilde
        tr = self.train
        ST, f = self._cache
        self._cache = None
        c = -tr.y * expit(-tr.y * f) / tr.n
        T = (ST >= 0).astype(np.float64).reshape(tr.n, self.k, net.channels)
        T *= net.u2[None, :, :]
        T *= c[:, None, None]
        G_F = T.reshape(tr.n * self.k, net.channels).T @ tr.Xnk
        xi_F = state.rng.standard_normal(net.F.shape)
        decay = 1.0 - gamma * self.cfg.lam
        scale = gamma * self.tau_xi
        net.F *= decay
        net.F -= gamma * G_F
        net.F -= scale * xi_F
        bar.F *= decay
        bar.F -= gamma * G_F
        tilde.F *= decay
        tilde.F -= scale * xi_F
        state.t += 1
        state.sum_gamma += gamma

    def clean_values(self, net: ConvNetwork, split: _ConvSplit):
        ST = np.maximum(split.Xnk @ net.F.T, 0.0)
        pv = np.einsum(
            "nkc,kc->nk", ST.reshape(split.n, self.k, net.channels), net.u2
        )
        f = np.sum(pv, axis=1)
        if self.k == 1:
            g = np.zeros(split.n)
            return f, f.copy(), g
        g = pv[:, -1]
        return f, f - g, g

    def block_norms(self, net: ConvNetwork):
        fn = float(np.linalg.norm(net.F))
        return fn, fn, fn

    def hamming(self, state: TrainerState) -> float:
        bits_a = conv_pattern_bits(state.net.F, self.k, self.ctx.probe_X)
        bits_b = conv_pattern_bits(state.net_tilde.F, self.k, self.ctx.probe_X)
        return float(np.mean(bits_a != bits_b))

    def row_norm_bound(self, state: TrainerState) -> tuple[float, float]:
        rn = float(np.max(np.sum(state.net_bar.F**2, axis=1))) ** 0.5
        sm = math.sqrt(self.cfg.m)
        arm1 = math.inf if self.cfg.lam == 0 else 1.0 / (sm * self.cfg.lam)
        bound = self.k * self.train.max_patch_norm * min(arm1, state.sum_gamma / sm)
        return rn, bound

    def decomposition_drift(self, state: TrainerState) -> float:
        return float(
            np.max(np.abs(state.net.F - state.net_bar.F - state.net_tilde.F))
        )


def _build_engine(cfg: TrainerConfig, dataset: Dataset, test_set: Dataset | None):
    if cfg.model == "conv" and cfg.conv_k >= 2:
        return _ConvEngine(cfg, dataset, test_set)
    return _DenseEngine(cfg, dataset, test_set)


def init_state(
    cfg: TrainerConfig, dataset: Dataset, test_set: Dataset | None = None
) -> TrainerState:
    """Fresh state at t = 0: Ubar = 0 and Utilde = U0, so the decomposition
    identity holds exactly at the start."""
    cfg.validate()
    engine = _build_engine(cfg, dataset, test_set)
    net = engine.new_network(stream(cfg.seed, _ROLE_INIT))
    state = TrainerState(
        t=0,
        net=net,
        net_bar=_zeros_like_net(net),
        net_tilde=net.copy(),
        phase="large_lr" if cfg.algorithm in ("ls", "mitigation") else "annealed",
        t0=None,
        rng=stream(cfg.seed, _ROLE_NOISE),
    )
    state._engine = engine
    return state


def step(
    state: TrainerState,
    cfg: TrainerConfig,
    dataset: Dataset,
    gamma: float,
    tau_act: float = 0.0,
) -> TrainerState:
    """One update at learning rate gamma (plain algorithm-free stepping).

    Aborts with DivergenceError if the loss at the current iterate is not
    finite. The loss seen before the update is left in state.last_loss.
    """
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    engine = state._engine
    if engine is None or engine.dataset is not dataset:
        engine = _build_engine(cfg, dataset, None)
        state._engine = engine
    loss = engine.forward_loss(state, tau_act)
    if not math.isfinite(loss):
        raise DivergenceError(
            f"non-finite loss at t={state.t}", state, [], _metrics(state, gamma, None)
        )
    engine.apply_update(state, gamma)
    return state


def _metrics(
    state: TrainerState,
    lr: float,
    control_loss: float | None,
    final: bool = False,
) -> diagnostics.MetricsRecord:
    engine = state._engine
    tr = engine.train
    net = state.net
    f, r_vals, g_vals = engine.clean_values(net, tr)
    if control_loss is None:
        # a capped run never evaluates its (possibly noisy) objective at the
        # final iterate, so the clean-model loss is recorded instead
        control_loss = float(np.mean(np.logaddexp(0.0, -tr.y * f)))
    sub = diagnostics.subset_losses_from_values(
        r_vals, g_vals, f, tr.y, tr.m1, tr.m1_bar, tr.m2, tr.m2_bar
    )
    rho_val = (
        diagnostics.rho_from_f(f[tr.m2], tr.y[tr.m2], tr.n) if len(tr.m2) else 0.0
    )
    u_fro, w_fro, v_fro = engine.block_norms(state.net_bar)
    test = {
        "test_err": None, "test_loss": None, "test_err_p_only": None,
        "test_err_q_only": None, "test_err_both": None,
    }
    if engine.test is not None:
        tf, _, _ = engine.clean_values(net, engine.test)
        test = diagnostics.evaluate_from_values(
            tf, engine.test.y, engine.test.kind_codes
        )
    span_residual = None
    alpha_norm = None
    if final and len(engine.dataset.m2_bar):
        span_residual, _, alpha_norm = diagnostics.antisym_span_residual(
            net, engine.dataset, engine.ctx.span_probe
        )
    frob = net.frob_sq()
    return diagnostics.MetricsRecord(
        t=state.t,
        lr=lr,
        train_loss=control_loss,
        reg_loss=control_loss + 0.5 * engine.cfg.lam * frob,
        loss_m1_r=sub["loss_m1_r"],
        loss_m1bar_g=sub["loss_m1bar_g"],
        loss_m2bar=sub["loss_m2bar"],
        rho=rho_val,
        almost_lin=diagnostics.almost_linearity(net, engine.params),
        u_bar_fro=u_fro,
        w_bar_fro=w_fro,
        v_bar_fro=v_fro,
        hamming_frac=engine.hamming(state),
        span_residual=span_residual,
        alpha_norm=alpha_norm,
        **test,
    )


def _check_invariants(state: TrainerState) -> None:
    engine = state._engine
    drift = engine.decomposition_drift(state)
    if drift > 1e-9:
        raise InvariantViolation(
            f"decomposition drift {drift:.3e} > 1e-9 at t={state.t}"
        )
    rn, bound = engine.row_norm_bound(state)
    if rn > bound * (1 + 1e-9) + 1e-12:
        raise InvariantViolation(
            f"signal row norm {rn:.6e} exceeds bound {bound:.6e} at t={state.t}"
        )


def _run_loop(
    cfg: TrainerConfig,
    dataset: Dataset,
    test_set: Dataset | None,
    state: TrainerState | None = None,
) -> tuple[TrainerState, list[diagnostics.MetricsRecord]]:
    cfg.validate()
    if state is None:
        state = init_state(cfg, dataset, test_set)
    elif state._engine is None:
        state._engine = _build_engine(cfg, dataset, test_set)
    engine = state._engine
    algo = cfg.algorithm
    q_emp = dataset.q_emp

    anneal_loss = cfg.epsilon1 + q_emp * LOG2
    eps2 = cfg.epsilon2
    if algo == "ls" and eps2 is None:
        if q_emp == 0:
            raise ValueError(
                "q_emp = 0: the derived stop loss sqrt(epsilon1/q_emp) is "
                "undefined, set epsilon2 explicitly"
            )
        eps2 = math.sqrt(cfg.epsilon1 / q_emp)

    tau_init = cfg.mitigation.tau_act_init
    tau_init = cfg.tau0 if tau_init is None else float(tau_init)
    tau_final = float(cfg.mitigation.tau_act_final)
    rule = cfg.mitigation.anneal_at or {"loss": anneal_loss}
    if "iteration" not in rule and "loss" not in rule:
        raise ValueError(f"mitigation anneal rule must give iteration or loss: {rule}")

    trace: list[diagnostics.MetricsRecord] = []
    while True:
        if state.t >= cfg.max_iters:
            # capped: break before the forward pass so no noise is drawn at
            # the final iterate (keeps resume-from-checkpoint bitwise exact)
            state.converged = False
            gamma = (
                cfg.eta1 if (algo == "ls" and state.phase == "large_lr") else cfg.eta2
            )
            trace.append(_metrics(state, gamma, None, final=True))
            break

        if algo == "mitigation":
            tau_act = tau_init if state.phase == "large_lr" else tau_final
        else:
            tau_act = 0.0
        loss = engine.forward_loss(state, tau_act)
        if not math.isfinite(loss):
            record = _metrics(state, math.nan, None, final=True)
            raise DivergenceError(
                f"non-finite loss at t={state.t}", state, trace, record
            )

        stopped = False
        if algo == "ls":
            if state.phase == "large_lr" and state.t >= 1 and loss <= anneal_loss:
                state.t0 = state.t
                state.phase = "annealed"
            if state.phase == "annealed" and loss <= eps2:
                stopped = True
        elif algo == "s":
            if loss <= cfg.epsilon2_prime:
                stopped = True
        else:
            if state.phase == "large_lr":
                fired = (
                    state.t >= rule["iteration"]
                    if "iteration" in rule
                    else state.t >= 1 and loss <= rule["loss"]
                )
                if fired:
                    state.t0 = state.t
                    state.phase = "annealed"
            if state.phase == "annealed" and loss <= cfg.epsilon2_prime:
                stopped = True

        gamma = cfg.eta1 if (algo == "ls" and state.phase == "large_lr") else cfg.eta2
        if stopped:
            state.converged = True
            state.phase = "done"
            trace.append(_metrics(state, gamma, loss, final=True))
            break
        if state.t % cfg.eval_every == 0:
            trace.append(_metrics(state, gamma, loss))
            _check_invariants(state)
        engine.apply_update(state, gamma)
    return state, trace


def run_ls(cfg: TrainerConfig, dataset: Dataset, test_set: Dataset | None = None):
    """Large rate eta1 until the loss reaches epsilon1 + q_emp*log 2 (the
    annealing iteration t0, checked from t = 1 on), then eta2 until the loss
    reaches epsilon2 (default sqrt(epsilon1/q_emp)). The gradient-noise std
    is unchanged across the anneal."""
    if cfg.algorithm != "ls":
        raise ValueError(f"run_ls needs algorithm 'ls', got {cfg.algorithm!r}")
    return _run_loop(cfg, dataset, test_set)


def run_s(cfg: TrainerConfig, dataset: Dataset, test_set: Dataset | None = None):
    """Constant rate eta2 until the loss reaches epsilon2_prime."""
    if cfg.algorithm != "s":
        raise ValueError(f"run_s needs algorithm 's', got {cfg.algorithm!r}")
    return _run_loop(cfg, dataset, test_set)


def run_mitigation(
    cfg: TrainerConfig, dataset: Dataset, test_set: Dataset | None = None
):
    """Constant rate eta2 with fresh pre-activation noise each iteration.

    The noise std starts at tau_act_init (default tau0) and drops to
    tau_act_final once the anneal rule fires (recorded as t0); stopping at
    epsilon2_prime is only armed after that. One noise vector per iteration
    is shared across the whole batch, and the gradient is the exact
    derivative of the noisy forward. With tau_act_init = 0 the run consumes
    the identical random stream as the constant-small-rate algorithm.
    """
    if cfg.algorithm != "mitigation":
        raise ValueError(
            f"run_mitigation needs algorithm 'mitigation', got {cfg.algorithm!r}"
        )
    return _run_loop(cfg, dataset, test_set)


def run(cfg: TrainerConfig, dataset: Dataset, test_set: Dataset | None = None):
    """Dispatch on cfg.algorithm."""
    return _run_loop(cfg, dataset, test_set)


def resume(
    cfg: TrainerConfig,
    dataset: Dataset,
    state: TrainerState,
    test_set: Dataset | None = None,
):
    """Continue a checkpointed run; bitwise equivalent to never stopping."""
    state._engine = _build_engine(cfg, dataset, test_set)
    return _run_loop(cfg, dataset, test_set, state=state)


def save_checkpoint(state: TrainerState) -> str:
    """Serialize iterate, decomposition, phase and generator state as JSON."""
    net = state.net
    rng_state = json.dumps(state.rng.bit_generator.state).encode().hex()
    common = {
        "t": state.t,
        "phase": state.phase,
        "t0": state.t0,
        "sum_gamma": state.sum_gamma,
        "converged": state.converged,
        "rng_state": rng_state,
    }
    if isinstance(net, ConvNetwork):
        doc = {
            "model_kind": "conv",
            "m": net.m, "d": net.d, "k": net.k,
            "u": net.u.tolist(),
            "F": net.F.tolist(),
            "U_bar": state.net_bar.F.tolist(),
            "U_tilde": state.net_tilde.F.tolist(),
            **common,
        }
    else:
        doc = {
            "model_kind": "block_dense",
            "m": net.m, "d": net.d, "n_w": net.n_w,
            "u": net.u.tolist(),
            "U": net.U.tolist(),
            "U_bar": state.net_bar.U.tolist(),
            "U_tilde": state.net_tilde.U.tolist(),
            **common,
        }
    return json.dumps(doc)


def _dense_from_full(m, d, n_w, u, full) -> Network:
    full = np.asarray(full, dtype=np.float64)
    return Network(m=m, d=d, u=u, W=full[:n_w, :d].copy(), V=full[n_w:, d:].copy())


def load_checkpoint(
    text: str,
    cfg: TrainerConfig,
    dataset: Dataset,
    test_set: Dataset | None = None,
) -> TrainerState:
    doc = json.loads(text)
    u = np.asarray(doc["u"], dtype=np.float64)
    if doc["model_kind"] == "conv":
        m, d, k = doc["m"], doc["d"], doc["k"]
        net = ConvNetwork(m, d, k, u, np.asarray(doc["F"], dtype=np.float64))
        bar = ConvNetwork(m, d, k, u.copy(), np.asarray(doc["U_bar"], dtype=np.float64))
        tilde = ConvNetwork(
            m, d, k, u.copy(), np.asarray(doc["U_tilde"], dtype=np.float64)
        )
    else:
        m, d, n_w = doc["m"], doc["d"], doc["n_w"]
        net = _dense_from_full(m, d, n_w, u, doc["U"])
        bar = _dense_from_full(m, d, n_w, u.copy(), doc["U_bar"])
        tilde = _dense_from_full(m, d, n_w, u.copy(), doc["U_tilde"])
    bit_gen_state = json.loads(bytes.fromhex(doc["rng_state"]).decode())
    bit_gen = np.random.PCG64()
    bit_gen.state = bit_gen_state
    state = TrainerState(
        t=int(doc["t"]),
        net=net,
        net_bar=bar,
        net_tilde=tilde,
        phase=doc["phase"],
        t0=doc["t0"],
        rng=np.random.Generator(bit_gen),
        sum_gamma=float(doc["sum_gamma"]),
        converged=bool(doc["converged"]),
    )
    state._engine = _build_engine(cfg, dataset, test_set)
    return state
