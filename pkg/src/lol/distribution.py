"""Synthetic two-pattern binary classification data.

Each input is a pair of d-dimensional blocks (x1, x2). Block 1 carries a
noisy, linearly separable pattern: two half-Gaussians split by a margin
gamma0 along a unit direction w_star, so sign(<w_star, x1>) classifies with
margin gamma0 whenever the block is present. Block 2 carries a low-noise,
memorizable pattern supported on three rays alpha*(z - zeta), alpha*z,
alpha*(z + zeta): the center ray is labeled +1, the offset rays -1, and
zeta is a small orthogonal offset so no linear classifier can split them.

An example carries block 1 only, block 2 only, or both, with mixture
probabilities (p0, q0, 1 - p0 - q0). Datasets keep full provenance of which
components each example carries, plus the index sets over examples with /
without each block.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

__all__ = [
    "Kind",
    "QDirection",
    "DistributionParams",
    "Example",
    "Dataset",
    "make_params",
    "sample_p",
    "sample_q",
    "generate_dataset",
    "dataset_to_json",
    "dataset_from_json",
]


class Kind(str, Enum):
    """Which mixture branch generated an example."""

    P_ONLY = "p_only"
    Q_ONLY = "q_only"
    BOTH = "both"


class QDirection(str, Enum):
    """Which of the three rays underlies x2 (NONE when x2 = 0)."""

    MINUS = "minus"
    CENTER = "center"
    PLUS = "plus"
    NONE = "none"


_DIR_INDEX = {QDirection.MINUS: 0, QDirection.CENTER: 1, QDirection.PLUS: 2}


@dataclass(frozen=True)
class DistributionParams:
    """All generative constants of the two-pattern distribution.

    d:         per-block ambient dimension (inputs live in R^{2d})
    kappa:     sets the implied sample count N = round(d / kappa^2)
    p0, q0:    probabilities of block-1-only and block-2-only examples
    gamma0:    margin of the linear pattern
    r:         norm of the ray offset zeta
    w_star:    unit separator direction of the linear pattern
    z:         unit center direction of the ray pattern (block-2 coordinates)
    zeta:      offset vector, orthogonal to z, with ||zeta|| = r
    q_support: z and zeta are supported on the last q_support coordinates of
               the block (q_support = d means the whole block; smaller values
               are used by the convolutional model variant)
    """

    d: int
    kappa: float
    p0: float
    q0: float
    gamma0: float
    r: float
    w_star: np.ndarray
    z: np.ndarray
    zeta: np.ndarray
    q_support: int

    @property
    def n_implied(self) -> int:
        """Sample count implied by the d / kappa^2 coupling."""
        return int(round(self.d / self.kappa**2))

    @property
    def directions(self) -> np.ndarray:
        """The three rays as a (3, d) matrix: rows z - zeta, z, z + zeta."""
        return np.stack([self.z - self.zeta, self.z, self.z + self.zeta])

    def validate(self) -> None:
        tol = 1e-12
        if self.d < 2:
            raise ValueError(f"d must be >= 2, got {self.d}")
        if not 0.0 < self.kappa <= 1.0:
            raise ValueError(f"kappa must be in (0, 1], got {self.kappa}")
        if not (0.0 < self.p0 < 1.0 and 0.0 < self.q0 < 1.0):
            raise ValueError(f"p0, q0 must be in (0, 1), got {self.p0}, {self.q0}")
        if self.p0 + self.q0 >= 1.0:
            raise ValueError(f"need p0 + q0 < 1, got {self.p0 + self.q0}")
        if self.gamma0 <= 0.0:
            raise ValueError(f"gamma0 must be positive, got {self.gamma0}")
        if not 0.0 < self.r < 1.0:
            raise ValueError(f"r must be in (0, 1), got {self.r}")
        if not 2 <= self.q_support <= self.d:
            raise ValueError(f"q_support must be in [2, d], got {self.q_support}")
        if abs(np.linalg.norm(self.w_star) - 1.0) > tol:
            raise ValueError("w_star is not a unit vector")
        if abs(np.linalg.norm(self.z) - 1.0) > tol:
            raise ValueError("z is not a unit vector")
        if abs(np.linalg.norm(self.zeta) - self.r) > tol * self.r:
            raise ValueError("zeta does not have norm r")
        if abs(float(self.z @ self.zeta)) > tol * self.r:
            raise ValueError("zeta is not orthogonal to z")
        sup = self.d - self.q_support
        if sup and (np.any(self.z[:sup] != 0.0) or np.any(self.zeta[:sup] != 0.0)):
            raise ValueError("z / zeta leak outside the trailing q_support coords")

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "kappa": self.kappa,
            "p0": self.p0,
            "q0": self.q0,
            "gamma0": self.gamma0,
            "r": self.r,
            "q_support": self.q_support,
            "w_star": self.w_star.tolist(),
            "z": self.z.tolist(),
            "zeta": self.zeta.tolist(),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "DistributionParams":
        params = cls(
            d=int(obj["d"]),
            kappa=float(obj["kappa"]),
            p0=float(obj["p0"]),
            q0=float(obj["q0"]),
            gamma0=float(obj["gamma0"]),
            r=float(obj["r"]),
            w_star=np.asarray(obj["w_star"], dtype=np.float64),
            z=np.asarray(obj["z"], dtype=np.float64),
            zeta=np.asarray(obj["zeta"], dtype=np.float64),
            q_support=int(obj["q_support"]),
        )
        params.validate()
        return params


@dataclass
class Example:
    """One labeled sample with component provenance."""

    x1: np.ndarray
    x2: np.ndarray
    y: int
    kind: Kind
    q_direction: QDirection
    alpha: float


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def make_params(
    d: int,
    kappa: float,
    q0: float,
    overrides: dict | None = None,
    seed: int = 0,
) -> DistributionParams:
    """Build distribution constants with seeded random directions.

    Defaults follow the asymptotic choices p0 = kappa^2 / 2, r = d^(-3/4),
    gamma0 = 1 / sqrt(d). `overrides` may replace p0, q0, r, gamma0 or
    q_support; desk-scale runs typically raise r so the ray pattern is
    learnable within minutes.

    Directions are drawn from `seed` in the order w_star, z, zeta. w_star is
    a uniformly random unit vector; z is a random unit vector supported on the
    last q_support coordinates; zeta is a random vector in the same support,
    Gram-Schmidt orthogonalized against z and scaled to norm r. Randomness
    avoids accidental axis alignment with ReLU kinks while staying exactly
    reproducible.
    """
    if d < 2:
        raise ValueError(f"d must be >= 2, got {d}")
    overrides = dict(overrides or {})
    unknown = set(overrides) - {"p0", "q0", "r", "gamma0", "q_support"}
    if unknown:
        raise ValueError(f"unknown override keys: {sorted(unknown)}")

    p0 = float(overrides.get("p0", kappa**2 / 2))
    q0 = float(overrides.get("q0", q0))
    r = float(overrides.get("r", d ** (-3 / 4)))
    gamma0 = float(overrides.get("gamma0", 1 / math.sqrt(d)))
    q_support = int(overrides.get("q_support", d))

    if p0 + q0 >= 1.0:
        raise ValueError(f"need p0 + q0 < 1, got {p0 + q0}")
    if r >= 1.0:
        raise ValueError(f"offset norm r must stay below the center norm 1, got {r}")

    rng = np.random.default_rng(seed)
    w_star = _unit(rng.standard_normal(d))
    z = np.zeros(d)
    z[d - q_support :] = rng.standard_normal(q_support)
    z = _unit(z)
    raw = np.zeros(d)
    raw[d - q_support :] = rng.standard_normal(q_support)
    raw -= (z @ raw) * z
    zeta = r * _unit(raw)

    params = DistributionParams(
        d=d, kappa=kappa, p0=p0, q0=q0, gamma0=gamma0, r=r,
        w_star=w_star, z=z, zeta=zeta, q_support=q_support,
    )
    params.validate()
    return params


def sample_p(
    params: DistributionParams, y: int, rng: np.random.Generator
) -> np.ndarray:
    """Draw x1 from the half-Gaussian margin pattern conditioned on label y.

    Conditioning is exact, by reflection: the component of the Gaussian along
    w_star is negated when it falls on the wrong side, so y * <w_star, x1> >=
    gamma0 always holds.
    """
    noise = rng.standard_normal(params.d) / math.sqrt(params.d)
    s = float(params.w_star @ noise)
    if y * s < 0:
        noise = noise - 2.0 * s * params.w_star
    return y * params.gamma0 * params.w_star + noise


def sample_q(
    params: DistributionParams, y: int, rng: np.random.Generator
) -> tuple[np.ndarray, QDirection, float]:
    """Draw x2 from the three-ray pattern conditioned on label y.

    y = +1 gives alpha * z; y = -1 gives alpha * (z + b * zeta) with b
    uniform in {-1, +1}. alpha is uniform on (0, 1]: exact zeros (a
    probability-zero event that floating point can produce) are resampled so
    x2 = 0 only ever arises from the block-1-only mixture branch.
    """
    alpha = rng.random()
    while alpha == 0.0:
        alpha = rng.random()
    if y == 1:
        return alpha * params.z, QDirection.CENTER, alpha
    b = 1 if rng.random() < 0.5 else -1
    direction = QDirection.PLUS if b == 1 else QDirection.MINUS
    return alpha * (params.z + b * params.zeta), direction, alpha


class Dataset:
    """An ordered, immutable collection of examples with index bookkeeping.

    m1 holds indices with a nonzero block 1, m2 those with a nonzero block 2;
    m1_bar / m2_bar are their complements. p_emp = |m2_bar| / n and
    q_emp = |m1_bar| / n are the empirical single-block fractions. Stacked
    arrays (X1, X2, y, ...) are kept alongside the per-example records for
    vectorized consumers.
    """

    def __init__(self, params: DistributionParams, examples: list[Example]):
        self.params = params
        self.examples = examples
        n = len(examples)
        if n == 0:
            raise ValueError("dataset needs at least one example")
        self.n = n
        d = params.d
        self.X1 = np.zeros((n, d))
        self.X2 = np.zeros((n, d))
        self.y = np.empty(n, dtype=np.int64)
        self.alphas = np.zeros(n)
        # ray index per example: -1 when x2 = 0, else 0 / 1 / 2
        self.dir_idx = np.full(n, -1, dtype=np.int64)
        for i, ex in enumerate(examples):
            self.X1[i] = ex.x1
            self.X2[i] = ex.x2
            self.y[i] = ex.y
            self.alphas[i] = ex.alpha
            if ex.q_direction is not QDirection.NONE:
                self.dir_idx[i] = _DIR_INDEX[ex.q_direction]
        has1 = np.any(self.X1 != 0.0, axis=1)
        has2 = np.any(self.X2 != 0.0, axis=1)
        idx = np.arange(n)
        self.m1 = idx[has1]
        self.m1_bar = idx[~has1]
        self.m2 = idx[has2]
        self.m2_bar = idx[~has2]
        self.p_emp = len(self.m2_bar) / n
        self.q_emp = len(self.m1_bar) / n
        self._X = None

    @property
    def X(self) -> np.ndarray:
        """Concatenated (n, 2d) view, built on demand."""
        if self._X is None:
            self._X = np.hstack([self.X1, self.X2])
        return self._X

    def kinds(self) -> list[Kind]:
        return [ex.kind for ex in self.examples]


def generate_dataset(
    params: DistributionParams, n: int, rng: np.random.Generator
) -> Dataset:
    """Draw n i.i.d. examples from the mixture.

    Per example the draw order is fixed: label, branch selector, then the
    component samples (block 1 before block 2 when both are present), so a
    given (params, n, generator state) always produces the identical dataset.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    d = params.d
    zero = np.zeros(d)
    examples = []
    for _ in range(n):
        y = 1 if rng.random() < 0.5 else -1
        u = rng.random()
        if u < params.p0:
            x1 = sample_p(params, y, rng)
            examples.append(Example(x1, zero, y, Kind.P_ONLY, QDirection.NONE, 0.0))
        elif u < params.p0 + params.q0:
            x2, qdir, alpha = sample_q(params, y, rng)
            examples.append(Example(zero, x2, y, Kind.Q_ONLY, qdir, alpha))
        else:
            x1 = sample_p(params, y, rng)
            x2, qdir, alpha = sample_q(params, y, rng)
            examples.append(Example(x1, x2, y, Kind.BOTH, qdir, alpha))
    return Dataset(params, examples)


def dataset_to_json(dataset: Dataset) -> str:
    """Serialize a dataset as a JSON document with bit-exact floats."""
    doc = {
        "params": dataset.params.to_dict(),
        "examples": [
            {
                "x1": ex.x1.tolist(),
                "x2": ex.x2.tolist(),
                "y": ex.y,
                "kind": ex.kind.value,
                "q_direction": ex.q_direction.value,
                "alpha": ex.alpha,
            }
            for ex in dataset.examples
        ],
    }
    return json.dumps(doc)


def dataset_from_json(text: str) -> Dataset:
    doc = json.loads(text)
    params = DistributionParams.from_dict(doc["params"])
    examples = [
        Example(
            x1=np.asarray(obj["x1"], dtype=np.float64),
            x2=np.asarray(obj["x2"], dtype=np.float64),
            y=int(obj["y"]),
            kind=Kind(obj["kind"]),
            q_direction=QDirection(obj["q_direction"]),
            alpha=float(obj["alpha"]),
        )
        for obj in doc["examples"]
    ]
    return Dataset(params, examples)
