"""Model state shared by the variational EM and Gibbs engines.

Shapes follow ``Y = Lambda X + eps`` with ``Y`` of shape (p, n), loadings
``Lambda`` of shape (p, K) and factors ``X`` of shape (K, n).  Indicator
convention: ``z_k = 1`` / ``o_k = 1`` marks a *sparse* loading / factor.
"""

from __future__ import annotations

import copy
import enum
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

FLOOR = 1e-10


class StateError(ValueError):
    """Raised when a state or input violates a model invariant."""


@dataclass(frozen=True)
class Hyperparameters:
    """Shrinkage and mixture constants.

    The defaults are the horseshoe configuration: every TPB shape 0.5,
    global rates 1, and uniform Beta(1, 1) priors on the mixture weights.
    """

    a: float = 0.5
    b: float = 0.5
    c: float = 0.5
    d: float = 0.5
    e: float = 0.5
    f: float = 0.5
    nu: float = 1.0
    aX: float = 0.5
    bX: float = 0.5
    cX: float = 0.5
    dX: float = 0.5
    eX: float = 0.5
    fX: float = 0.5
    xi: float = 1.0
    alpha: float = 1.0
    beta: float = 1.0
    alphaX: float = 1.0
    betaX: float = 1.0

    def __post_init__(self):
        for f_ in fields(self):
            v = getattr(self, f_.name)
            if not (np.isfinite(v) and v > 0):
                raise StateError(f"hyperparameter {f_.name} must be positive, got {v}")

    def to_dict(self) -> dict:
        return {f_.name: float(getattr(self, f_.name)) for f_ in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparameters":
        return cls(**{k: float(v) for k, v in d.items()})

    def loading_side(self) -> "SideHypers":
        return SideHypers(self.a, self.b, self.c, self.d, self.e, self.f, self.nu, self.alpha, self.beta)

    def factor_side(self) -> "SideHypers":
        return SideHypers(self.aX, self.bX, self.cX, self.dX, self.eX, self.fX, self.xi, self.alphaX, self.betaX)


@dataclass(frozen=True)
class SideHypers:
    """The nine constants governing one side (loadings or factors)."""

    a: float
    b: float
    c: float
    d: float
    e: float
    f: float
    rate: float
    alpha: float
    beta: float


@dataclass
class DataMatrix:
    values: np.ndarray
    gene_ids: list[str] = None
    sample_ids: list[str] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise StateError("data matrix must be two-dimensional")
        p, n = self.values.shape
        if p < 2 or n < 2:
            raise StateError(f"data matrix must be at least 2x2, got {p}x{n}")
        if not np.all(np.isfinite(self.values)):
            bad = np.argwhere(~np.isfinite(self.values))[0]
            raise StateError(f"non-finite entry at row {bad[0]}, column {bad[1]}")
        if self.gene_ids is None:
            self.gene_ids = [f"g{i}" for i in range(p)]
        if self.sample_ids is None:
            self.sample_ids = [f"s{j}" for j in range(n)]
        self.gene_ids = [str(g) for g in self.gene_ids]
        self.sample_ids = [str(s) for s in self.sample_ids]
        if len(self.gene_ids) != p or len(self.sample_ids) != n:
            raise StateError("identifier counts do not match matrix shape")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass
class LoadingSide:
    lam: np.ndarray  # (p, K)
    theta: np.ndarray  # (p, K)
    delta: np.ndarray  # (p, K)
    phi: np.ndarray  # (K,)
    tau: np.ndarray  # (K,)
    eta: float
    gamma: float
    z: np.ndarray  # (K,)
    ln_pi: float
    ln_one_minus_pi: float


@dataclass
class FactorSide:
    x_mean: np.ndarray  # (K, n)
    x_cov: np.ndarray  # (n, K, K)
    sigma: np.ndarray  # (K, n)
    rho: np.ndarray  # (K, n)
    omega: np.ndarray  # (K,)
    kappa: np.ndarray  # (K,)
    chi: float
    varphi_g: float
    o: np.ndarray  # (K,)
    ln_pi_x: float
    ln_one_minus_pi_x: float


@dataclass
class NoiseModel:
    psi: np.ndarray  # (p,)


@dataclass
class ModelState:
    loading: LoadingSide
    factor: FactorSide
    noise: NoiseModel
    component_ids: np.ndarray = field(default=None)  # original index of each surviving component

    def __post_init__(self):
        if self.component_ids is None:
            self.component_ids = np.arange(self.K)
        self.component_ids = np.asarray(self.component_ids, dtype=np.int64)

    @property
    def K(self) -> int:
        return self.loading.lam.shape[1]

    @property
    def p(self) -> int:
        return self.loading.lam.shape[0]

    @property
    def n(self) -> int:
        return self.factor.x_mean.shape[1]

    def copy(self) -> "ModelState":
        return copy.deepcopy(self)

    def xx_second_moment(self) -> np.ndarray:
        """<X X^T> = <X><X>^T + sum_j cov_j."""
        xm = self.factor.x_mean
        return xm @ xm.T + self.factor.x_cov.sum(axis=0)

    def factor_covariance(self) -> np.ndarray:
        """<X X^T> - <X><X>^T, i.e. the summed per-column posterior covariances."""
        return self.factor.x_cov.sum(axis=0)


# Fields indexed by component, with the axis that carries K.
_K_AXES = {
    ("loading", "lam"): 1,
    ("loading", "theta"): 1,
    ("loading", "delta"): 1,
    ("loading", "phi"): 0,
    ("loading", "tau"): 0,
    ("loading", "z"): 0,
    ("factor", "x_mean"): 0,
    ("factor", "sigma"): 0,
    ("factor", "rho"): 0,
    ("factor", "omega"): 0,
    ("factor", "kappa"): 0,
    ("factor", "o"): 0,
}

_POSITIVE = [
    ("loading", "theta"),
    ("loading", "delta"),
    ("loading", "phi"),
    ("loading", "tau"),
    ("loading", "eta"),
    ("loading", "gamma"),
    ("factor", "sigma"),
    ("factor", "rho"),
    ("factor", "omega"),
    ("factor", "kappa"),
    ("factor", "chi"),
    ("factor", "varphi_g"),
    ("noise", "psi"),
]


def select_components(state: ModelState, keep: Sequence[int] | np.ndarray) -> ModelState:
    """Return a copy of ``state`` restricted to components ``keep`` (in order)."""
    keep = np.asarray(keep, dtype=np.int64)
    out = state.copy()
    for (side, name), axis in _K_AXES.items():
        obj = getattr(out, side)
        setattr(obj, name, np.take(getattr(obj, name), keep, axis=axis))
    out.factor.x_cov = out.factor.x_cov[:, keep][:, :, keep]
    out.component_ids = out.component_ids[keep]
    return out


def validate_state(state: ModelState, floor: float = FLOOR) -> None:
    """Check shapes, finiteness and scale floors; raise StateError on failure."""
    p, K, n = state.p, state.K, state.n
    ld, fc = state.loading, state.factor
    expected = {
        "lam": (ld.lam, (p, K)),
        "theta": (ld.theta, (p, K)),
        "delta": (ld.delta, (p, K)),
        "phi": (ld.phi, (K,)),
        "tau": (ld.tau, (K,)),
        "z": (ld.z, (K,)),
        "x_mean": (fc.x_mean, (K, n)),
        "x_cov": (fc.x_cov, (n, K, K)),
        "sigma": (fc.sigma, (K, n)),
        "rho": (fc.rho, (K, n)),
        "omega": (fc.omega, (K,)),
        "kappa": (fc.kappa, (K,)),
        "o": (fc.o, (K,)),
        "psi": (state.noise.psi, (p,)),
    }
    for name, (arr, shape) in expected.items():
        arr = np.asarray(arr)
        if arr.shape != shape:
            raise StateError(f"{name} has shape {arr.shape}, expected {shape}")
        if not np.all(np.isfinite(arr)):
            raise StateError(f"{name} contains non-finite values")
    for side, name in _POSITIVE:
        v = np.asarray(getattr(getattr(state, side), name))
        if np.any(v < floor):
            raise StateError(f"{name} below floor {floor}: min {v.min()}")
    for name, v in (("z", ld.z), ("o", fc.o)):
        if np.any((v < 0) | (v > 1)):
            raise StateError(f"{name} outside [0, 1]")
    if K and not np.allclose(fc.x_cov, np.swapaxes(fc.x_cov, 1, 2), rtol=1e-8, atol=1e-12):
        raise StateError("x_cov is not symmetric")
    if len(state.component_ids) != K:
        raise StateError("component_ids length does not match K")


class SparsityClass(str, enum.Enum):
    SS = "SS"
    SD = "SD"
    DS = "DS"
    DD = "DD"


@dataclass(frozen=True)
class ComponentClass:
    label: SparsityClass
    z: float
    o: float
    ambiguous_z: bool = False
    ambiguous_o: bool = False

    @property
    def loading_sparse(self) -> bool:
        return self.label in (SparsityClass.SS, SparsityClass.SD)

    @property
    def factor_sparse(self) -> bool:
        return self.label in (SparsityClass.SS, SparsityClass.DS)

    @property
    def ambiguous(self) -> bool:
        return self.ambiguous_z or self.ambiguous_o


def _side_is_sparse(v: float, threshold: float) -> tuple[bool, bool]:
    if v >= threshold:
        return True, False
    if v <= 1.0 - threshold:
        return False, False
    # between the two thresholds: nearest of {dense=0, sparse=1}; ties go to dense
    return v > 0.5, True


def classify_component(z: float, o: float, threshold: float = 0.9) -> ComponentClass:
    """Classify a component as SS/SD/DS/DD from its sparse-indicator expectations."""
    if not 0.5 < threshold <= 1.0:
        raise ValueError(f"threshold must lie in (0.5, 1], got {threshold}")
    zs, za = _side_is_sparse(float(z), threshold)
    os_, oa = _side_is_sparse(float(o), threshold)
    label = SparsityClass((("S" if zs else "D") + ("S" if os_ else "D")))
    return ComponentClass(label, float(z), float(o), za, oa)


def support(vector, eps: float = 0.0) -> set[int]:
    """Indices whose absolute value exceeds ``eps``."""
    if eps < 0:
        raise ValueError("eps must be non-negative")
    v = np.abs(np.asarray(vector, dtype=float))
    return set(np.flatnonzero(v > eps).tolist())


@dataclass(frozen=True)
class Bicluster:
    genes: frozenset
    samples: frozenset
    component_index: int = -1
    run_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "genes", frozenset(int(g) for g in self.genes))
        object.__setattr__(self, "samples", frozenset(int(s) for s in self.samples))

    @property
    def is_empty(self) -> bool:
        return not self.genes or not self.samples


def extract_biclusters(
    state: ModelState,
    threshold: float = 0.9,
    eps: float = 1e-6,
    run_id: str = "",
    classes: Sequence[SparsityClass] = (SparsityClass.SS,),
) -> list[Bicluster]:
    """Biclusters from components of the requested classes with non-empty supports."""
    out = []
    for k in range(state.K):
        cls = classify_component(state.loading.z[k], state.factor.o[k], threshold)
        if cls.label not in classes:
            continue
        genes = support(state.loading.lam[:, k], eps)
        samples = support(state.factor.x_mean[k], eps)
        if genes and samples:
            out.append(Bicluster(frozenset(genes), frozenset(samples), int(state.component_ids[k]), run_id))
    return out
