"""Synthetic data with planted sparse and dense components."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .model import Bicluster, DataMatrix


class SimulationError(RuntimeError):
    pass


@dataclass
class SimConfig:
    p: int = 500
    n: int = 300
    k_sparse: int = 10
    k_dense: int = 0
    m_range: tuple[int, int] = (5, 20)
    value_sd: float = float(np.sqrt(2.0))
    max_shared: int = 5
    noise_var: float = 1.0
    shuffle_pairing: bool = True
    seed: int = 0

    def __post_init__(self):
        self.m_range = (int(self.m_range[0]), int(self.m_range[1]))
        lo, hi = self.m_range
        if self.p < 1 or self.n < 1:
            raise ValueError("p and n must be positive")
        if self.k_sparse < 0 or self.k_dense < 0:
            raise ValueError("component counts must be non-negative")
        if not 1 <= lo <= hi <= min(self.p, self.n):
            raise ValueError(f"m_range {self.m_range} must lie within [1, min(p, n)]")
        if not 0 <= self.max_shared <= lo:
            raise ValueError("max_shared must lie in [0, m_range[0]]")
        if self.value_sd <= 0 or self.noise_var <= 0:
            raise ValueError("value_sd and noise_var must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["m_range"] = list(self.m_range)
        return d


# named configurations at the original scale and at desk scale
PRESETS = {
    "sim1-ln": dict(k_sparse=10, k_dense=0, noise_var=1.0),
    "sim1-hn": dict(k_sparse=10, k_dense=0, noise_var=2.0),
    "sim2-ln": dict(k_sparse=10, k_dense=5, noise_var=1.0),
    "sim2-hn": dict(k_sparse=10, k_dense=5, noise_var=2.0),
    "desk1-ln": dict(p=200, n=100, k_sparse=5, k_dense=0, m_range=(5, 15), noise_var=1.0),
    "desk1-hn": dict(p=200, n=100, k_sparse=5, k_dense=0, m_range=(5, 15), noise_var=2.0),
    "desk2-ln": dict(p=200, n=100, k_sparse=5, k_dense=2, m_range=(5, 15), noise_var=1.0),
}


def preset(name: str, **overrides) -> SimConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return SimConfig(**{**PRESETS[name], **overrides})


@dataclass
class GroundTruth:
    lambda_true: np.ndarray  # (p, K)
    x_true: np.ndarray  # (K, n)
    loading_sparse: np.ndarray  # (K,) bool
    factor_sparse: np.ndarray  # (K,) bool
    biclusters: list = field(default_factory=list)

    @property
    def K(self) -> int:
        return self.lambda_true.shape[1]


def gen_sparse_vector(length, m_range, existing_supports, max_shared, rng, value_sd=np.sqrt(2.0), max_retries=1000):
    """A length-``length`` vector with m ~ U{m_range} Gaussian nonzeros.

    The support is drawn uniformly among size-m subsets overlapping each of
    ``existing_supports`` in at most ``max_shared`` indices (by rejection).
    """
    lo, hi = int(m_range[0]), int(m_range[1])
    if not 1 <= lo <= hi <= length:
        raise ValueError("m_range must lie within [1, length]")
    m = int(rng.integers(lo, hi + 1))
    existing = [np.asarray(sorted(s), dtype=np.int64) for s in existing_supports]
    for _ in range(max_retries):
        idx = np.sort(rng.choice(length, size=m, replace=False))
        if all(np.intersect1d(idx, s, assume_unique=True).size <= max_shared for s in existing):
            break
    else:
        raise SimulationError(f"no support of size {m} satisfies the overlap cap after {max_retries} tries")
    v = np.zeros(length)
    v[idx] = rng.normal(0.0, value_sd, size=m)
    return v


def _side(length, cfg: SimConfig, rng):
    vecs, supports = [], []
    for _ in range(cfg.k_sparse):
        v = gen_sparse_vector(length, cfg.m_range, supports, cfg.max_shared, rng, cfg.value_sd)
        supports.append(np.flatnonzero(v))
        vecs.append(v)
    for _ in range(cfg.k_dense):
        vecs.append(rng.normal(0.0, cfg.value_sd, size=length))
    flags = np.array([True] * cfg.k_sparse + [False] * cfg.k_dense, dtype=bool)
    mat = np.array(vecs).reshape(len(vecs), length)
    return mat, flags


def simulate(config: SimConfig) -> tuple[DataMatrix, GroundTruth]:
    """Draw Y = Lambda X + eps with the configured components."""
    rng = np.random.default_rng(config.seed)
    lam_rows, zflags = _side(config.p, config, rng)
    x, oflags = _side(config.n, config, rng)
    lam = lam_rows.T
    if config.shuffle_pairing and x.shape[0] > 1:
        perm = rng.permutation(x.shape[0])
        x, oflags = x[perm], oflags[perm]
    noise = rng.normal(0.0, np.sqrt(config.noise_var), size=(config.p, config.n))
    Y = lam @ x + noise
    bics = [
        Bicluster(frozenset(np.flatnonzero(lam[:, k]).tolist()), frozenset(np.flatnonzero(x[k]).tolist()), k, "truth")
        for k in range(lam.shape[1])
        if zflags[k] and oflags[k]
    ]
    truth = GroundTruth(lam, x, zflags, oflags, bics)
    return DataMatrix(Y), truth


def remove_pcs(data: DataMatrix | np.ndarray, n_pcs: int, center: bool = True) -> DataMatrix:
    """Row-center and subtract the rank-``n_pcs`` SVD reconstruction."""
    dm = data if isinstance(data, DataMatrix) else DataMatrix(np.asarray(data, float))
    Y = dm.values
    if not 0 <= n_pcs < min(Y.shape):
        raise ValueError("n_pcs must lie in [0, min(p, n))")
    Yc = Y - Y.mean(axis=1, keepdims=True) if center else Y.copy()
    if n_pcs:
        try:
            U, s, Vt = np.linalg.svd(Yc, full_matrices=False)
        except np.linalg.LinAlgError as exc:
            raise SimulationError(f"SVD failed: {exc}") from exc
        Yc = Yc - (U[:, :n_pcs] * s[:n_pcs]) @ Vt[:n_pcs]
    return DataMatrix(Yc, dm.gene_ids, dm.sample_ids)
