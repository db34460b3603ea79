"""Gene co-expression networks from fitted components.

Pipeline per fit: drop components whose supports were still changing late
in the run, select components by how their factor values relate to sample
labels, build the implied covariance over the genes they load on, turn its
inverse into partial correlations and score each gene pair with a
two-component mixture (empirical null plus alternative).  Edges are then
pooled across runs and kept when they replicate.
"""

from __future__ import annotations

import enum
import logging
import math
from collections import defaultdict
from dataclasses import dataclass

import numpy as np
from scipy import optimize, special, stats

from .model import ModelState

log = logging.getLogger(__name__)

MIN_EDGES_FOR_MIXTURE = 50
FALLBACK_ABS_THRESHOLD = 0.2
EXACT_WILCOXON_MAX_N = 12


class NetworkError(RuntimeError):
    def __init__(self, message, condition=np.inf):
        super().__init__(message)
        self.condition = condition


class NetType(str, enum.Enum):
    SPECIFIC = "subset_specific"
    DIFFERENTIAL = "subset_differential"
    UBIQUITOUS = "ubiquitous"


@dataclass(frozen=True)
class StabilityWindow:
    checkpoint_a: int
    checkpoint_b: int
    max_change: int = 50
    require_both: bool = False  # True reproduces the literal AND rule

    def __post_init__(self):
        if not 0 < self.checkpoint_a < self.checkpoint_b:
            raise ValueError("need 0 < checkpoint_a < checkpoint_b")
        if self.max_change < 0:
            raise ValueError("max_change must be >= 0")


@dataclass(frozen=True)
class NetworkSpec:
    net_type: NetType = NetType.UBIQUITOUS
    target_class: str | None = None
    class_pair: tuple[str, str] | None = None
    wilcoxon_p_threshold: float = 1e-10
    edge_prob_threshold: float = 0.8
    replication_threshold: int = 10
    stability_window: StabilityWindow | None = None
    nonzero_only: bool = True
    support_eps: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "net_type", NetType(self.net_type))
        if not 0 <= self.wilcoxon_p_threshold <= 1:
            raise ValueError("wilcoxon_p_threshold must lie in [0, 1]")
        if not 0 <= self.edge_prob_threshold <= 1:
            raise ValueError("edge_prob_threshold must lie in [0, 1]")
        if self.replication_threshold < 0:
            raise ValueError("replication_threshold must be >= 0")
        if self.net_type is NetType.SPECIFIC and self.target_class is None:
            raise ValueError("subset_specific networks need target_class")
        if self.net_type is NetType.DIFFERENTIAL and (self.class_pair is None or len(self.class_pair) != 2):
            raise ValueError("subset_differential networks need class_pair")


@dataclass(frozen=True)
class EdgeRecord:
    gene_a: str
    gene_b: str
    partial_correlation: float
    probability: float
    replication: int = 1

    def __post_init__(self):
        if self.gene_a == self.gene_b:
            raise ValueError("self-edges are not allowed")
        if self.gene_a > self.gene_b:
            raise ValueError("edges must be in canonical order gene_a < gene_b")

    @property
    def key(self) -> tuple[str, str]:
        return self.gene_a, self.gene_b


def canonical(a: str, b: str) -> tuple[str, str]:
    return (a, b) if a < b else (b, a)


# ---------------------------------------------------------------------------
# component selection


def stability_filter(trace, window: StabilityWindow) -> set[int]:
    """Component ids whose gene and sample counts moved by at most ``max_change``.

    ``trace`` is a list of IterationTrace entries.  Components absent at
    ``checkpoint_b`` are not returned; components absent at ``checkpoint_a``
    but present at ``checkpoint_b`` cannot be judged and are dropped.
    """
    by_iter = {t.iteration: t for t in trace}
    missing = [c for c in (window.checkpoint_a, window.checkpoint_b) if c not in by_iter]
    if missing:
        raise ValueError(f"trace does not cover checkpoint(s) {missing}")
    ta, tb = by_iter[window.checkpoint_a], by_iter[window.checkpoint_b]
    keep = set()
    for cid in tb.component_ids.tolist():
        a = ta.counts_for(cid)
        if a is None:
            continue
        b = tb.counts_for(cid)
        dg = abs(a[0] - b[0]) > window.max_change
        ds = abs(a[1] - b[1]) > window.max_change
        unstable = (dg and ds) if window.require_both else (dg or ds)
        if not unstable:
            keep.add(int(cid))
    return keep


def _exact_rank_sum_pvalue(ranks_x, n):
    """Two-sided exact p of the rank sum of x among n untied ranks 1..n."""
    m = len(ranks_x)
    # counts[k][s]: subsets of size k of {1..i} with rank sum s
    max_s = n * (n + 1) // 2
    counts = np.zeros((m + 1, max_s + 1), dtype=object)
    counts[0, 0] = 1
    for i in range(1, n + 1):
        for k in range(min(i, m), 0, -1):
            counts[k, i:] = counts[k, i:] + counts[k - 1, : max_s + 1 - i]
    dist = counts[m].astype(float)
    total = dist.sum()
    w = int(round(sum(ranks_x)))
    mean = m * (n + 1) / 2
    dev = abs(w - mean)
    s = np.arange(max_s + 1)
    extreme = np.abs(s - mean) >= dev - 1e-9
    return float(min(1.0, dist[extreme].sum() / total))


def wilcoxon_rank_sum(x, y) -> float:
    """Two-sided Wilcoxon rank-sum p-value.

    Exact (by counting rank subsets) when the pooled size is at most 12 and
    there are no ties; otherwise a normal approximation with tie and
    continuity corrections.
    """
    x = np.asarray(x, float).ravel()
    y = np.asarray(y, float).ravel()
    if x.size < 1 or y.size < 1:
        raise ValueError("both samples must be non-empty")
    pooled = np.concatenate([x, y])
    N = pooled.size
    ranks = stats.rankdata(pooled)
    has_ties = np.unique(pooled).size < N
    m, n2 = x.size, y.size
    if N <= EXACT_WILCOXON_MAX_N and not has_ties:
        return _exact_rank_sum_pvalue(ranks[:m], N)
    W = ranks[:m].sum()
    mean = m * (N + 1) / 2
    _, tie_counts = np.unique(pooled, return_counts=True)
    tie_term = np.sum(tie_counts**3 - tie_counts) / (N * (N - 1)) if N > 1 else 0.0
    var = m * n2 / 12 * ((N + 1) - tie_term)
    if var <= 0:
        return 1.0
    z = (abs(W - mean) - 0.5) / math.sqrt(var)
    z = max(z, 0.0)
    return float(min(1.0, 2 * stats.norm.sf(z)))


def select_components(state: ModelState, labels, spec: NetworkSpec, candidates=None) -> list[int]:
    """Indices (positions in ``state``) of components matching ``spec.net_type``.

    ``labels`` has one class label per sample.  ``candidates`` optionally
    restricts to component ids (e.g. the output of stability_filter).
    """
    labels = np.asarray(labels, dtype=object) if labels is not None else None
    n = state.n
    if labels is not None and labels.size != n:
        raise ValueError(f"label count {labels.size} does not match n = {n}")
    out = []
    for k in range(state.K):
        cid = int(state.component_ids[k])
        if candidates is not None and cid not in candidates:
            continue
        xk = state.factor.x_mean[k]
        nz = np.abs(xk) > spec.support_eps
        if not nz.any():
            continue
        if spec.net_type is NetType.UBIQUITOUS:
            if nz.all():
                out.append(k)
        elif spec.net_type is NetType.SPECIFIC:
            if labels is None:
                raise ValueError("subset_specific selection needs labels")
            if np.all(labels[nz] == spec.target_class):
                out.append(k)
        else:
            if labels is None:
                raise ValueError("subset_differential selection needs labels")
            c1, c2 = spec.class_pair
            mask = nz if spec.nonzero_only else np.ones(n, dtype=bool)
            a = xk[mask & (labels == c1)]
            b = xk[mask & (labels == c2)]
            if a.size < 2 or b.size < 2:
                log.warning("component %d skipped: fewer than 2 values in a class", cid)
                continue
            if wilcoxon_rank_sum(a, b) <= spec.wilcoxon_p_threshold:
                out.append(k)
    return out


# ---------------------------------------------------------------------------
# covariance and partial correlations


def build_covariance(lambda_a, sigma_aa, psi, gene_subset) -> np.ndarray:
    """Omega = Lambda_A Sigma_AA Lambda_A^T + Psi restricted to ``gene_subset``."""
    genes = np.asarray(sorted(gene_subset), dtype=np.int64)
    if genes.size == 0:
        raise NetworkError("empty gene subset")
    L = np.asarray(lambda_a, float)[genes]
    S = np.asarray(sigma_aa, float)
    S = 0.5 * (S + S.T)
    omega = L @ S @ L.T + np.diag(np.asarray(psi, float)[genes])
    return 0.5 * (omega + omega.T)


def partial_correlations(omega) -> np.ndarray:
    """-Delta_ij / sqrt(Delta_ii Delta_jj) with Delta = Omega^{-1}; unit diagonal."""
    omega = np.asarray(omega, float)
    try:
        L = np.linalg.cholesky(omega)
    except np.linalg.LinAlgError:
        raise NetworkError("covariance is not positive definite", float(np.linalg.cond(omega))) from None
    Linv = np.linalg.inv(L)
    delta = Linv.T @ Linv
    d = np.sqrt(np.diag(delta))
    pc = -delta / np.outer(d, d)
    pc = 0.5 * (pc + pc.T)
    np.fill_diagonal(pc, 1.0)
    return np.clip(pc, -1.0, 1.0)


# ---------------------------------------------------------------------------
# edge probabilities


def null_log_density(r, kappa):
    """log f0(r; kappa) for f0 proportional to (1 - r^2)^((kappa - 3) / 2) on (-1, 1)."""
    r = np.asarray(r, float)
    return (kappa - 3) / 2 * np.log1p(-r * r) - special.betaln(0.5, (kappa - 1) / 2)


def null_cdf_abs(x0, kappa):
    """P(|r| <= x0) under f0: r^2 ~ Beta(1/2, (kappa - 1)/2)."""
    return special.betainc(0.5, (kappa - 1) / 2, x0 * x0)


@dataclass(frozen=True)
class NullFit:
    kappa: float
    eta0: float
    cutoff: float


def fit_null(r, central_mass=0.75) -> NullFit:
    """Truncated maximum likelihood for kappa on |r| <= the ``central_mass`` quantile of |r|."""
    r = np.asarray(r, float)
    a = np.abs(r)
    x0 = float(np.quantile(a, central_mass))
    x0 = min(max(x0, 1e-12), 1 - 1e-12)
    inside = r[a <= x0]
    m = inside.size

    def nll(log_k):
        k = 1.0 + math.exp(log_k)
        return -(np.sum(null_log_density(inside, k)) - m * math.log(max(null_cdf_abs(x0, k), 1e-300)))

    res = optimize.minimize_scalar(nll, bounds=(-10.0, 15.0), method="bounded", options={"xatol": 1e-8})
    kappa = 1.0 + math.exp(res.x)
    eta0 = min(1.0, (m / r.size) / null_cdf_abs(x0, kappa))
    return NullFit(kappa, eta0, x0)


def _kde(r, grid_size=1024):
    kde = stats.gaussian_kde(r)
    lo, hi = r.min(), r.max()
    pad = 4 * math.sqrt(kde.covariance[0, 0])
    grid = np.linspace(lo - pad, hi + pad, grid_size)
    return np.interp(r, grid, kde(grid))


def _isotonic_in_abs(r, prob):
    a = np.abs(r)
    order = np.argsort(a, kind="stable")
    fitted = optimize.isotonic_regression(prob[order], increasing=True).x
    out = np.empty_like(prob)
    out[order] = fitted
    # equal |r| must share a value
    _, inv = np.unique(a, return_inverse=True)
    tied_max = np.zeros(inv.max() + 1)
    np.maximum.at(tied_max, inv, out)
    return np.clip(tied_max[inv], 0.0, 1.0)


def edge_probabilities(pcors, fallback_threshold=FALLBACK_ABS_THRESHOLD, return_fit=False):
    """Posterior probability that each partial correlation comes from the alternative."""
    r = np.asarray(pcors, float).ravel()
    if np.any(np.abs(r) >= 1):
        raise ValueError("partial correlations must lie strictly inside (-1, 1)")
    if r.size < MIN_EDGES_FOR_MIXTURE:
        prob = (np.abs(r) >= fallback_threshold).astype(float)
        return (prob, None) if return_fit else prob
    # work on sorted values so floating-point sums, and hence the fit, ignore input order
    order = np.argsort(r, kind="stable")
    rs = r[order]
    fit = fit_null(rs)
    f0 = np.exp(null_log_density(rs, fit.kappa))
    fhat = np.maximum(_kde(rs), 1e-300)
    prob_sorted = _isotonic_in_abs(rs, np.clip(1 - fit.eta0 * f0 / fhat, 0.0, 1.0))
    prob = np.empty_like(prob_sorted)
    prob[order] = prob_sorted
    return (prob, fit) if return_fit else prob


# ---------------------------------------------------------------------------
# per-run networks and ensembles


def component_gene_support(state: ModelState, components, eps=1e-6) -> list[int]:
    genes = set()
    for k in components:
        genes |= set(np.flatnonzero(np.abs(state.loading.lam[:, k]) > eps).tolist())
    return sorted(genes)


def run_network(state: ModelState, gene_ids, components, eps=1e-6, fallback_threshold=FALLBACK_ABS_THRESHOLD):
    """All gene-pair edges implied by ``components`` of one fit, with probabilities."""
    components = list(components)
    genes = component_gene_support(state, components, eps)
    if len(genes) < 2:
        return []
    sigma = state.factor_covariance()[np.ix_(components, components)]
    omega = build_covariance(state.loading.lam[:, components], sigma, state.noise.psi, genes)
    pc = partial_correlations(omega)
    iu = np.triu_indices(len(genes), k=1)
    r = np.clip(pc[iu], -1 + 1e-15, 1 - 1e-15)
    prob = edge_probabilities(r, fallback_threshold)
    out = []
    for (i, j), rho, pr in zip(zip(*iu), r, prob):
        a, b = canonical(str(gene_ids[genes[i]]), str(gene_ids[genes[j]]))
        out.append(EdgeRecord(a, b, float(rho), float(pr), 1))
    return sorted(out, key=lambda e: e.key)


def ensemble_edges(per_run_edges, spec: NetworkSpec) -> list[EdgeRecord]:
    """Pool per-run edges with probability >= threshold and keep the replicated ones.

    Each retained edge carries its highest probability and the partial
    correlation of that run (ties broken by the larger |pcor|).
    """
    count = defaultdict(int)
    best = {}
    for edges in per_run_edges:
        seen = set()
        for e in edges:
            if e.probability < spec.edge_prob_threshold or e.key in seen:
                continue
            seen.add(e.key)
            count[e.key] += 1
            cur = best.get(e.key)
            if cur is None or (e.probability, abs(e.partial_correlation)) > (cur.probability, abs(cur.partial_correlation)):
                best[e.key] = e
    out = [
        EdgeRecord(k[0], k[1], best[k].partial_correlation, best[k].probability, c)
        for k, c in count.items()
        if c >= spec.replication_threshold
    ]
    return sorted(out, key=lambda e: e.key)


def network_for_fit(state: ModelState, gene_ids, labels, spec: NetworkSpec, trace=None) -> list[EdgeRecord]:
    """Stability filter (when a window and trace are given), selection, then edges."""
    candidates = None
    if spec.stability_window is not None and trace:
        candidates = stability_filter(trace, spec.stability_window)
    comps = select_components(state, labels, spec, candidates)
    if not comps:
        return []
    return run_network(state, gene_ids, comps, spec.support_eps)


def to_dot(edges, name="network") -> str:
    """Undirected DOT graph with replication as the edge weight."""
    lines = [f"graph {name} {{"]
    for e in edges:
        lines.append(f'  "{e.gene_a}" -- "{e.gene_b}" [weight={e.replication}, pcor={e.partial_correlation:.6g}, prob={e.probability:.6g}];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def node_degrees(edges) -> dict[str, int]:
    deg = defaultdict(int)
    for e in edges:
        deg[e.gene_a] += 1
        deg[e.gene_b] += 1
    return dict(deg)


__all__ = [
    "EdgeRecord",
    "NetType",
    "NetworkError",
    "NetworkSpec",
    "NullFit",
    "StabilityWindow",
    "build_covariance",
    "canonical",
    "edge_probabilities",
    "ensemble_edges",
    "fit_null",
    "network_for_fit",
    "node_degrees",
    "partial_correlations",
    "to_dot",
    "run_network",
    "select_components",
    "stability_filter",
    "wilcoxon_rank_sum",
]
