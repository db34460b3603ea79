"""Command-line entry point: simulate, fit, score, network, normalize.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
Every command writes a manifest.json next to its outputs recording the
exact argument vector; ``--from-manifest`` replays it into a new output
location.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from . import io as bio
from .gig import GigParamError
from .metrics import recovery_relevance, redundancy_count, stability_index
from .model import Bicluster, DataMatrix, Hyperparameters, StateError, classify_component, extract_biclusters
from .network import NetType, NetworkError, NetworkSpec, StabilityWindow, ensemble_edges, network_for_fit, to_dot
from .simulate import PRESETS, SimConfig, SimulationError, preset, simulate
from .vem import FitConfig, IndicatorError, LinearSolveError, pve, resume, start

log = logging.getLogger("bicmix")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args) -> int:
    overrides = {k: getattr(args, k) for k in ("p", "n", "k_sparse", "k_dense", "noise_var") if getattr(args, k) is not None}
    if args.m_range is not None:
        overrides["m_range"] = tuple(args.m_range)
    cfg = preset(args.preset, seed=args.seed, **overrides) if args.preset else SimConfig(seed=args.seed, **overrides)
    data, truth = simulate(cfg)
    out = Path(args.out)
    bio.write_data_matrix(out / "Y.tsv", data)
    comp = [f"c{k}" for k in range(truth.K)]
    bio.write_matrix(out / "truth_lambda.tsv", truth.lambda_true, data.gene_ids, comp)
    bio.write_matrix(out / "truth_x.tsv", truth.x_true, comp, data.sample_ids, corner="component")
    bio.write_json(
        out / "truth.json",
        {
            "loading_sparse": truth.loading_sparse.tolist(),
            "factor_sparse": truth.factor_sparse.tolist(),
            "biclusters": [{"component": b.component_index, "genes": sorted(b.genes), "samples": sorted(b.samples)} for b in truth.biclusters],
        },
    )
    _manifest(out, args, {"sim_config": cfg.to_dict(), "outputs": {"Y.tsv": bio.file_digest(out / "Y.tsv")}})
    return EXIT_OK


# ---------------------------------------------------------------------------
# fit

_HYPER_NAMES = [f.name for f in fields(Hyperparameters)]


def _hyper_from_args(args) -> Hyperparameters:
    return Hyperparameters(**{k: getattr(args, f"h_{k}") for k in _HYPER_NAMES})


def write_fit_outputs(out: Path, data: DataMatrix, state, trace, config: FitConfig) -> dict:
    comp = [f"c{int(c)}" for c in state.component_ids]
    bio.write_matrix(out / "lambda.tsv", state.loading.lam, data.gene_ids, comp)
    bio.write_matrix(out / "x.tsv", state.factor.x_mean, comp, data.sample_ids, corner="component")
    bio.write_matrix(out / "psi.tsv", state.noise.psi[:, None], data.gene_ids, ["psi"])
    shares = pve(state) if state.K and np.any(state.loading.lam) and np.any(state.factor.x_mean) else np.zeros(state.K)
    eps = config.support_eps
    lines = ["component\tz\to\tclass\tambiguous\tpve\tn_genes\tn_samples\tx_cov_trace"]
    summary = {}
    for k in range(state.K):
        cls = classify_component(state.loading.z[k], state.factor.o[k], config.classification_threshold)
        summary[cls.label.value] = summary.get(cls.label.value, 0) + 1
        lines.append(
            "\t".join(
                [
                    comp[k],
                    bio.format_float(state.loading.z[k]),
                    bio.format_float(state.factor.o[k]),
                    cls.label.value,
                    str(int(cls.ambiguous)),
                    bio.format_float(shares[k]),
                    str(int(np.sum(np.abs(state.loading.lam[:, k]) > eps))),
                    str(int(np.sum(np.abs(state.factor.x_mean[k]) > eps))),
                    bio.format_float(state.factor.x_cov[:, k, k].sum()),
                ]
            )
        )
    bio.atomic_write_text(out / "components.tsv", "\n".join(lines) + "\n")
    tl = ["iteration\tcomponent\tn_genes\tn_samples\tresidual_norm\tactive"]
    for t in trace:
        for cid, g, s in zip(t.component_ids, t.n_genes, t.n_samples):
            tl.append(f"{t.iteration}\tc{int(cid)}\t{int(g)}\t{int(s)}\t{bio.format_float(t.residual_norm)}\t{t.active}")
    bio.atomic_write_text(out / "trace.tsv", "\n".join(tl) + "\n")
    return {"classification": summary, "pve": {comp[k]: float(shares[k]) for k in range(state.K)}}


def cmd_fit(args) -> int:
    data_path = Path(args.data)
    data = bio.read_data_matrix(data_path)
    out = Path(args.out)
    hyper = _hyper_from_args(args)
    config = FitConfig(
        K_init=args.k,
        max_iterations=args.iterations,
        seed=args.seed,
        prune_eps=args.prune_eps,
        converge_tol=args.converge_tol,
        classification_threshold=args.threshold,
        warm_start_iterations=args.warm_start,
        rebalance=args.rebalance,
    )
    t0 = time.perf_counter()
    if args.resume:
        ck = bio.load_checkpoint(args.resume)
        hyper, config = ck.hyper, ck.config
        if ck.state.p != data.shape[0] or ck.state.n != data.shape[1]:
            raise StateError(f"checkpoint shape ({ck.state.p}x{ck.state.n}) does not match data {data.shape}")
    else:
        ck = start(data, hyper, config)
    save = None
    if args.checkpoint_every:
        save = lambda c: bio.save_checkpoint(out / "checkpoint.npz", c)  # noqa: E731
    result = resume(data, ck, stop_at=args.stop_at, callback=save, checkpoint_every=args.checkpoint_every)
    final = result.checkpoint()
    bio.save_checkpoint(out / "checkpoint.npz", final)
    summary = write_fit_outputs(out, data, result.state, result.trace, config)
    _manifest(
        out,
        args,
        {
            "input_digest": bio.file_digest(data_path),
            "seed": config.seed,
            "hyperparameters": hyper.to_dict(),
            "config": config.to_dict(),
            "iteration": final.iteration,
            "converged_at": result.converged_at,
            "floored_numerators": result.floored_warning,
            "timing_seconds": time.perf_counter() - t0,
            "outputs": {name: bio.file_digest(out / name) for name in ("lambda.tsv", "x.tsv", "psi.tsv", "components.tsv")},
            **summary,
        },
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# score


def _load_truth_biclusters(truth_dir: Path) -> list[Bicluster]:
    meta = bio.read_json(truth_dir / "truth.json")
    return [Bicluster(frozenset(b["genes"]), frozenset(b["samples"]), b["component"], "truth") for b in meta["biclusters"]]


def cmd_score(args) -> int:
    truth_dir = Path(args.truth)
    truth = _load_truth_biclusters(truth_dir)
    if not truth:
        raise bio.DataFormatError(f"{truth_dir}: no sparse-sparse ground-truth biclusters to score against")
    lam_t, _, _ = bio.read_matrix(truth_dir / "truth_lambda.tsv")
    x_t, _, _ = bio.read_matrix(truth_dir / "truth_x.tsv")
    rows = ["run_id\tmetric\tvalue"]
    for fit_dir in map(Path, args.fit):
        ck = bio.load_checkpoint(fit_dir / "checkpoint.npz")
        st = ck.state
        run_id = fit_dir.name
        found = extract_biclusters(st, args.threshold, args.eps, run_id)
        for mode in ("cells", "genes"):
            sc = recovery_relevance(truth, found, mode)
            rows.append(f"{run_id}\trecovery_{mode}\t{bio.format_float(sc.recovery)}")
            rows.append(f"{run_id}\trelevance_{mode}\t{bio.format_float(sc.relevance)}")
        if st.K:
            rows.append(f"{run_id}\tstability_loading\t{bio.format_float(stability_index(lam_t, st.loading.lam))}")
            rows.append(f"{run_id}\tstability_factor\t{bio.format_float(stability_index(x_t.T, st.factor.x_mean.T))}")
        supports = [(np.abs(st.loading.lam[:, k]) > args.eps, np.abs(st.factor.x_mean[k]) > args.eps) for k in range(st.K)]
        rows.append(f"{run_id}\tredundant_pairs\t{redundancy_count(supports)}")
        rows.append(f"{run_id}\tn_biclusters\t{len(found)}")
    bio.atomic_write_text(args.out, "\n".join(rows) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# network


def cmd_network(args) -> int:
    net_type = {"specific": NetType.SPECIFIC, "differential": NetType.DIFFERENTIAL, "ubiquitous": NetType.UBIQUITOUS}[args.net_type]
    if net_type is not NetType.UBIQUITOUS and not args.labels:
        raise UsageError(f"--net-type {args.net_type} needs --labels")
    per_run = []
    for fit_dir in map(Path, args.fits):
        ck = bio.load_checkpoint(fit_dir / "checkpoint.npz")
        _, gene_ids, _ = bio.read_matrix(fit_dir / "lambda.tsv")
        _, _, sample_ids = bio.read_matrix(fit_dir / "x.tsv")
        labels = bio.read_labels(args.labels, sample_ids) if args.labels else None
        total = ck.iteration
        a = args.checkpoint_a if args.checkpoint_a is not None else total // 2
        b = args.checkpoint_b if args.checkpoint_b is not None else total
        window = StabilityWindow(a, b, args.stability_max_change, args.and_rule) if 0 < a < b else None
        spec = NetworkSpec(
            net_type=net_type,
            target_class=args.target_class,
            class_pair=tuple(args.class_pair) if args.class_pair else None,
            wilcoxon_p_threshold=args.wilcoxon_p,
            edge_prob_threshold=args.edge_prob,
            replication_threshold=args.replication,
            stability_window=window,
            nonzero_only=not args.all_values,
        )
        per_run.append(network_for_fit(ck.state, gene_ids, labels, spec, ck.trace))
    edges = ensemble_edges(per_run, spec)
    bio.atomic_write_text(args.out, bio.edges_to_tsv(edges))
    if args.dot:
        bio.atomic_write_text(args.dot, to_dot(edges))
    return EXIT_OK


# ---------------------------------------------------------------------------
# normalize


def cmd_normalize(args) -> int:
    dm = bio.read_data_matrix(args.data)
    bio.write_matrix(args.out, bio.quantile_normalize(dm.values), dm.gene_ids, dm.sample_ids)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser and dispatch


def _manifest(out: Path, args, extra: dict) -> None:
    bio.write_json(
        Path(out) / "manifest.json",
        {"run_id": Path(out).name, "version": __version__, "command": args.command, "argv": args.argv, **extra},
    )


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bicmix", description="Doubly sparse mixture factor analysis for biclustering.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--from-manifest", metavar="MANIFEST", help="replay the command recorded in MANIFEST (use with --out)")
    sub = p.add_subparsers(dest="command")

    s = sub.add_parser("simulate", help="generate synthetic data with planted components")
    s.add_argument("--preset", choices=sorted(PRESETS))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--p", type=int)
    s.add_argument("--n", type=int)
    s.add_argument("--k-sparse", dest="k_sparse", type=int)
    s.add_argument("--k-dense", dest="k_dense", type=int)
    s.add_argument("--m-range", dest="m_range", type=int, nargs=2)
    s.add_argument("--noise-var", dest="noise_var", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="fit the model by variational EM")
    f.add_argument("--data", required=True, help="TSV matrix, genes x samples")
    f.add_argument("--out", required=True)
    f.add_argument("--k", type=int, default=50)
    f.add_argument("--iterations", type=int, default=5000)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--warm-start", dest="warm_start", type=int, default=100, help="Gibbs sweeps before VEM")
    f.add_argument("--prune-eps", dest="prune_eps", type=float, default=1e-6)
    f.add_argument("--converge-tol", dest="converge_tol", type=float, default=1e-6)
    f.add_argument("--threshold", type=float, default=0.9, help="sparse/dense classification threshold")
    f.add_argument("--rebalance", action="store_true", help="equalize loading/factor norms after each sweep")
    f.add_argument("--checkpoint-every", dest="checkpoint_every", type=int, default=0)
    f.add_argument("--stop-at", dest="stop_at", type=int)
    f.add_argument("--resume", metavar="CHECKPOINT")
    hyper_defaults = Hyperparameters().to_dict()
    for name in _HYPER_NAMES:
        f.add_argument(f"--{name}", dest=f"h_{name}", type=float, default=hyper_defaults[name], help=argparse.SUPPRESS)
    f.set_defaults(func=cmd_fit)

    sc = sub.add_parser("score", help="score fits against simulated truth")
    sc.add_argument("--truth", required=True, help="output directory of `simulate`")
    sc.add_argument("--fit", required=True, nargs="+", help="output directories of `fit`")
    sc.add_argument("--threshold", type=float, default=0.9)
    sc.add_argument("--eps", type=float, default=1e-6)
    sc.add_argument("--out", required=True)
    sc.set_defaults(func=cmd_score)

    nw = sub.add_parser("network", help="co-expression network from one or more fits")
    nw.add_argument("--fits", required=True, nargs="+")
    nw.add_argument("--labels", help="TSV of sample_id<TAB>label")
    nw.add_argument("--net-type", dest="net_type", choices=["specific", "differential", "ubiquitous"], default="ubiquitous")
    nw.add_argument("--target-class", dest="target_class")
    nw.add_argument("--class-pair", dest="class_pair", nargs=2)
    nw.add_argument("--wilcoxon-p", dest="wilcoxon_p", type=float, default=1e-10)
    nw.add_argument("--all-values", dest="all_values", action="store_true", help="test all factor values, not only nonzero ones")
    nw.add_argument("--edge-prob", dest="edge_prob", type=float, default=0.8)
    nw.add_argument("--replication", type=int, default=10)
    nw.add_argument("--stability-max-change", dest="stability_max_change", type=int, default=50)
    nw.add_argument("--checkpoint-a", dest="checkpoint_a", type=int)
    nw.add_argument("--checkpoint-b", dest="checkpoint_b", type=int)
    nw.add_argument("--and-rule", dest="and_rule", action="store_true", help="discard only if both counts changed")
    nw.add_argument("--out", required=True)
    nw.add_argument("--dot")
    nw.set_defaults(func=cmd_network)

    nm = sub.add_parser("normalize", help="per-gene normal-quantile normalization")
    nm.add_argument("--data", required=True)
    nm.add_argument("--out", required=True)
    nm.set_defaults(func=cmd_normalize)
    return p


def _replay_argv(manifest_path: str, rest: list[str]) -> list[str]:
    recorded = list(bio.read_json(manifest_path)["argv"])
    new_out = None
    if "--out" in rest:
        new_out = rest[rest.index("--out") + 1]
    if new_out is not None and "--out" in recorded:
        recorded[recorded.index("--out") + 1] = new_out
    return recorded


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        if "--from-manifest" in argv:
            i = argv.index("--from-manifest")
            argv = _replay_argv(argv[i + 1], argv[:i] + argv[i + 2 :])
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    except (bio.DataFormatError, OSError, KeyError, IndexError) as exc:
        print(f"bicmix: cannot replay manifest: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"bicmix: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (LinearSolveError, IndicatorError, NetworkError, FloatingPointError, np.linalg.LinAlgError) as exc:
        where = f" at iteration {exc.iteration}" if getattr(exc, "iteration", None) else ""
        print(f"bicmix: numerical failure{where}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (bio.DataFormatError, bio.CheckpointError, StateError, SimulationError, GigParamError, ValueError, FileNotFoundError) as exc:
        print(f"bicmix: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
