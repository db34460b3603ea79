"""File formats: matrix TSVs, manifests, checkpoints and label files.

All writes go to a temporary file in the destination directory and are
renamed into place, so an interrupted process never leaves a truncated
output behind.
"""

from __future__ import annotations

import hashlib
import io as _io
import json
import os
import tempfile
import warnings
import zipfile
from pathlib import Path

import numpy as np
from scipy import stats

from .model import DataMatrix, FactorSide, Hyperparameters, LoadingSide, ModelState, NoiseModel, StateError
from .vem import Checkpoint, FitConfig, IterationTrace

CHECKPOINT_VERSION = 1


class DataFormatError(ValueError):
    """Malformed input file; the message names the offending row/column."""


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# atomic writes


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return "sha256:" + h.hexdigest()


# ---------------------------------------------------------------------------
# matrices


def format_float(v: float) -> str:
    return f"{float(v):.17g}"


def matrix_to_tsv(values, row_ids, col_ids, corner="gene_id") -> str:
    values = np.asarray(values, float)
    if values.ndim != 2:
        raise ValueError("matrix must be 2-D")
    if values.shape != (len(row_ids), len(col_ids)):
        raise ValueError("identifier counts do not match matrix shape")
    lines = ["\t".join([corner, *map(str, col_ids)])]
    for rid, row in zip(row_ids, values):
        lines.append("\t".join([str(rid), *map(format_float, row)]))
    return "\n".join(lines) + "\n"


def write_matrix(path, values, row_ids, col_ids, corner="gene_id") -> None:
    atomic_write_text(path, matrix_to_tsv(values, row_ids, col_ids, corner))


def read_matrix(path) -> tuple[np.ndarray, list[str], list[str]]:
    """Parse a TSV with a header of column ids and a first column of row ids."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise DataFormatError(f"{path}: not UTF-8 text") from exc
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if len(lines) < 2:
        raise DataFormatError(f"{path}: need a header and at least one data row")
    header = lines[0].split("\t")
    col_ids = header[1:]
    if not col_ids:
        raise DataFormatError(f"{path}: header has no column identifiers")
    rows, row_ids = [], []
    for lineno, ln in enumerate(lines[1:], start=2):
        parts = ln.split("\t")
        if len(parts) != len(header):
            raise DataFormatError(f"{path}: row {lineno} has {len(parts) - 1} values, expected {len(col_ids)}")
        row = []
        for j, tok in enumerate(parts[1:]):
            try:
                v = float(tok)
            except ValueError:
                raise DataFormatError(f"{path}: row {lineno} ({parts[0]}), column {col_ids[j]}: not a number: {tok!r}") from None
            if not np.isfinite(v):
                raise DataFormatError(f"{path}: row {lineno} ({parts[0]}), column {col_ids[j]}: non-finite value")
            row.append(v)
        rows.append(row)
        row_ids.append(parts[0])
    if len(set(row_ids)) != len(row_ids):
        raise DataFormatError(f"{path}: duplicate row identifiers")
    if len(set(col_ids)) != len(col_ids):
        raise DataFormatError(f"{path}: duplicate column identifiers")
    return np.array(rows, dtype=float), row_ids, col_ids


def read_data_matrix(path) -> DataMatrix:
    values, genes, samples = read_matrix(path)
    try:
        return DataMatrix(values, genes, samples)
    except StateError as exc:
        raise DataFormatError(f"{path}: {exc}") from exc


def write_data_matrix(path, dm: DataMatrix) -> None:
    write_matrix(path, dm.values, dm.gene_ids, dm.sample_ids)


def read_labels(path, sample_ids) -> list[str]:
    """Two-column TSV (sample_id, label) aligned to ``sample_ids``; a header line is optional."""
    mapping = {}
    for lineno, ln in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not ln.strip():
            continue
        parts = ln.split("\t")
        if len(parts) != 2:
            raise DataFormatError(f"{path}: row {lineno} must have exactly two columns")
        mapping[parts[0]] = parts[1]
    mapping.pop("sample_id", None)
    missing = [s for s in sample_ids if s not in mapping]
    if missing:
        raise DataFormatError(f"{path}: no label for sample {missing[0]!r}")
    unknown = sorted(set(mapping) - set(sample_ids))
    if unknown:
        raise DataFormatError(f"{path}: unknown sample id {unknown[0]!r}")
    return [mapping[s] for s in sample_ids]


# ---------------------------------------------------------------------------
# normalization


def quantile_normalize(values) -> np.ndarray:
    """Map each row's average ranks r to the normal quantiles Phi^{-1}((r - 0.5) / n)."""
    values = np.asarray(values, float)
    if values.ndim != 2 or values.shape[1] < 2:
        raise ValueError("need a 2-D matrix with at least two columns")
    n = values.shape[1]
    ranks = stats.rankdata(values, axis=1)
    out = stats.norm.ppf((ranks - 0.5) / n)
    const = np.ptp(values, axis=1) == 0
    if const.any():
        warnings.warn(f"{int(const.sum())} constant row(s) set to zero", RuntimeWarning, stacklevel=2)
        out[const] = 0.0
    return out


# ---------------------------------------------------------------------------
# manifests


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: invalid JSON ({exc})") from exc


# ---------------------------------------------------------------------------
# checkpoints

_ARRAYS = {
    "lam": ("loading", "lam"),
    "theta": ("loading", "theta"),
    "delta": ("loading", "delta"),
    "phi": ("loading", "phi"),
    "tau": ("loading", "tau"),
    "z": ("loading", "z"),
    "x_mean": ("factor", "x_mean"),
    "x_cov": ("factor", "x_cov"),
    "sigma": ("factor", "sigma"),
    "rho": ("factor", "rho"),
    "omega": ("factor", "omega"),
    "kappa": ("factor", "kappa"),
    "o": ("factor", "o"),
    "psi": ("noise", "psi"),
}
_SCALARS = {
    "eta": ("loading", "eta"),
    "gamma": ("loading", "gamma"),
    "ln_pi": ("loading", "ln_pi"),
    "ln_one_minus_pi": ("loading", "ln_one_minus_pi"),
    "chi": ("factor", "chi"),
    "varphi_g": ("factor", "varphi_g"),
    "ln_pi_x": ("factor", "ln_pi_x"),
    "ln_one_minus_pi_x": ("factor", "ln_one_minus_pi_x"),
}


def checkpoint_to_bytes(ck: Checkpoint) -> bytes:
    st = ck.state
    arrays = {name: np.asarray(getattr(getattr(st, side), attr)) for name, (side, attr) in _ARRAYS.items()}
    arrays["component_ids"] = st.component_ids
    # ragged trace: per-iteration scalars plus concatenated per-component counts
    arrays["trace_iteration"] = np.array([t.iteration for t in ck.trace], dtype=np.int64)
    arrays["trace_residual"] = np.array([t.residual_norm for t in ck.trace], dtype=float)
    arrays["trace_active"] = np.array([t.active for t in ck.trace], dtype=np.int64)
    cat = lambda attr: np.concatenate([getattr(t, attr) for t in ck.trace]).astype(np.int64) if ck.trace else np.zeros(0, np.int64)  # noqa: E731
    arrays["trace_ids"] = cat("component_ids")
    arrays["trace_genes"] = cat("n_genes")
    arrays["trace_samples"] = cat("n_samples")
    meta = {
        "version": CHECKPOINT_VERSION,
        "iteration": ck.iteration,
        "converged_at": ck.converged_at,
        "rng_state": ck.rng_state,
        "hyper": ck.hyper.to_dict(),
        "config": ck.config.to_dict(),
        "scalars": {name: float(getattr(getattr(st, side), attr)) for name, (side, attr) in _SCALARS.items()},
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    buf = _io.BytesIO()
    np.savez(buf, **arrays)
    return buf.getvalue()


def save_checkpoint(path, ck: Checkpoint) -> None:
    atomic_write_bytes(path, checkpoint_to_bytes(ck))


def load_checkpoint(path) -> Checkpoint:
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
    except (zipfile.BadZipFile, ValueError, OSError, EOFError) as exc:
        raise CheckpointError(f"{path}: cannot parse checkpoint ({exc})") from exc
    try:
        meta = json.loads(arrays.pop("meta").tobytes().decode("utf-8"))
    except (KeyError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: missing or corrupt metadata") from exc
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {meta.get('version')} is not supported (expected {CHECKPOINT_VERSION})")
    try:
        sc = meta["scalars"]
        loading = LoadingSide(
            **{attr: arrays[name] for name, (side, attr) in _ARRAYS.items() if side == "loading"},
            **{attr: sc[name] for name, (side, attr) in _SCALARS.items() if side == "loading"},
        )
        factor = FactorSide(
            **{attr: arrays[name] for name, (side, attr) in _ARRAYS.items() if side == "factor"},
            **{attr: sc[name] for name, (side, attr) in _SCALARS.items() if side == "factor"},
        )
        state = ModelState(loading, factor, NoiseModel(arrays["psi"]), arrays["component_ids"])
        trace = []
        off = 0
        for it, res, act in zip(arrays["trace_iteration"], arrays["trace_residual"], arrays["trace_active"]):
            sl = slice(off, off + int(act))
            trace.append(
                IterationTrace(int(it), arrays["trace_ids"][sl], arrays["trace_genes"][sl], arrays["trace_samples"][sl], float(res), int(act))
            )
            off += int(act)
        return Checkpoint(
            state=state,
            iteration=int(meta["iteration"]),
            trace=trace,
            rng_state=meta["rng_state"],
            hyper=Hyperparameters.from_dict(meta["hyper"]),
            config=FitConfig(**meta["config"]),
            converged_at=meta["converged_at"],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: inconsistent checkpoint contents ({exc})") from exc


# ---------------------------------------------------------------------------
# edges


def edges_to_tsv(edges) -> str:
    lines = ["gene_a\tgene_b\tpcor\tprob\treplication"]
    for e in edges:
        lines.append(f"{e.gene_a}\t{e.gene_b}\t{format_float(e.partial_correlation)}\t{format_float(e.probability)}\t{e.replication}")
    return "\n".join(lines) + "\n"
