"""File formats for matrices, covariates, configs, and run artifacts.

Matrices travel as delimited text in two shapes: dense tables whose missing
entries are ``nan``/``NA``/empty fields, and coordinate triples ``row col
value`` with 1-indexed positions (extra trailing columns, such as rating
timestamps, are ignored). Configuration files are plain ``key=value`` lines
mirroring :class:`~cebmf.engine.FitConfig`. A fit's artifacts are delimited
moment matrices plus a ``summary.json`` that echoes everything needed to
reproduce the run; wall-clock timings live in a separate ``timings.txt`` so
that re-running a command reproduces every other artifact byte for byte.
"""

import dataclasses
import json
from pathlib import Path

import numpy as np

from .ebnm import ExponentialSlab, MixturePrior, NormalSlab
from .engine import FitConfig, FitResult
from .types import DataMatrix, PrecisionModel, PrecisionStructure

__all__ = [
    "ParseError",
    "load_artifact",
    "read_config",
    "read_covariates",
    "read_matrix",
    "sniff_matrix_format",
    "write_artifact",
    "write_matrix",
]

#: Tokens (lower-cased) that mark a missing entry in dense matrix files.
MISSING_TOKENS = {"", "nan", "na"}

FLOAT_FORMAT = "%.17g"


class ParseError(ValueError):
    """An input file could not be interpreted."""


def _data_rows(path) -> list[list[str]]:
    """Tokenized non-empty, non-comment lines of a delimited text file."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    rows = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        rows.append([t.strip() for t in line.split(",")] if "," in line
                    else line.split())
    return rows


def _is_number(token: str) -> bool:
    try:
        float(token)
    except ValueError:
        return token.lower() in MISSING_TOKENS
    return True


def _is_index(token: str) -> bool:
    try:
        value = float(token)
    except ValueError:
        return False
    return value == int(value) and value >= 1


def _strip_labels(rows, path):
    """Drop an optional header row and an optional leading label column."""
    if not rows:
        raise ParseError(f"{path}: empty matrix file")
    if not all(_is_number(t) for t in rows[0]):
        rows = rows[1:]
        if not rows:
            raise ParseError(f"{path}: no data rows after header")
    if all(not _is_number(r[0]) for r in rows):
        rows = [r[1:] for r in rows]
    return rows


def _parse_cell(token, path):
    if token.lower() in MISSING_TOKENS:
        return np.nan
    try:
        return float(token)
    except ValueError:
        raise ParseError(f"{path}: not a number: {token!r}") from None


def read_dense_matrix(path) -> DataMatrix:
    """A dense delimited matrix; ``nan``/``NA``/empty cells are missing."""
    rows = _strip_labels(_data_rows(path), path)
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise ParseError(f"{path}: rows have inconsistent lengths")
    values = np.array([[_parse_cell(t, path) for t in r] for r in rows])
    return DataMatrix.from_dense(values)


def read_coo_matrix(path, shape=None) -> DataMatrix:
    """1-indexed ``row col value`` triples; extra columns are ignored.

    The matrix shape is inferred from the largest indices unless given.
    """
    rows = _strip_labels(_data_rows(path), path)
    ii, jj, vv = [], [], []
    for r in rows:
        if len(r) < 3:
            raise ParseError(f"{path}: triple rows need at least 3 columns")
        if not (_is_index(r[0]) and _is_index(r[1])):
            raise ParseError(f"{path}: positions must be 1-indexed integers")
        value = _parse_cell(r[2], path)
        if np.isnan(value):
            raise ParseError(f"{path}: triple files list observed values only")
        ii.append(int(float(r[0])) - 1)
        jj.append(int(float(r[1])) - 1)
        vv.append(value)
    seen = set()
    for i, j in zip(ii, jj):
        if (i, j) in seen:
            raise ParseError(f"{path}: duplicate entry at ({i + 1}, {j + 1})")
        seen.add((i, j))
    if shape is None:
        shape = (max(ii) + 1, max(jj) + 1)
    try:
        return DataMatrix.from_coo(ii, jj, vv, shape=shape)
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from exc


def sniff_matrix_format(path) -> str:
    """Guess ``"coo"`` or ``"dense"`` from a matrix file's contents.

    A file whose data rows all have at least three columns with 1-indexed
    integers in the first two is treated as coordinate triples; anything
    else is dense. Pass an explicit format to the readers to override.
    """
    rows = _strip_labels(_data_rows(path), path)
    def coo_row(r):
        return len(r) >= 3 and _is_index(r[0]) and _is_index(r[1])
    return "coo" if all(coo_row(r) for r in rows) else "dense"


def read_matrix(path, fmt: str = "auto") -> DataMatrix:
    """Read a data matrix in either supported format.

    ``fmt`` is ``"dense"``, ``"coo"``, or ``"auto"`` to sniff.
    """
    if fmt == "auto":
        fmt = sniff_matrix_format(path)
    if fmt == "dense":
        return read_dense_matrix(path)
    if fmt == "coo":
        return read_coo_matrix(path)
    raise ParseError(f"unknown matrix format {fmt!r}")


def read_covariates(path) -> np.ndarray:
    """A fully observed dense covariate matrix."""
    dm = read_dense_matrix(path)
    if not dm.mask.all():
        raise ParseError(f"{path}: covariates may not have missing entries")
    return dm.values


_CONFIG_FIELDS = {f.name: f for f in dataclasses.fields(FitConfig)}


def _cast_config_value(name, raw):
    default = _CONFIG_FIELDS[name].default
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = raw.lower()
            if lowered in ("true", "1", "yes"):
                return True
            if lowered in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as exc:
        raise ParseError(f"config key {name}: {exc}") from None
    return raw


def read_config(path) -> FitConfig:
    """A ``key=value`` config file; keys mirror the fit configuration.

    Blank lines and ``#`` comments are skipped; every key is optional and
    unknown keys are errors.
    """
    overrides = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"{path}:{lineno}: expected key=value")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _CONFIG_FIELDS:
            raise ParseError(
                f"{path}:{lineno}: unknown config key {key!r}; "
                f"valid keys: {', '.join(sorted(_CONFIG_FIELDS))}"
            )
        if key in overrides:
            raise ParseError(f"{path}:{lineno}: duplicate config key {key!r}")
        overrides[key] = _cast_config_value(key, raw)
    try:
        return FitConfig(**overrides)
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from exc


def write_matrix(path, arr) -> None:
    """Write an array as a tab-delimited table with full float precision."""
    np.savetxt(path, np.atleast_2d(np.asarray(arr, dtype=float)),
               fmt=FLOAT_FORMAT, delimiter="\t")


def _slab_dict(slab) -> dict:
    if isinstance(slab, NormalSlab):
        return {"kind": "normal", "mean": slab.mean, "variance": slab.variance}
    if isinstance(slab, ExponentialSlab):
        return {"kind": "exponential", "scale": slab.scale}
    raise TypeError(f"unknown slab component {slab!r}")


def prior_summary(prior, model) -> dict | None:
    """A JSON-ready description of one factor's fitted prior."""
    if model is not None:
        return {"kind": "covariate", **model.describe()}
    if prior is None:
        return None
    if isinstance(prior, MixturePrior):
        return {
            "kind": "constant",
            "pi0": prior.pi0,
            "weights": list(prior.weights),
            "components": [_slab_dict(s) for s in prior.slabs],
        }
    raise TypeError(f"unknown prior {prior!r}")


def _config_dict(config: FitConfig) -> dict:
    out = dataclasses.asdict(config)
    out["precision"] = str(config.precision.value)
    return out


def write_artifact(out_dir, result: FitResult, config: FitConfig,
                   command: dict | None = None) -> Path:
    """Write a fit's artifacts into ``out_dir`` and return that path.

    Produces the four moment matrices, the ELBO trace, ``summary.json``
    (config echo, dimensions, priors, trace), and ``timings.txt``. Only the
    timings differ between identical re-runs.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    state = result.state
    write_matrix(out_dir / "Lbar.tsv", state.Lbar)
    write_matrix(out_dir / "Lbar2.tsv", state.Lbar2)
    write_matrix(out_dir / "Fbar.tsv", state.Fbar)
    write_matrix(out_dir / "Fbar2.tsv", state.Fbar2)
    write_matrix(out_dir / "elbo_trace.tsv", result.elbo_trace[:, None])
    summary = {
        "command": command or {},
        "config": _config_dict(config),
        "n": state.n,
        "p": state.p,
        "K": state.K,
        "elbo": result.elbo,
        "elbo_trace": result.elbo_trace.tolist(),
        "converged": result.converged,
        "pruned": list(result.pruned),
        "precision": {
            "structure": str(result.precision.structure.value),
            "values": np.asarray(result.precision.values).tolist(),
        },
        "priors_l": [prior_summary(p, m)
                     for p, m in zip(state.priors_l, state.models_l)],
        "priors_f": [prior_summary(p, m)
                     for p, m in zip(state.priors_f, state.models_f)],
    }
    (out_dir / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n"
    )
    lines = [f"sweep {i + 1}\t{sec:.6f}" for i, sec in
             enumerate(result.sweep_seconds)]
    lines.append(f"total\t{sum(result.sweep_seconds):.6f}")
    (out_dir / "timings.txt").write_text("\n".join(lines) + "\n")
    return out_dir


def load_artifact(artifact_dir):
    """Load a written artifact's moments and summary.

    Returns ``(Lbar, Fbar, summary)``; raises :class:`ParseError` if the
    directory does not hold a complete artifact.
    """
    artifact_dir = Path(artifact_dir)
    summary_path = artifact_dir / "summary.json"
    if not summary_path.is_file():
        raise ParseError(f"{artifact_dir}: not a fit artifact (no summary.json)")
    summary = json.loads(summary_path.read_text())
    if summary.get("K") == 0:
        return (np.zeros((summary["n"], 0)), np.zeros((summary["p"], 0)),
                summary)
    Lbar = read_dense_matrix(artifact_dir / "Lbar.tsv").values
    Fbar = read_dense_matrix(artifact_dir / "Fbar.tsv").values
    if Lbar.shape[1] != Fbar.shape[1]:
        raise ParseError(f"{artifact_dir}: moment matrices disagree on rank")
    return Lbar, Fbar, summary
