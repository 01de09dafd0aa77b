"""Command-line front end: fit, simulate, benchmark, and impute.

Every command is deterministic given its inputs and ``--seed``; re-running
one writes byte-identical artifacts except for the wall-clock timings
sidecar. Exit codes: 0 success, 2 usage error, 3 parse or dimension error,
4 numerical failure.
"""

import functools
import json
import sys
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from . import io
from . import simulate as sim
from .engine import FitConfig, fit as engine_fit
from .types import DataMatrix, SideInfo

EXIT_PARSE = 3
EXIT_NUMERIC = 4

#: Prior families per (scenario, method) used by ``bench``: the plain method
#: fits constant priors of the matching shape; the covariate method feeds the
#: scenario's side information into the weights (non-negative loadings for
#: the tiled scenarios, scale mixtures elsewhere).
BENCH_FAMILIES = {
    ("tiled", "ebmf"): ("exp_mix", "normal_mix"),
    ("tiled", "cebmf"): ("mlp_exp", "normal_mix"),
    ("shifted_tiled", "ebmf"): ("exp_mix", "normal_mix"),
    ("shifted_tiled", "cebmf"): ("mlp_exp", "normal_mix"),
    ("sparsity_driven", "ebmf"): ("normal_mix", "normal_mix"),
    ("sparsity_driven", "cebmf"): ("softmax_normal", "softmax_normal"),
    ("uninformative", "ebmf"): ("normal_mix", "normal_mix"),
    ("uninformative", "cebmf"): ("softmax_normal", "softmax_normal"),
}


def _translating(fn):
    """Map library failures onto the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except io.ParseError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_PARSE)
        except FloatingPointError as exc:
            click.echo(f"error: numerical failure: {exc}", err=True)
            sys.exit(EXIT_NUMERIC)
        except ValueError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_PARSE)

    return wrapper


@click.group()
def main():
    """Covariate-moderated empirical Bayes matrix factorization."""


def _load_side(row_covariates, col_covariates):
    X = io.read_covariates(row_covariates) if row_covariates else None
    Y = io.read_covariates(col_covariates) if col_covariates else None
    if X is None and Y is None:
        return None
    return SideInfo(X=X, Y=Y)


def _resolve_config(config_path, seed, **overrides):
    cfg = io.read_config(config_path) if config_path else FitConfig()
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    if overrides:
        cfg = replace(cfg, **overrides)
    return cfg


@main.command("fit")
@click.option("--matrix", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--row-covariates", type=click.Path(exists=True, dir_okay=False))
@click.option("--col-covariates", type=click.Path(exists=True, dir_okay=False))
@click.option("--config", type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=None, help="Overrides the config seed.")
@click.option("--matrix-format", type=click.Choice(["auto", "dense", "coo"]),
              default="auto", show_default=True)
@click.option("--out-dir", type=click.Path(file_okay=False), default="cebmf-fit",
              show_default=True)
@_translating
def cmd_fit(matrix, row_covariates, col_covariates, config, seed,
            matrix_format, out_dir):
    """Fit a factorization and write its artifacts."""
    Z = io.read_matrix(matrix, fmt=matrix_format)
    side = _load_side(row_covariates, col_covariates)
    cfg = _resolve_config(config, seed)
    result = engine_fit(Z, side=side, config=cfg)
    command = {
        "command": "fit",
        "matrix": str(matrix),
        "row_covariates": str(row_covariates) if row_covariates else None,
        "col_covariates": str(col_covariates) if col_covariates else None,
        "matrix_format": matrix_format,
    }
    io.write_artifact(out_dir, result, cfg, command)
    click.echo(f"fit: K={result.state.K} elbo={result.elbo:.6f} "
               f"converged={result.converged} -> {out_dir}")


@main.command("simulate")
@click.option("--scenario", required=True,
              type=click.Choice(sorted(sim.SCENARIOS)))
@click.option("--n", type=int, default=1000, show_default=True)
@click.option("--p", type=int, default=200, show_default=True)
@click.option("--tau", type=float, default=1.0, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out-dir", type=click.Path(file_okay=False), default="cebmf-sim",
              show_default=True)
@_translating
def cmd_simulate(scenario, n, p, tau, seed, out_dir):
    """Generate one benchmark scenario instance as delimited files."""
    spec = sim.ScenarioSpec(kind=scenario, n=n, p=p, tau=tau, seed=seed)
    inst = sim.generate(spec)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    io.write_matrix(out / "matrix.tsv", inst.Z.values)
    io.write_matrix(out / "L_true.tsv", inst.L_true)
    io.write_matrix(out / "F_true.tsv", inst.F_true)
    written = ["matrix.tsv", "L_true.tsv", "F_true.tsv"]
    if inst.side.X is not None:
        io.write_matrix(out / "row_covariates.tsv", inst.side.X)
        written.append("row_covariates.tsv")
    if inst.side.Y is not None:
        io.write_matrix(out / "col_covariates.tsv", inst.side.Y)
        written.append("col_covariates.tsv")
    echo = {"scenario": scenario, "n": n, "p": p, "K_true": spec.K_true,
            "tau": tau, "seed": seed, "files": written}
    (out / "scenario.json").write_text(json.dumps(echo, indent=2,
                                                  sort_keys=True) + "\n")
    click.echo(f"simulate: {scenario} n={n} p={p} seed={seed} -> {out}")


def _holdout_split(Z, frac, seed):
    """Mask a fraction of the observed cells; returns (train, held-out bool)."""
    rng = np.random.default_rng([seed, 0x9E37])
    held = (rng.uniform(size=Z.values.shape) < frac) & Z.mask
    train_vals = np.where(held, np.nan, np.where(Z.mask, Z.values, np.nan))
    return DataMatrix.from_dense(train_vals), held


@main.command("bench")
@click.option("--scenario", required=True,
              type=click.Choice(sorted(sim.SCENARIOS)))
@click.option("--seeds", type=int, default=10, show_default=True,
              help="Number of paired seeds (0..seeds-1).")
@click.option("--methods", default="ebmf,cebmf", show_default=True)
@click.option("--tau", "taus", type=float, multiple=True, default=(1.0,),
              show_default=True)
@click.option("--n", type=int, default=1000, show_default=True)
@click.option("--p", type=int, default=200, show_default=True)
@click.option("--k-max", type=int, default=None,
              help="Defaults to the scenario's true rank.")
@click.option("--max-sweeps", type=int, default=50, show_default=True)
@click.option("--holdout-frac", type=float, default=0.0, show_default=True,
              help="Held-out cell fraction; scores held-out prediction RMSE "
                   "instead of RMSE to the true factorization.")
@click.option("--out-dir", type=click.Path(file_okay=False),
              default="cebmf-bench", show_default=True)
@_translating
def cmd_bench(scenario, seeds, methods, taus, n, p, k_max, max_sweeps,
              holdout_frac, out_dir):
    """Paired-seed RMSE comparison; writes a long-format table."""
    method_list = [m.strip() for m in methods.split(",") if m.strip()]
    for m in method_list:
        if (scenario, m) not in BENCH_FAMILIES:
            raise click.UsageError(f"unknown method {m!r} (choose from ebmf, cebmf)")
    if not 0.0 <= holdout_frac < 1.0:
        raise click.UsageError("--holdout-frac must be in [0, 1)")
    rows = []
    for tau in taus:
        for seed in range(seeds):
            spec = sim.ScenarioSpec(kind=scenario, n=n, p=p, tau=tau, seed=seed)
            inst = sim.generate(spec)
            Z, held = (inst.Z, None)
            if holdout_frac > 0:
                Z, held = _holdout_split(inst.Z, holdout_frac, seed)
            for method in method_list:
                family_l, family_f = BENCH_FAMILIES[(scenario, method)]
                cfg = FitConfig(
                    K_max=k_max if k_max is not None else spec.K_true,
                    max_sweeps=max_sweeps,
                    prior_family_l=family_l,
                    prior_family_f=family_f,
                    seed=seed,
                )
                side = inst.side if method == "cebmf" else None
                result = engine_fit(Z, side=side, config=cfg)
                if held is None:
                    rmse = sim.rmse_truth(inst, result)
                else:
                    pred = result.state.fitted_values()[held]
                    diff = pred - inst.Z.values[held]
                    rmse = float(np.sqrt(np.mean(diff * diff)))
                rows.append((scenario, method, tau, seed, rmse))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["scenario\tmethod\ttau\tseed\trmse"]
    lines += [f"{s}\t{m}\t{t:g}\t{sd}\t{r:.17g}" for s, m, t, sd, r in rows]
    (out / "bench.tsv").write_text("\n".join(lines) + "\n")
    for method in method_list:
        vals = [r for s, m, t, sd, r in rows if m == method]
        click.echo(f"bench: {method} median rmse {np.median(vals):.6f} "
                   f"over {len(vals)} fits")
    click.echo(f"bench: table -> {out / 'bench.tsv'}")


def _read_targets(path, Z):
    if path is None:
        targets = np.argwhere(~Z.mask)
        if targets.size == 0:
            targets = np.argwhere(np.ones_like(Z.mask))
        return targets
    rows = io._data_rows(path)
    out = []
    for r in rows:
        if len(r) < 2 or not (io._is_index(r[0]) and io._is_index(r[1])):
            raise io.ParseError(f"{path}: targets are 1-indexed 'row col' pairs")
        i, j = int(float(r[0])) - 1, int(float(r[1])) - 1
        if not (0 <= i < Z.n and 0 <= j < Z.p):
            raise io.ParseError(f"{path}: target ({i + 1}, {j + 1}) out of range")
        out.append((i, j))
    if not out:
        raise io.ParseError(f"{path}: no targets")
    return np.array(out)


@main.command("impute")
@click.option("--matrix", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--artifact-dir", type=click.Path(file_okay=False),
              help="A previous fit's output directory.")
@click.option("--config", type=click.Path(exists=True, dir_okay=False),
              help="Fit fresh with this config instead of loading an artifact.")
@click.option("--row-covariates", type=click.Path(exists=True, dir_okay=False))
@click.option("--col-covariates", type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=None)
@click.option("--targets", type=click.Path(exists=True, dir_okay=False),
              help="1-indexed 'row col' pairs; defaults to all missing cells.")
@click.option("--truth", type=click.Path(exists=True, dir_okay=False),
              help="Dense matrix with true values for scoring the targets.")
@click.option("--matrix-format", type=click.Choice(["auto", "dense", "coo"]),
              default="auto", show_default=True)
@click.option("--out-dir", type=click.Path(file_okay=False),
              default="cebmf-impute", show_default=True)
@_translating
def cmd_impute(matrix, artifact_dir, config, row_covariates, col_covariates,
               seed, targets, truth, matrix_format, out_dir):
    """Predict matrix cells from a fitted artifact or a fresh fit."""
    if artifact_dir is None and config is None:
        raise click.UsageError("provide --artifact-dir or --config")
    Z = io.read_matrix(matrix, fmt=matrix_format)
    if artifact_dir is not None:
        Lbar, Fbar, _ = io.load_artifact(artifact_dir)
        if Lbar.shape[0] != Z.n or Fbar.shape[0] != Z.p:
            raise ValueError(
                f"artifact is {Lbar.shape[0]} x {Fbar.shape[0]}, "
                f"matrix is {Z.n} x {Z.p}"
            )
        fitted = Lbar @ Fbar.T
    else:
        side = _load_side(row_covariates, col_covariates)
        cfg = _resolve_config(config, seed)
        result = engine_fit(Z, side=side, config=cfg)
        fitted = result.state.fitted_values()
    cells = _read_targets(targets, Z)
    preds = fitted[cells[:, 0], cells[:, 1]]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"{i + 1}\t{j + 1}\t{v:.17g}"
             for (i, j), v in zip(cells, preds)]
    (out / "predictions.tsv").write_text("\n".join(lines) + "\n")
    click.echo(f"impute: {len(preds)} predictions -> {out / 'predictions.tsv'}")
    if truth is not None:
        truth_dm = io.read_dense_matrix(truth)
        if truth_dm.values.shape != (Z.n, Z.p):
            raise ValueError("truth matrix dimensions do not match the data")
        have = truth_dm.mask[cells[:, 0], cells[:, 1]]
        if not have.any():
            raise ValueError("truth matrix has no values at the targets")
        diff = preds[have] - truth_dm.values[cells[have, 0], cells[have, 1]]
        rmse = float(np.sqrt(np.mean(diff * diff)))
        (out / "rmse.txt").write_text(f"{rmse:.17g}\n")
        click.echo(f"impute: rmse {rmse:.6f} over {int(have.sum())} scored cells")


if __name__ == "__main__":
    main()
