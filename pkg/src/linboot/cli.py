"""Command-line pipeline: simulate, fit, sensitivity, bootstrap, metrics, report.

Each command reads the artifacts of the previous one from a working
directory. Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import logging
import multiprocessing
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import data_io
from .bootstrap import MODES, _describe, run_bootstrap
from .config import RunConfig, describe_keys, dump_config, load_config, parse_overrides
from .derivatives import KLObjective
from .errors import ArchiveError, DataError, NotStrictMinimumError, NumericalError
from .metrics import all_pairs, cocluster_sd
from .model import cluster_probs
from .optimize import multi_restart
from .sensitivity import SensitivityMatrix, sensitivity_for

logger = logging.getLogger("linboot")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
COMMANDS = ("simulate", "fit", "sensitivity", "bootstrap", "metrics", "report")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def _require(path: Path, what: str, command: str) -> Path:
    if not path.exists():
        raise ArchiveError(f"{what} not found at {path}; run `linboot {command}` first")
    return path


def _load_data(cfg: RunConfig, workdir):
    path = _require(cfg.path(workdir, "data"), "expression data", "simulate")
    return data_io.load_csv(path, cfg.degree, cfg.df)


def _load_archive(cfg: RunConfig, workdir, data):
    path = _require(cfg.path(workdir, "fit"), "fit archive", "fit")
    return data_io.load_fit(path, data)


def _pair_subset(cfg: RunConfig, n_genes: int) -> np.ndarray:
    if cfg.pair_genes >= n_genes:
        genes = np.arange(n_genes)
    else:
        rng = np.random.default_rng([cfg.master_seed, 2])
        genes = np.sort(rng.choice(n_genes, size=cfg.pair_genes, replace=False))
    return all_pairs(genes)


def _print_table(title, header, rows, out):
    out.write(f"\n# {title}\n")
    out.write(",".join(header) + "\n")
    for row in rows:
        out.write(",".join(_cell(v) for v in row) + "\n")


def _cell(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _emit(cfg, workdir, name, title, header, rows, out):
    data_io.write_table(Path(workdir) / cfg.report_dir / name, header,
                        [[data_io.fmt(v) if isinstance(v, float) else v for v in row]
                         for row in rows])
    _print_table(title, header, rows, out)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_simulate(cfg: RunConfig, workdir, out):
    times = data_io.default_times(cfg.sim_times, cfg.sim_replicates)
    data, truth = data_io.simulate(
        cfg.sim_genes, cfg.sim_clusters, times, cfg.priors(), cfg.sim_separation,
        seed=cfg.sim_seed, noise_sd=cfg.sim_noise_sd, degree=cfg.degree, df=cfg.df)
    data_io.save_csv(data, cfg.path(workdir, "data"))
    data_io.save_truth(truth, cfg.path(workdir, "truth"))
    out.write(f"simulated {data.n_genes} genes x {data.n_obs} observations "
              f"({cfg.sim_clusters} true clusters) -> {cfg.path(workdir, 'data')}\n")


def cmd_fit(cfg: RunConfig, workdir, out):
    data = _load_data(cfg, workdir)
    if cfg.K > data.n_genes:
        raise DataError(f"K={cfg.K} exceeds the number of genes ({data.n_genes})")
    objective = KLObjective(data, cfg.priors(), cfg.K)
    if cfg.workers > 1 and cfg.n_restarts > 1:
        mp = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(cfg.workers, mp_context=mp,
                                 initializer=_import_package) as pool:
            fit = multi_restart(objective, None, cfg.n_restarts, cfg.master_seed,
                                cfg.schedule(), pool=pool)
    else:
        objective.warm_up()
        fit = multi_restart(objective, None, cfg.n_restarts, cfg.master_seed,
                            cfg.schedule())
    archive = data_io.make_archive(fit, data, cfg.priors(), cfg.K)
    data_io.save_fit(archive, cfg.path(workdir, "fit"))
    zeta = cluster_probs(fit.eta_star, data, cfg.priors())
    occupied = int(np.sum(zeta.sum(axis=0) > 0.5))
    out.write(f"fit: KL={fit.kl_value:.10g} grad_inf={fit.grad_norm:.2e} "
              f"occupied clusters={occupied} restarts={cfg.n_restarts} "
              f"seconds={fit.wall_time:.2f} -> {cfg.path(workdir, 'fit')}\n")


def _import_package():
    import linboot  # noqa: F401  (float64 in spawned workers)


def cmd_sensitivity(cfg: RunConfig, workdir, out):
    data = _load_data(cfg, workdir)
    archive = _load_archive(cfg, workdir, data)
    if not archive.fit.get("converged", False):
        raise NotStrictMinimumError(
            "stored fit is not a strict local minimum: the optimizer did not converge "
            f"(grad_inf={archive.fit.get('grad_norm')}); refit before computing S")
    objective = KLObjective(data, archive.priors, archive.n_clusters)
    objective.warm_up(cross=True)
    sens = sensitivity_for(objective, archive.eta_star)
    archive.S = np.asarray(sens.S)
    archive.sensitivity = sens.metadata()
    data_io.save_fit(archive, cfg.path(workdir, "fit"))
    out.write(f"sensitivity: S is {sens.S.shape[0]}x{sens.S.shape[1]}, "
              f"residual={sens.residual:.2e}, seconds={sens.seconds:.3f}\n")


def cmd_bootstrap(cfg: RunConfig, workdir, out):
    data = _load_data(cfg, workdir)
    archive = _load_archive(cfg, workdir, data)
    sens = None
    if "linear" in cfg.modes:
        if archive.S is None:
            raise ArchiveError("fit archive has no sensitivity matrix; "
                               "run `linboot sensitivity` first")
        sens = SensitivityMatrix(S=archive.S, eta_star=archive.eta_star,
                                 seconds=float(archive.sensitivity.get("seconds", np.nan)))
    run = run_bootstrap(cfg.bootstrap(), data, archive.priors, archive.n_clusters,
                        archive.eta_star, sens)
    data_io.save_replicates(cfg.path(workdir, "replicates"), run.replicates)
    data_io.save_timings(cfg.path(workdir, "timings"), run.replicates)
    data_io.save_zetas(cfg.path(workdir, "zetas"), run.replicates)
    for mode, s in run.summary().items():
        out.write(f"bootstrap {mode}: n={s['n']} failed={s['n_failed']} "
                  f"median_seconds={s['median_seconds']:.4g}\n")


def _metric_tables(cfg, workdir, data, archive, rows, out):
    modes = [m for m in MODES if any(r["mode"] == m for r in rows)]
    summary = []
    for mode in modes:
        ok = [r for r in rows if r["mode"] == mode and r["converged"]]
        for metric in ("fm", "nmi"):
            d = _describe([r[metric] for r in ok])
            if d:
                summary.append([mode, metric, len(ok)] + [float(d[k]) for k in
                               ("mean", "sd", "min", "q05", "q25", "median", "q75",
                                "q95", "max")])
    _emit(cfg, workdir, "fm_nmi_summary.csv", "FM / NMI distribution by mode",
          ["mode", "metric", "n", "mean", "sd", "min", "q05", "q25", "median", "q75",
           "q95", "max"], summary, out)

    zpath = cfg.path(workdir, "zetas")
    if not zpath.exists():
        out.write(f"\n# co-clustering SD: skipped ({zpath} not found)\n")
        return
    zetas = data_io.load_zetas(zpath)
    ok_keys = {(r["replicate"], r["mode"]) for r in rows if r["converged"]}
    pairs = _pair_subset(cfg, data.n_genes)
    base = cluster_probs(archive.eta_star, data, archive.priors)
    stats = {}
    for mode in modes:
        reps = [z for key, z in sorted(zetas.items()) if key[1] == mode and key in ok_keys]
        if len(reps) >= 2:
            stats[mode] = cocluster_sd(reps, pairs, base)
    if not stats:
        out.write("\n# co-clustering SD: skipped (fewer than 2 replicates per mode)\n")
        return
    sds = np.column_stack([stats[m].sd for m in stats])
    keep = np.flatnonzero(sds.max(axis=1) > cfg.sd_threshold)
    base_prob = next(iter(stats.values())).base_prob
    table = [[int(pairs[p, 0]), int(pairs[p, 1]), data.gene_ids[pairs[p, 0]],
              data.gene_ids[pairs[p, 1]], float(base_prob[p])]
             + [float(v) for v in sds[p]] for p in keep]
    _emit(cfg, workdir, "cocluster_sd.csv",
          f"co-clustering SD, pairs with max SD > {cfg.sd_threshold:g} "
          f"({keep.size} of {len(pairs)})",
          ["g1", "g2", "gene1", "gene2", "base_prob"] + [f"sd_{m}" for m in stats],
          table, out)


def cmd_metrics(cfg: RunConfig, workdir, out):
    data = _load_data(cfg, workdir)
    archive = _load_archive(cfg, workdir, data)
    rows = data_io.load_replicates(
        _require(cfg.path(workdir, "replicates"), "replicate table", "bootstrap"))
    _metric_tables(cfg, workdir, data, archive, rows, out)


def cmd_report(cfg: RunConfig, workdir, out):
    data = _load_data(cfg, workdir)
    archive = _load_archive(cfg, workdir, data)
    rows = data_io.load_replicates(
        _require(cfg.path(workdir, "replicates"), "replicate table", "bootstrap"))
    ok = {(r["replicate"], r["mode"]) for r in rows if r["converged"]}

    tpath = cfg.path(workdir, "timings")
    times = {m: [] for m in MODES}
    if tpath.exists():
        for t in data_io.read_table(tpath):
            if (int(t["replicate"]), t["mode"]) in ok:
                times[t["mode"]].append(float(t["seconds"]))
    med = [float(np.median(times[m])) if times[m] else float("nan")
           for m in ("cold", "warm", "linear")]
    s_seconds = float((archive.sensitivity or {}).get("seconds", float("nan")))
    _emit(cfg, workdir, "timing.csv", "median seconds per bootstrap sample",
          ["cold", "warm", "linear", "sensitivity"], [med + [s_seconds]], out)

    _metric_tables(cfg, workdir, data, archive, rows, out)

    by_rep: dict = {}
    for r in rows:
        if r["converged"]:
            by_rep.setdefault(r["replicate"], {})[r["mode"]] = r["kl"]
    kl_rows = [[rep, *(float(v.get(m, np.nan)) for m in MODES)]
               for rep, v in sorted(by_rep.items())]
    lin = np.array([row[1] for row in kl_rows], dtype=float)
    warm = np.array([row[2] for row in kl_rows], dtype=float)
    both = np.isfinite(lin) & np.isfinite(warm)
    if both.any():
        diff = lin[both] - warm[both]
        dist = []
        for label, v in (("linear", lin[both]), ("warm", warm[both]),
                         ("linear_minus_warm", diff)):
            d = _describe(v)
            dist.append([label, int(v.size)] + [float(d[k]) for k in
                        ("mean", "min", "q25", "median", "q75", "max")])
        _emit(cfg, workdir, "kl_comparison.csv",
              f"weighted KL at linear vs warm estimates "
              f"(linear >= warm in {int(np.sum(diff >= 0))} of {diff.size})",
              ["estimate", "n", "mean", "min", "q25", "median", "q75", "max"], dist, out)
    else:
        out.write("\n# KL comparison: skipped (set evaluate_linear_kl: true "
                  "and include linear and warm modes)\n")

    diag = []
    for mode in MODES:
        mine = [r for r in rows if r["mode"] == mode]
        if mine:
            diag.append([mode, len(mine), sum(not r["converged"] for r in mine)])
    _emit(cfg, workdir, "diagnostics.csv", "replicate diagnostics",
          ["mode", "replicates", "not_converged"], diag, out)


HANDLERS = {"simulate": cmd_simulate, "fit": cmd_fit, "sensitivity": cmd_sensitivity,
            "bootstrap": cmd_bootstrap, "metrics": cmd_metrics, "report": cmd_report}

HELP = {
    "simulate": "draw a synthetic dataset and its ground truth",
    "fit": "multi-restart fit; writes the fit archive",
    "sensitivity": "compute the weight-sensitivity matrix S into the fit archive",
    "bootstrap": "run linear / warm / cold bootstrap replicates",
    "metrics": "FM/NMI summaries and co-clustering SD table",
    "report": "all summary tables: timings, metrics, KL comparison, diagnostics",
}


def build_parser() -> argparse.ArgumentParser:
    epilog = ("config keys (default, provenance; [published] = constant of the published "
              "method, [artifact] = choice made here):\n" + describe_keys()
              + "\n\nenvironment: LINBOOT_WORKERS (worker count), "
                "LINBOOT_SCRATCH (temporary directory for atomic writes)\n"
                "exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure")
    parser = _Parser(prog="linboot", description=__doc__.splitlines()[0],
                     epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--config", help="YAML file of config keys")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config key (repeatable)")
    parser.add_argument("--workdir", default=".", help="directory holding artifacts")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="command",
                                parser_class=_Parser)
    for name in COMMANDS:
        sub.add_parser(name, help=HELP[name], description=HELP[name])
    sub.add_parser("show-config", help="print the resolved configuration")
    return parser


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required")
        cfg = load_config(args.config, parse_overrides(args.overrides))
    except (UsageError, ValueError, FileNotFoundError) as exc:
        parser.print_usage(sys.stderr)
        sys.stderr.write(f"linboot: error: {exc}\n")
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "show-config":
        out.write(dump_config(cfg))
        return EXIT_OK
    workdir = Path(args.workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    try:
        HANDLERS[args.command](cfg, workdir, out)
    except DataError as exc:
        sys.stderr.write(f"linboot: data error: {exc}\n")
        return EXIT_DATA
    except NumericalError as exc:
        sys.stderr.write(f"linboot: numerical failure: {exc}\n")
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
