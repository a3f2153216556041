"""Command-line front end.

Exit codes: 0 success, 2 configuration/usage error, 3 data error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from . import evaluation as ev
from . import mlp as mlp_mod
from .combat import fit_normative_model, pairwise_harmonize
from .config import RunConfig
from .data_model import load_cohort, save_cohort
from .errors import ConfigError, RobustComBatError
from .filters import FilterSpec, Method
from .synth import build_experiment_grid, build_universe, write_grid

log = logging.getLogger("robust_combat")

LOCK_NAME = ".robust_combat.lock"


def _float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="INI config file")
    parser.add_argument("--seed", type=int, default=default, help="master seed")
    parser.add_argument("--out", default=default, help="output directory")
    parser.add_argument("--threads", type=int, default=default, help="worker threads")
    parser.add_argument("--print-config", action="store_true",
                        default=argparse.SUPPRESS if suppress else False,
                        help="print the resolved configuration and exit")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="robust-combat",
        description="Reference-anchored ComBat harmonization with outlier filtering.")
    _global_flags(parser, suppress=False)
    parent = argparse.ArgumentParser(add_help=False)
    _global_flags(parent, suppress=True)
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("simulate", parents=[parent], help="write the synthetic site grid")
    p.add_argument("--ratios", type=_float_list, help="disease ratios, e.g. 0.03,0.5")
    p.add_argument("--sites-per-ratio", type=int)
    p.add_argument("--n-subjects", type=int)

    p = sub.add_parser("harmonize", parents=[parent], help="harmonize one site onto a reference")
    p.add_argument("--site", required=True, help="site CSV")
    p.add_argument("--reference", help="reference CSV (default: [paths] reference)")
    p.add_argument("--filter", default="none", help="filter name, optionally name:threshold")
    p.add_argument("--model", help="trained detector (.npz) for --filter mlp")
    p.add_argument("--truth", help="ground-truth CSV; logs STD_MAE against it")

    p = sub.add_parser("train-mlp", parents=[parent], help="train the outlier detector")

    p = sub.add_parser("evaluate", parents=[parent], help="run the evaluation sweeps")
    p.add_argument("--experiment", choices=["prevalence", "size", "bootstrap", "all"],
                   default="prevalence")
    p.add_argument("--filters", help="comma-separated filters (default: [filters] methods)")
    p.add_argument("--model", help="trained detector; trained on the fly when omitted")

    sub.add_parser("report", parents=[parent], help="render SVG figures and tables")
    return parser


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    for key in ("seed", "out", "threads"):
        value = getattr(args, key, None)
        if value is not None:
            cfg.set("run", key, value)
    if args.command == "simulate":
        if args.ratios:
            cfg.set("grid", "ratios", args.ratios)
        if args.sites_per_ratio:
            cfg.set("grid", "sites_per_ratio", args.sites_per_ratio)
        if args.n_subjects:
            cfg.set("grid", "n_subjects", args.n_subjects)
    if args.command == "evaluate" and args.filters:
        cfg.set("filters", "methods", tuple(f.strip() for f in args.filters.split(",")))
    cfg.validate()
    return cfg


@contextlib.contextmanager
def _locked(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(out / LOCK_NAME))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise ConfigError(f"output directory {out} is in use by another run") from None
    try:
        yield
    finally:
        lock.release()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- commands ------------------------------------------------------------------

def cmd_simulate(cfg: RunConfig, args) -> int:
    g = cfg["grid"]
    universe = build_universe(cfg.universe_config())
    grid = build_experiment_grid(universe.eval_pool, universe.model, g["ratios"],
                                 g["sites_per_ratio"], g["n_subjects"], cfg.seed,
                                 g["gamma_scale"], g["delta_range"])
    out = cfg.out
    save_cohort(universe.reference, out / "reference.csv")
    save_cohort(universe.eval_pool, out / "pool.csv")
    manifest = write_grid(grid, out / "grid", cfg.seed, cfg.hash())
    print(f"wrote {len(grid)} sites; manifest {manifest}")
    return 0


def _reference_path(cfg: RunConfig, args) -> Path:
    path = args.reference or cfg["paths"]["reference"]
    if not path:
        raise ConfigError("no reference cohort: pass --reference or set [paths] reference")
    return Path(path)


def cmd_harmonize(cfg: RunConfig, args, parser) -> int:
    spec = FilterSpec.parse(args.filter)
    model_path = args.model or cfg["paths"]["model"]
    if spec.method is Method.MLP:
        if not model_path:
            parser.error("--filter mlp requires --model")
        spec = FilterSpec(Method.MLP, spec.threshold, detector=mlp_mod.load_network(model_path))
    reference = load_cohort(_reference_path(cfg, args))
    site = load_cohort(args.site, taxonomy=reference.taxonomy,
                       covariate_names=reference.covariate_names)
    model = fit_normative_model(reference)
    result = pairwise_harmonize(site, filter=spec, model=model)
    stem = Path(args.site).stem
    out = cfg.out / "harmonized"
    out.mkdir(parents=True, exist_ok=True)
    save_cohort(result.harmonized, out / f"{stem}_harmonized.csv")
    result.effects.to_json(out / f"{stem}_effects.json", indent=1)
    result.mask.to_csv(out / f"{stem}_mask.csv", site.subject_ids, site.taxonomy.feature_names)
    ref_std = ev.reference_std(reference)
    change = ev.std_mae(result.harmonized, site, ref_std, skip_zero_std=True).mean
    log.info("%s: filter %s, STD_MAE vs input %.4f", stem, spec.label, change)
    if args.truth:
        truth = load_cohort(args.truth, taxonomy=reference.taxonomy,
                            covariate_names=reference.covariate_names)
        err = ev.std_mae(result.harmonized, truth, ref_std, skip_zero_std=True).mean
        log.info("%s: STD_MAE vs ground truth %.4f", stem, err)
    n_excl = int((~result.mask.as_matrix(site.taxonomy.n_features)).any(axis=1).sum())
    print(f"{stem}: harmonized {site.n_subjects} subjects with {spec.label}; "
          f"{n_excl} subject(s) had values excluded from estimation")
    return 0


def _train(cfg: RunConfig, universe, seed: int | None = None):
    m = cfg["mlp"]
    net_cfg = cfg.network_config(universe.reference.taxonomy.n_features, seed)
    return ev.train_detector(universe.train_pool, universe.val_pool, universe.model, net_cfg,
                             m["train_sites_per_ratio"], m["val_sites_per_ratio"],
                             cfg["grid"]["n_subjects"])


def cmd_train_mlp(cfg: RunConfig, args) -> int:
    universe = build_universe(cfg.universe_config())
    state, history = _train(cfg, universe)
    mlp_mod.save_network(state, cfg.out / "model.npz")
    _write_json(cfg.out / "training_log.json",
                {"config_hash": cfg.hash(), "model_hash": state.param_hash(),
                 **history.to_dict()})
    print(f"model hash {state.param_hash()} (best epoch {history.best_epoch})")
    return 0


def cmd_evaluate(cfg: RunConfig, args) -> int:
    specs = cfg.filter_specs()
    threads = int(cfg["run"]["threads"])
    meta = {"config_hash": cfg.hash(), "seed": cfg.seed}
    kinds = ["prevalence", "size", "bootstrap"] if args.experiment == "all" else [args.experiment]
    out = cfg.out / "reports"
    out.mkdir(parents=True, exist_ok=True)
    universe = build_universe(cfg.universe_config())
    ref_std = ev.reference_std(universe.reference)
    detector = None
    if any(s.method is Method.MLP for s in specs) and set(kinds) - {"bootstrap"}:
        model_path = args.model or cfg["paths"]["model"]
        detector = mlp_mod.load_network(model_path) if model_path else _train(cfg, universe)[0]
    g = cfg["grid"]
    for kind in kinds:
        if kind == "prevalence":
            grid = build_experiment_grid(universe.eval_pool, universe.model, g["ratios"],
                                         g["sites_per_ratio"], g["n_subjects"], cfg.seed,
                                         g["gamma_scale"], g["delta_range"])
            report = ev.run_experiment(grid, specs, model=universe.model, detector=detector,
                                       ref_std=ref_std, threads=threads, metadata=meta)
        elif kind == "size":
            s = cfg["size_sweep"]
            report = ev.run_size_sweep(universe.eval_pool, universe.model, ref_std, s["ratios"],
                                       s["sizes"], specs, s["sites_per_cell"], cfg.seed,
                                       detector, threads, meta)
        else:
            b = cfg["bootstrap"]
            boot = build_universe(cfg.universe_config(b["profiles"]))
            boot_filters = [s for s in specs if s.method in (Method.NONE, Method.MLP)] \
                or [FilterSpec("none")]
            report = ev.run_bootstrap(
                boot.eval_pool, boot.reference, boot.model, b["n_iterations"],
                b["heldout_per_iter"], boot_filters, cfg.seed, b["sites_per_family"],
                g["n_subjects"], cfg.network_config(boot.reference.taxonomy.n_features),
                b["train_sites_per_ratio"], b["val_sites_per_ratio"],
                cfg["universe"]["noise_scale"], meta)
        report.to_json(out / f"{kind}.json")
        report.write_csv(out)
        n_fail = len(report.failures())
        print(f"{kind}: {len(report.results)} site evaluations, {n_fail} failed")
    return 0


def cmd_report(cfg: RunConfig, args) -> int:
    from .plots import report_figures

    reports = sorted((cfg.out / "reports").glob("*.json"))
    if not reports:
        raise ConfigError(f"no reports under {cfg.out / 'reports'}; run `evaluate` first")
    fig_dir = cfg.out / "figures"
    for path in reports:
        report = ev.EvaluationReport.load(path)
        report.write_csv(cfg.out / "tables")
        figures = report_figures(report, fig_dir)
        print(f"{path.stem}: {len(figures)} figure(s) in {fig_dir}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _load_config(args)
    except RobustComBatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    logging.basicConfig(level=str(cfg["run"]["log_level"]).upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.print_config:
        sys.stdout.write(cfg.to_ini())
        return 0
    if args.command is None:
        parser.print_help()
        return 2
    commands = {
        "simulate": lambda: cmd_simulate(cfg, args),
        "harmonize": lambda: cmd_harmonize(cfg, args, parser),
        "train-mlp": lambda: cmd_train_mlp(cfg, args),
        "evaluate": lambda: cmd_evaluate(cfg, args),
        "report": lambda: cmd_report(cfg, args),
    }
    try:
        with _locked(cfg.out):
            return commands[args.command]()
    except RobustComBatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
