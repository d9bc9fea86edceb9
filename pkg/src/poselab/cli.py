"""Command-line entry point: gen-data, train, group, diagnose, evaluate, report.

Exit codes: 0 success, 2 usage or config error, 3 data error, 4 numerical
failure.  Progress goes to stdout, failure reasons to stderr.
"""

from __future__ import annotations

import argparse
import json
import subprocess
import sys
import time
from pathlib import Path

from . import __version__
from .checkpoint import load_checkpoint
from .diagnostics import (contention_stats, diagnostic_plan, read_timeseries, replay_collect,
                          window_means, write_reports)
from .errors import ConfigError, DataError
from .grouping import (RoutingTable, allocate_capacity, build_routing, read_difficulty,
                       read_routing, write_routing)
from .numgrad import NumericalError
from .synthdata import (SPLIT_CODES, generate_dataset, make_category_specs, read_dataset,
                        write_dataset, dataset_bytes)
from .trainer import EvalReport, TrainConfig, evaluate_checkpoint, pilot_scorer, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SCHEMA_VERSION = 1

GEN_REQUIRED = ("K", "heterogeneity", "seed", "N", "per_category")


def _version() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}-g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True))
    tmp.replace(path)


def load_config(path, required=()) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    if "v" not in cfg:
        raise ConfigError("config is missing required key 'v'")
    if cfg["v"] != SCHEMA_VERSION:
        raise ConfigError(f"config schema version {cfg['v']!r} unsupported, expected {SCHEMA_VERSION}")
    for key in required:
        if key not in cfg:
            raise ConfigError(f"config is missing required key {key!r}")
    return cfg


def _read_data(path):
    try:
        return read_dataset(path)
    except FileNotFoundError:
        raise DataError(f"dataset {path} not found") from None


# --------------------------------------------------------------------------- #
# Subcommands
# --------------------------------------------------------------------------- #

def cmd_gen_data(args, man: dict) -> None:
    cfg = load_config(args.config, GEN_REQUIRED)
    split = args.split or cfg.get("split", "train")
    if split not in SPLIT_CODES:
        raise ConfigError(f"unknown split {split!r}")
    try:
        specs = make_category_specs(int(cfg["K"]), cfg["heterogeneity"], int(cfg["seed"]))
        d = generate_dataset(specs, int(cfg["per_category"]), int(cfg["N"]), float(cfg.get("sigma", 0.0)),
                             int(cfg["seed"]), split, int(cfg.get("G", 3)), cfg.get("scale_mode", "isotropic"),
                             float(cfg.get("max_rotation_deg", 180.0)))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    write_dataset(d, args.out)
    man["config"] = cfg
    man["seeds"] = {"data": int(cfg["seed"])}
    man["outputs"] = [str(args.out)]
    crc = int.from_bytes(dataset_bytes(d)[-4:], "little")
    for c, n in sorted(d.counts().items()):
        print(f"category {c}: {n} instances")
    print(f"wrote {args.out} ({len(d.instances)} instances, crc32 {crc:08x})")


def _routing_for(tcfg: TrainConfig, args, data, man) -> RoutingTable:
    source = args.routing or tcfg.routing
    if source == "none":
        return RoutingTable.shared(range(data.K))
    if source == "file":
        path = args.routing_file or tcfg.routing_path
        if not path:
            raise ConfigError("routing 'file' needs --routing-file or routing_path")
        return read_routing(path)
    diff_path = args.difficulty or tcfg.difficulty_path
    if not diff_path:
        raise ConfigError(f"routing {source!r} needs a difficulty file")
    d = read_difficulty(diff_path)
    pilot = None
    if source == "quantile+refine":
        if not args.val_data:
            raise ConfigError("refinement needs --val-data for the pilot evaluation")
        val = _read_data(args.val_data)
        G = tcfg.G
        pilot = pilot_scorer(tcfg, data, val, lambda gm: allocate_capacity(gm, d.difficulty, G), tcfg.seed)
    table = build_routing(d, tcfg.G, source, tcfg.seed, pilot, reference=str(diff_path))
    man["routing"] = table.to_json()
    return table


def cmd_train(args, man: dict) -> None:
    raw = load_config(args.config)
    tcfg = TrainConfig.from_json(raw)
    data = _read_data(args.data)
    routing = _routing_for(tcfg, args, data, man)
    eval_data = _read_data(args.eval_data) if args.eval_data else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    man["config"] = tcfg.to_json()
    man["seeds"] = {"train": tcfg.seed}
    write_routing(routing, out / "routing.json")
    res = train(tcfg, data, routing, out, progress=print, eval_data=eval_data)
    man["outputs"] = [str(p) for p in res.checkpoints] + [str(out / "metrics.csv")]


def cmd_group(args, man: dict) -> None:
    d = read_difficulty(args.difficulty)
    method = "random" if args.random else ("quantile+refine" if args.refine else "quantile")
    pilot = None
    if args.refine:
        if not args.pilot_data:
            raise ConfigError("--refine needs --pilot-data")
        tcfg = TrainConfig.from_json(load_config(args.config)) if args.config else TrainConfig(seed=args.seed)
        train_data = _read_data(args.pilot_data)
        val = _read_data(args.val_data) if args.val_data else train_data
        pilot = pilot_scorer(tcfg, train_data, val,
                             lambda gm: allocate_capacity(gm, d.difficulty, args.G), args.seed)
    try:
        table = build_routing(d, args.G, method, args.seed, pilot, reference=str(args.difficulty))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    write_routing(table, Path(args.out))
    man["seeds"] = {"grouping": args.seed}
    man["outputs"] = [str(args.out)]
    sizes = [sum(1 for g in table.gamma.values() if g == k) for k in range(1, table.G + 1)]
    print(f"groups {sizes} capacities {list(table.capacity)}")
    for step in table.provenance.get("refinement", []):
        print(f"boundary {step['boundary']}: category {step['category']} "
              f"s_g={step['s_g']:.6g} s_g+1={step['s_g1']:.6g} moved={step['moved']}")


def cmd_diagnose(args, man: dict) -> None:
    rundir = Path(args.rundir)
    ckpts = sorted((rundir / "checkpoints").glob("epoch_*.ckpt"))
    if not ckpts:
        raise ConfigError(f"no checkpoints under {rundir / 'checkpoints'}")
    if args.last:
        ckpts = ckpts[-args.last:]
    data = _read_data(args.data)
    plan = diagnostic_plan(data, args.subset_seed, args.batches, args.batch_size)
    reports = []
    for p in ckpts:
        table = replay_collect(load_checkpoint(p), data, plan)
        reports.append(contention_stats(table, args.weighting))
        print(f"replayed {p.name}")
    written = write_reports(reports, args.out)
    man["seeds"] = {"subset": args.subset_seed}
    man["outputs"] = [str(p) for p in written]


def cmd_evaluate(args, man: dict) -> None:
    try:
        thresholds = tuple(float(x) for x in args.thresholds.split(","))
    except ValueError:
        raise ConfigError(f"bad thresholds {args.thresholds!r}") from None
    if len(thresholds) != 3:
        raise ConfigError("thresholds are 'degrees,translation,scale'")
    data = _read_data(args.data)
    try:
        rep = evaluate_checkpoint(args.ckpt, data, thresholds)
    except FileNotFoundError:
        raise DataError(f"checkpoint {args.ckpt} not found") from None
    _write_json(Path(args.out), rep.to_json())
    man["outputs"] = [str(args.out)]
    for c in sorted(rep.rate):
        print(f"category {c}: success {rep.rate[c]:.3f} over {rep.count[c]}")


def cmd_report(args, man: dict) -> None:
    runs = {}
    for d in args.diag:
        path = Path(d)
        ts = path / "timeseries.csv"
        if not ts.is_file():
            raise ConfigError(f"diagnostics directory {path} has no timeseries.csv")
        rows = read_timeseries(ts)
        run_id = path.parent.name if path.name == "diag" else path.name
        curves: dict = {}
        for r in rows:
            curves.setdefault(r["block"], []).append(
                {k: r[k] for k in ("epoch", "mu_cc", "var_cc", "nbar", "r_theta")})
        runs[run_id] = {"curves": curves, "final": window_means(rows, args.last)}
    evals = {}
    for e in args.evals or []:
        p = Path(e)
        if not p.is_file():
            raise ConfigError(f"evaluation file {p} not found")
        rep = EvalReport.from_json(json.loads(p.read_text()))
        evals[p.stem] = {"rate": {str(c): v for c, v in sorted(rep.rate.items())},
                         "mean_rate": rep.mean_rate}
    summary = {"runs": runs, "evals": evals, "window": args.last}
    _write_json(Path(args.out), summary)
    man["outputs"] = [str(args.out)]
    print(f"summarised {len(runs)} diagnostic runs and {len(evals)} evaluations")


# --------------------------------------------------------------------------- #
# Parser
# --------------------------------------------------------------------------- #

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="poselab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="generate a synthetic dataset file")
    s.add_argument("--config", required=True, help="JSON with v, K, heterogeneity, seed, N, per_category")
    s.add_argument("--out", required=True, help="output .dcpd path")
    s.add_argument("--split", choices=sorted(SPLIT_CODES), help="override the config's split tag")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", help="train a model and checkpoint every epoch")
    s.add_argument("--config", required=True, help="training config JSON (v=1)")
    s.add_argument("--data", required=True, help="training dataset")
    s.add_argument("--out", required=True, help="run directory")
    s.add_argument("--routing", choices=["none", "file", "random", "quantile", "quantile+refine"],
                   help="routing source; overrides the config")
    s.add_argument("--routing-file", help="routing JSON for --routing file")
    s.add_argument("--difficulty", help="difficulty JSON for grouped routing")
    s.add_argument("--val-data", help="validation dataset for refinement pilots")
    s.add_argument("--eval-data", help="dataset for per-epoch evaluation columns")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("group", help="build a routing table from difficulties")
    s.add_argument("--difficulty", required=True, help="JSON {category_id: success rate}")
    s.add_argument("--G", type=int, required=True, help="number of groups")
    s.add_argument("--refine", action="store_true", help="run boundary refinement with pilots")
    s.add_argument("--random", action="store_true", help="random grouping instead of quantiles")
    s.add_argument("--pilot-data", help="training data for refinement pilots")
    s.add_argument("--val-data", help="validation data scoring the pilots")
    s.add_argument("--config", help="training config for the pilots")
    s.add_argument("--seed", type=int, default=0, help="seed for pilots and random grouping")
    s.add_argument("--out", required=True, help="routing JSON path")
    s.set_defaults(func=cmd_group)

    s = sub.add_parser("diagnose", help="replay checkpoints and measure gradient contention")
    s.add_argument("--rundir", required=True, help="run directory with checkpoints/")
    s.add_argument("--data", required=True, help="training dataset the subset is drawn from")
    s.add_argument("--subset-seed", type=int, default=11, help="seed of the diagnostic subset")
    s.add_argument("--batches", type=int, default=8, help="batches per category")
    s.add_argument("--batch-size", type=int, default=16, help="instances per replay batch")
    s.add_argument("--weighting", choices=["uniform", "frequency"], default="uniform",
                   help="aggregation weights for the other-category gradient")
    s.add_argument("--last", type=int, default=0, help="only the final N checkpoints (0 = all)")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_diagnose)

    s = sub.add_parser("evaluate", help="per-category success rates of a checkpoint")
    s.add_argument("--ckpt", required=True, help="checkpoint file")
    s.add_argument("--data", required=True, help="dataset to evaluate on")
    s.add_argument("--thresholds", default="10,0.1,0.15", help="degrees,translation,relative scale")
    s.add_argument("--out", required=True, help="output JSON")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("report", help="summarise diagnostics and evaluations side by side")
    s.add_argument("--diag", nargs="+", required=True, help="diagnostics directories")
    s.add_argument("--evals", nargs="*", help="evaluation JSON files")
    s.add_argument("--last", type=int, default=10, help="epochs in the final window")
    s.add_argument("--out", required=True, help="summary JSON")
    s.set_defaults(func=cmd_report)
    return p


def _manifest_path(args) -> Path:
    out = Path(args.out)
    if args.command in ("train", "diagnose"):
        return out / "manifest.json"
    return out.with_name(out.name + ".manifest.json")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    man = {"subcommand": args.command, "version": _version(),
           "args": {k: v for k, v in vars(args).items() if k != "func"}}
    t0 = time.time()
    code, reason = EXIT_OK, None
    try:
        args.func(args, man)
    except ConfigError as exc:
        code, reason = EXIT_USAGE, f"config error: {exc}"
    except DataError as exc:
        code, reason = EXIT_DATA, f"data error: {exc}"
    except NumericalError as exc:
        code, reason = EXIT_NUMERIC, f"numerical failure: {exc}"
    man["status"] = "ok" if code == EXIT_OK else "failed"
    man["exit_code"] = code
    if reason:
        man["error"] = reason
        print(reason, file=sys.stderr)
    man["timings"] = {"wall_seconds": round(time.time() - t0, 3)}
    try:
        _write_json(_manifest_path(args), man)
    except OSError as exc:
        print(f"could not write manifest: {exc}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
