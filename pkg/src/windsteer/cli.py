"""``windsteer`` command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 configuration error, 3 I/O error.
Errors print a single line ``windsteer: error[<kind>] <where>: <message>``.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from windsteer import ConfigError, __version__
from windsteer.config import RunConfig, field_label, load_config, parse_override

MANIFEST_NAME = "run_manifest.json"
EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def pool_hash(directory, ids) -> str:
    """SHA-256 over the box files of the pool, in id order."""
    from windsteer.turbwind.turbulence import box_filename
    h = hashlib.sha256()
    for i in sorted(int(x) for x in ids):
        path = Path(directory) / box_filename(i)
        h.update(path.read_bytes() if path.exists() else f"missing:{i}".encode())
    return h.hexdigest()


def write_manifest(out_dir, cfg: RunConfig, argv, seeds: dict, box_hash=None, **extra) -> Path:
    """Atomically write the run manifest for ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"tool": "windsteer", "version": __version__, "config_hash": cfg.hash(),
                "config": cfg.to_dict(), "seeds": seeds, "box_pool_hash": box_hash,
                "started": _now(), "command": ["windsteer", *argv]}
    manifest.update(extra)
    path = out_dir / MANIFEST_NAME
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    tmp.replace(path)
    return path


# --- subcommands --------------------------------------------------------

def cmd_gen_turbulence(args, cfg: RunConfig, argv):
    from windsteer.turbwind.turbulence import box_filename, generate_turbulence_box, save_box
    out = Path(args.out or cfg.paths.boxes)
    first = cfg.turbulence.first_id if args.first_id is None else args.first_id
    n = cfg.turbulence.pool_size if args.pool is None else args.pool
    if n < 1:
        raise ConfigError("pool size must be at least 1", "turbulence.pool_size")
    ids = list(range(first, first + n))
    if args.box_id is not None:
        ids = [args.box_id]
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out, cfg, argv, {"box_ids": ids})
    layout = cfg.env.layout
    for i in ids:
        box = generate_turbulence_box(i, cfg.env.inflow, cfg.turbulence.dims,
                                      farm_extent=float(layout.x[-1] - layout.x[0]))
        save_box(box, out / box_filename(i))
    write_manifest(out, cfg, argv, {"box_ids": ids}, pool_hash(out, ids), finished=_now())
    return f"wrote {len(ids)} boxes to {out}"


def cmd_train_surrogate(args, cfg: RunConfig, argv):
    from windsteer.loads import (MINIMUM_SAMPLE_SPEC, del_oracle, max_relative_error,
                                 sample_features, train_surrogate)
    sc = cfg.surrogate
    n = args.samples or sc.n_samples
    seed = sc.seed if args.seed is None else args.seed
    out = Path(args.out or cfg.paths.surrogate)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_manifest(out.parent, cfg, argv, {"surrogate": seed}, output=out.name)
    net, report = train_surrogate(n_samples=n, seed=seed, hidden=sc.hidden,
                                  epochs=args.epochs or sc.epochs, return_report=True)
    net.save(out)
    fresh = sample_features(1000, MINIMUM_SAMPLE_SPEC, seed + 7919)
    worst = max_relative_error(net.predict(fresh), del_oracle(fresh))
    write_manifest(out.parent, cfg, argv, {"surrogate": seed}, output=out.name,
                   finished=_now(), heldout_rel_rmse=report.heldout_rel_rmse,
                   fresh_max_rel_error=worst)
    return (f"surrogate {out}: held-out relative RMSE {report.heldout_rel_rmse:.4f}, "
            f"max relative error {worst:.4f}")


def _load_pool(cfg: RunConfig, boxes):
    from windsteer.env import BoxPool
    directory = Path(boxes or cfg.paths.boxes)
    return BoxPool.from_directory(directory, spec=cfg.env.inflow, dims=cfg.turbulence.dims)


def _load_surrogate(cfg: RunConfig, path):
    from windsteer.loads import SurrogateNet
    p = Path(path or cfg.paths.surrogate)
    if not p.exists():
        raise FileNotFoundError(f"surrogate checkpoint not found: {p}")
    return SurrogateNet.load(p)


def cmd_train(args, cfg: RunConfig, argv):
    from windsteer.isac import train
    pool = _load_pool(cfg, args.boxes)
    surrogate = _load_surrogate(cfg, args.surrogate)
    out = Path(args.out or Path(cfg.paths.runs) / "train")
    seeds = {"training": cfg.train.seed, "environment": cfg.env.seed, "box_ids": pool.ids}
    h = pool_hash(pool.directory, pool.ids)
    write_manifest(out, cfg, argv, seeds, h)

    def progress(step, row):
        if args.verbose and row is not None:
            print(f"step {step} R_total {row['R_total']:.4f}", file=sys.stderr)

    _, rows = train(cfg.train, cfg.env, surrogate, pool, out_dir=out, threads=args.threads,
                    progress=progress)
    write_manifest(out, cfg, argv, seeds, h, finished=_now())
    last = rows[-1]["cumulative_step"] if rows else 0
    return f"trained {last} steps; checkpoint {out / 'checkpoints' / 'final'}"


def _eval_box(cfg: RunConfig, box_id, boxes):
    from windsteer.turbwind.turbulence import box_filename, generate_turbulence_box, load_box
    directory = Path(boxes or cfg.paths.boxes)
    path = directory / box_filename(box_id)
    if path.exists():
        return load_box(path)
    return generate_turbulence_box(box_id, cfg.env.inflow, cfg.turbulence.dims)


def cmd_evaluate(args, cfg: RunConfig, argv):
    from windsteer.evalharness import (AgentPolicy, EvaluationError, FixedYawPolicy, evaluate,
                                       export_results)
    from windsteer.isac import load_agents
    n = cfg.env.layout.n_turbines
    training_ids = []
    if args.policy == "agents":
        if not args.checkpoint:
            raise ConfigError("--checkpoint is required for the agent policy", "evaluation.checkpoint")
        ckpt = Path(args.checkpoint)
        if (ckpt / "checkpoints" / "final").is_dir():
            ckpt = ckpt / "checkpoints" / "final"
        policy = AgentPolicy(load_agents(ckpt, cfg.train), sample=args.sample)
        meta = json.loads((ckpt / "manifest.json").read_text())
        training_ids = meta.get("box_pool_ids", [])
    elif args.policy == "zero":
        policy = FixedYawPolicy(np.zeros(n))
    else:
        yaws = [float(v) for v in args.policy.split(",")]
        if len(yaws) != n:
            raise ConfigError(f"fixed policy needs {n} yaw values", "evaluation.policy")
        policy = FixedYawPolicy(yaws)
    box_id = cfg.evaluation.box_id if args.box_id is None else args.box_id
    out = Path(args.out or Path(cfg.paths.runs) / f"eval_{box_id}")
    write_manifest(out, cfg, argv, {"box_id": box_id, "training_box_ids": training_ids},
                   policy=args.policy, checkpoint=args.checkpoint)
    box = _eval_box(cfg, box_id, args.boxes)
    surrogate = _load_surrogate(cfg, args.surrogate)
    try:
        report = evaluate(policy, cfg.env, surrogate, box, training_ids,
                          allow_training_box=args.allow_training_box,
                          duration=cfg.evaluation.duration)
    except EvaluationError as exc:
        raise ConfigError(str(exc), "evaluation.box_id") from exc
    export_results(report, out)
    write_manifest(out, cfg, argv, {"box_id": box_id, "training_box_ids": training_ids},
                   policy=args.policy, checkpoint=args.checkpoint, finished=_now())
    return (f"power ratio {report.power_ratio:.4f}, max-to-max {report.max_to_max_ratio:.4f}, "
            f"violations {report.violation_fraction:.3f}")


def cmd_grid_search(args, cfg: RunConfig, argv):
    from windsteer.evalharness import grid_search_oracle
    res = grid_search_oracle(cfg.env.layout, cfg.env.inflow, cfg.env.wake, step=args.step)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_manifest(out.parent, cfg, argv, {}, output=out.name)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["yaw_0", "yaw_1", "farm_power", "gain"])
        for i, g0 in enumerate(res.yaw_values):
            for j, g1 in enumerate(res.yaw_values):
                p = res.power[i, j]
                w.writerow([repr(float(g0)), repr(float(g1)), repr(float(p)),
                            repr(float(p / res.baseline_power - 1.0))])
    write_manifest(out.parent, cfg, argv, {}, output=out.name, finished=_now(),
                   argmax=list(res.argmax), gain=res.gain)
    return f"best yaw {res.argmax}, gain {res.gain:.4f}"


def cmd_compare(args, cfg: RunConfig, argv):
    from windsteer.evalharness import compare_constraint_levels, load_timeseries
    reports = []
    for d in args.reports:
        d = Path(d)
        summary = json.loads((d / "summary.json").read_text())
        reports.append(load_timeseries(d / "timeseries.csv", summary["box_id"],
                                       summary["delta_max"]))
    result = compare_constraint_levels(reports)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_manifest(out.parent, cfg, argv, {}, output=out.name, inputs=list(args.reports),
                   finished=_now())
    out.write_text(json.dumps(result, indent=2, sort_keys=True))
    return f"compared {len(reports)} reports; checks {result['checks']}"


# --- argument parsing ---------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="TOML configuration file")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a configuration value")

    p = _Parser(prog="windsteer", description="Load-constrained wake steering toolkit.")
    p.add_argument("--version", action="version", version=f"windsteer {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-turbulence", parents=[common], help="synthesise turbulence boxes")
    g.add_argument("--pool", type=int, help="number of boxes")
    g.add_argument("--first-id", type=int)
    g.add_argument("--box-id", type=int, help="generate a single box with this id")
    g.add_argument("--ws", type=float, help="mean wind speed, m/s")
    g.add_argument("--ti", type=float, help="turbulence intensity, fraction")
    g.add_argument("--out", help="output directory")

    s = sub.add_parser("train-surrogate", parents=[common], help="fit the DEL surrogate")
    s.add_argument("--samples", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--out", help="surrogate checkpoint file")

    t = sub.add_parser("train", parents=[common], help="train I-SAC agents")
    t.add_argument("--boxes", help="turbulence pool directory")
    t.add_argument("--surrogate")
    t.add_argument("--steps", type=int, help="cumulative environment steps")
    t.add_argument("--delta-max", help="load constraint level or 'none'")
    t.add_argument("--seed", type=int)
    t.add_argument("--n-env", type=int)
    t.add_argument("--threads", type=int)
    t.add_argument("--out", help="run directory")
    t.add_argument("--verbose", action="store_true")

    e = sub.add_parser("evaluate", parents=[common], help="evaluate a policy on a held-out box")
    e.add_argument("--checkpoint", help="checkpoint or run directory")
    e.add_argument("--policy", default="agents",
                   help="'agents', 'zero', or comma-separated fixed yaws")
    e.add_argument("--box-id", type=int)
    e.add_argument("--boxes")
    e.add_argument("--surrogate")
    e.add_argument("--delta-max", help="load constraint level or 'none'")
    e.add_argument("--sample", action="store_true", help="sample actions instead of means")
    e.add_argument("--allow-training-box", action="store_true")
    e.add_argument("--out", help="report directory")

    gs = sub.add_parser("grid-search", parents=[common], help="static yaw oracle")
    gs.add_argument("--step", type=float, default=5.0)
    gs.add_argument("--out", default="grid.csv")

    c = sub.add_parser("compare", parents=[common], help="compare constraint levels")
    c.add_argument("--reports", nargs="+", required=True)
    c.add_argument("--out", default="comparison.json")
    return p


COMMANDS = {"gen-turbulence": cmd_gen_turbulence, "train-surrogate": cmd_train_surrogate,
            "train": cmd_train, "evaluate": cmd_evaluate, "grid-search": cmd_grid_search,
            "compare": cmd_compare}


def _overrides(args) -> list:
    items = [parse_override(s) for s in args.set]
    if getattr(args, "delta_max", None) is not None:
        try:
            items.append(("constraint.delta_max", float(args.delta_max)))
        except ValueError:
            items.append(("constraint.delta_max", args.delta_max))
    if getattr(args, "steps", None) is not None:
        items.append(("training.total_steps", args.steps))
    if getattr(args, "seed", None) is not None and args.command == "train":
        items.append(("training.seed", args.seed))
    if getattr(args, "ws", None) is not None:
        items.append(("inflow.ws", args.ws))
    if getattr(args, "ti", None) is not None:
        items.append(("inflow.ti", args.ti))
    if getattr(args, "n_env", None) is not None:
        items.append(("training.n_env", args.n_env))
    return items


def _fail(kind: str, where: str, message: str, code: int) -> int:
    message = " ".join(str(message).split())
    print(f"windsteer: error[{kind}] {where}: {message}", file=sys.stderr)
    return code


def dispatch(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail("usage", "argv", exc, EXIT_CONFIG)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    try:
        cfg = load_config(args.config, _overrides(args))
        message = COMMANDS[args.command](args, cfg, argv)
    except ConfigError as exc:
        return _fail("config", field_label(exc.field), exc, EXIT_CONFIG)
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        return _fail("io", getattr(exc, "filename", None) or "file", exc, EXIT_IO)
    except OSError as exc:
        return _fail("io", getattr(exc, "filename", None) or "file", exc, EXIT_IO)
    except Exception as exc:  # noqa: BLE001 - surfaced as a one-line runtime error
        return _fail("runtime", args.command, f"{type(exc).__name__}: {exc}", EXIT_RUNTIME)
    if message:
        print(message)
    return EXIT_OK


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
