"""Command-line interface.

Subcommands: ingest, features, train-reward, train-rac, train-baseline,
eval, sweep, case-study, recommend, gradcheck.

Exit codes: 0 success, 2 usage error, 3 I/O error, 4 config/format/domain
error, 1 anything else. Errors are emitted as one JSON object on stderr;
logs go to stderr; data goes to files or stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .agent import RacRecommender, recommend
from .checkpoint import (
    load_baseline,
    load_checkpoint,
    load_rac_model,
    load_reward_net,
    save_baseline,
    save_rac_model,
    save_reward_net,
)
from .config import Config, apply_overrides, load_config
from .dataset import parse_events, write_events, write_rejects
from .errors import ConfigError, DataFormatError, DomainError, EvracError, UsageError
from .evaluation import case_study, epsilon_sweep, write_case_study_csv, write_sweep_csv
from .gradcheck import TOLERANCE, run_gradcheck
from .pipeline import (
    evaluate_recommender,
    evaluation_environment,
    load_data_bundle,
    sweep_runner,
    train_baseline_model,
    train_per_driver_models,
    train_reward_model,
    train_shared_model,
    training_environment,
)
from .reward import export_wait_series

logger = logging.getLogger("evrac")


# ---------------------------------------------------------------------------
# Shared argument plumbing
# ---------------------------------------------------------------------------

def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="config file (key = value sections)")
    p.add_argument("--events", help="canonical events CSV (overrides config)")
    p.add_argument("--stations", help="stations CSV (overrides config)")
    p.add_argument("--poi", help="POI counts CSV (overrides config)")
    p.add_argument("--seed", type=int, help="master seed (overrides config)")
    p.add_argument("--epsilon", type=float, help="preference weight in [0, 1]")
    p.add_argument("--epochs", type=int, help="training epochs")
    p.add_argument("--jobs", type=int, help="max parallel per-driver workers")
    p.add_argument("--warmup", dest="warmup", action="store_true", default=None,
                   help="enable warm-up pool pretraining")
    p.add_argument("--no-warmup", dest="warmup", action="store_false",
                   help="disable warm-up (train from scratch)")


def _build_config(args: argparse.Namespace) -> Config:
    config = load_config(args.config) if getattr(args, "config", None) else Config()
    overrides = {}
    for attr in ("events", "stations", "poi", "seed", "epsilon", "epochs", "jobs", "warmup"):
        if getattr(args, attr, None) is not None:
            overrides[attr] = getattr(args, attr)
    return apply_overrides(config, **overrides)


def _parse_ks(raw: str) -> list[int]:
    try:
        ks = [int(v) for v in raw.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --k list {raw!r}") from exc
    if not ks or any(k < 1 for k in ks):
        raise UsageError(f"bad --k list {raw!r}")
    return ks


def _parse_floats(raw: str, flag: str) -> list[float]:
    try:
        vals = [float(v) for v in raw.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"bad {flag} list {raw!r}") from exc
    if not vals:
        raise UsageError(f"empty {flag} list")
    return vals


def _load_reward(args: argparse.Namespace):
    if getattr(args, "reward", None):
        net, _, _ = load_reward_net(args.reward)
        return net
    return None


def _emit(data: dict) -> None:
    json.dump(data, sys.stdout, sort_keys=True)
    sys.stdout.write("\n")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_ingest(args: argparse.Namespace) -> int:
    events, rejects = parse_events(args.input, args.adapter)
    write_events(events, args.output)
    rejects_path = args.rejects or f"{args.output}.rejects.csv"
    write_rejects(rejects, rejects_path)
    _emit(
        {
            "events": len(events),
            "rejected": len(rejects),
            "drivers": len({e.driver_id for e in events}),
            "stations": len({e.station_id for e in events}),
            "output": str(args.output),
            "rejects": str(rejects_path),
        }
    )
    return 0


def cmd_features(args: argparse.Namespace) -> int:
    config = _build_config(args)
    bundle = load_data_bundle(config)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    export_wait_series(bundle.full_series, out_dir / "wait_series.csv")
    with open(out_dir / "station_norms.csv", "w", newline="\n", encoding="utf-8") as fh:
        fh.write("station_id,mean_wait_min,mean_dist_km\n")
        for sid in bundle.index.order:
            st = bundle.index.require(sid)
            fh.write(f"{sid},{st.mean_wait!r},{st.mean_dist!r}\n")
    summary = {
        "config": config.as_dict(),
        "drivers": len(bundle.trajectories),
        "evaluated_drivers": len(bundle.splits),
        "excluded_drivers": bundle.excluded,
        "stations": len(bundle.index),
        "max_duration_min": bundle.obs_space.max_duration,
        "max_energy_kwh": bundle.obs_space.max_energy,
        "warmup_pool_events": sum(len(t.events) for t in bundle.warmup_trajectories.values()),
    }
    (out_dir / "features.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _emit({"out_dir": str(out_dir), "stations": len(bundle.index), "drivers": len(bundle.trajectories)})
    return 0


def cmd_train_reward(args: argparse.Namespace) -> int:
    config = _build_config(args)
    bundle = load_data_bundle(config)
    net, report = train_reward_model(bundle)
    save_reward_net(net, config.reward_hyper(), args.out, extra_meta={"config": config.as_dict()})
    _emit({"out": str(args.out), **{k: v for k, v in report.items()}})
    return 0


def cmd_train_rac(args: argparse.Namespace) -> int:
    config = _build_config(args)
    if args.per_driver is not None:
        config = apply_overrides(config, per_driver=args.per_driver)
    bundle = load_data_bundle(config)
    net = _load_reward(args)
    env = training_environment(bundle, net)

    if config.per_driver:
        if not args.out_dir:
            raise UsageError("--per-driver training needs --out-dir")
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        shared, models = train_per_driver_models(bundle, env)
        save_rac_model(shared, out_dir / "shared.ckpt", {"config": config.as_dict()})
        files = {}
        for i, driver_id in enumerate(sorted(models)):
            name = f"driver-{i:05d}.ckpt"
            save_rac_model(models[driver_id], out_dir / name,
                           {"config": config.as_dict(), "driver_id": driver_id})
            files[driver_id] = name
        index = {"shared": "shared.ckpt", "files": files, "config": config.as_dict()}
        (out_dir / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
        _emit({"out_dir": str(out_dir), "drivers": len(models)})
        return 0

    if not args.out:
        raise UsageError("shared training needs --out")
    model, records = train_shared_model(bundle, env)
    save_rac_model(model, args.out, {"config": config.as_dict()})
    log_path = args.log or f"{args.out}.log.jsonl"
    with open(log_path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    _emit({"out": str(args.out), "log": str(log_path), "epochs": len(records),
           "final_ce_loss": records[-1]["ce_loss"] if records else None})
    return 0


def cmd_train_baseline(args: argparse.Namespace) -> int:
    config = _build_config(args)
    bundle = load_data_bundle(config)
    model = train_baseline_model(bundle, args.model)
    save_baseline(model, args.out, extra_meta={"config": config.as_dict()})
    _emit({"out": str(args.out), "model": args.model})
    return 0


def _load_any_model(path: str):
    _, header = load_checkpoint(path)
    kind = header.get("kind")
    if kind == "rac":
        model, _ = load_rac_model(path)
        return "rac", model
    model, _ = load_baseline(path)
    return kind, model


def cmd_eval(args: argparse.Namespace) -> int:
    config = _build_config(args)
    bundle = load_data_bundle(config)
    env = evaluation_environment(bundle, _load_reward(args))
    ks = _parse_ks(args.k)

    per_driver_models = None
    recommender = None
    if args.model_dir:
        index = json.loads((Path(args.model_dir) / "index.json").read_text(encoding="utf-8"))
        shared, _ = load_rac_model(Path(args.model_dir) / index["shared"])
        per_driver_models = {}
        for driver_id in bundle.splits:
            name = index["files"].get(driver_id)
            if name is None:
                per_driver_models[driver_id] = shared
            else:
                per_driver_models[driver_id], _ = load_rac_model(Path(args.model_dir) / name)
        recommender = RacRecommender(shared, bundle.obs_space)
    else:
        kind, model = _load_any_model(args.model)
        recommender = RacRecommender(model, bundle.obs_space) if kind == "rac" else model

    report = evaluate_recommender(
        bundle, recommender, env, ks=ks,
        config_echo=config.as_dict(),
        per_driver_models=per_driver_models,
    )
    if args.out:
        report.write_json(args.out)
    if args.csv:
        report.write_csv(args.csv)
    _emit(report.to_dict()["aggregate"])
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    config = _build_config(args)
    bundle = load_data_bundle(config)
    net = _load_reward(args)
    run = sweep_runner(bundle, training_environment(bundle, net),
                       evaluation_environment(bundle, net), ks=(1,))
    rows = epsilon_sweep(run, _parse_floats(args.grid, "--grid"))
    write_sweep_csv(rows, args.out)
    _emit({"out": str(args.out), "rows": rows})
    return 0


def cmd_case_study(args: argparse.Namespace) -> int:
    config = _build_config(args)
    bundle = load_data_bundle(config)
    net = _load_reward(args)
    run = sweep_runner(bundle, training_environment(bundle, net),
                       evaluation_environment(bundle, net), ks=(1,))
    drivers = [d for d in args.drivers.split(",") if d]
    rows = case_study(run, drivers, _parse_floats(args.epsilons, "--epsilons"))
    write_case_study_csv(rows, args.out)
    _emit({"out": str(args.out), "rows": rows})
    return 0


def cmd_recommend(args: argparse.Namespace) -> int:
    config = _build_config(args)
    bundle = load_data_bundle(config)
    env = evaluation_environment(bundle, _load_reward(args))
    if args.driver not in bundle.trajectories:
        raise UsageError(f"unknown driver {args.driver!r}")
    history = bundle.trajectories[args.driver].events
    when = None
    if args.at:
        from .dataset import _parse_timestamp

        when = _parse_timestamp(args.at)

    kind, model = _load_any_model(args.model)
    if kind == "rac":
        items = recommend(model, bundle.obs_space, env, args.driver, history, args.k, when)
        payload = [
            {
                "station_id": it.station_id,
                "prob": it.prob,
                "est_wait_min": it.est_wait_min,
                "est_dist_km": it.est_dist_km,
                "est_reward": it.est_reward,
            }
            for it in items
        ]
    else:
        if args.k > len(bundle.index):
            raise UsageError(f"k must be <= {len(bundle.index)}")
        ranked = model.rank(args.driver, history, args.k)
        probs = model.probabilities(args.driver, history)
        when_eff = when or history[-1].start_time
        from .reward import epoch_hour

        payload = []
        for sid in ranked:
            b = env.breakdown(args.driver, history[-1].station_id, sid, epoch_hour(when_eff))
            payload.append(
                {
                    "station_id": sid,
                    "prob": float(probs[bundle.index.index_of(sid)]),
                    "est_wait_min": b.wait_forecast,
                    "est_dist_km": b.dist_km,
                    "est_reward": b.reward,
                }
            )
    when_eff = when or history[-1].start_time
    _emit(
        {
            "driver_id": args.driver,
            "timestamp": when_eff.strftime("%Y-%m-%dT%H:%M:%SZ"),
            "items": payload,
        }
    )
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    results = run_gradcheck(args.instances, args.seed)
    ok = True
    for name in sorted(results):
        passed = results[name] < TOLERANCE
        ok &= passed
        print(f"{name}: max_rel_err={results[name]:.3e} {'PASS' if passed else 'FAIL'}")
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# Parser and entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evrac", description=__doc__)
    parser.add_argument("--version", action="version", version=f"evrac {__version__}")
    parser.add_argument("--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="convert a raw city export to canonical CSV")
    p.add_argument("--input", required=True)
    p.add_argument("--adapter", required=True, choices=("canonical", "dundee", "glasgow"))
    p.add_argument("--output", required=True)
    p.add_argument("--rejects")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("features", help="build and export derived features")
    _add_config_args(p)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train-reward", help="train the wait-time forecaster")
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_reward)

    p = sub.add_parser("train-rac", help="train the actor-critic recommender")
    _add_config_args(p)
    p.add_argument("--out")
    p.add_argument("--out-dir")
    p.add_argument("--log", help="JSON-lines training log path")
    p.add_argument("--reward", help="wait forecaster checkpoint")
    p.add_argument("--per-driver", dest="per_driver", action="store_true", default=None)
    p.set_defaults(func=cmd_train_rac)

    p = sub.add_parser("train-baseline", help="fit a classic baseline")
    _add_config_args(p)
    p.add_argument("--model", required=True, choices=("mc", "fpmc", "popularity"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_baseline)

    p = sub.add_parser("eval", help="score a model on the test splits")
    _add_config_args(p)
    p.add_argument("--model")
    p.add_argument("--model-dir")
    p.add_argument("--reward")
    p.add_argument("--k", default="1,3,5")
    p.add_argument("--out")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train/evaluate across an epsilon grid")
    _add_config_args(p)
    p.add_argument("--grid", required=True)
    p.add_argument("--reward")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("case-study", help="per-driver wait/distance decomposition")
    _add_config_args(p)
    p.add_argument("--drivers", required=True)
    p.add_argument("--epsilons", required=True)
    p.add_argument("--reward")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_case_study)

    p = sub.add_parser("recommend", help="top-k stations for one driver")
    _add_config_args(p)
    p.add_argument("--model", required=True)
    p.add_argument("--reward")
    p.add_argument("--driver", required=True)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--at", help="decision time (ISO-8601), default last event")
    p.set_defaults(func=cmd_recommend)

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradient paths")
    p.add_argument("--instances", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def _fail(exc: Exception, code: int) -> int:
    json.dump({"error": type(exc).__name__, "message": str(exc)}, sys.stderr, sort_keys=True)
    sys.stderr.write("\n")
    return code


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except UsageError as exc:
        return _fail(exc, 2)
    except OSError as exc:
        return _fail(exc, 3)
    except (ConfigError, DataFormatError, DomainError) as exc:
        return _fail(exc, 4)
    except EvracError as exc:
        return _fail(exc, 1)


if __name__ == "__main__":
    sys.exit(main())
