"""Command-line front door tying the modules together.

Every subcommand writes a run manifest into its output directory before any
other artifact, so each output file is traceable to exactly one invocation.
No artifact carries a timestamp; rerunning a deterministic subcommand with
the same manifest produces byte-identical outputs.

Exit codes: 0 success; 2 usage error (unknown flag or subcommand); 3 config
parse error; 1 operational failure.  Errors are one line on stderr, prefixed
``error: <kind>:``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import belief as bel
from .configio import (ConfigError, load_config, read_ndjson, write_manifest,
                       write_ndjson)
from .env import DEFAULT_ENV
from .evalbench import (Condition, brace_condition, fixed_gamma_condition,
                        map_sequential_condition, no_assist_condition,
                        run_suite, stratify_by_uncertainty,
                        uniform_prior_condition, write_records,
                        write_table_csv)
from .pilot import PilotConfig, generate_dataset
from .theory import (default_progress_family, default_quadratic_family,
                     verify_theorem1, verify_theorem2,
                     write_verification_report)
from .trainer import TrainConfig, run_training


class CliError(RuntimeError):
    """Operational failure reported as a one-line error (exit 1)."""


def _coerced_replace(obj, section: dict[str, str], where: str):
    """Apply a config section to a dataclass, coercing strings by the type of
    each field's current value.  Tuples parse as comma-separated ints."""
    updates = {}
    for key, raw in section.items():
        if not hasattr(obj, key):
            raise ConfigError(f"unknown key {key!r} in section [{where}]")
        cur = getattr(obj, key)
        text = raw.strip()
        try:
            if isinstance(cur, bool):
                lowered = text.lower()
                if lowered in ("true", "1", "yes"):
                    updates[key] = True
                elif lowered in ("false", "0", "no"):
                    updates[key] = False
                else:
                    raise ValueError(text)
            elif isinstance(cur, int):
                updates[key] = int(text)
            elif isinstance(cur, float):
                updates[key] = float(text)
            elif isinstance(cur, str):
                updates[key] = text
            elif isinstance(cur, tuple):
                updates[key] = tuple(int(x) for x in text.replace(",", " ").split())
            else:
                raise ConfigError(
                    f"key {key!r} in [{where}] is not settable from a config file")
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r} in [{where}]: {text!r}") from exc
    return replace(obj, **updates)


def train_config_from_file(path: str | None) -> TrainConfig:
    """Build a training config from a sectioned key=value file.

    Recognized sections: [train] for top-level fields, plus [reward], [ppo],
    [env], [pilot], [expert] for the nested blocks.
    """
    cfg = TrainConfig()
    if path is None:
        return cfg
    sections = load_config(path)
    nested = {"reward": "reward", "ppo": "ppo", "env": "env",
              "pilot": "pilot", "expert": "expert"}
    for name, body in sections.items():
        if name == "train":
            cfg = _coerced_replace(cfg, body, "train")
        elif name in nested:
            block = _coerced_replace(getattr(cfg, nested[name]), body, name)
            cfg = replace(cfg, **{nested[name]: block})
        else:
            raise ConfigError(f"unknown config section [{name}]")
    return cfg


# ---------------------------------------------------------------------------
# subcommand handlers


def _cmd_train(args) -> int:
    cfg = train_config_from_file(args.config)
    overrides = {}
    if args.episodes is not None:
        overrides["max_episodes"] = args.episodes
    if args.mode is not None:
        overrides["mode"] = args.mode
    if args.belief_input is not None:
        overrides["belief_input"] = args.belief_input
    if args.no_curriculum:
        overrides["use_curriculum"] = False
    if overrides:
        cfg = replace(cfg, **overrides)
    write_manifest(args.out, "train", args.seed, args.config,
                   args=_manifest_args(args))
    result = run_training(cfg, args.seed, args.out)
    print(f"trained {result.episodes} episodes, final stage {result.final_stage}, "
          f"curriculum_completed={result.completed}, "
          f"recent_success={result.success_recent:.3f}, "
          f"checkpoint={result.checkpoint_path}")
    return 0


def _parse_conditions(tokens: list[str], checkpoint: str | None) -> list[Condition]:
    out = []
    for token in tokens:
        name, _, value = token.partition(":")
        if name == "no_assist":
            out.append(no_assist_condition())
        elif name == "fixed_gamma":
            if not value:
                raise CliError("fixed_gamma needs a value, e.g. fixed_gamma:0.6")
            out.append(fixed_gamma_condition(float(value)))
        elif name in ("brace", "map_sequential", "uniform_prior"):
            if checkpoint is None:
                raise CliError(f"condition {name} requires --checkpoint")
            factory = {"brace": brace_condition,
                       "map_sequential": map_sequential_condition,
                       "uniform_prior": uniform_prior_condition}[name]
            out.append(factory(checkpoint))
        else:
            raise CliError(f"unknown condition {name!r}")
    return out


def _cmd_eval(args) -> int:
    conditions = _parse_conditions(args.conditions.split(","), args.checkpoint)
    stages = tuple(int(s) for s in args.stages.split(","))
    seeds = range(args.seeds, args.seeds + args.episodes)
    pilot_cfg = PilotConfig(noise_amplitude=args.noise)
    write_manifest(args.out, "eval", args.seeds, None, args=_manifest_args(args))
    result = run_suite(conditions, seeds, pilot_cfg=pilot_cfg, stages=stages)
    out = Path(args.out)
    write_records(out / "records.ndjson", result.records)
    write_table_csv(out / "aggregate.csv", result.table)
    strata = stratify_by_uncertainty(list(result.records))
    (out / "uncertainty_strata.json").write_text(
        json.dumps(strata, indent=2, sort_keys=True) + "\n")
    for notice in result.skipped:
        print(f"skipped {notice}", file=sys.stderr)
    for row in result.table:
        print(f"{row['condition']}: success={row['success_rate']:.3f} "
              f"steps={row['steps_mean']:.1f} pe={row['path_efficiency_mean']:.3f}")
    return 0


def _cmd_verify_theorems(args) -> int:
    write_manifest(args.out, "verify-theorems", args.seed, None,
                   args=_manifest_args(args))
    reports1 = [verify_theorem1(default_quadratic_family()),
                verify_theorem1(default_progress_family())]
    report2 = verify_theorem2(n_families=args.samples, seed=args.seed)
    path = Path(args.out) / "theory_report.json"
    write_verification_report(path, reports1, report2)
    ok = True
    for rep in reports1:
        print(f"monotone-blending [{rep.family}]: {rep.status} "
              f"({len(rep.violations)} violations, {rep.elapsed_s:.2f}s)")
        ok = ok and rep.passed
    print(f"regret-ordering: {report2.n_samples} families, "
          f"{report2.n_regret_violations} violations, "
          f"max identity residual {report2.max_identity_residual:.2e} "
          f"({report2.elapsed_s:.2f}s)")
    ok = ok and report2.passed
    print(f"report: {path}")
    return 0 if ok else 1


def _cmd_gen_data(args) -> int:
    stages = tuple(int(s) for s in args.stages.split(","))
    write_manifest(args.out, "gen-data", args.seed, None, args=_manifest_args(args))
    trajs, stats = generate_dataset(args.episodes, PilotConfig(noise_amplitude=args.noise),
                                    DEFAULT_ENV, seed=args.seed, stages=stages)
    out = Path(args.out)
    write_ndjson(str(out / "trajectories.ndjson"), (
        {"true_goal_id": t.true_goal_id,
         "goal_positions": [list(g) for g in t.goal_positions],
         "obstacles": [list(o) for o in t.obstacles],
         "cursors": [list(c) for c in t.cursors],
         "actions": [list(a) for a in t.actions]}
        for t in trajs))
    (out / "dataset_stats.json").write_text(
        json.dumps(stats, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(trajs)} trajectories "
          f"(success rate {stats['successes'] / max(stats['episodes'], 1):.3f})")
    return 0


def _cmd_calibrate(args) -> int:
    write_manifest(args.out, "calibrate", None, None, args=_manifest_args(args))
    trajs = [bel.CalibrationTrajectory(
        true_goal_id=r["true_goal_id"],
        goal_positions=tuple(tuple(g) for g in r["goal_positions"]),
        obstacles=tuple(tuple(o) for o in r["obstacles"]),
        cursors=tuple(tuple(c) for c in r["cursors"]),
        actions=tuple(tuple(a) for a in r["actions"]))
        for r in read_ndjson(args.data)]
    try:
        result = bel.calibrate(trajs)
    except bel.InsufficientDataError as exc:
        raise CliError(str(exc)) from exc
    payload = {
        "params": dataclasses.asdict(result.params),
        "heldout_loglik": result.heldout_loglik,
        "accuracy_at": {str(k): v for k, v in result.accuracy_at.items()},
        "n_fit": result.n_fit,
        "n_heldout": result.n_heldout,
    }
    path = Path(args.out) / "calibration.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(f"calibrated on {result.n_fit} reaches: beta={result.params.beta:.3f} "
          f"heldout_loglik={result.heldout_loglik:.4f}")
    return 0


def _cmd_serve(args) -> int:
    # imported here so the socket plumbing stays out of batch-only workflows
    from .session import SessionConfig, serve

    cfg = SessionConfig(tick_rate=args.tick_rate, seed=args.seed, stage=args.stage,
                        condition=args.condition, checkpoint=args.checkpoint,
                        participant=args.participant)
    write_manifest(args.out, "serve", args.seed, None, args=_manifest_args(args))
    print(f"listening on ws://{args.host}:{args.port} "
          f"(condition={args.condition}, {args.tick_rate:g} Hz)", flush=True)
    records = serve(cfg, args.port, host=args.host, record_dir=args.out,
                    max_sessions=args.sessions)
    print(f"served {len(records)} session(s)")
    return 0


def _rolling_mean(values: list[float], window: int) -> list[float]:
    out = []
    acc = 0.0
    for i, v in enumerate(values):
        acc += v
        if i >= window:
            acc -= values[i - window]
        out.append(acc / min(i + 1, window))
    return out


def _learning_series(log_path: str, window: int = 50) -> dict:
    rows = list(read_ndjson(log_path))
    if not rows:
        raise CliError(f"empty training log: {log_path}")
    series = {
        "episode": [r["episode"] for r in rows],
        "stage": [r["stage"] for r in rows],
        "success_rate": _rolling_mean([float(r["success"]) for r in rows], window),
        "mean_gamma": _rolling_mean([r["mean_gamma"] for r in rows], window),
        "reward": _rolling_mean([r["reward"] for r in rows], window),
        "belief_accuracy": _rolling_mean([r["belief_accuracy"] for r in rows], window),
        "window": window,
    }
    # stage boundaries for vertical markers
    series["stage_starts"] = [rows[0]["episode"]] + [
        rows[i]["episode"] for i in range(1, len(rows))
        if rows[i]["stage"] != rows[i - 1]["stage"]]
    return series


def _gamma_phase_series(records: list[dict]) -> dict:
    """Mean gamma per episode-time quartile by condition -- the assistance
    ramp seen in successful trials -- plus near-obstacle contrast."""
    out: dict = {}
    for cond in sorted({r["condition"] for r in records}):
        recs = [r for r in records if r["condition"] == cond and r["success"]]
        quartiles = []
        for q in range(4):
            vals = [r["mean_gamma_by_quartile"][q] for r in recs
                    if r["mean_gamma_by_quartile"][q] is not None]
            quartiles.append(float(np.mean(vals)) if vals else None)
        near = [r["gamma_near_obstacle"] for r in recs if r["gamma_near_obstacle"] is not None]
        far = [r["gamma_elsewhere"] for r in recs if r["gamma_elsewhere"] is not None]
        out[cond] = {
            "n_success": len(recs),
            "quartile_mean_gamma": quartiles,
            "gamma_near_obstacle": float(np.mean(near)) if near else None,
            "gamma_elsewhere": float(np.mean(far)) if far else None,
        }
    return out


def _theory_series(report_path: str) -> dict:
    report = json.loads(Path(report_path).read_text())
    series: dict = {"monotone_blending": [], "regret_ordering": None}
    for rep in report.get("theorem1", []):
        series["monotone_blending"].append({
            "family": rep["family"],
            "lambda": rep["lambdas"],
            "gamma_star": rep["gamma_star"],
            "entropy": rep["entropy"],
            "constraint_scales": rep["constraint_scales"],
            "gamma_star_constraint": rep["gamma_star_constraint"],
            "status": rep["status"],
        })
    t2 = report.get("theorem2")
    if t2:
        series["regret_ordering"] = {
            "n_goals": t2["samples"]["n_goals"],
            "r_map": t2["samples"]["r_map"],
            "r_int": t2["samples"]["r_int"],
            "gap": t2["samples"]["gap"],
            "optima_spread": t2["samples"]["optima_spread"],
        }
    return series


def _cmd_plotdata(args) -> int:
    if not (args.records or args.train_log or args.theory):
        raise CliError("plotdata needs at least one of --records/--train-log/--theory")
    write_manifest(args.out, "plotdata", None, None, args=_manifest_args(args))
    series: dict = {}
    if args.records:
        records = list(read_ndjson(args.records))
        series["gamma_phase"] = _gamma_phase_series(records)
        series["uncertainty_strata"] = stratify_by_uncertainty(records)
    if args.train_log:
        series["learning_curve"] = _learning_series(args.train_log, window=args.window)
    if args.theory:
        series["theory"] = _theory_series(args.theory)
    path = Path(args.out) / "plot_series.json"
    path.write_text(json.dumps(series, indent=2, sort_keys=True) + "\n")
    print(f"wrote {', '.join(sorted(series))} -> {path}")
    return 0


# ---------------------------------------------------------------------------
# parser / dispatch


def _manifest_args(args) -> dict:
    skip = {"func", "out", "config"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="brace", description="shared-autonomy workbench commands")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("train", help="joint belief + blending-policy training")
    p.add_argument("--config", default=None, help="sectioned key=value file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--episodes", type=int, default=None, help="override budget")
    p.add_argument("--mode", choices=("end_to_end", "baseline_frozen_belief"), default=None)
    p.add_argument("--belief-input", choices=("full", "map", "uniform"), default=None)
    p.add_argument("--no-curriculum", action="store_true")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="paired condition comparison suite")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--conditions", default="no_assist,brace",
                   help="comma list; fixed_gamma takes a value as fixed_gamma:0.6")
    p.add_argument("--seeds", type=int, default=100000, help="first episode seed")
    p.add_argument("--episodes", type=int, default=100, help="episodes per condition")
    p.add_argument("--stages", default="3,4,5")
    p.add_argument("--noise", type=float, default=0.032, help="pilot noise amplitude")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("verify-theorems", help="numeric checks of the two blending results")
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_verify_theorems)

    p = sub.add_parser("gen-data", help="synthetic operator reach corpus")
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stages", default="3,4,5")
    p.add_argument("--noise", type=float, default=0.032)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("calibrate", help="fit intent-inference parameters to reaches")
    p.add_argument("--data", required=True, help="trajectories.ndjson from gen-data")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_calibrate)

    p = sub.add_parser("serve", help="host live trials over a socket upgrade")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--port", type=int, default=8787)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--condition", choices=("no_assist", "manual_gamma", "brace"),
                   default="brace")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stage", type=int, default=4)
    p.add_argument("--tick-rate", type=float, default=30.0)
    p.add_argument("--participant", default="anon")
    p.add_argument("--sessions", type=int, default=None,
                   help="stop after this many trials (default: run until killed)")
    p.add_argument("--out", required=True, help="manifest + trial record directory")
    p.set_defaults(func=_cmd_serve)

    p = sub.add_parser("plotdata", help="emit figure-ready series from run artifacts")
    p.add_argument("--records", default=None, help="eval records.ndjson")
    p.add_argument("--train-log", default=None, help="train_log.ndjson")
    p.add_argument("--theory", default=None, help="theory_report.json")
    p.add_argument("--window", type=int, default=50, help="learning-curve smoothing")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_plotdata)
    return parser


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 3
    except CliError as exc:
        print(f"error: {args.subcommand}: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, NotADirectoryError) as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
