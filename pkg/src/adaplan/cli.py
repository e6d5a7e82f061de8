"""Command-line entry point.

Every subcommand takes ``--config FILE`` plus optional ``key=value`` overrides
(TOML value syntax on the right-hand side; bare words are strings).  Exit
codes: 0 on success, 1 for configuration problems (bad flags, bad config,
missing inputs), 2 for runtime failures (corrupt files, numeric errors).

Stream layout under the master seed: dataset generation draws from stream 1,
planner training from stream 2, ensemble training from stream 3; evaluation
episode i uses its own seed ``master + i``.
"""

from __future__ import annotations

import argparse
import sys

from . import bench
from .config import RunConfig, load_run_config
from .dataset import generate_dataset, load_dataset, save_dataset
from .diffusion import save_diffusion, train_diffusion
from .ensemble import save_ensemble, train_ensemble
from .errors import AdaplanError, ConfigError
from .rng import RngStream


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse default exits 2; we reserve 2 for runtime
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise _UsageError(message)


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", required=True, metavar="FILE",
                     help="TOML run configuration")
    sub.add_argument("--seed", type=int, default=None,
                     help="override the master seed")
    sub.add_argument("overrides", nargs="*", metavar="key=value",
                     help="config overrides, e.g. policy.delta=0.1")


def build_parser() -> _Parser:
    parser = _Parser(prog="adaplan",
                     description="Train and evaluate an adaptive replanning agent.")
    subs = parser.add_subparsers(dest="command", required=True, metavar="command")

    for name, text in (
        ("gen-data", "generate an offline dataset with the scripted controllers"),
        ("train-diffusion", "train the trajectory planner on a dataset"),
        ("train-ensemble", "train the action-recovery ensemble on a dataset"),
        ("eval", "evaluate the configured policy mode over paired seeds"),
        ("sweep-delta", "evaluate a range of replanning thresholds"),
        ("ablate-members", "evaluate leading subsets of the ensemble"),
        ("bench-time", "measure wall-clock cost, adaptive vs always-replan"),
    ):
        sub = subs.add_parser(name, help=text, description=text)
        _add_common(sub)
        if name in ("eval", "sweep-delta", "ablate-members"):
            sub.add_argument("--seeds", type=int, default=None,
                             help="number of evaluation episodes")
        if name == "sweep-delta":
            sub.add_argument("--deltas", type=float, nargs="+", default=None,
                             help="thresholds to sweep")
        if name == "ablate-members":
            sub.add_argument("--members", type=int, nargs="+", default=None,
                             help="ensemble sizes to evaluate")
    return parser


def _load_config(args: argparse.Namespace) -> RunConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return load_run_config(args.config, overrides)


def _cmd_gen_data(cfg: RunConfig) -> None:
    spec = cfg.env_spec()
    data = generate_dataset(spec, cfg.dataset.tier, cfg.dataset.n_episodes,
                            RngStream(cfg.seed, 1), cfg.tier_recipe())
    save_dataset(data, cfg.dataset_path)
    steps = sum(len(r.actions) for r in data.records)
    print(f"wrote {cfg.dataset_path} ({len(data.records)} episodes, {steps} steps, "
          f"tier {data.tier})")


def _require_dataset(cfg: RunConfig):
    if not cfg.dataset_path.is_file():
        raise ConfigError(f"dataset not found: {cfg.dataset_path} (run gen-data first)")
    return load_dataset(cfg.dataset_path)


def _cmd_train_diffusion(cfg: RunConfig) -> None:
    data = _require_dataset(cfg)
    d = cfg.diffusion
    model = train_diffusion(data, d.horizon, d.n_denoise_steps,
                            cfg.diffusion_train_config(), RngStream(cfg.seed, 2),
                            schedule_kind=d.schedule, hidden=d.hidden,
                            activation=d.activation)
    save_diffusion(model, cfg.diffusion_path)
    log = model.train_log
    print(f"wrote {cfg.diffusion_path} (train loss {log.train_loss[-1]:.5f}, "
          f"holdout {log.holdout_loss[-1]:.5f} after {d.steps} steps)")


def _cmd_train_ensemble(cfg: RunConfig) -> None:
    data = _require_dataset(cfg)
    e = cfg.ensemble
    ens = train_ensemble(data, e.loss, e.n_members, cfg.ensemble_train_config(),
                         RngStream(cfg.seed, 3))
    save_ensemble(ens, cfg.ensemble_path)
    finals = ", ".join(f"{m.train_log.train_loss[-1]:.5f}" for m in ens.members)
    print(f"wrote {cfg.ensemble_path} ({e.n_members} members, {e.loss} loss, "
          f"final losses {finals})")


def _print_rows(rows: list[bench.MetricsRow]) -> None:
    print(",".join(bench.CSV_COLUMNS))
    for row in rows:
        print(",".join(row.as_csv_fields()))


def _cmd_eval(cfg: RunConfig, args: argparse.Namespace) -> None:
    row = bench.evaluate(cfg, n_seeds=args.seeds)
    out = cfg.output_dir / "eval.csv"
    bench.write_metrics_csv([row], out)
    _print_rows([row])
    print(f"wrote {out}")


def _cmd_sweep_delta(cfg: RunConfig, args: argparse.Namespace) -> None:
    rows, plot = bench.sweep_delta(cfg, args.deltas, n_seeds=args.seeds)
    csv_path = cfg.output_dir / "sweep_delta.csv"
    json_path = cfg.output_dir / "sweep_delta.json"
    bench.write_metrics_csv(rows, csv_path)
    bench.write_json(plot, json_path)
    _print_rows(rows)
    print(f"wrote {csv_path} and {json_path}")


def _cmd_ablate_members(cfg: RunConfig, args: argparse.Namespace) -> None:
    rows = bench.ablate_members(cfg, args.members, n_seeds=args.seeds)
    out = cfg.output_dir / "ablate_members.csv"
    bench.write_metrics_csv(rows, out)
    _print_rows(rows)
    print(f"wrote {out}")


def _cmd_bench_time(cfg: RunConfig) -> None:
    report = bench.bench_time(cfg)
    out = cfg.output_dir / "bench_time.json"
    bench.write_json(report.to_json(), out)
    print(f"always-replan median: {report.always_median:.3f} s per 100 steps")
    print(f"adaptive (delta={report.delta}) median: {report.adaptive_median:.3f} "
          f"s per 100 steps (saved NFE fraction {report.adaptive_saved_nfe:.3f})")
    print(f"speedup: {report.speedup:.2f}x")
    print(f"wrote {out}")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError:
        return 1
    try:
        cfg = _load_config(args)
        if args.command == "gen-data":
            _cmd_gen_data(cfg)
        elif args.command == "train-diffusion":
            _cmd_train_diffusion(cfg)
        elif args.command == "train-ensemble":
            _cmd_train_ensemble(cfg)
        elif args.command == "eval":
            _cmd_eval(cfg, args)
        elif args.command == "sweep-delta":
            _cmd_sweep_delta(cfg, args)
        elif args.command == "ablate-members":
            _cmd_ablate_members(cfg, args)
        elif args.command == "bench-time":
            _cmd_bench_time(cfg)
        else:  # pragma: no cover - argparse enforces the choices
            raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as e:
        print(f"adaplan: config error: {e}", file=sys.stderr)
        return 1
    except AdaplanError as e:
        print(f"adaplan: error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"adaplan: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
