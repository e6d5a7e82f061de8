"""Evaluation, delta sweeps, member ablations, and wall-clock benchmarks.

Returns are reported on a normalized scale where a random policy scores 0 and
the scripted expert scores 100.  Reference returns come from a fixed internal
seed so the scale does not drift between runs; they are cached per environment
fingerprint.  Episode seeds for a row are ``master .. master + n_seeds - 1``,
one stream per episode, so rows with the same master seed are paired across
modes.  ``ADAPLAN_THREADS`` caps episode-level concurrency (default 1).
"""

from __future__ import annotations

import json
import math
import os
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .diffusion import DiffusionModel, load_diffusion
from .ensemble import Ensemble, load_ensemble
from .envs import EnvSpec, expert_action, random_action, reset, step
from .errors import ConfigError
from .policy import EpisodeTrace, PolicyConfig, run_episode, saved_nfe_fraction
from .rng import RngStream

REFERENCE_SEED = 24245  # fixed internal seed for the normalization references

_reference_cache: dict[tuple[str, int], "ReferenceReturns"] = {}


@dataclass(frozen=True)
class ReferenceReturns:
    random_mean: float
    expert_mean: float


def _rollout_return(spec: EnvSpec, ep: RngStream, *, expert: bool) -> float:
    state = reset(spec, ep.child(0))
    gen = ep.child(1).generator()
    total = 0.0
    while True:
        a = expert_action(spec, state.values) if expert else random_action(spec, gen)
        result = step(spec, state, a)
        state = result.next_state
        total += result.reward
        if result.done:
            return total


def reference_returns(spec: EnvSpec, n_episodes: int = 200) -> ReferenceReturns:
    """Mean returns of the random and expert policies under a fixed seed."""
    key = (spec.fingerprint(), n_episodes)
    if key not in _reference_cache:
        base = RngStream(REFERENCE_SEED, 0)
        rand = [_rollout_return(spec, base.child(2 * i), expert=False)
                for i in range(n_episodes)]
        expt = [_rollout_return(spec, base.child(2 * i + 1), expert=True)
                for i in range(n_episodes)]
        _reference_cache[key] = ReferenceReturns(float(np.mean(rand)), float(np.mean(expt)))
    return _reference_cache[key]


def normalized_return(raw_return: float, refs: ReferenceReturns) -> float:
    """Map a raw return onto the 0 (random) .. 100 (expert) scale."""
    span = refs.expert_mean - refs.random_mean
    if not span > 1e-9:
        raise ConfigError(
            f"degenerate normalization references: expert mean {refs.expert_mean} "
            f"does not exceed random mean {refs.random_mean}")
    return 100.0 * (raw_return - refs.random_mean) / span


def _n_threads() -> int:
    raw = os.environ.get("ADAPLAN_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as e:
        raise ConfigError(f"ADAPLAN_THREADS must be an integer, got {raw!r}") from e
    if n < 1:
        raise ConfigError(f"ADAPLAN_THREADS must be >= 1, got {n}")
    return n


def run_seeds(spec: EnvSpec, model: DiffusionModel, ensemble: Ensemble,
              cfg: PolicyConfig, master_seed: int, n_seeds: int) -> list[EpisodeTrace]:
    """Run one episode per seed ``master_seed + i`` and return the traces in order."""
    seeds = [master_seed + i for i in range(n_seeds)]

    def one(seed: int) -> EpisodeTrace:
        return run_episode(spec, model, ensemble, cfg, RngStream(seed, 0))

    workers = min(_n_threads(), n_seeds)
    if workers == 1:
        return [one(s) for s in seeds]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, seeds))


CSV_COLUMNS = ("env", "tier", "mode", "delta", "M", "loss", "seeds", "return_mean",
               "return_std", "saved_nfe", "plans_mean", "secs_per_100_steps")


@dataclass(frozen=True)
class MetricsRow:
    env: str
    tier: str
    mode: str
    delta: float
    n_members: int
    loss_kind: str
    n_seeds: int
    return_mean: float
    return_std: float
    saved_nfe: float
    plans_mean: float
    secs_per_100_steps: float | None = None

    def as_csv_fields(self) -> list[str]:
        return [
            self.env, self.tier, self.mode, _fmt(self.delta), str(self.n_members),
            self.loss_kind, str(self.n_seeds), _fmt(self.return_mean),
            _fmt(self.return_std), _fmt(self.saved_nfe), _fmt(self.plans_mean),
            "" if self.secs_per_100_steps is None else _fmt(self.secs_per_100_steps),
        ]


def _fmt(x: float) -> str:
    return repr(float(x))


def write_metrics_csv(rows: list[MetricsRow], path: str | Path) -> None:
    """Write rows in a fixed column order; timing stays empty unless measured."""
    lines = [",".join(CSV_COLUMNS)]
    lines.extend(",".join(row.as_csv_fields()) for row in rows)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("ascii"))


def summarize(traces: list[EpisodeTrace], refs: ReferenceReturns, *, env: str,
              tier: str, mode: str, delta: float, n_members: int,
              loss_kind: str) -> MetricsRow:
    norm = [normalized_return(t.episode_return, refs) for t in traces]
    saved = [saved_nfe_fraction(t) for t in traces]
    plans = [t.plans for t in traces]
    return MetricsRow(
        env=env, tier=tier, mode=mode, delta=delta, n_members=n_members,
        loss_kind=loss_kind, n_seeds=len(traces),
        return_mean=float(np.mean(norm)), return_std=float(np.std(norm)),
        saved_nfe=float(np.mean(saved)), plans_mean=float(np.mean(plans)),
    )


@dataclass(frozen=True)
class LoadedRun:
    cfg: RunConfig
    spec: EnvSpec
    model: DiffusionModel
    ensemble: Ensemble
    refs: ReferenceReturns


def load_run(cfg: RunConfig) -> LoadedRun:
    """Load the trained artifacts a config points at, plus normalization references."""
    for path, what in ((cfg.diffusion_path, "planner checkpoint"),
                       (cfg.ensemble_path, "ensemble checkpoint")):
        if not path.is_file():
            raise ConfigError(f"{what} not found: {path}")
    spec = cfg.env_spec()
    model = load_diffusion(cfg.diffusion_path)
    ensemble = load_ensemble(cfg.ensemble_path)
    refs = reference_returns(spec, cfg.eval.reference_episodes)
    return LoadedRun(cfg, spec, model, ensemble, refs)


def evaluate_models(run: LoadedRun, *, mode: str | None = None,
                    delta: float | None = None, n_seeds: int | None = None,
                    ensemble: Ensemble | None = None) -> MetricsRow:
    cfg = run.cfg
    ens = ensemble if ensemble is not None else run.ensemble
    pcfg = cfg.policy_config(mode=mode, delta=delta)
    seeds = n_seeds if n_seeds is not None else cfg.eval.n_seeds
    traces = run_seeds(run.spec, run.model, ens, pcfg, cfg.seed, seeds)
    return summarize(traces, run.refs, env=cfg.env_name, tier=cfg.dataset.tier,
                     mode=pcfg.mode, delta=pcfg.delta, n_members=ens.n_members,
                     loss_kind=ens.loss_kind)


def evaluate(cfg: RunConfig, *, n_seeds: int | None = None) -> MetricsRow:
    """Evaluate the configured policy mode over paired seeds."""
    return evaluate_models(load_run(cfg), n_seeds=n_seeds)


def sweep_delta(cfg: RunConfig, deltas: list[float] | None = None,
                *, n_seeds: int | None = None) -> tuple[list[MetricsRow], dict]:
    """Evaluate the adaptive mode across thresholds, plus an always-replan baseline row.

    Returns the rows and a plot-data mapping (x: delta, y: normalized return,
    annotation: saved NFE fraction) that matches the packaged JSON schema.
    """
    run = load_run(cfg)
    ds = list(deltas) if deltas is not None else list(cfg.eval.deltas)
    if not ds:
        raise ConfigError("no thresholds to sweep: set eval.deltas or pass --deltas")
    for d in ds:
        if math.isnan(d) or d < 0.0:
            raise ConfigError(f"sweep threshold must be >= 0, got {d}")
    rows = [evaluate_models(run, mode="always_replan", delta=0.0, n_seeds=n_seeds)]
    rows.extend(evaluate_models(run, mode="adaptive", delta=d, n_seeds=n_seeds)
                for d in ds)
    adaptive = rows[1:]
    plot = {
        "schema_version": 1,
        "env": cfg.env_name,
        "tier": cfg.dataset.tier,
        "x_label": "uncertainty threshold",
        "y_label": "normalized return",
        "annotation_label": "saved NFE fraction",
        "x": [r.delta for r in adaptive],
        "y": [r.return_mean for r in adaptive],
        "y_err": [r.return_std / math.sqrt(r.n_seeds) for r in adaptive],
        "annotation": [r.saved_nfe for r in adaptive],
    }
    return rows, plot


def ablate_members(cfg: RunConfig, members: list[int] | None = None,
                   *, n_seeds: int | None = None) -> list[MetricsRow]:
    """Evaluate adaptive control with leading subsets of the trained ensemble.

    A single member carries no disagreement signal (its spread is identically
    zero), so the M=1 row is forced to always-replan semantics and reports a
    saved-NFE fraction of 0.
    """
    run = load_run(cfg)
    ms = list(members) if members is not None else list(cfg.eval.members)
    if not ms:
        raise ConfigError("no member counts to ablate: set eval.members or pass --members")
    rows = []
    for m in ms:
        if not 1 <= m <= run.ensemble.n_members:
            raise ConfigError(
                f"member count {m} out of range 1..{run.ensemble.n_members}")
        if m == 1:
            rows.append(evaluate_models(run, mode="always_replan", delta=0.0,
                                        ensemble=run.ensemble.prefix(1), n_seeds=n_seeds))
        else:
            rows.append(evaluate_models(run, mode="adaptive",
                                        ensemble=run.ensemble.prefix(m), n_seeds=n_seeds))
    return rows


@dataclass(frozen=True)
class TimingReport:
    env: str
    delta: float
    n_steps: int
    repeats: int
    always_secs_per_100: list[float]
    adaptive_secs_per_100: list[float]
    always_median: float
    adaptive_median: float
    speedup: float
    always_saved_nfe: float
    adaptive_saved_nfe: float

    def to_json(self) -> dict:
        return {
            "env": self.env, "delta": self.delta, "n_steps": self.n_steps,
            "repeats": self.repeats,
            "always_secs_per_100": self.always_secs_per_100,
            "adaptive_secs_per_100": self.adaptive_secs_per_100,
            "always_median_secs_per_100": self.always_median,
            "adaptive_median_secs_per_100": self.adaptive_median,
            "speedup": self.speedup,
            "always_saved_nfe": self.always_saved_nfe,
            "adaptive_saved_nfe": self.adaptive_saved_nfe,
        }


def bench_time(cfg: RunConfig) -> TimingReport:
    """Measure wall-clock seconds per 100 control steps, adaptive vs always-replan.

    Episodes are capped at ``eval.bench_steps`` steps.  One warmup episode per
    mode is discarded, then ``eval.bench_repeats`` timed episodes run per mode;
    the report carries every sample plus medians and their ratio.
    """
    run = load_run(cfg)
    n_steps = cfg.eval.bench_steps
    spec = cfg.env_spec(max_steps=n_steps)
    repeats = cfg.eval.bench_repeats

    def series(mode: str, delta: float) -> tuple[list[float], float]:
        pcfg = run.cfg.policy_config(mode=mode, delta=delta, max_steps=n_steps)
        run_episode(spec, run.model, run.ensemble, pcfg, RngStream(cfg.seed, 0))
        secs, saved = [], []
        for i in range(repeats):
            trace = run_episode(spec, run.model, run.ensemble, pcfg,
                                RngStream(cfg.seed + 1 + i, 0))
            secs.append(100.0 * trace.wall_total / trace.steps)
            saved.append(saved_nfe_fraction(trace))
        return secs, float(np.mean(saved))

    always_secs, always_saved = series("always_replan", 0.0)
    adaptive_secs, adaptive_saved = series("adaptive", cfg.policy.delta)
    always_med = statistics.median(always_secs)
    adaptive_med = statistics.median(adaptive_secs)
    if adaptive_med <= 0.0:
        raise ConfigError("adaptive timing median is zero; nothing to compare")
    return TimingReport(
        env=cfg.env_name, delta=cfg.policy.delta, n_steps=n_steps, repeats=repeats,
        always_secs_per_100=always_secs, adaptive_secs_per_100=adaptive_secs,
        always_median=always_med, adaptive_median=adaptive_med,
        speedup=always_med / adaptive_med,
        always_saved_nfe=always_saved, adaptive_saved_nfe=adaptive_saved,
    )


def write_json(data: dict, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")
