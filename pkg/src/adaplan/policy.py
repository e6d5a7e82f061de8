"""Plan-following control with uncertainty-gated replanning.

Three modes over the same machinery:

adaptive      sample a plan, act along it while the ensemble's uncertainty
              stays below delta, replacing plan slots with observations as
              they arrive; replan as soon as the gate trips or the plan runs
              out of transitions.
always_replan adaptive with delta = 0: every step replans (the gate can never
              pass since uncertainties are nonnegative).
static        sample a plan, execute all H-1 actions computed from the plan's
              predicted state pairs without looking at observations, then
              replan from wherever the system actually ended up.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import NormStats
from .diffusion import DiffusionModel, sample_plan
from .ensemble import Ensemble, predict, predict_batch
from .envs import DoneReason, EnvSpec, reset, step
from .errors import ConfigError, NumericError
from .rng import RngStream

MODES = ("adaptive", "always_replan", "static")

TRACE_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class PolicyConfig:
    """Control-loop settings; horizon/steps must match the trained models."""

    mode: str
    delta: float
    horizon: int
    n_denoise_steps: int
    max_steps: int
    uncertainty_reduction: str = "mean"


@dataclass(frozen=True)
class EpisodeTrace:
    """Everything one episode did, sufficient to audit or replay it."""

    states: np.ndarray     # (T, state_dim) observed state at each action
    actions: np.ndarray    # (T, action_dim) commanded actions
    rewards: np.ndarray    # (T,)
    u: np.ndarray          # (T,) uncertainty behind each action; NaN if skipped
    replanned: np.ndarray  # (T,) bool, True where a fresh plan was sampled
    final_state: np.ndarray
    steps: int
    plans: int
    nfe_total: int
    episode_return: float
    done_reason: DoneReason
    seed: tuple[int, int]
    wall_total: float
    wall_diffusion: float
    wall_ensemble: float


def saved_nfe_fraction(trace: EpisodeTrace) -> float:
    """Fraction of per-step replans avoided: 1 - plans/steps."""
    return 1.0 - trace.plans / trace.steps


def _validate(spec: EnvSpec, model: DiffusionModel, ensemble: Ensemble,
              cfg: PolicyConfig) -> None:
    if cfg.mode not in MODES:
        raise ConfigError(f"unknown mode {cfg.mode!r}, expected one of {MODES}")
    if math.isnan(cfg.delta) or cfg.delta < 0.0:
        raise ConfigError(f"delta must be >= 0, got {cfg.delta}")
    if cfg.horizon < 2:
        raise ConfigError(f"horizon must be >= 2, got {cfg.horizon}")
    if cfg.horizon != model.horizon:
        raise ConfigError(f"config horizon {cfg.horizon} != planner horizon {model.horizon}")
    if cfg.n_denoise_steps != model.schedule.n_steps:
        raise ConfigError(
            f"config denoise steps {cfg.n_denoise_steps} != planner schedule {model.schedule.n_steps}")
    if cfg.max_steps != spec.max_steps:
        raise ConfigError(f"config max_steps {cfg.max_steps} != environment cap {spec.max_steps}")
    if model.state_dim != spec.state_dim:
        raise ConfigError(f"planner state_dim {model.state_dim} != environment {spec.state_dim}")
    if ensemble.state_dim != spec.state_dim or ensemble.action_dim != spec.action_dim:
        raise ConfigError("ensemble dimensions do not match the environment")
    if not model.norm.equals(ensemble.norm):
        raise ConfigError("planner and ensemble were trained with different normalization stats")


class _Recorder:
    def __init__(self):
        self.states: list[np.ndarray] = []
        self.actions: list[np.ndarray] = []
        self.rewards: list[float] = []
        self.u: list[float] = []
        self.replanned: list[bool] = []

    def add(self, state, action, reward, u, replanned):
        self.states.append(np.asarray(state, dtype=np.float64))
        self.actions.append(np.asarray(action, dtype=np.float64))
        self.rewards.append(float(reward))
        self.u.append(float(u))
        self.replanned.append(bool(replanned))


def run_episode(
    spec: EnvSpec,
    model: DiffusionModel,
    ensemble: Ensemble,
    cfg: PolicyConfig,
    rng: RngStream,
) -> EpisodeTrace:
    """Roll out one episode under the configured replanning mode.

    Randomness: the reset uses ``rng.child(0)`` and plan p uses
    ``rng.child(1).child(p)``; reruns with the same stream replay exactly.
    """
    _validate(spec, model, ensemble, cfg)
    delta = 0.0 if cfg.mode == "always_replan" else cfg.delta
    red = cfg.uncertainty_reduction

    env_state = reset(spec, rng.child(0))
    plan_base = rng.child(1)
    rec = _Recorder()
    plans = 0
    nfe_total = 0
    wall_diffusion = 0.0
    wall_ensemble = 0.0
    done = False
    reason = DoneReason.NONE
    horizon = cfg.horizon
    t_start = time.perf_counter()

    if cfg.mode in ("adaptive", "always_replan"):
        while not done:
            t0 = time.perf_counter()
            plan = sample_plan(model, env_state.values, plan_base.child(plans))
            wall_diffusion += time.perf_counter() - t0
            plans += 1
            nfe_total += plan.nfe
            slots = plan.states.copy()  # slot 0 holds the conditioning state
            t0 = time.perf_counter()
            pred = predict(ensemble, env_state.values, slots[1], reduction=red)
            wall_ensemble += time.perf_counter() - t0
            replanned = True
            j = 0
            while True:
                res = step(spec, env_state, pred.action)
                rec.add(env_state.values, pred.action, res.reward, pred.u, replanned)
                replanned = False
                env_state = res.next_state
                j += 1
                if res.done:
                    done, reason = True, res.done_reason
                    break
                slots[j] = env_state.values  # the slot just reached becomes ground truth
                if j >= horizon - 1:
                    break  # plan exhausted
                t0 = time.perf_counter()
                pred = predict(ensemble, env_state.values, slots[j + 1], reduction=red)
                wall_ensemble += time.perf_counter() - t0
                if not pred.u < delta:
                    break  # gate tripped: discard the pending action and replan
    else:  # static
        first_batch = True
        while not done:
            t0 = time.perf_counter()
            plan = sample_plan(model, env_state.values, plan_base.child(plans))
            wall_diffusion += time.perf_counter() - t0
            plans += 1
            nfe_total += plan.nfe
            t0 = time.perf_counter()
            actions, us = predict_batch(ensemble, plan.states[:-1], plan.states[1:],
                                        with_uncertainty=first_batch, reduction=red)
            wall_ensemble += time.perf_counter() - t0
            for i in range(horizon - 1):
                res = step(spec, env_state, actions[i])
                u_i = us[i] if first_batch else math.nan
                rec.add(env_state.values, actions[i], res.reward, u_i, i == 0)
                env_state = res.next_state
                if res.done:
                    done, reason = True, res.done_reason
                    break
            first_batch = False

    wall_total = time.perf_counter() - t_start
    if nfe_total != plans * model.schedule.n_steps:
        raise NumericError(
            f"NFE accounting broke: {nfe_total} != {plans} plans x {model.schedule.n_steps}")

    return EpisodeTrace(
        states=np.stack(rec.states),
        actions=np.stack(rec.actions),
        rewards=np.asarray(rec.rewards),
        u=np.asarray(rec.u),
        replanned=np.asarray(rec.replanned, dtype=bool),
        final_state=env_state.values,
        steps=len(rec.rewards),
        plans=plans,
        nfe_total=nfe_total,
        episode_return=float(np.sum(np.asarray(rec.rewards))),
        done_reason=reason,
        seed=rng.as_tuple(),
        wall_total=wall_total,
        wall_diffusion=wall_diffusion,
        wall_ensemble=wall_ensemble,
    )


def _jsonable(x: float) -> float | None:
    return None if math.isnan(x) else x


def save_trace(trace: EpisodeTrace, path: str | Path) -> None:
    """Write a trace as JSON lines: one header object, then one object per step.

    NaN uncertainties serialize as null.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "kind": "trace_header",
        "schema_version": TRACE_SCHEMA_VERSION,
        "steps": trace.steps,
        "plans": trace.plans,
        "nfe_total": trace.nfe_total,
        "episode_return": trace.episode_return,
        "done_reason": trace.done_reason.name.lower(),
        "seed": list(trace.seed),
        "wall_total": trace.wall_total,
        "wall_diffusion": trace.wall_diffusion,
        "wall_ensemble": trace.wall_ensemble,
        "final_state": trace.final_state.tolist(),
    }
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for t in range(trace.steps):
            row = {
                "kind": "step",
                "t": t,
                "state": trace.states[t].tolist(),
                "action": trace.actions[t].tolist(),
                "reward": trace.rewards[t],
                "u": _jsonable(trace.u[t]),
                "replanned": bool(trace.replanned[t]),
            }
            f.write(json.dumps(row, sort_keys=True) + "\n")


def load_trace(path: str | Path) -> EpisodeTrace:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ConfigError(f"empty trace file {path}")
    header = json.loads(lines[0])
    if header.get("kind") != "trace_header":
        raise ConfigError(f"first line of {path} is not a trace header")
    steps = []
    for line in lines[1:]:
        obj = json.loads(line)
        if obj.get("kind") == "step":
            steps.append(obj)
    steps.sort(key=lambda o: o["t"])
    u = np.array([math.nan if s["u"] is None else float(s["u"]) for s in steps])
    return EpisodeTrace(
        states=np.array([s["state"] for s in steps], dtype=np.float64),
        actions=np.array([s["action"] for s in steps], dtype=np.float64),
        rewards=np.array([s["reward"] for s in steps], dtype=np.float64),
        u=u,
        replanned=np.array([s["replanned"] for s in steps], dtype=bool),
        final_state=np.asarray(header["final_state"], dtype=np.float64),
        steps=int(header["steps"]),
        plans=int(header["plans"]),
        nfe_total=int(header["nfe_total"]),
        episode_return=float(header["episode_return"]),
        done_reason=DoneReason[header["done_reason"].upper()],
        seed=(int(header["seed"][0]), int(header["seed"][1])),
        wall_total=float(header["wall_total"]),
        wall_diffusion=float(header["wall_diffusion"]),
        wall_ensemble=float(header["wall_ensemble"]),
    )
