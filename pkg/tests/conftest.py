"""Shared fixtures: synthetic dataset builders and trained model bundles.

The expensive session-scoped bundles (full smoke-config training) live here so
the acceptance tests and the heavier behavioral tests share one training run.
"""

import dataclasses
import time
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest

from adaplan.bench import reference_returns, run_seeds, summarize
from adaplan.config import load_run_config
from adaplan.dataset import (OfflineDataset, TierRecipe, TrajectoryRecord, fit_norm,
                             generate_dataset)
from adaplan.diffusion import train_diffusion
from adaplan.ensemble import train_ensemble
from adaplan.envs import DoneReason, make_env_spec
from adaplan.nn import TrainConfig
from adaplan.policy import PolicyConfig
from adaplan.rng import RngStream

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


def build_synth_dataset(states_list, actions_list, env_name="synthetic"):
    """Pack raw per-episode state/action arrays into a normalized dataset."""
    records = tuple(
        TrajectoryRecord(
            np.asarray(s, np.float32).reshape(len(s), -1),
            np.asarray(a, np.float32).reshape(len(a), -1),
            np.zeros(len(a), np.float32),
            DoneReason.TIME_LIMIT,
        )
        for s, a in zip(states_list, actions_list))
    return OfflineDataset(env_name, "medium", records, fit_norm(records), (0, 0))


@pytest.fixture(scope="session")
def di_spec():
    return make_env_spec("double_integrator_2d")

@pytest.fixture(scope="session")
def pend_spec():
    return make_env_spec("pendulum_swingup")


@pytest.fixture(scope="session")
def di_tiny_dataset(di_spec):
    return generate_dataset(di_spec, "medium_expert", 12, RngStream(101, 1), TierRecipe())


@pytest.fixture(scope="session")
def tiny_bundle(di_spec, di_tiny_dataset):
    """Small trained planner + ensemble for control-loop plumbing tests."""
    model = train_diffusion(di_tiny_dataset, 8, 6, TrainConfig(steps=120, batch_size=32),
                            RngStream(102, 0), hidden=(48, 48))
    ens = train_ensemble(di_tiny_dataset, "mse", 2, TrainConfig(steps=150, batch_size=32),
                         RngStream(103, 0), hidden=(32, 32))
    return SimpleNamespace(spec=di_spec, dataset=di_tiny_dataset, model=model,
                           ensemble=ens,
                           pcfg=lambda mode, delta: PolicyConfig(
                               mode, delta, 8, 6, di_spec.max_steps))


class SmokeRun:
    """Artifacts trained from a checked-in config, with memoized evaluations.

    Wall-clock seconds for each training stage and evaluation batch are kept
    in ``train_secs`` / ``trace_secs`` so time-budgeted checks can report the
    cost of work they reuse from the shared fixture.
    """

    def __init__(self, config_name: str, tmp: Path):
        cfg = load_run_config(CONFIG_DIR / config_name)
        cfg = dataclasses.replace(cfg, base_dir=str(tmp))
        self.cfg = cfg
        self.spec = cfg.env_spec()
        self.train_secs: dict[str, float] = {}
        self.trace_secs: dict[tuple, float] = {}
        t0 = time.perf_counter()
        self.dataset = generate_dataset(self.spec, cfg.dataset.tier,
                                        cfg.dataset.n_episodes, RngStream(cfg.seed, 1),
                                        cfg.tier_recipe())
        self.train_secs["dataset"] = time.perf_counter() - t0
        d = cfg.diffusion
        t0 = time.perf_counter()
        self.model = train_diffusion(self.dataset, d.horizon, d.n_denoise_steps,
                                     cfg.diffusion_train_config(), RngStream(cfg.seed, 2),
                                     schedule_kind=d.schedule, hidden=d.hidden,
                                     activation=d.activation)
        self.train_secs["diffusion"] = time.perf_counter() - t0
        self.ensembles = {}
        self.refs = reference_returns(self.spec, cfg.eval.reference_episodes)
        self._traces = {}

    def ensemble(self, loss_kind: str, train_cfg=None):
        if loss_kind not in self.ensembles:
            cfg = self.cfg
            t0 = time.perf_counter()
            self.ensembles[loss_kind] = train_ensemble(
                self.dataset, loss_kind, cfg.ensemble.n_members,
                train_cfg or cfg.ensemble_train_config(), RngStream(cfg.seed, 3))
            self.train_secs[f"ensemble_{loss_kind}"] = time.perf_counter() - t0
        return self.ensembles[loss_kind]

    def traces(self, mode: str, delta: float, loss_kind: str = "mse",
               n_seeds: int | None = None):
        cfg = self.cfg
        n = n_seeds if n_seeds is not None else cfg.eval.n_seeds
        key = (mode, float(delta), loss_kind, n)
        if key not in self._traces:
            pcfg = cfg.policy_config(mode=mode, delta=delta)
            t0 = time.perf_counter()
            self._traces[key] = run_seeds(self.spec, self.model,
                                          self.ensemble(loss_kind), pcfg, cfg.seed, n)
            self.trace_secs[key] = time.perf_counter() - t0
        return self._traces[key]

    def row(self, mode: str, delta: float, loss_kind: str = "mse",
            n_seeds: int | None = None):
        traces = self.traces(mode, delta, loss_kind, n_seeds)
        return summarize(traces, self.refs, env=self.cfg.env_name,
                         tier=self.cfg.dataset.tier, mode=mode, delta=delta,
                         n_members=self.cfg.ensemble.n_members, loss_kind=loss_kind)


@pytest.fixture(scope="session")
def smoke_me(tmp_path_factory):
    """DoubleIntegrator2D medium-expert bundle from the shipped smoke config."""
    return SmokeRun("di_medium_expert.toml", tmp_path_factory.mktemp("smoke_me"))


@pytest.fixture(scope="session")
def smoke_medium(tmp_path_factory):
    """DoubleIntegrator2D medium-tier bundle (static-degradation comparisons)."""
    return SmokeRun("di_medium.toml", tmp_path_factory.mktemp("smoke_med"))
