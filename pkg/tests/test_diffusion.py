"""Noise schedules, forward/reverse kernels, and planner training."""

import dataclasses
import math

import numpy as np
import pytest

from adaplan import nn
from adaplan.dataset import NormStats
from adaplan.diffusion import (
    TIME_EMBED_DIM,
    DiffusionModel,
    build_schedule,
    load_diffusion,
    q_sample,
    sample_plan,
    sample_windows,
    save_diffusion,
    time_embedding,
    train_diffusion,
)
from adaplan.errors import (
    ConfigError,
    NumericError,
    SamplingDivergedError,
    ShapeError,
)
from adaplan.rng import RngStream

from conftest import build_synth_dataset


# ---------- schedules ----------

def cosine_bar_oracle(k: int, n_steps: int) -> float:
    """Direct evaluation of the squared-cosine level at step k over f(0)."""
    def f(j):
        return math.cos(((j / n_steps + 0.008) / 1.008) * (math.pi / 2.0)) ** 2
    return f(k) / f(0)


def test_cosine_midpoint_matches_formula():
    s = build_schedule(100, "cosine")
    # the 1e-3 alpha clip only bites next to the terminal step, so the
    # midpoint must match the raw formula
    assert abs(s.alpha_bar(50) - cosine_bar_oracle(50, 100)) < 1e-12
    assert abs(s.alpha_bar(50) - 0.49384359044063775) < 1e-12


@pytest.mark.parametrize("kind", ["cosine", "linear"])
@pytest.mark.parametrize("n_steps", [1, 10, 100])
def test_alpha_bar_one_equals_alpha_one(kind, n_steps):
    s = build_schedule(n_steps, kind)
    assert s.alpha_bar(1) == s.alpha(1)


@pytest.mark.parametrize("kind", ["cosine", "linear"])
@pytest.mark.parametrize("n_steps", [1, 10, 100])
def test_schedule_shape_and_monotonicity(kind, n_steps):
    s = build_schedule(n_steps, kind)
    assert s.n_steps == n_steps
    assert np.all(s.alphas > 0.0) and np.all(s.alphas < 1.0)
    bars = np.concatenate([[1.0], s.alpha_bars])
    assert np.all(np.diff(bars) < 0.0)
    # cumulative-product identity
    assert np.allclose(s.alpha_bars, np.cumprod(s.alphas), rtol=1e-12, atol=0)


@pytest.mark.parametrize("kind", ["cosine", "linear"])
def test_final_step_is_deterministic(kind):
    s = build_schedule(1, kind)
    assert s.sigma(1) == 0.0
    s = build_schedule(50, kind)
    assert s.sigma(1) == 0.0
    assert np.all(s.sigmas[1:] > 0.0)


@pytest.mark.parametrize("kind", ["cosine", "linear"])
@pytest.mark.parametrize("n_steps", [1, 10, 50, 100, 1000])
def test_terminal_level_is_tiny(kind, n_steps):
    s = build_schedule(n_steps, kind)
    assert s.alpha_bar(n_steps) < 0.01


def test_schedule_rejects_bad_inputs():
    with pytest.raises(ConfigError):
        build_schedule(0)
    with pytest.raises(ConfigError):
        build_schedule(10, "quadratic")
    with pytest.raises(ConfigError):
        build_schedule(1001, "linear")


# ---------- forward kernel ----------

def test_q_sample_k0_is_identity():
    s = build_schedule(10)
    w = np.arange(8.0).reshape(2, 4)
    out = q_sample(s, w, 0, np.ones_like(w))
    assert np.array_equal(out, w)


def test_q_sample_zero_noise_scales_only():
    s = build_schedule(10)
    w = np.linspace(-1, 1, 6).reshape(3, 2)
    out = q_sample(s, w, 7, np.zeros_like(w))
    assert np.allclose(out, math.sqrt(s.alpha_bar(7)) * w, atol=0, rtol=1e-15)


def test_q_sample_rejects_bad_k_and_shape():
    s = build_schedule(10)
    w = np.zeros((2, 2))
    with pytest.raises(ConfigError):
        q_sample(s, w, 11, w)
    with pytest.raises(ShapeError):
        q_sample(s, w, 3, np.zeros((2, 3)))


def test_closed_form_matches_iterated_kernel():
    """Three single-step noisings compose to the k=3 marginal (Monte Carlo)."""
    s = build_schedule(3)
    x0 = np.array([0.7, -0.4, 1.1, 0.0])
    n = 100_000
    gen = RngStream(77, 0).generator()
    x = np.broadcast_to(x0, (n, 4)).copy()
    for k in (1, 2, 3):
        a = s.alpha(k)
        x = math.sqrt(a) * x + math.sqrt(1.0 - a) * gen.standard_normal(x.shape)
    ab = s.alpha_bar(3)
    want_mean = math.sqrt(ab) * x0
    want_var = 1.0 - ab
    se_mean = math.sqrt(want_var / n)
    se_var = want_var * math.sqrt(2.0 / (n - 1))
    assert np.all(np.abs(x.mean(axis=0) - want_mean) < 3 * se_mean)
    assert np.all(np.abs(x.var(axis=0) - want_var) < 3 * se_var)


# ---------- time embedding ----------

def test_time_embedding_shape_and_range():
    e = time_embedding(5)
    assert e.shape == (TIME_EMBED_DIM,)
    assert np.all(np.abs(e) <= 1.0)
    batch = time_embedding(np.arange(4))
    assert batch.shape == (4, TIME_EMBED_DIM)
    assert np.array_equal(batch[2], time_embedding(2))


def test_time_embedding_distinguishes_steps():
    e = time_embedding(np.arange(1, 51))
    d = np.linalg.norm(e[:, None, :] - e[None, :, :], axis=-1)
    off_diag = d + np.eye(50) * 1e9
    assert off_diag.min() > 1e-3


def test_time_embedding_rejects_odd_dim():
    with pytest.raises(ConfigError):
        time_embedding(3, dim=7)


# ---------- training ----------

def constant_window_dataset(value=0.25, length=24):
    states = np.full((length, 1), value)
    actions = np.zeros((length - 1, 1))
    ds = build_synth_dataset([states], [actions])
    # pin the normalization span by hand so the constant value sits at a
    # nontrivial normalized coordinate instead of collapsing to 0
    norm = NormStats(np.full(1, -1.0), np.full(1, 1.0), np.full(1, -1.0), np.full(1, 1.0))
    return dataclasses.replace(ds, norm=norm)


def test_training_reduces_holdout_loss(tiny_bundle):
    log = tiny_bundle.model.train_log
    assert log.holdout_loss[-1] < log.holdout_loss[0]


def test_training_is_deterministic(tmp_path):
    ds = constant_window_dataset()
    kw = dict(hidden=(16, 16))
    cfg = nn.TrainConfig(steps=40, batch_size=16, learning_rate=1e-3)
    m1 = train_diffusion(ds, 4, 5, cfg, RngStream(3, 2), **kw)
    m2 = train_diffusion(ds, 4, 5, cfg, RngStream(3, 2), **kw)
    p1, p2 = tmp_path / "a.adpl", tmp_path / "b.adpl"
    save_diffusion(m1, p1)
    save_diffusion(m2, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_constant_window_recovery():
    # the linear schedule keeps every reverse-step gain near 1 at this step
    # count, so sample scatter reflects fit quality rather than amplification
    ds = constant_window_dataset(value=0.25, length=40)
    cfg = nn.TrainConfig(steps=1000, batch_size=64, learning_rate=2e-3)
    model = train_diffusion(ds, 4, 10, cfg, RngStream(5, 2), hidden=(64, 64),
                            schedule_kind="linear")
    target = ds.norm.normalize_state(np.full((4, 1), 0.25)).reshape(-1)
    win = sample_windows(model, 64, RngStream(6, 0))
    got = ds.norm.normalize_state(win.reshape(-1, 1)).reshape(64, -1)
    assert np.max(np.abs(got - target)) < 0.1


def test_training_rejects_too_few_windows():
    states = np.zeros((4, 1))
    ds = build_synth_dataset([states], [np.zeros((3, 1))])
    with pytest.raises(ConfigError):
        train_diffusion(ds, 4, 5, nn.TrainConfig(steps=1), RngStream(0, 0))


# ---------- sampling ----------

def test_plan_first_state_is_pinned(tiny_bundle):
    model = tiny_bundle.model
    s_t = np.array([0.05, -0.1, 0.2, 0.0])
    plan = sample_plan(model, s_t, RngStream(9, 4))
    pinned = model.norm.denormalize_state(model.norm.normalize_state(s_t))
    assert np.array_equal(plan.states[0], pinned)
    assert plan.states.shape == (model.horizon, model.state_dim)


def test_plan_nfe_equals_schedule_steps(tiny_bundle):
    model = tiny_bundle.model
    plan = sample_plan(model, np.zeros(4), RngStream(1, 1))
    assert plan.nfe == model.schedule.n_steps


def test_sampling_is_deterministic(tiny_bundle):
    model = tiny_bundle.model
    s_t = np.array([0.0, 0.0, 0.1, -0.1])
    p1 = sample_plan(model, s_t, RngStream(4, 2))
    p2 = sample_plan(model, s_t, RngStream(4, 2))
    assert np.array_equal(p1.states, p2.states)
    p3 = sample_plan(model, s_t, RngStream(4, 3))
    assert not np.array_equal(p1.states, p3.states)


def test_sample_plan_rejects_bad_conditioning(tiny_bundle):
    model = tiny_bundle.model
    with pytest.raises(ShapeError):
        sample_plan(model, np.zeros(3), RngStream(0, 0))
    with pytest.raises(NumericError):
        sample_plan(model, np.array([0.0, np.nan, 0.0, 0.0]), RngStream(0, 0))


def test_sample_windows_conditioning(tiny_bundle):
    model = tiny_bundle.model
    s_t = np.array([0.1, 0.1, 0.0, 0.0])
    win = sample_windows(model, 5, RngStream(2, 8), current_state=s_t)
    pinned = model.norm.denormalize_state(model.norm.normalize_state(s_t))
    for i in range(5):
        assert np.array_equal(win[i, 0], pinned)
    free = sample_windows(model, 5, RngStream(2, 8))
    assert free.shape == (5, model.horizon, model.state_dim)


def test_divergence_is_reported_with_step():
    """A denoiser pushed to overflow must fail loudly, not return garbage."""
    flat = 4
    params = nn.mlp_init([flat + TIME_EMBED_DIM, 4, flat], RngStream(0, 1), "relu")
    huge = tuple(b if i < len(params.biases) - 1 else np.full(flat, 1e308)
                 for i, b in enumerate(params.biases))
    params = dataclasses.replace(params, biases=huge)
    norm = NormStats(np.full(1, -1.0), np.full(1, 1.0), np.full(1, -1.0), np.full(1, 1.0))
    model = DiffusionModel(params, build_schedule(5), 4, 1, norm)
    with np.errstate(over="ignore", invalid="ignore"), \
            pytest.raises(SamplingDivergedError) as err:
        sample_plan(model, np.zeros(1), RngStream(0, 0))
    assert "5" in str(err.value) or "4" in str(err.value)


def test_checkpoint_round_trip(tiny_bundle, tmp_path):
    model = tiny_bundle.model
    path = tmp_path / "diff.adpl"
    save_diffusion(model, path)
    back = load_diffusion(path)
    assert back.horizon == model.horizon
    assert back.schedule.kind == model.schedule.kind
    assert back.schedule.n_steps == model.schedule.n_steps
    assert back.norm.equals(model.norm)
    # weights are stored in single precision, so reloaded plans agree to
    # roughly float32 resolution, not bitwise
    s_t = np.array([0.02, 0.0, -0.05, 0.1])
    a = sample_plan(model, s_t, RngStream(8, 8)).states
    b = sample_plan(back, s_t, RngStream(8, 8)).states
    assert np.allclose(a, b, rtol=1e-4, atol=1e-4)
    c = sample_plan(back, s_t, RngStream(8, 8)).states
    assert np.array_equal(b, c)
