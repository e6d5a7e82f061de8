"""Denoising diffusion over fixed-length state windows, used as a planner.

The model is a plain MLP that predicts the added noise for a flattened
normalized window concatenated with a sinusoidal embedding of the step index.
Plans are drawn by ancestral sampling; conditioning on the current state is
done by inpainting: the first-state slot is overwritten with the normalized
conditioning state after every denoising step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .checkpoint import read_container, write_container
from .dataset import NormStats, OfflineDataset, extract_windows
from .errors import ConfigError, NumericError, SamplingDivergedError, ShapeError
from .rng import RngStream

SCHEDULE_KINDS = ("cosine", "linear")

# the linear schedule is defined by this reference discretization and
# respaced to the requested number of steps
_LINEAR_REFERENCE_STEPS = 1000
_LINEAR_BETA_START = 1e-4
_LINEAR_BETA_END = 0.02

_ALPHA_FLOOR = 1e-3

TIME_EMBED_DIM = 32


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise constants, 1-indexed: entry i holds step k = i + 1.

    ``sigmas[k]`` is the posterior standard deviation
    sqrt((1 - alpha_bar[k-1]) / (1 - alpha_bar[k]) * (1 - alpha[k])) with
    alpha_bar[0] := 1, so sigma at k=1 is exactly 0.
    """

    kind: str
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray

    @property
    def n_steps(self) -> int:
        return self.alphas.shape[0]

    def alpha(self, k: int) -> float:
        return float(self.alphas[k - 1])

    def alpha_bar(self, k: int) -> float:
        """alpha_bar at step k, with the k=0 convention alpha_bar(0) = 1."""
        if k == 0:
            return 1.0
        return float(self.alpha_bars[k - 1])

    def sigma(self, k: int) -> float:
        return float(self.sigmas[k - 1])


def build_schedule(n_steps: int, kind: str = "cosine") -> NoiseSchedule:
    """Construct a noise schedule with ``n_steps`` denoising steps.

    cosine: alpha_bar(k) = f(k)/f(0), f(k) = cos^2(((k/K + 0.008)/1.008) * pi/2),
    with each alpha clipped to >= 1e-3 and alpha_bar rebuilt from the clipped
    alphas so the cumulative-product identity stays exact.

    linear: betas run linearly 1e-4..0.02 over a 1000-step reference table;
    shorter schedules subsample that table's alpha_bar at even strides.
    """
    if n_steps < 1:
        raise ConfigError(f"schedule needs at least one step, got {n_steps}")
    if kind == "cosine":
        k = np.arange(n_steps + 1, dtype=np.float64)
        f = np.cos(((k / n_steps + 0.008) / 1.008) * (math.pi / 2.0)) ** 2
        raw_bars = f / f[0]
        alphas = raw_bars[1:] / raw_bars[:-1]
        alphas = np.clip(alphas, _ALPHA_FLOOR, 1.0 - 1e-12)
        alpha_bars = np.cumprod(alphas)
    elif kind == "linear":
        if n_steps > _LINEAR_REFERENCE_STEPS:
            raise ConfigError(
                f"linear schedule supports at most {_LINEAR_REFERENCE_STEPS} steps, got {n_steps}")
        betas = np.linspace(_LINEAR_BETA_START, _LINEAR_BETA_END, _LINEAR_REFERENCE_STEPS)
        ref_bars = np.cumprod(1.0 - betas)
        taus = np.floor(np.arange(1, n_steps + 1) * _LINEAR_REFERENCE_STEPS / n_steps).astype(int)
        alpha_bars = ref_bars[taus - 1]
        prev = np.concatenate([[1.0], alpha_bars[:-1]])
        alphas = alpha_bars / prev
    else:
        raise ConfigError(f"unknown schedule kind {kind!r}, expected one of {SCHEDULE_KINDS}")

    prev_bars = np.concatenate([[1.0], alpha_bars[:-1]])
    posterior_var = (1.0 - prev_bars) / (1.0 - alpha_bars) * (1.0 - alphas)
    sigmas = np.sqrt(posterior_var)

    schedule = NoiseSchedule(kind, alphas, alpha_bars, sigmas)
    _validate_schedule(schedule)
    return schedule


def _validate_schedule(s: NoiseSchedule) -> None:
    if not (np.all(s.alphas > 0.0) and np.all(s.alphas < 1.0)):
        raise NumericError("schedule alphas must lie strictly inside (0, 1)")
    if not np.all(np.diff(np.concatenate([[1.0], s.alpha_bars])) < 0.0):
        raise NumericError("alpha_bar must be strictly decreasing from 1")
    if not math.isclose(float(s.alpha_bars[0]), float(s.alphas[0]), rel_tol=0, abs_tol=0):
        raise NumericError("alpha_bar[1] must equal alpha[1]")
    if float(s.alpha_bars[-1]) >= 0.01:
        raise NumericError(f"terminal alpha_bar {s.alpha_bars[-1]:.4g} not < 0.01")


def q_sample(schedule: NoiseSchedule, window: np.ndarray, k: int, eps: np.ndarray) -> np.ndarray:
    """Closed-form forward noising: sqrt(ab_k)*window + sqrt(1-ab_k)*eps.

    ``k = 0`` is the identity (alpha_bar(0) = 1 convention).
    """
    if not 0 <= k <= schedule.n_steps:
        raise ConfigError(f"step k={k} outside [0, {schedule.n_steps}]")
    w = np.asarray(window, dtype=np.float64)
    e = np.asarray(eps, dtype=np.float64)
    if w.shape != e.shape:
        raise ShapeError(f"noise shape {e.shape} != window shape {w.shape}")
    ab = schedule.alpha_bar(k)
    return math.sqrt(ab) * w + math.sqrt(1.0 - ab) * e


def time_embedding(k, dim: int = TIME_EMBED_DIM) -> np.ndarray:
    """Sinusoidal embedding of integer step indices; accepts a scalar or array."""
    if dim % 2 != 0 or dim < 2:
        raise ConfigError(f"time embedding dimension must be even and >= 2, got {dim}")
    ks = np.atleast_1d(np.asarray(k, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    angles = ks[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(angles), np.cos(angles)], axis=1)
    return emb[0] if np.isscalar(k) or np.ndim(k) == 0 else emb


@dataclass(frozen=True)
class DiffusionModel:
    """Trained denoiser plus everything needed to sample plans with it."""

    denoiser: nn.MlpParams
    schedule: NoiseSchedule
    horizon: int
    state_dim: int
    norm: NormStats
    time_dim: int = TIME_EMBED_DIM
    train_log: nn.TrainingLog | None = field(default=None, compare=False)

    @property
    def flat_dim(self) -> int:
        return self.horizon * self.state_dim


@dataclass(frozen=True)
class Plan:
    """A sampled open-loop state plan in raw (denormalized) units."""

    states: np.ndarray  # (horizon, state_dim) float64
    nfe: int
    seed: tuple[int, int]

    @property
    def horizon(self) -> int:
        return self.states.shape[0]


def train_diffusion(
    dataset: OfflineDataset,
    horizon: int,
    n_steps: int,
    cfg: nn.TrainConfig,
    rng: RngStream,
    *,
    schedule_kind: str = "cosine",
    hidden: tuple[int, ...] = (512, 512, 512),
    activation: str = "mish",
) -> DiffusionModel:
    """Fit the noise-prediction objective on dataset windows.

    Windows are split 90/10 into train/held-out via a seeded shuffle; the log
    records the training loss and the held-out loss (fixed evaluation draws,
    so curve points are comparable).
    """
    schedule = build_schedule(n_steps, schedule_kind)
    windows = extract_windows(dataset, horizon)
    if len(windows) < 2:
        raise ConfigError(f"need at least 2 windows to split, got {len(windows)}")
    X0 = np.stack([w.states.reshape(-1) for w in windows])
    n = X0.shape[0]
    flat = horizon * dataset.state_dim

    perm = rng.child(0).generator().permutation(n)
    n_hold = max(1, int(round(n * cfg.holdout_fraction)))
    if n_hold >= n:
        raise ConfigError(f"holdout fraction {cfg.holdout_fraction} leaves no training windows")
    hold, train = X0[perm[:n_hold]], X0[perm[n_hold:]]

    params = nn.mlp_init([flat + TIME_EMBED_DIM, *hidden, flat], rng.child(1), activation)
    adam = nn.adam_init(params, nn.AdamConfig(learning_rate=cfg.learning_rate))
    loss = nn.SquaredErrorLoss()
    gen = rng.child(2).generator()
    emb_table = time_embedding(np.arange(n_steps + 1), TIME_EMBED_DIM)
    log = nn.TrainingLog()

    def noised_batch(x0: np.ndarray, g: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        ks = g.integers(1, n_steps + 1, size=x0.shape[0])
        eps = g.standard_normal(x0.shape)
        ab = schedule.alpha_bars[ks - 1][:, None]
        xk = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
        return np.concatenate([xk, emb_table[ks]], axis=1), eps

    def holdout_loss(p: nn.MlpParams) -> float:
        g = rng.child(3).generator()  # fresh generator: same draws every call
        sub = hold if hold.shape[0] <= 512 else hold[:512]
        inp, eps = noised_batch(sub, g)
        return nn.loss_value(p, inp, eps, loss)

    log.holdout_steps.append(0)
    log.holdout_loss.append(holdout_loss(params))
    for it in range(cfg.steps):
        idx = gen.integers(0, train.shape[0], size=cfg.batch_size)
        inp, eps = noised_batch(train[idx], gen)
        value, grads = nn.grad(params, inp, eps, loss)
        adam, params = nn.adam_update(adam, params, grads)
        if (it + 1) % cfg.log_every == 0 or it + 1 == cfg.steps:
            log.steps.append(it + 1)
            log.train_loss.append(value)
    log.holdout_steps.append(cfg.steps)
    log.holdout_loss.append(holdout_loss(params))

    return DiffusionModel(params, schedule, horizon, dataset.state_dim, dataset.norm,
                          TIME_EMBED_DIM, log)


def _reverse_sample(
    model: DiffusionModel, n: int, rng: RngStream, cond_norm: np.ndarray | None
) -> tuple[np.ndarray, int]:
    """Ancestral sampling of ``n`` normalized windows; returns (samples, nfe).

    If ``cond_norm`` is given, the first-state slot is pinned to it on the
    initial noise and again after every denoising step.
    """
    schedule = model.schedule
    gen = rng.generator()
    x = gen.standard_normal((n, model.flat_dim))
    sd = model.state_dim
    if cond_norm is not None:
        x[:, :sd] = cond_norm
    nfe = 0
    for k in range(schedule.n_steps, 0, -1):
        emb = np.broadcast_to(time_embedding(k, model.time_dim), (n, model.time_dim))
        eps_hat = nn.mlp_forward(model.denoiser, np.concatenate([x, emb], axis=1))
        nfe += 1
        a_k = schedule.alpha(k)
        ab_k = schedule.alpha_bar(k)
        mean = (x - (1.0 - a_k) / math.sqrt(1.0 - ab_k) * eps_hat) / math.sqrt(a_k)
        if k > 1:
            x = mean + schedule.sigma(k) * gen.standard_normal(x.shape)
        else:
            x = mean
        if not np.isfinite(x).all():
            raise SamplingDivergedError(k)
        if cond_norm is not None:
            x[:, :sd] = cond_norm
    return x, nfe


def sample_plan(model: DiffusionModel, current_state: np.ndarray, rng: RngStream) -> Plan:
    """Sample one plan conditioned on the current raw state."""
    s = np.asarray(current_state, dtype=np.float64)
    if s.shape != (model.state_dim,):
        raise ShapeError(f"conditioning state shape {s.shape} != ({model.state_dim},)")
    if not np.isfinite(s).all():
        raise NumericError(f"conditioning state is not finite: {s}")
    cond = model.norm.normalize_state(s)
    flat, nfe = _reverse_sample(model, 1, rng, cond)
    if nfe != model.schedule.n_steps:
        raise NumericError(
            f"denoiser evaluation count {nfe} != schedule steps {model.schedule.n_steps}")
    states = model.norm.denormalize_state(flat[0].reshape(model.horizon, model.state_dim))
    return Plan(states, nfe, rng.as_tuple())


def sample_windows(
    model: DiffusionModel, n: int, rng: RngStream, current_state: np.ndarray | None = None
) -> np.ndarray:
    """Sample ``n`` windows in raw units, optionally conditioned on a state.

    Unconditioned draws exercise the learned window distribution directly.
    """
    cond = None
    if current_state is not None:
        s = np.asarray(current_state, dtype=np.float64)
        if s.shape != (model.state_dim,):
            raise ShapeError(f"conditioning state shape {s.shape} != ({model.state_dim},)")
        cond = model.norm.normalize_state(s)
    flat, _ = _reverse_sample(model, n, rng, cond)
    stacked = flat.reshape(n, model.horizon, model.state_dim)
    return model.norm.denormalize_state(stacked)


def save_diffusion(model: DiffusionModel, path, seed: tuple[int, int] = (0, 0)) -> None:
    header = {
        "model_kind": "diffusion",
        "layer_sizes": list(model.denoiser.layer_sizes),
        "activation": model.denoiser.activation,
        "horizon": model.horizon,
        "state_dim": model.state_dim,
        "time_dim": model.time_dim,
        "schedule": {"kind": model.schedule.kind, "n_steps": model.schedule.n_steps},
        "norm": model.norm.to_json(),
        "seed": list(seed),
    }
    blobs = []
    for w, b in zip(model.denoiser.weights, model.denoiser.biases):
        blobs.append(w)
        blobs.append(b)
    write_container(path, header, blobs)


def load_diffusion(path) -> DiffusionModel:
    reader = read_container(path)
    h = reader.header
    if h.get("model_kind") != "diffusion":
        raise ConfigError(f"checkpoint at {path} holds {h.get('model_kind')!r}, not a planner")
    sizes = tuple(int(s) for s in h["layer_sizes"])
    weights, biases = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        weights.append(reader.take((n_out, n_in)))
        biases.append(reader.take((n_out,)))
    reader.finish()
    params = nn.MlpParams(sizes, tuple(weights), tuple(biases), h["activation"])
    schedule = build_schedule(int(h["schedule"]["n_steps"]), h["schedule"]["kind"])
    return DiffusionModel(params, schedule, int(h["horizon"]), int(h["state_dim"]),
                          NormStats.from_json(h["norm"]), int(h["time_dim"]))
