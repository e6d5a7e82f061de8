"""Inverse-dynamics ensembles mapping consecutive states to actions.

Each member is an MLP over the concatenated normalized pair
(s_t, s_{t+1}); members differ only in their init/shuffle streams.  An
nll-trained member outputs a Gaussian mean and raw variance per action
dimension; an mse-trained member outputs the mean alone.  The ensemble
prediction is the member-mean action plus a total uncertainty: the averaged
member variances (nll only) plus the population variance of the member means.
Member aggregation uses correctly-rounded sums so it is exactly invariant to
member order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .checkpoint import read_container, write_container
from .dataset import NormStats, OfflineDataset, action_pairs
from .errors import ConfigError, ShapeError
from .rng import RngStream

LOSS_KINDS = ("nll", "mse")
UNCERTAINTY_REDUCTIONS = ("mean", "max")

HIDDEN_SIZES = (512, 512)


@dataclass(frozen=True)
class ActionModel:
    """One trained ensemble member."""

    params: nn.MlpParams
    loss_kind: str
    state_dim: int
    action_dim: int
    norm: NormStats
    train_log: nn.TrainingLog | None = field(default=None, compare=False)

    def raw_outputs(self, x_norm: np.ndarray) -> np.ndarray:
        return nn.mlp_forward(self.params, x_norm)

    def mean_var(self, x_norm: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
        """Normalized action mean and (for nll members) predicted variance."""
        out = self.raw_outputs(x_norm)
        if self.loss_kind == "mse":
            return out, None
        d = self.action_dim
        return out[..., :d], nn.softplus_var(out[..., d:])


@dataclass(frozen=True)
class Ensemble:
    members: tuple[ActionModel, ...]

    def __post_init__(self):
        if not self.members:
            raise ConfigError("an ensemble needs at least one member")
        first = self.members[0]
        for m in self.members[1:]:
            if m.loss_kind != first.loss_kind:
                raise ConfigError("ensemble members disagree on loss kind")
            if (m.state_dim, m.action_dim) != (first.state_dim, first.action_dim):
                raise ConfigError("ensemble members disagree on dimensions")
            if not m.norm.equals(first.norm):
                raise ConfigError("ensemble members disagree on normalization statistics")

    @property
    def n_members(self) -> int:
        return len(self.members)

    @property
    def loss_kind(self) -> str:
        return self.members[0].loss_kind

    @property
    def state_dim(self) -> int:
        return self.members[0].state_dim

    @property
    def action_dim(self) -> int:
        return self.members[0].action_dim

    @property
    def norm(self) -> NormStats:
        return self.members[0].norm

    def prefix(self, n: int) -> "Ensemble":
        """The sub-ensemble of the first ``n`` members (shared parameters)."""
        if not 1 <= n <= self.n_members:
            raise ConfigError(f"cannot take {n} members from an ensemble of {self.n_members}")
        return Ensemble(self.members[:n])


@dataclass(frozen=True)
class ActionPrediction:
    """Denormalized action plus scalar predictive uncertainty.

    ``uncertainty_per_dim`` is in normalized action units squared; ``u`` is
    its mean (or max) across action dimensions.
    """

    action: np.ndarray
    uncertainty_per_dim: np.ndarray
    u: float


def train_member(
    dataset: OfflineDataset,
    loss_kind: str,
    cfg: nn.TrainConfig,
    rng: RngStream,
    *,
    hidden: tuple[int, ...] = HIDDEN_SIZES,
) -> ActionModel:
    """Fit one inverse-dynamics member on all consecutive state pairs."""
    if loss_kind not in LOSS_KINDS:
        raise ConfigError(f"unknown loss kind {loss_kind!r}, expected one of {LOSS_KINDS}")
    X, Y = action_pairs(dataset)
    sd, ad = dataset.state_dim, dataset.action_dim
    out_dim = 2 * ad if loss_kind == "nll" else ad
    params = nn.mlp_init([2 * sd, *hidden, out_dim], rng.child(0), "relu")
    adam = nn.adam_init(params, nn.AdamConfig(learning_rate=cfg.learning_rate))
    loss = nn.GaussianNllLoss() if loss_kind == "nll" else nn.SquaredErrorLoss()
    gen = rng.child(1).generator()
    log = nn.TrainingLog()
    for it in range(cfg.steps):
        idx = gen.integers(0, X.shape[0], size=cfg.batch_size)
        value, grads = nn.grad(params, X[idx], Y[idx], loss)
        adam, params = nn.adam_update(adam, params, grads)
        if (it + 1) % cfg.log_every == 0 or it + 1 == cfg.steps:
            log.steps.append(it + 1)
            log.train_loss.append(value)
    return ActionModel(params, loss_kind, sd, ad, dataset.norm, log)


def train_ensemble(
    dataset: OfflineDataset,
    loss_kind: str,
    n_members: int,
    cfg: nn.TrainConfig,
    rng: RngStream,
    *,
    hidden: tuple[int, ...] = HIDDEN_SIZES,
) -> Ensemble:
    """Train ``n_members`` members; member m gets the substream child(m)."""
    if n_members < 1:
        raise ConfigError(f"n_members must be >= 1, got {n_members}")
    members = tuple(
        train_member(dataset, loss_kind, cfg, rng.child(m), hidden=hidden)
        for m in range(n_members)
    )
    return Ensemble(members)


def _exact_mean(values: np.ndarray) -> np.ndarray:
    """Column means over axis 0 via correctly-rounded sums (order-free).

    A column of identical entries returns that entry untouched; without the
    shortcut, sum-then-divide can drift by an ulp and a copied-member
    ensemble would report a nonzero variance.
    """
    m, d = values.shape
    out = np.empty(d)
    for j in range(d):
        col = values[:, j]
        out[j] = col[0] if np.all(col == col[0]) else math.fsum(col) / m
    return out


def _exact_popvar(values: np.ndarray, mean: np.ndarray) -> np.ndarray:
    """Population variance over axis 0 via correctly-rounded sums."""
    m, d = values.shape
    return np.array([math.fsum((values[:, j] - mean[j]) ** 2) / m for j in range(d)])


def predict(
    ensemble: Ensemble,
    state: np.ndarray,
    next_state: np.ndarray,
    *,
    reduction: str = "mean",
) -> ActionPrediction:
    """Ensemble action for the transition ``state -> next_state``.

    The action is the member-mean (denormalized); the per-dimension
    uncertainty is mean(member variances) + popvar(member means) for nll
    ensembles and popvar(member outputs) for mse ensembles.
    """
    if reduction not in UNCERTAINTY_REDUCTIONS:
        raise ConfigError(
            f"unknown uncertainty reduction {reduction!r}, expected one of {UNCERTAINTY_REDUCTIONS}")
    s = np.asarray(state, dtype=np.float64)
    sn = np.asarray(next_state, dtype=np.float64)
    if s.shape != (ensemble.state_dim,) or sn.shape != (ensemble.state_dim,):
        raise ShapeError(
            f"expected two states of shape ({ensemble.state_dim},), got {s.shape} and {sn.shape}")
    x = np.concatenate([ensemble.norm.normalize_state(s), ensemble.norm.normalize_state(sn)])

    mus = []
    vars = []
    for member in ensemble.members:
        mu, var = member.mean_var(x)
        mus.append(mu)
        if var is not None:
            vars.append(var)
    mus = np.stack(mus)
    mean_mu = _exact_mean(mus)
    epistemic = _exact_popvar(mus, mean_mu)
    if ensemble.loss_kind == "nll":
        per_dim = _exact_mean(np.stack(vars)) + epistemic
    else:
        per_dim = epistemic
    u = float(np.max(per_dim)) if reduction == "max" else float(np.mean(per_dim))
    action = ensemble.norm.denormalize_action(mean_mu)
    return ActionPrediction(action, per_dim, u)


def predict_batch(
    ensemble: Ensemble,
    states: np.ndarray,
    next_states: np.ndarray,
    *,
    with_uncertainty: bool = True,
    reduction: str = "mean",
) -> tuple[np.ndarray, np.ndarray | None]:
    """Vectorized :func:`predict` over rows; used by the open-loop controller.

    Returns denormalized actions ``(B, action_dim)`` and scalar uncertainties
    ``(B,)`` (or None when ``with_uncertainty`` is false and the computation
    is skipped).
    """
    S = np.asarray(states, dtype=np.float64)
    Sn = np.asarray(next_states, dtype=np.float64)
    if S.ndim != 2 or S.shape != Sn.shape or S.shape[1] != ensemble.state_dim:
        raise ShapeError(f"expected matching (B, {ensemble.state_dim}) state arrays, "
                         f"got {S.shape} and {Sn.shape}")
    X = np.concatenate([ensemble.norm.normalize_state(S), ensemble.norm.normalize_state(Sn)],
                       axis=1)
    mus = []
    vars = []
    for member in ensemble.members:
        mu, var = member.mean_var(X)
        mus.append(mu)
        if var is not None:
            vars.append(var)
    mus = np.stack(mus)  # (M, B, ad)
    batch, ad = mus.shape[1], mus.shape[2]
    means = np.empty((batch, ad))
    us = np.empty(batch) if with_uncertainty else None
    for i in range(batch):
        mean_mu = _exact_mean(mus[:, i, :])
        means[i] = mean_mu
        if with_uncertainty:
            per_dim = _exact_popvar(mus[:, i, :], mean_mu)
            if ensemble.loss_kind == "nll":
                per_dim = per_dim + _exact_mean(np.stack([v[i] for v in vars]))
            us[i] = np.max(per_dim) if reduction == "max" else np.mean(per_dim)
    actions = ensemble.norm.denormalize_action(means)
    return actions, us


def mixture_second_moment(mus: np.ndarray, variances: np.ndarray) -> np.ndarray:
    """Variance of the uniform Gaussian mixture via its second moment:
    (1/M) sum_m (var_m + mu_m^2) - mean(mu)^2, per dimension."""
    mus = np.asarray(mus, dtype=np.float64)
    variances = np.asarray(variances, dtype=np.float64)
    if mus.shape != variances.shape or mus.ndim != 2:
        raise ShapeError(f"expected matching (M, d) arrays, got {mus.shape} and {variances.shape}")
    mean_mu = np.mean(mus, axis=0)
    return np.mean(variances + mus * mus, axis=0) - mean_mu * mean_mu


def save_ensemble(ensemble: Ensemble, path, seed: tuple[int, int] = (0, 0)) -> None:
    first = ensemble.members[0]
    header = {
        "model_kind": "ensemble",
        "loss_kind": ensemble.loss_kind,
        "n_members": ensemble.n_members,
        "state_dim": ensemble.state_dim,
        "action_dim": ensemble.action_dim,
        "layer_sizes": list(first.params.layer_sizes),
        "activation": first.params.activation,
        "norm": ensemble.norm.to_json(),
        "seed": list(seed),
    }
    blobs = []
    for member in ensemble.members:
        for w, b in zip(member.params.weights, member.params.biases):
            blobs.append(w)
            blobs.append(b)
    write_container(path, header, blobs)


def load_ensemble(path) -> Ensemble:
    reader = read_container(path)
    h = reader.header
    if h.get("model_kind") != "ensemble":
        raise ConfigError(f"checkpoint at {path} holds {h.get('model_kind')!r}, not an ensemble")
    sizes = tuple(int(s) for s in h["layer_sizes"])
    norm = NormStats.from_json(h["norm"])
    members = []
    for _ in range(int(h["n_members"])):
        weights, biases = [], []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            weights.append(reader.take((n_out, n_in)))
            biases.append(reader.take((n_out,)))
        params = nn.MlpParams(sizes, tuple(weights), tuple(biases), h["activation"])
        members.append(ActionModel(params, h["loss_kind"], int(h["state_dim"]),
                                   int(h["action_dim"]), norm))
    reader.finish()
    return Ensemble(tuple(members))
