"""Small fully-connected network engine on numpy.

Everything here is 64-bit and deterministic: parameters are immutable
snapshots, updates return new snapshots, and all randomness flows through
:class:`~adaplan.rng.RngStream`.  Gradients are computed by hand-written
reverse-mode differentiation; ``finite_difference_grad`` provides the
independent oracle used to check them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ArchitectureError, DomainError, NumericError, ShapeError
from .rng import RngStream

Array = np.ndarray

ACTIVATIONS = ("relu", "mish")

# Above this raw value softplus(x) is replaced by x; exp(30) would still be
# finite but the identity branch keeps both the value and its derivative
# consistent to ~1e-13 while never overflowing.
_SOFTPLUS_CUTOFF = 30.0
VAR_FLOOR = 1e-6


@dataclass(frozen=True)
class MlpParams:
    """Immutable MLP parameters.

    ``weights[l]`` has shape ``(layer_sizes[l+1], layer_sizes[l])`` and
    ``biases[l]`` has shape ``(layer_sizes[l+1],)``, all float64.
    """

    layer_sizes: tuple[int, ...]
    weights: tuple[Array, ...]
    biases: tuple[Array, ...]
    activation: str = "relu"

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))


@dataclass(frozen=True)
class MlpGrads:
    """Gradients laid out parallel to :class:`MlpParams`."""

    weights: tuple[Array, ...]
    biases: tuple[Array, ...]


def mlp_init(layer_sizes, rng: RngStream, activation: str = "relu") -> MlpParams:
    """Initialize an MLP with Kaiming-uniform weights and zero biases.

    Weights for a layer with fan-in ``n`` are drawn uniformly from
    ``[-sqrt(6/n), sqrt(6/n)]``.
    """
    sizes = tuple(int(s) for s in layer_sizes)
    if len(sizes) < 2:
        raise ArchitectureError(f"need at least input and output sizes, got {sizes}")
    if any(s <= 0 for s in sizes):
        raise ArchitectureError(f"layer sizes must be positive, got {sizes}")
    if activation not in ACTIVATIONS:
        raise ArchitectureError(f"unknown activation {activation!r}, expected one of {ACTIVATIONS}")
    gen = rng.generator()
    weights = []
    biases = []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        bound = math.sqrt(6.0 / n_in)
        weights.append(gen.uniform(-bound, bound, size=(n_out, n_in)))
        biases.append(np.zeros(n_out))
    return MlpParams(sizes, tuple(weights), tuple(biases), activation)


def _stable_sigmoid(z: Array) -> Array:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _activate(z: Array, kind: str) -> Array:
    if kind == "relu":
        return np.maximum(z, 0.0)
    # mish: z * tanh(softplus(z))
    return z * np.tanh(np.logaddexp(0.0, z))


def _activate_grad(z: Array, kind: str) -> Array:
    if kind == "relu":
        return (z > 0.0).astype(z.dtype)
    t = np.tanh(np.logaddexp(0.0, z))
    return t + z * (1.0 - t * t) * _stable_sigmoid(z)


def _check_input(params: MlpParams, x: Array) -> Array:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2):
        raise ShapeError(f"input must be a vector or a batch of row vectors, got ndim={x.ndim}")
    if x.shape[-1] != params.in_dim:
        raise ShapeError(f"input dimension {x.shape[-1]} != network input size {params.in_dim}")
    return x


def mlp_forward(params: MlpParams, x: Array) -> Array:
    """Forward pass; hidden layers use ``params.activation``, output is linear.

    Accepts a single vector ``(in,)`` or a batch ``(B, in)``.
    """
    x = _check_input(params, x)
    single = x.ndim == 1
    h = x[None, :] if single else x
    last = params.n_layers - 1
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w.T + b
        h = z if l == last else _activate(z, params.activation)
    return h[0] if single else h


def _forward_cached(params: MlpParams, x: Array) -> tuple[list[Array], list[Array]]:
    """Forward pass keeping per-layer inputs and pre-activations for backprop."""
    inputs = [x]
    preacts = []
    h = x
    last = params.n_layers - 1
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w.T + b
        preacts.append(z)
        h = z if l == last else _activate(z, params.activation)
        if l != last:
            inputs.append(h)
    return inputs, preacts


class SquaredErrorLoss:
    """Mean over the batch of the summed squared error per example."""

    def per_example(self, outputs: Array, targets: Array) -> Array:
        d = outputs - targets
        return np.sum(d * d, axis=-1)

    def output_grad(self, outputs: Array, targets: Array) -> Array:
        # gradient of the batch-mean loss w.r.t. the raw outputs
        return 2.0 * (outputs - targets) / outputs.shape[0]


class GaussianNllLoss:
    """Negative log-likelihood head over raw outputs ``[mean | raw variance]``.

    The raw variance half is mapped through :func:`softplus_var`; the loss per
    example is ``sum_d 0.5*log(var) + (y - mu)^2 / (2*var)`` (constants
    dropped), averaged over the batch by the caller.
    """

    def _split(self, outputs: Array, targets: Array) -> tuple[Array, Array, Array]:
        d = targets.shape[-1]
        if outputs.shape[-1] != 2 * d:
            raise ShapeError(
                f"nll head expects outputs of width 2*target_dim={2 * d}, got {outputs.shape[-1]}"
            )
        mu = outputs[..., :d]
        raw = outputs[..., d:]
        return mu, raw, softplus_var(raw)

    def per_example(self, outputs: Array, targets: Array) -> Array:
        mu, _, var = self._split(outputs, targets)
        return np.sum(0.5 * np.log(var) + (targets - mu) ** 2 / (2.0 * var), axis=-1)

    def output_grad(self, outputs: Array, targets: Array) -> Array:
        mu, raw, var = self._split(outputs, targets)
        batch = outputs.shape[0]
        dmu = (mu - targets) / var
        dvar = 0.5 / var - (targets - mu) ** 2 / (2.0 * var * var)
        # derivative of softplus_var; exactly 1 on the identity branch
        draw = np.where(raw > _SOFTPLUS_CUTOFF, 1.0, _stable_sigmoid(raw))
        return np.concatenate([dmu, dvar * draw], axis=-1) / batch


def grad(params: MlpParams, inputs: Array, targets: Array, loss) -> tuple[float, MlpGrads]:
    """Mean loss over the batch and its exact gradient w.r.t. all parameters."""
    x = _check_input(params, inputs)
    if x.ndim == 1:
        x = x[None, :]
    y = np.asarray(targets, dtype=np.float64)
    if y.ndim == 1:
        y = y[None, :]
    if y.shape[0] != x.shape[0]:
        raise ShapeError(f"batch mismatch: {x.shape[0]} inputs vs {y.shape[0]} targets")

    layer_inputs, preacts = _forward_cached(params, x)
    out = preacts[-1]
    per = loss.per_example(out, y)
    bad = ~np.isfinite(per)
    if bad.any():
        idx = int(np.argmax(bad))
        raise NumericError(f"non-finite loss at batch index {idx}")
    value = float(np.mean(per))

    delta = loss.output_grad(out, y)  # d(mean loss)/d(raw outputs)
    w_grads: list[Array] = [None] * params.n_layers  # type: ignore[list-item]
    b_grads: list[Array] = [None] * params.n_layers  # type: ignore[list-item]
    for l in range(params.n_layers - 1, -1, -1):
        w_grads[l] = delta.T @ layer_inputs[l]
        b_grads[l] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ params.weights[l]) * _activate_grad(preacts[l - 1], params.activation)
    return value, MlpGrads(tuple(w_grads), tuple(b_grads))


def loss_value(params: MlpParams, inputs: Array, targets: Array, loss) -> float:
    """Mean loss over the batch without gradients."""
    x = _check_input(params, inputs)
    if x.ndim == 1:
        x = x[None, :]
    y = np.asarray(targets, dtype=np.float64)
    if y.ndim == 1:
        y = y[None, :]
    out = mlp_forward(params, x)
    return float(np.mean(loss.per_example(out, y)))


def finite_difference_grad(
    params: MlpParams, inputs: Array, targets: Array, loss, step: float = 1e-4
) -> MlpGrads:
    """Central-difference gradient oracle.

    O(n_params) forward passes; intended for small test networks only.
    """

    def perturbed(arrays: tuple[Array, ...], l: int, idx, eps: float) -> tuple[Array, ...]:
        out = list(arrays)
        a = arrays[l].copy()
        a[idx] += eps
        out[l] = a
        return tuple(out)

    w_grads = []
    b_grads = []
    for l in range(params.n_layers):
        gw = np.zeros_like(params.weights[l])
        for idx in np.ndindex(params.weights[l].shape):
            plus = MlpParams(params.layer_sizes, perturbed(params.weights, l, idx, step),
                             params.biases, params.activation)
            minus = MlpParams(params.layer_sizes, perturbed(params.weights, l, idx, -step),
                              params.biases, params.activation)
            gw[idx] = (loss_value(plus, inputs, targets, loss)
                       - loss_value(minus, inputs, targets, loss)) / (2.0 * step)
        gb = np.zeros_like(params.biases[l])
        for idx in np.ndindex(params.biases[l].shape):
            plus = MlpParams(params.layer_sizes, params.weights,
                             perturbed(params.biases, l, idx, step), params.activation)
            minus = MlpParams(params.layer_sizes, params.weights,
                              perturbed(params.biases, l, idx, -step), params.activation)
            gb[idx] = (loss_value(plus, inputs, targets, loss)
                       - loss_value(minus, inputs, targets, loss)) / (2.0 * step)
        w_grads.append(gw)
        b_grads.append(gb)
    return MlpGrads(tuple(w_grads), tuple(b_grads))


def gradient_max_rel_error(
    params: MlpParams, inputs: Array, targets: Array, loss, step: float = 1e-4
) -> float:
    """Max abs deviation between analytic and central-difference gradients,
    relative to the max-norm of the finite-difference gradient."""
    _, analytic = grad(params, inputs, targets, loss)
    numeric = finite_difference_grad(params, inputs, targets, loss, step)
    flat_a = np.concatenate(
        [a.ravel() for a in analytic.weights + analytic.biases])
    flat_n = np.concatenate(
        [n.ravel() for n in numeric.weights + numeric.biases])
    scale = max(float(np.max(np.abs(flat_n))), 1e-12)
    return float(np.max(np.abs(flat_a - flat_n)) / scale)


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


@dataclass(frozen=True)
class AdamState:
    """Adam moment estimates; ``step_count`` is the number of updates applied."""

    config: AdamConfig
    step_count: int
    m_weights: tuple[Array, ...]
    m_biases: tuple[Array, ...]
    v_weights: tuple[Array, ...]
    v_biases: tuple[Array, ...]


def adam_init(params: MlpParams, config: AdamConfig | None = None) -> AdamState:
    config = config or AdamConfig()
    zw = tuple(np.zeros_like(w) for w in params.weights)
    zb = tuple(np.zeros_like(b) for b in params.biases)
    return AdamState(config, 0, zw, zb, tuple(np.zeros_like(w) for w in params.weights),
                     tuple(np.zeros_like(b) for b in params.biases))


def adam_update(state: AdamState, params: MlpParams, grads: MlpGrads) -> tuple[AdamState, MlpParams]:
    """One bias-corrected Adam step; returns new optimizer state and parameters."""
    if len(grads.weights) != params.n_layers:
        raise ShapeError("gradient layer count does not match parameters")
    cfg = state.config
    t = state.step_count + 1
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t

    def step_one(p: Array, g: Array, m: Array, v: Array) -> tuple[Array, Array, Array]:
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m_new = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v_new = cfg.beta2 * v + (1.0 - cfg.beta2) * (g * g)
        p_new = p - cfg.learning_rate * (m_new / c1) / (np.sqrt(v_new / c2) + cfg.epsilon)
        return p_new, m_new, v_new

    new_w, new_b, mw, mb, vw, vb = [], [], [], [], [], []
    for p, g, m, v in zip(params.weights, grads.weights, state.m_weights, state.v_weights):
        pn, mn, vn = step_one(p, g, m, v)
        new_w.append(pn), mw.append(mn), vw.append(vn)
    for p, g, m, v in zip(params.biases, grads.biases, state.m_biases, state.v_biases):
        pn, mn, vn = step_one(p, g, m, v)
        new_b.append(pn), mb.append(mn), vb.append(vn)

    new_params = MlpParams(params.layer_sizes, tuple(new_w), tuple(new_b), params.activation)
    new_state = AdamState(cfg, t, tuple(mw), tuple(mb), tuple(vw), tuple(vb))
    return new_state, new_params


def softplus_var(raw: Array) -> Array:
    """Map raw network outputs to strictly positive variances.

    ``log(1 + exp(raw)) + 1e-6``, with the identity branch ``raw + 1e-6``
    above raw > 30 to avoid overflow.
    """
    raw = np.asarray(raw, dtype=np.float64)
    safe = np.minimum(raw, _SOFTPLUS_CUTOFF)
    return np.where(raw > _SOFTPLUS_CUTOFF, raw, np.log1p(np.exp(safe))) + VAR_FLOOR


def nll_loss(targets: Array, means: Array, variances: Array) -> float:
    """Gaussian negative log-likelihood (constants dropped).

    Per dimension ``0.5*log(var) + (y - mu)^2 / (2*var)``, summed over
    dimensions and averaged over the batch.  Accepts vectors or batches.
    """
    y = np.asarray(targets, dtype=np.float64)
    mu = np.asarray(means, dtype=np.float64)
    var = np.asarray(variances, dtype=np.float64)
    if y.shape != mu.shape or y.shape != var.shape:
        raise ShapeError(f"shape mismatch: targets {y.shape}, means {mu.shape}, variances {var.shape}")
    if np.any(var <= 0.0):
        raise DomainError("variances must be strictly positive")
    per_dim = 0.5 * np.log(var) + (y - mu) ** 2 / (2.0 * var)
    if y.ndim <= 1:
        return float(np.sum(per_dim))
    return float(np.mean(np.sum(per_dim, axis=-1)))


@dataclass(frozen=True)
class TrainConfig:
    """Shared knobs for the minibatch Adam training loops."""

    steps: int = 1000
    batch_size: int = 64
    learning_rate: float = 1e-3
    holdout_fraction: float = 0.1
    log_every: int = 100


@dataclass
class TrainingLog:
    """Loss curves recorded during training."""

    steps: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    holdout_steps: list[int] = field(default_factory=list)
    holdout_loss: list[float] = field(default_factory=list)
