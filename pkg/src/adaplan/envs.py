"""Two small control environments with value-semantic dynamics.

States and actions are plain float64 arrays; ``step`` is a pure function of
(spec, state, action) so trajectories can be replayed bit-for-bit.  Both
environments integrate at dt=0.05 and cap episodes at 200 steps by default;
all physical constants live on the spec and can be overridden via config.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .errors import ConfigError, InvalidActionError, ShapeError
from .rng import RngStream

DOUBLE_INTEGRATOR = "double_integrator_2d"
PENDULUM = "pendulum_swingup"

ENV_NAMES = (DOUBLE_INTEGRATOR, PENDULUM)

TIERS = ("expert", "medium")


class DoneReason(IntEnum):
    NONE = 0
    OUT_OF_BOUNDS = 1
    TIME_LIMIT = 2


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_dim: int
    action_dim: int
    action_low: tuple[float, ...]
    action_high: tuple[float, ...]
    dt: float
    max_steps: int
    params: tuple[tuple[str, float], ...]

    def param(self, key: str) -> float:
        for k, v in self.params:
            if k == key:
                return v
        raise KeyError(f"environment {self.name} has no parameter {key!r}")

    def fingerprint(self) -> str:
        """Stable identity string used to key cached per-environment values."""
        return repr((self.name, self.state_dim, self.action_dim, self.action_low,
                     self.action_high, self.dt, self.max_steps, self.params))


@dataclass(frozen=True)
class EnvState:
    values: np.ndarray  # (state_dim,) float64
    step_index: int


@dataclass(frozen=True)
class StepResult:
    next_state: EnvState
    reward: float
    done: bool
    done_reason: DoneReason


def double_integrator_spec(
    *,
    dt: float = 0.05,
    max_steps: int = 200,
    goal_x: float = 1.0,
    goal_y: float = 1.0,
    position_bound: float = 2.0,
    action_limit: float = 1.0,
    expert_kp: float = 4.0,
    expert_kd: float = 3.0,
    reset_half_width: float = 0.2,
) -> EnvSpec:
    """Planar point mass: position follows velocity, velocity follows the
    commanded acceleration.  Reward is the negative distance of the next
    position to the goal; leaving ``|p| <= position_bound`` ends the episode.
    """
    return EnvSpec(
        name=DOUBLE_INTEGRATOR,
        state_dim=4,
        action_dim=2,
        action_low=(-action_limit, -action_limit),
        action_high=(action_limit, action_limit),
        dt=dt,
        max_steps=max_steps,
        params=(
            ("action_limit", action_limit),
            ("expert_kd", expert_kd),
            ("expert_kp", expert_kp),
            ("goal_x", goal_x),
            ("goal_y", goal_y),
            ("position_bound", position_bound),
            ("reset_half_width", reset_half_width),
        ),
    )


def pendulum_spec(
    *,
    dt: float = 0.05,
    max_steps: int = 200,
    gravity: float = 10.0,
    length: float = 1.0,
    mass: float = 1.0,
    torque_limit: float = 2.0,
    swing_gain: float = 1.0,
    catch_angle: float = 0.6,
    catch_rate: float = 3.0,
    catch_kp: float = 12.0,
    catch_kd: float = 2.5,
    reset_angle_half_width: float = 0.2,
    reset_rate_half_width: float = 0.2,
) -> EnvSpec:
    """Torque-limited pendulum observed as (cos th, sin th, omega).

    th = 0 is upright and is an unstable equilibrium; episodes start hanging
    near the bottom, never terminate early, and are scored by
    ``-(wrap(th)^2 + 0.1*omega^2 + 0.001*u^2)``.
    """
    return EnvSpec(
        name=PENDULUM,
        state_dim=3,
        action_dim=1,
        action_low=(-torque_limit,),
        action_high=(torque_limit,),
        dt=dt,
        max_steps=max_steps,
        params=(
            ("catch_angle", catch_angle),
            ("catch_kd", catch_kd),
            ("catch_kp", catch_kp),
            ("catch_rate", catch_rate),
            ("gravity", gravity),
            ("length", length),
            ("mass", mass),
            ("reset_angle_half_width", reset_angle_half_width),
            ("reset_rate_half_width", reset_rate_half_width),
            ("swing_gain", swing_gain),
            ("torque_limit", torque_limit),
        ),
    )


_SPEC_BUILDERS = {
    DOUBLE_INTEGRATOR: double_integrator_spec,
    PENDULUM: pendulum_spec,
}


def make_env_spec(name: str, **overrides) -> EnvSpec:
    if name not in _SPEC_BUILDERS:
        raise ConfigError(f"unknown environment {name!r}, expected one of {ENV_NAMES}")
    try:
        return _SPEC_BUILDERS[name](**overrides)
    except TypeError as e:
        raise ConfigError(f"bad override for environment {name!r}: {e}") from e


def wrap_angle(theta: float) -> float:
    """Map an angle to [-pi, pi)."""
    return (theta + math.pi) % (2.0 * math.pi) - math.pi


def reset(spec: EnvSpec, rng: RngStream) -> EnvState:
    """Draw an initial state from the environment's start distribution."""
    gen = rng.generator()
    if spec.name == DOUBLE_INTEGRATOR:
        hw = spec.param("reset_half_width")
        pos = gen.uniform(-hw, hw, size=2)
        return EnvState(np.array([pos[0], pos[1], 0.0, 0.0]), 0)
    if spec.name == PENDULUM:
        theta = math.pi + gen.uniform(-spec.param("reset_angle_half_width"),
                                      spec.param("reset_angle_half_width"))
        omega = gen.uniform(-spec.param("reset_rate_half_width"),
                            spec.param("reset_rate_half_width"))
        return EnvState(np.array([math.cos(theta), math.sin(theta), omega]), 0)
    raise ConfigError(f"unknown environment {spec.name!r}")


def _check_action(spec: EnvSpec, action) -> np.ndarray:
    a = np.asarray(action, dtype=np.float64)
    if a.shape != (spec.action_dim,):
        raise InvalidActionError(f"action shape {a.shape} != ({spec.action_dim},)")
    if not np.isfinite(a).all():
        raise InvalidActionError(f"non-finite action {a}")
    return np.clip(a, spec.action_low, spec.action_high)


def step(spec: EnvSpec, state: EnvState, action) -> StepResult:
    """Advance one step.  Actions are clipped to the spec bounds first."""
    a = _check_action(spec, action)
    s = state.values
    if s.shape != (spec.state_dim,):
        raise ShapeError(f"state shape {s.shape} != ({spec.state_dim},)")
    idx = state.step_index + 1

    if spec.name == DOUBLE_INTEGRATOR:
        dt = spec.dt
        px, py = s[0] + s[2] * dt, s[1] + s[3] * dt
        vx, vy = s[2] + a[0] * dt, s[3] + a[1] * dt
        nxt = np.array([px, py, vx, vy])
        reward = -math.hypot(px - spec.param("goal_x"), py - spec.param("goal_y"))
        bound = spec.param("position_bound")
        if abs(px) > bound or abs(py) > bound:
            return StepResult(EnvState(nxt, idx), reward, True, DoneReason.OUT_OF_BOUNDS)
        if idx >= spec.max_steps:
            return StepResult(EnvState(nxt, idx), reward, True, DoneReason.TIME_LIMIT)
        return StepResult(EnvState(nxt, idx), reward, False, DoneReason.NONE)

    if spec.name == PENDULUM:
        g, length, m = spec.param("gravity"), spec.param("length"), spec.param("mass")
        dt = spec.dt
        u = a[0]
        theta = math.atan2(s[1], s[0])
        # th = 0 is up, so gravity accelerates the pendulum away from upright
        omega_dot = 1.5 * g / length * math.sin(theta) + 3.0 / (m * length * length) * u
        omega = s[2] + dt * omega_dot
        theta = theta + dt * omega
        nxt = np.array([math.cos(theta), math.sin(theta), omega])
        reward = -(wrap_angle(theta) ** 2 + 0.1 * omega * omega + 0.001 * u * u)
        if idx >= spec.max_steps:
            return StepResult(EnvState(nxt, idx), reward, True, DoneReason.TIME_LIMIT)
        return StepResult(EnvState(nxt, idx), reward, False, DoneReason.NONE)

    raise ConfigError(f"unknown environment {spec.name!r}")


def expert_action(spec: EnvSpec, state_values: np.ndarray) -> np.ndarray:
    """Deterministic scripted expert."""
    s = np.asarray(state_values, dtype=np.float64)
    lo = np.asarray(spec.action_low)
    hi = np.asarray(spec.action_high)

    if spec.name == DOUBLE_INTEGRATOR:
        goal = np.array([spec.param("goal_x"), spec.param("goal_y")])
        kp, kd = spec.param("expert_kp"), spec.param("expert_kd")
        return np.clip(kp * (goal - s[:2]) - kd * s[2:], lo, hi)

    if spec.name == PENDULUM:
        g, length, m = spec.param("gravity"), spec.param("length"), spec.param("mass")
        limit = spec.param("torque_limit")
        theta = math.atan2(s[1], s[0])
        omega = s[2]
        inertia = m * length * length / 3.0
        # total energy relative to the pivot; the upright rest target is +m*g*l/2
        energy = 0.5 * inertia * omega * omega + 0.5 * m * g * length * math.cos(theta)
        target = 0.5 * m * g * length
        near_top = abs(wrap_angle(theta)) < spec.param("catch_angle") and \
            abs(omega) < spec.param("catch_rate")
        if near_top:
            u = -spec.param("catch_kp") * wrap_angle(theta) - spec.param("catch_kd") * omega
        elif abs(omega) < 1e-2:
            u = limit  # kick out of the rest point so energy pumping can engage
        else:
            u = spec.param("swing_gain") * (target - energy) * math.copysign(1.0, omega)
        return np.clip(np.array([u]), lo, hi)

    raise ConfigError(f"unknown environment {spec.name!r}")


def medium_action(
    spec: EnvSpec,
    state_values: np.ndarray,
    gen: np.random.Generator,
    *,
    gain: float = 0.4,
    sigma: float = 0.3,
) -> np.ndarray:
    """Degraded expert: scaled expert output plus Gaussian noise, clipped."""
    a = gain * expert_action(spec, state_values)
    a = a + sigma * gen.standard_normal(spec.action_dim)
    return np.clip(a, spec.action_low, spec.action_high)


def scripted_controller(
    spec: EnvSpec, tier: str, state_values: np.ndarray, gen: np.random.Generator
) -> np.ndarray:
    """Dispatch to the named scripted policy ("expert" or "medium")."""
    if tier == "expert":
        return expert_action(spec, state_values)
    if tier == "medium":
        return medium_action(spec, state_values, gen)
    raise ConfigError(f"unknown controller tier {tier!r}, expected one of {TIERS}")


def random_action(spec: EnvSpec, gen: np.random.Generator) -> np.ndarray:
    """Uniform draw over the action box (reference policy for score scaling)."""
    return gen.uniform(spec.action_low, spec.action_high)
