"""Offline trajectory datasets: generation, normalization, windowing, file IO.

Record arrays are float32, identical to the on-disk representation, and the
generators step the simulation through the float32-rounded snapshots (each
step is computed in float64 from the stored values).  Replaying a record's
actions through the environment therefore reproduces its states bit-for-bit,
and save/load round-trips are exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .envs import DoneReason, EnvSpec, EnvState, expert_action, medium_action, step
from .errors import ConfigError, FormatError, ShapeError
from .rng import RngStream

DATASET_MAGIC = b"ADPD"
DATASET_VERSION = 1

DATASET_TIERS = ("medium", "medium_replay", "medium_expert")


@dataclass(frozen=True)
class TierRecipe:
    """Constants behind the scripted dataset tiers."""

    medium_gain: float = 0.4
    medium_sigma: float = 0.3
    replay_gain_start: float = 0.2
    replay_gain_end: float = 0.4
    replay_sigma_start: float = 0.6
    replay_sigma_end: float = 0.3


@dataclass(frozen=True)
class TrajectoryRecord:
    """One episode: L states, L-1 actions and rewards, and how it ended."""

    states: np.ndarray   # (L, state_dim) float32
    actions: np.ndarray  # (L-1, action_dim) float32
    rewards: np.ndarray  # (L-1,) float32
    done_reason: DoneReason

    @property
    def length(self) -> int:
        return self.states.shape[0]

    def episode_return(self) -> float:
        return float(np.sum(self.rewards, dtype=np.float64))


@dataclass(frozen=True)
class NormStats:
    """Per-dimension min/max used for the [-1, 1] affine mapping."""

    state_min: np.ndarray
    state_max: np.ndarray
    action_min: np.ndarray
    action_max: np.ndarray

    def normalize_state(self, x: np.ndarray) -> np.ndarray:
        return _normalize(x, self.state_min, self.state_max)

    def denormalize_state(self, x: np.ndarray) -> np.ndarray:
        return _denormalize(x, self.state_min, self.state_max)

    def normalize_action(self, a: np.ndarray) -> np.ndarray:
        return _normalize(a, self.action_min, self.action_max)

    def denormalize_action(self, a: np.ndarray) -> np.ndarray:
        return _denormalize(a, self.action_min, self.action_max)

    def equals(self, other: "NormStats") -> bool:
        return (np.array_equal(self.state_min, other.state_min)
                and np.array_equal(self.state_max, other.state_max)
                and np.array_equal(self.action_min, other.action_min)
                and np.array_equal(self.action_max, other.action_max))

    def to_json(self) -> dict:
        return {
            "state_min": self.state_min.tolist(),
            "state_max": self.state_max.tolist(),
            "action_min": self.action_min.tolist(),
            "action_max": self.action_max.tolist(),
        }

    @staticmethod
    def from_json(obj: dict) -> "NormStats":
        return NormStats(
            np.asarray(obj["state_min"], dtype=np.float64),
            np.asarray(obj["state_max"], dtype=np.float64),
            np.asarray(obj["action_min"], dtype=np.float64),
            np.asarray(obj["action_max"], dtype=np.float64),
        )


def _normalize(x: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Affine map [lo, hi] -> [-1, 1]; constant dimensions map to 0."""
    x = np.asarray(x, dtype=np.float64)
    span = hi - lo
    safe = np.where(span == 0.0, 1.0, span)
    out = 2.0 * (x - lo) / safe - 1.0
    return np.where(span == 0.0, 0.0, out)


def _denormalize(x: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    span = hi - lo
    out = (x + 1.0) * 0.5 * span + lo
    return np.where(span == 0.0, lo, out)


@dataclass(frozen=True)
class OfflineDataset:
    env_name: str
    tier: str
    records: tuple[TrajectoryRecord, ...]
    norm: NormStats
    seed: tuple[int, int]

    @property
    def state_dim(self) -> int:
        return self.records[0].states.shape[1]

    @property
    def action_dim(self) -> int:
        return self.records[0].actions.shape[1]

    @property
    def total_steps(self) -> int:
        return sum(r.length - 1 for r in self.records)


def fit_norm(data) -> NormStats:
    """Compute per-dimension state/action min/max over a dataset's records."""
    records = data.records if isinstance(data, OfflineDataset) else tuple(data)
    if not records:
        raise ConfigError("cannot fit normalization on an empty dataset")
    states = np.concatenate([r.states for r in records]).astype(np.float64)
    actions = np.concatenate([r.actions for r in records]).astype(np.float64)
    return NormStats(states.min(axis=0), states.max(axis=0),
                     actions.min(axis=0), actions.max(axis=0))


def _roll_episode(spec: EnvSpec, ep_rng: RngStream, gain: float, sigma: float,
                  expert: bool) -> TrajectoryRecord:
    """Run one scripted episode, rounding through float32 after every step."""
    from .envs import reset  # local import keeps module import cycle-free

    state = reset(spec, ep_rng.child(0))
    gen = ep_rng.child(1).generator()
    s32 = [np.asarray(state.values, dtype=np.float32)]
    a32: list[np.ndarray] = []
    r32: list[np.float32] = []
    reason = DoneReason.NONE
    idx = 0
    while True:
        s_eff = s32[-1].astype(np.float64)
        if expert:
            a = expert_action(spec, s_eff)
        else:
            a = medium_action(spec, s_eff, gen, gain=gain, sigma=sigma)
        a_stored = np.asarray(a, dtype=np.float32)
        res = step(spec, EnvState(s_eff, idx), a_stored.astype(np.float64))
        s32.append(np.asarray(res.next_state.values, dtype=np.float32))
        a32.append(a_stored)
        r32.append(np.float32(res.reward))
        idx += 1
        if res.done:
            reason = res.done_reason
            break
    return TrajectoryRecord(np.stack(s32), np.stack(a32),
                            np.asarray(r32, dtype=np.float32), reason)


def generate_dataset(
    spec: EnvSpec,
    tier: str,
    n_episodes: int,
    rng: RngStream,
    recipe: TierRecipe = TierRecipe(),
) -> OfflineDataset:
    """Roll out scripted episodes for one of the three dataset tiers.

    medium: every episode from the noisy scaled expert.
    medium_replay: noise annealed ``sigma_start -> sigma_end`` and gain
        ``gain_start -> gain_end`` linearly across episodes.
    medium_expert: first half medium episodes, second half expert episodes.
    """
    if tier not in DATASET_TIERS:
        raise ConfigError(f"unknown dataset tier {tier!r}, expected one of {DATASET_TIERS}")
    if n_episodes < 1:
        raise ConfigError(f"n_episodes must be >= 1, got {n_episodes}")

    records = []
    for e in range(n_episodes):
        ep_rng = rng.child(e)
        if tier == "medium":
            rec = _roll_episode(spec, ep_rng, recipe.medium_gain, recipe.medium_sigma, False)
        elif tier == "medium_replay":
            frac = e / (n_episodes - 1) if n_episodes > 1 else 0.0
            gain = recipe.replay_gain_start + frac * (recipe.replay_gain_end - recipe.replay_gain_start)
            sigma = recipe.replay_sigma_start + frac * (recipe.replay_sigma_end - recipe.replay_sigma_start)
            rec = _roll_episode(spec, ep_rng, gain, sigma, False)
        else:  # medium_expert
            if e < n_episodes // 2:
                rec = _roll_episode(spec, ep_rng, recipe.medium_gain, recipe.medium_sigma, False)
            else:
                rec = _roll_episode(spec, ep_rng, 1.0, 0.0, True)
        records.append(rec)

    records = tuple(records)
    return OfflineDataset(spec.name, tier, records, fit_norm(records), rng.as_tuple())


@dataclass(frozen=True)
class SequenceWindow:
    """A length-H slice of normalized states from one record."""

    states: np.ndarray  # (H, state_dim) float64, normalized
    record_index: int
    offset: int
    padded: bool


def extract_windows(dataset: OfflineDataset, horizon: int) -> list[SequenceWindow]:
    """All length-``horizon`` windows of normalized states.

    Records with L >= horizon contribute L - horizon + 1 windows; records with
    2 <= L < horizon contribute a single window padded by repeating the final
    state.  Windows never span record boundaries.
    """
    if horizon < 2:
        raise ConfigError(f"horizon must be >= 2, got {horizon}")
    windows = []
    for ri, rec in enumerate(dataset.records):
        states = dataset.norm.normalize_state(rec.states.astype(np.float64))
        n = states.shape[0]
        if n >= horizon:
            for off in range(n - horizon + 1):
                windows.append(SequenceWindow(states[off:off + horizon], ri, off, False))
        else:
            pad = np.repeat(states[-1:], horizon - n, axis=0)
            windows.append(SequenceWindow(np.concatenate([states, pad]), ri, 0, True))
    return windows


def action_pairs(dataset: OfflineDataset) -> tuple[np.ndarray, np.ndarray]:
    """Normalized training pairs: (norm(s_t) ++ norm(s_{t+1})) -> norm(a_t)."""
    xs, ys = [], []
    for rec in dataset.records:
        states = dataset.norm.normalize_state(rec.states.astype(np.float64))
        acts = dataset.norm.normalize_action(rec.actions.astype(np.float64))
        xs.append(np.concatenate([states[:-1], states[1:]], axis=1))
        ys.append(acts)
    return np.concatenate(xs), np.concatenate(ys)


def save_dataset(dataset: OfflineDataset, path: str | Path) -> None:
    """Write the binary dataset container (magic ``ADPD``)."""
    header = {
        "env": dataset.env_name,
        "tier": dataset.tier,
        "state_dim": dataset.state_dim,
        "action_dim": dataset.action_dim,
        "n_records": len(dataset.records),
        "total_steps": dataset.total_steps,
        "norm": dataset.norm.to_json(),
        "seed": list(dataset.seed),
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<H", DATASET_VERSION))
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for rec in dataset.records:
            f.write(struct.pack("<I", rec.length))
            f.write(np.ascontiguousarray(rec.states, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(rec.actions, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(rec.rewards, dtype="<f4").tobytes())
            f.write(struct.pack("<B", int(rec.done_reason)))


def load_dataset(path: str | Path) -> OfflineDataset:
    """Read a dataset container; every parse error names its byte offset."""
    data = Path(path).read_bytes()
    if len(data) < 10:
        raise FormatError("file too short for dataset preamble", offset=len(data))
    if data[:4] != DATASET_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {DATASET_MAGIC!r}", offset=0)
    (version,) = struct.unpack_from("<H", data, 4)
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}", offset=4)
    (header_len,) = struct.unpack_from("<I", data, 6)
    if 10 + header_len > len(data):
        raise FormatError("truncated header", offset=len(data))
    try:
        header = json.loads(data[10:10 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"invalid header JSON: {e}", offset=10) from e

    sd = int(header["state_dim"])
    ad = int(header["action_dim"])
    pos = 10 + header_len
    records = []
    for _ in range(int(header["n_records"])):
        if pos + 4 > len(data):
            raise FormatError("truncated record length", offset=pos)
        (length,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if length < 2:
            raise FormatError(f"record length {length} < 2", offset=pos - 4)
        need = 4 * (length * sd + (length - 1) * ad + (length - 1)) + 1
        if pos + need > len(data):
            raise FormatError("truncated record payload", offset=pos)
        states = np.frombuffer(data, dtype="<f4", count=length * sd, offset=pos).reshape(length, sd)
        pos += 4 * length * sd
        actions = np.frombuffer(data, dtype="<f4", count=(length - 1) * ad, offset=pos).reshape(length - 1, ad)
        pos += 4 * (length - 1) * ad
        rewards = np.frombuffer(data, dtype="<f4", count=length - 1, offset=pos)
        pos += 4 * (length - 1)
        reason = data[pos]
        pos += 1
        try:
            done_reason = DoneReason(reason)
        except ValueError:
            raise FormatError(f"invalid done_reason byte {reason}", offset=pos - 1) from None
        records.append(TrajectoryRecord(states.copy(), actions.copy(), rewards.copy(), done_reason))
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} unexpected trailing bytes", offset=pos)

    return OfflineDataset(
        env_name=str(header["env"]),
        tier=str(header["tier"]),
        records=tuple(records),
        norm=NormStats.from_json(header["norm"]),
        seed=(int(header["seed"][0]), int(header["seed"][1])),
    )
