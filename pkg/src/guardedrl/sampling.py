"""Hybrid offline/online data management with curriculum schedules.

Replay draws mix a static offline dataset with an online FIFO ring
buffer. The mixing weight follows a sigmoid annealing schedule and the
temporal window of each draw follows a power-law curriculum: a batch
slot first picks its source (per-sample Bernoulli with the current
mixing weight), then an anchor transition uniformly within the source,
then a transition uniformly from the contiguous intra-episode window of
the current curriculum length starting at the anchor. Windows never
cross episode boundaries.

The online buffer is single-writer; sampling takes place between writes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class TransitionRecord:
    """One sanitized transition; a_prop is the pre-projection proposal, if any."""

    s: int
    a_exec: int
    r: float
    s_next: int
    done: bool
    t: int
    episode: int
    a_prop: int | None = None


@dataclass(frozen=True)
class DtsConfig:
    """Temporal curriculum: window length grows from delta_min to delta_max."""

    delta_min: int
    delta_max: int
    beta: float
    horizon: int

    def __post_init__(self):
        if not 1 <= self.delta_min <= self.delta_max:
            raise ValueError("need 1 <= delta_min <= delta_max")
        if self.beta <= 0.0:
            raise ValueError("beta must be positive")
        if self.horizon < 1:
            raise ValueError("horizon must be a positive integer")


@dataclass(frozen=True)
class DssConfig:
    """Mixing-weight annealing: sigmoid ramp from lambda_min toward lambda_max."""

    lambda_min: float
    lambda_max: float
    k: float
    horizon: int

    def __post_init__(self):
        if not 0.0 <= self.lambda_min <= self.lambda_max <= 1.0:
            raise ValueError("need 0 <= lambda_min <= lambda_max <= 1")
        if self.k <= 0.0:
            raise ValueError("k must be positive")
        if self.horizon < 1:
            raise ValueError("horizon must be a positive integer")


def dts_interval(t: int, cfg: DtsConfig) -> int:
    """Window length at step t: round(delta_min + (delta_max - delta_min) * (t/T)^beta).

    Clamped to [delta_min, delta_max]; t past the horizon clamps to
    delta_max. Non-decreasing in t.
    """
    if t < 0:
        raise ValueError("t must be >= 0")
    frac = min(t / cfg.horizon, 1.0)
    value = cfg.delta_min + (cfg.delta_max - cfg.delta_min) * frac**cfg.beta
    return int(min(max(round(value), cfg.delta_min), cfg.delta_max))


def _logistic(x: float) -> float:
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


def dss_mixing(t: int, cfg: DssConfig) -> float:
    """Online mixing weight at step t: lambda_min + span * sigmoid(k * (t - T/2)).

    Strictly increasing in t for k > 0 and confined to
    (lambda_min, lambda_max) for finite t.
    """
    if t < 0:
        raise ValueError("t must be >= 0")
    return cfg.lambda_min + (cfg.lambda_max - cfg.lambda_min) * _logistic(cfg.k * (t - cfg.horizon / 2.0))


def _check_episode_continuity(episode: list[TransitionRecord], index: int) -> None:
    for k in range(len(episode) - 1):
        cur, nxt = episode[k], episode[k + 1]
        if cur.done:
            raise ValueError(f"episode {index}: done mid-episode at position {k}")
        if nxt.t != cur.t + 1:
            raise ValueError(f"episode {index}: step index jumps at position {k + 1}")
        if nxt.s != cur.s_next:
            raise ValueError(f"episode {index}: state chain broken at position {k + 1}")


class OfflineDataset:
    """Static episode-structured transition store with O(1) flat access."""

    def __init__(self, episodes: list[list[TransitionRecord]]):
        episodes = [list(ep) for ep in episodes if ep]
        for i, ep in enumerate(episodes):
            _check_episode_continuity(ep, i)
        self.episodes = episodes
        self._flat: list[TransitionRecord] = [tr for ep in episodes for tr in ep]
        # For each flat index: which episode it belongs to and its offset there.
        self._ep_index = np.repeat(np.arange(len(episodes)), [len(ep) for ep in episodes])
        self._pos = np.concatenate([np.arange(len(ep)) for ep in episodes]) if episodes else np.array([], dtype=np.int64)

    def __len__(self) -> int:
        return len(self._flat)

    @property
    def num_episodes(self) -> int:
        return len(self.episodes)

    def record(self, i: int) -> TransitionRecord:
        return self._flat[i]

    def window_draw(self, anchor: int, delta: int, rng: np.random.Generator) -> TransitionRecord:
        """Uniform draw from the in-episode window of length <= delta at the anchor."""
        episode = self.episodes[self._ep_index[anchor]]
        pos = int(self._pos[anchor])
        span = min(delta, len(episode) - pos)
        return episode[pos + int(rng.integers(span))]

    def save_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for tr in self._flat:
                fh.write(
                    json.dumps(
                        {
                            "s": tr.s,
                            "a": tr.a_exec,
                            "r": tr.r,
                            "s2": tr.s_next,
                            "done": tr.done,
                            "t": tr.t,
                            "ep": tr.episode,
                        }
                    )
                    + "\n"
                )

    @classmethod
    def load_jsonl(cls, path: str | Path) -> "OfflineDataset":
        episodes: list[list[TransitionRecord]] = []
        current: list[TransitionRecord] = []
        current_ep: int | None = None
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                row = json.loads(line)
                tr = TransitionRecord(
                    s=int(row["s"]),
                    a_exec=int(row["a"]),
                    r=float(row["r"]),
                    s_next=int(row["s2"]),
                    done=bool(row["done"]),
                    t=int(row["t"]),
                    episode=int(row["ep"]),
                )
                if current_ep is not None and tr.episode != current_ep:
                    episodes.append(current)
                    current = []
                current.append(tr)
                current_ep = tr.episode
        if current:
            episodes.append(current)
        return cls(episodes)


class OnlineBuffer:
    """Fixed-capacity ring of transitions with strictly FIFO eviction."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._buf: list[TransitionRecord] = []
        self._start = 0

    def __len__(self) -> int:
        return len(self._buf)

    def append(self, tr: TransitionRecord) -> None:
        if len(self._buf) < self.capacity:
            self._buf.append(tr)
        else:
            self._buf[self._start] = tr
            self._start = (self._start + 1) % self.capacity

    def record(self, i: int) -> TransitionRecord:
        """i-th record in arrival order, 0 = oldest retained."""
        if not 0 <= i < len(self._buf):
            raise IndexError(i)
        return self._buf[(self._start + i) % self.capacity]

    def records(self) -> list[TransitionRecord]:
        return [self.record(i) for i in range(len(self._buf))]

    def window_draw(self, anchor: int, delta: int, rng: np.random.Generator) -> TransitionRecord:
        """Uniform draw from the forward same-episode run of length <= delta.

        Appends arrive in order and eviction is FIFO, so an episode's
        retained records sit contiguously in arrival order; the window
        ends at the episode boundary or the newest record.
        """
        first = self.record(anchor)
        span = 1
        while span < delta and anchor + span < len(self._buf):
            nxt = self.record(anchor + span)
            if nxt.episode != first.episode or nxt.t != first.t + span:
                break
            span += 1
        return self.record(anchor + int(rng.integers(span)))


@dataclass
class HybridBatch:
    """Sampled batch with per-slot provenance and offline-fallback count."""

    records: list[TransitionRecord]
    online_mask: np.ndarray
    fallback_count: int


def sample_hybrid_batch(
    off: OfflineDataset,
    on: OnlineBuffer,
    lam: float,
    delta: int,
    batch_size: int,
    rng: np.random.Generator,
) -> HybridBatch:
    """Draw a batch mixing online and offline sources.

    Each slot independently samples from the online buffer with
    probability lam, else offline; an empty online buffer falls back to
    offline and the fallback is counted. Within the chosen source an
    anchor is drawn uniformly and the returned transition uniformly from
    the anchor's in-episode window of length min(delta, available span).
    Identical seed and buffer history reproduce identical batches.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lam must lie in [0, 1]")
    if delta < 1:
        raise ValueError("delta must be >= 1")
    if len(off) == 0:
        raise ValueError("offline dataset is empty; nothing to sample")
    want_online = rng.random(batch_size) < lam
    online_mask = np.zeros(batch_size, dtype=bool)
    fallback = 0
    records: list[TransitionRecord] = []
    for i in range(batch_size):
        if want_online[i] and len(on) > 0:
            anchor = int(rng.integers(len(on)))
            records.append(on.window_draw(anchor, delta, rng))
            online_mask[i] = True
        else:
            if want_online[i]:
                fallback += 1
            anchor = int(rng.integers(len(off)))
            records.append(off.window_draw(anchor, delta, rng))
    return HybridBatch(records=records, online_mask=online_mask, fallback_count=fallback)


def derive_bc_policy(
    off: OfflineDataset, num_states: int, num_actions: int, smoothing: float = 0.01
) -> np.ndarray:
    """Behavior-cloning policy from offline action counts with additive smoothing.

    pi(a|s) = (count(s, a) + eps) / (count(s) + A * eps); states never
    visited come out uniform. Smoothing keeps every probability strictly
    positive so KL divergences against this policy stay finite.
    """
    if len(off) == 0:
        raise ValueError("offline dataset is empty")
    counts = np.zeros((num_states, num_actions))
    for i in range(len(off)):
        tr = off.record(i)
        counts[tr.s, tr.a_exec] += 1.0
    smoothed = counts + smoothing
    return smoothed / smoothed.sum(axis=1, keepdims=True)
