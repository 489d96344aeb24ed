"""Pair sampling and preference labelling providers."""

from __future__ import annotations

import enum
import json
import logging
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .._rng import make_rng
from ..data import Dataset, Trajectory, sealed_rewards

log = logging.getLogger(__name__)


class Label(enum.IntEnum):
    FIRST = 0
    SECOND = 1


@dataclass(frozen=True)
class PreferencePair:
    id_a: int
    id_b: int
    label: Label
    provider_tag: str

    def __post_init__(self):
        if self.id_a == self.id_b:
            raise ValueError("a pair needs two different trajectories")

    @property
    def preferred(self) -> int:
        return self.id_a if self.label is Label.FIRST else self.id_b


class TransportError(RuntimeError):
    pass


class MalformedResponse(ValueError):
    pass


def sample_pairs(dataset: Dataset, n_pairs: int, seed: int) -> list[tuple[int, int]]:
    """Uniform unordered pairs without replacement, randomly oriented.

    Once all ``m(m-1)/2`` pairs are used the pool is reshuffled and drawn
    again, so repeats only appear after exhaustion.
    """
    m = len(dataset)
    if m < 2:
        raise ValueError("need at least two trajectories to form a pair")
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    ids = np.asarray(dataset.ids)
    total = m * (m - 1) // 2
    rng = make_rng(seed, "sample-pairs")
    picks = []
    while len(picks) < n_pairs:
        take = min(total, n_pairs - len(picks))
        picks.extend(rng.choice(total, size=take, replace=False).tolist())
    k = np.asarray(picks, dtype=np.int64)
    # unrank k -> (i, j), i < j, rows of the strict upper triangle
    i = (m - 2 - np.floor(np.sqrt(-8.0 * k + 4.0 * m * (m - 1) - 7) / 2.0 - 0.5)).astype(np.int64)
    j = k + i + 1 - m * (m - 1) // 2 + (m - i) * (m - i - 1) // 2
    flip = rng.random(len(k)) < 0.5
    a, b = np.where(flip, j, i), np.where(flip, i, j)
    return [(int(ids[x]), int(ids[y])) for x, y in zip(a, b)]


def _check_pair(pair, dataset):
    a, b = pair
    if a == b or a not in dataset or b not in dataset:
        raise KeyError(f"pair {pair} does not name two trajectories of the dataset")
    return a, b


def rule_label(pair, dataset: Dataset) -> PreferencePair:
    """Prefer the higher environment return; equal returns go to the first."""
    a, b = _check_pair(pair, dataset)
    ga = sealed_rewards(dataset.by_id(a)).sum()
    gb = sealed_rewards(dataset.by_id(b)).sum()
    return PreferencePair(a, b, Label.FIRST if ga >= gb else Label.SECOND, "rule")


def _flip(p: PreferencePair, flip: bool, tag: str) -> PreferencePair:
    label = Label(1 - p.label) if flip else p.label
    return PreferencePair(p.id_a, p.id_b, label, tag)


def noisy_label(pair, dataset: Dataset, flip_prob: float, seed: int) -> PreferencePair:
    """Rule label flipped with probability ``flip_prob`` (seeded per pair)."""
    if not 0.0 <= flip_prob <= 0.5:
        raise ValueError("flip_prob must lie in [0, 0.5]")
    p = rule_label(pair, dataset)
    u = make_rng(seed, "noisy-label", p.id_a, p.id_b).random()
    return _flip(p, u < flip_prob, f"noisy({flip_prob})")


def trajectory_summary(traj: Trajectory) -> list[dict]:
    """Learner-visible per-step content; sealed fields are never included."""
    return [{"t": t, "obs": traj.obs[t].tolist(), "actions": traj.actions[t].tolist()}
            for t in range(traj.length)]


def pair_id(a: int, b: int) -> str:
    return f"{a}-{b}"


def http_label(pair, dataset: Dataset, endpoint: str, timeout: float = 10.0,
               retries: int = 2) -> PreferencePair:
    """Ask an external labeller over HTTP.

    Sends ``{"pair_id", "summary_a", "summary_b"}`` as JSON and expects
    ``{"preferred": "a" | "b"}``. Transport failures are retried ``retries``
    times before :class:`TransportError` is raised.
    """
    a, b = _check_pair(pair, dataset)
    body = json.dumps({
        "pair_id": pair_id(a, b),
        "summary_a": trajectory_summary(dataset.by_id(a)),
        "summary_b": trajectory_summary(dataset.by_id(b)),
    }).encode()
    req = urllib.request.Request(endpoint, data=body, headers={"Content-Type": "application/json"})
    last = None
    for attempt in range(retries + 1):
        try:
            with urllib.request.urlopen(req, timeout=timeout) as resp:
                raw = resp.read()
            break
        except (urllib.error.URLError, OSError) as exc:   # includes timeouts
            last = exc
            log.warning("labeller request for %s failed (attempt %d): %s", pair_id(a, b), attempt + 1, exc)
    else:
        raise TransportError(f"labeller at {endpoint} unreachable after {retries} retries: {last}")
    try:
        choice = json.loads(raw)["preferred"]
    except (ValueError, KeyError, TypeError) as exc:
        raise MalformedResponse(f"could not parse labeller response {raw[:200]!r}") from exc
    if choice not in ("a", "b"):
        raise MalformedResponse(f"labeller answered {choice!r}; expected 'a' or 'b'")
    return PreferencePair(a, b, Label.FIRST if choice == "a" else Label.SECOND, "http")


class PreferenceProvider:
    name = "base"
    deterministic = True

    def label_one(self, pair, dataset) -> PreferencePair:
        raise NotImplementedError

    def label(self, pairs, dataset) -> list[PreferencePair]:
        return [self.label_one(p, dataset) for p in pairs]


class RuleProvider(PreferenceProvider):
    name = "rule"

    def label_one(self, pair, dataset):
        return rule_label(pair, dataset)


class NoisyProvider(PreferenceProvider):
    name = "noisy"

    def __init__(self, flip_prob: float, seed: int):
        if not 0.0 <= flip_prob <= 0.5:
            raise ValueError("flip_prob must lie in [0, 0.5]")
        self.flip_prob, self.seed = flip_prob, seed

    def label(self, pairs, dataset):
        # one stream per call so repeated pairs get independent noise
        rng = make_rng(self.seed, "noisy-provider")
        flips = rng.random(len(pairs)) < self.flip_prob
        tag = f"noisy({self.flip_prob})"
        return [_flip(rule_label(p, dataset), f, tag) for p, f in zip(pairs, flips)]

    def label_one(self, pair, dataset):
        return noisy_label(pair, dataset, self.flip_prob, self.seed)


class HttpProvider(PreferenceProvider):
    name = "http"
    deterministic = False

    def __init__(self, endpoint: str, timeout: float = 10.0, max_in_flight: int = 4, retries: int = 2):
        if max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        self.endpoint, self.timeout = endpoint, timeout
        self.max_in_flight, self.retries = max_in_flight, retries

    def label_one(self, pair, dataset):
        return http_label(pair, dataset, self.endpoint, self.timeout, self.retries)

    def label(self, pairs, dataset):
        with ThreadPoolExecutor(max_workers=self.max_in_flight) as pool:
            return list(pool.map(lambda p: self.label_one(p, dataset), pairs))


def make_provider(kind: str, *, flip_prob=0.0, seed=0, endpoint=None, timeout=10.0,
                  max_in_flight=4) -> PreferenceProvider:
    if kind == "rule":
        return RuleProvider()
    if kind == "noisy":
        return NoisyProvider(flip_prob, seed)
    if kind == "http":
        if not endpoint:
            raise ValueError("the http provider needs an endpoint")
        return HttpProvider(endpoint, timeout, max_in_flight)
    raise ValueError(f"unknown preference provider {kind!r}")
