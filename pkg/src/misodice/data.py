"""Trajectories, datasets and their on-disk format.

Environment rewards and the expert/poor source label ride along with each
trajectory but are *sealed*: learners only ever see observations, actions
and terminal flags. The sealed fields are reachable through
:func:`sealed_rewards` and :func:`sealed_source`, which only the rule-based
preference provider and the evaluation code call.

File layout (little endian)::

    b"MISODATA" | u16 version | u16 n_agents | u32 obs sizes[n] | u32 action sizes[n]
    | u64 n_trajectories | u32 len + provenance (utf-8)
    | n_trajectories x (u32 len | record)
    | sha256 of everything above

    record = u64 traj_id | u32 T | u8 flags | i32 obs[(T+1)*n] | i32 actions[T*n]
             | u8 terminals[T] | f64 rewards[T] if flags&1 | u16 len + source if flags&2
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from ._rng import make_rng

MAGIC = b"MISODATA"
FORMAT_VERSION = 1


class DatasetFormatError(ValueError):
    pass


class ChecksumError(DatasetFormatError):
    pass


class VersionError(DatasetFormatError):
    pass


class TruncatedRecordError(DatasetFormatError):
    pass


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


class Trajectory:
    """One episode: ``T`` steps of joint observations and joint actions.

    ``obs`` has ``T + 1`` rows; the last row is the observation reached after
    the final action, so every step has an observed successor. ``terminals``
    marks true episode ends (no bootstrapping past them); a time-limit cut is
    not terminal.
    """

    __slots__ = ("obs", "actions", "terminals", "traj_id", "_sealed_rewards", "_sealed_source")

    def __init__(self, obs, actions, terminals=None, traj_id: int = 0, *,
                 sealed_rewards=None, sealed_source: str | None = None):
        obs = _frozen(obs, np.int32)
        actions = _frozen(actions, np.int32)
        if actions.ndim != 2 or obs.ndim != 2:
            raise ValueError("obs and actions must be 2-d (time, agent)")
        if obs.shape != (actions.shape[0] + 1, actions.shape[1]):
            raise ValueError(f"obs shape {obs.shape} does not match actions {actions.shape} (+1 row)")
        if actions.shape[0] < 1:
            raise ValueError("trajectory needs at least one step")
        if terminals is None:
            terminals = np.zeros(actions.shape[0], dtype=bool)
        terminals = _frozen(terminals, bool)
        if terminals.shape != (actions.shape[0],):
            raise ValueError("one terminal flag per step")
        self.obs, self.actions, self.terminals = obs, actions, terminals
        self.traj_id = int(traj_id)
        self._sealed_rewards = None if sealed_rewards is None else _frozen(sealed_rewards, np.float64)
        if self._sealed_rewards is not None and self._sealed_rewards.shape != (actions.shape[0],):
            raise ValueError("one sealed reward per step")
        self._sealed_source = sealed_source

    @property
    def length(self) -> int:
        return self.actions.shape[0]

    @property
    def n_agents(self) -> int:
        return self.actions.shape[1]

    @property
    def steps(self):
        return [(tuple(self.obs[t]), tuple(self.actions[t]), bool(self.terminals[t]))
                for t in range(self.length)]

    def replace(self, **changes) -> "Trajectory":
        kw = dict(obs=self.obs, actions=self.actions, terminals=self.terminals,
                  traj_id=self.traj_id, sealed_rewards=self._sealed_rewards,
                  sealed_source=self._sealed_source)
        kw.update(changes)
        return Trajectory(**kw)

    def agent_view(self, agent: int) -> "Trajectory":
        """Single-agent projection (columns of one agent), sealed fields kept."""
        return self.replace(obs=self.obs[:, [agent]], actions=self.actions[:, [agent]])

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (self.traj_id == other.traj_id
                and np.array_equal(self.obs, other.obs)
                and np.array_equal(self.actions, other.actions)
                and np.array_equal(self.terminals, other.terminals)
                and _opt_equal(self._sealed_rewards, other._sealed_rewards)
                and self._sealed_source == other._sealed_source)

    __hash__ = None

    def __repr__(self):
        return f"Trajectory(id={self.traj_id}, T={self.length}, n_agents={self.n_agents})"


def _opt_equal(a, b):
    if a is None or b is None:
        return a is None and b is None
    return np.array_equal(a, b)


def sealed_rewards(traj: Trajectory) -> np.ndarray:
    """Per-step environment rewards. Evaluation and rule-based labelling only."""
    if traj._sealed_rewards is None:
        raise LookupError(f"trajectory {traj.traj_id} carries no sealed rewards")
    return traj._sealed_rewards


def sealed_source(traj: Trajectory) -> str | None:
    """Generating source (``"expert"``/``"poor"``). Evaluation only."""
    return traj._sealed_source


@dataclass(frozen=True)
class Transitions:
    """Flat per-step arrays of a dataset, learner-visible fields only.

    ``weights`` are ``gamma**t`` normalised to sum to one, so weighted means
    over transitions are expectations under the dataset's discounted
    state-action distribution.
    """

    obs: np.ndarray
    actions: np.ndarray
    next_obs: np.ndarray
    terminals: np.ndarray
    timesteps: np.ndarray
    traj_index: np.ndarray
    weights: np.ndarray

    def __len__(self):
        return self.obs.shape[0]


class Dataset:
    """An immutable collection of trajectories sharing agent/observation/action spaces.

    An empty collection is allowed (an empty mixed split is legitimate);
    consumers that need data check for it.
    """

    def __init__(self, n_agents, obs_sizes, action_sizes, trajectories=(), provenance: str = ""):
        self.n_agents = int(n_agents)
        self.obs_sizes = tuple(int(x) for x in obs_sizes)
        self.action_sizes = tuple(int(x) for x in action_sizes)
        self.trajectories = tuple(trajectories)
        self.provenance = str(provenance)
        if self.n_agents < 1 or len(self.obs_sizes) != self.n_agents or len(self.action_sizes) != self.n_agents:
            raise ValueError("per-agent sizes must match n_agents")
        seen = set()
        osz, asz = np.asarray(self.obs_sizes), np.asarray(self.action_sizes)
        for tr in self.trajectories:
            if tr.n_agents != self.n_agents:
                raise ValueError(f"trajectory {tr.traj_id} has {tr.n_agents} agents, expected {self.n_agents}")
            if tr.obs.min() < 0 or np.any(tr.obs >= osz) or tr.actions.min() < 0 or np.any(tr.actions >= asz):
                raise ValueError(f"trajectory {tr.traj_id} has indices outside the declared spaces")
            if tr.traj_id in seen:
                raise ValueError(f"duplicate traj_id {tr.traj_id}")
            seen.add(tr.traj_id)
        self._by_id = {tr.traj_id: tr for tr in self.trajectories}

    def __len__(self):
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    def __getitem__(self, i):
        return self.trajectories[i]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.dims == other.dims and self.provenance == other.provenance
                and self.trajectories == other.trajectories)

    __hash__ = None

    def __repr__(self):
        return f"Dataset(n_traj={len(self)}, n_agents={self.n_agents}, provenance={self.provenance!r})"

    @property
    def dims(self):
        return (self.n_agents, self.obs_sizes, self.action_sizes)

    @property
    def ids(self) -> list[int]:
        return [tr.traj_id for tr in self.trajectories]

    def by_id(self, traj_id: int) -> Trajectory:
        return self._by_id[traj_id]

    def __contains__(self, traj_id):
        return traj_id in self._by_id

    def subset(self, ids, provenance=None) -> "Dataset":
        return Dataset(*self.dims, [self._by_id[i] for i in ids],
                       provenance=self.provenance if provenance is None else provenance)

    def agent_view(self, agent: int) -> "Dataset":
        return Dataset(1, [self.obs_sizes[agent]], [self.action_sizes[agent]],
                       [tr.agent_view(agent) for tr in self.trajectories],
                       provenance=f"{self.provenance}|agent{agent}")

    @property
    def n_steps(self) -> int:
        return sum(tr.length for tr in self.trajectories)

    def transitions(self, gamma: float) -> Transitions:
        if not self.trajectories:
            raise ValueError("dataset is empty")
        obs = np.concatenate([tr.obs[:-1] for tr in self.trajectories])
        nxt = np.concatenate([tr.obs[1:] for tr in self.trajectories])
        act = np.concatenate([tr.actions for tr in self.trajectories])
        term = np.concatenate([tr.terminals for tr in self.trajectories])
        ts = np.concatenate([np.arange(tr.length) for tr in self.trajectories])
        ti = np.concatenate([np.full(tr.length, k) for k, tr in enumerate(self.trajectories)])
        w = np.power(float(gamma), ts.astype(float))
        return Transitions(obs, act, nxt, term, ts, ti, w / w.sum())

    def initial_obs(self) -> np.ndarray:
        if not self.trajectories:
            raise ValueError("dataset is empty")
        return np.stack([tr.obs[0] for tr in self.trajectories])


def _check_dims(a: Dataset, b: Dataset):
    if a.dims != b.dims:
        raise ValueError(f"dimension mismatch: {a.dims} vs {b.dims}")


def build_unlabeled(expert: Dataset, poor: Dataset, seed: int) -> Dataset:
    """Shuffle expert and poor trajectories together, hiding which is which.

    The source label is sealed on each trajectory; ids become positions in
    the shuffled order.
    """
    _check_dims(expert, poor)
    pool = ([tr.replace(sealed_source="expert") for tr in expert]
            + [tr.replace(sealed_source="poor") for tr in poor])
    order = make_rng(seed, "build-unlabeled").permutation(len(pool))
    trajs = [pool[j].replace(traj_id=k) for k, j in enumerate(order)]
    return Dataset(*expert.dims, trajs, provenance=f"unlabeled({len(expert)}+{len(poor)},seed={seed})")


def union(expert: Dataset, mix: Dataset) -> Dataset:
    """Every trajectory of both inputs once, expert first.

    Ids are kept when they are already distinct across the inputs, otherwise
    all are renumbered densely in order.
    """
    _check_dims(expert, mix)
    trajs = [*expert, *mix]
    ids = [tr.traj_id for tr in trajs]
    if len(set(ids)) != len(ids):
        trajs = [tr.replace(traj_id=k) for k, tr in enumerate(trajs)]
    return Dataset(*expert.dims, trajs, provenance="union")


# -- serialisation ------------------------------------------------------------

def _encode_record(tr: Trajectory) -> bytes:
    flags = (1 if tr._sealed_rewards is not None else 0) | (2 if tr._sealed_source is not None else 0)
    out = bytearray(struct.pack("<QIB", tr.traj_id, tr.length, flags))
    out += tr.obs.astype("<i4").tobytes() + tr.actions.astype("<i4").tobytes()
    out += tr.terminals.astype(np.uint8).tobytes()
    if flags & 1:
        out += tr._sealed_rewards.astype("<f8").tobytes()
    if flags & 2:
        src = tr._sealed_source.encode()
        out += struct.pack("<H", len(src)) + src
    return bytes(out)


def dumps(ds: Dataset) -> bytes:
    n = ds.n_agents
    out = bytearray(MAGIC)
    out += struct.pack("<HH", FORMAT_VERSION, n)
    out += struct.pack(f"<{n}I", *ds.obs_sizes) + struct.pack(f"<{n}I", *ds.action_sizes)
    prov = ds.provenance.encode()
    out += struct.pack("<QI", len(ds), len(prov)) + prov
    for tr in ds:
        rec = _encode_record(tr)
        out += struct.pack("<I", len(rec)) + rec
    out += hashlib.sha256(out).digest()
    return bytes(out)


def read_header(raw: bytes) -> dict:
    """Parse the fixed header; returns its fields and the body offset."""
    if raw[:8] != MAGIC:
        raise DatasetFormatError("not a dataset file (bad magic)")
    try:
        version, n = struct.unpack_from("<HH", raw, 8)
        if version != FORMAT_VERSION:
            raise VersionError(f"format version {version}, expected {FORMAT_VERSION}")
        pos = 12
        obs_sizes = struct.unpack_from(f"<{n}I", raw, pos)
        pos += 4 * n
        action_sizes = struct.unpack_from(f"<{n}I", raw, pos)
        pos += 4 * n
        count, plen = struct.unpack_from("<QI", raw, pos)
        pos += 12
    except struct.error as exc:
        raise TruncatedRecordError("truncated header") from exc
    provenance = raw[pos:pos + plen].decode()
    return dict(version=version, n_agents=n, obs_sizes=obs_sizes, action_sizes=action_sizes,
                n_trajectories=count, provenance=provenance, offset=pos + plen)


def _decode_record(rec: bytes, n: int) -> Trajectory:
    try:
        traj_id, T, flags = struct.unpack_from("<QIB", rec, 0)
        pos = 13
        obs = np.frombuffer(rec, "<i4", (T + 1) * n, pos).reshape(T + 1, n)
        pos += 4 * (T + 1) * n
        act = np.frombuffer(rec, "<i4", T * n, pos).reshape(T, n)
        pos += 4 * T * n
        term = np.frombuffer(rec, np.uint8, T, pos).astype(bool)
        pos += T
        rewards = source = None
        if flags & 1:
            rewards = np.frombuffer(rec, "<f8", T, pos)
            pos += 8 * T
        if flags & 2:
            (slen,) = struct.unpack_from("<H", rec, pos)
            source = rec[pos + 2:pos + 2 + slen].decode()
            pos += 2 + slen
    except (struct.error, ValueError) as exc:
        raise TruncatedRecordError(f"truncated trajectory record: {exc}") from exc
    if pos != len(rec):
        raise DatasetFormatError("record length does not match its contents")
    return Trajectory(obs, act, term, traj_id, sealed_rewards=rewards, sealed_source=source)


def loads(raw: bytes) -> Dataset:
    if len(raw) < len(MAGIC) + 32:
        raise TruncatedRecordError("file too short")
    body, digest = raw[:-32], raw[-32:]
    if body[:8] != MAGIC:
        raise DatasetFormatError("not a dataset file (bad magic)")
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("checksum mismatch")
    head = read_header(body)
    n, pos = head["n_agents"], head["offset"]
    trajs = []
    for _ in range(head["n_trajectories"]):
        if pos + 4 > len(body):
            raise TruncatedRecordError("missing record length")
        (rlen,) = struct.unpack_from("<I", body, pos)
        pos += 4
        if pos + rlen > len(body):
            raise TruncatedRecordError("record extends past end of file")
        trajs.append(_decode_record(body[pos:pos + rlen], n))
        pos += rlen
    if pos != len(body):
        raise DatasetFormatError(
            f"header declares {head['n_trajectories']} trajectories but body has {len(body) - pos} extra bytes")
    return Dataset(n, head["obs_sizes"], head["action_sizes"], trajs, provenance=head["provenance"])


def save(dataset: Dataset, path):
    with open(path, "wb") as fh:
        fh.write(dumps(dataset))


def load(path) -> Dataset:
    with open(path, "rb") as fh:
        return loads(fh.read())
