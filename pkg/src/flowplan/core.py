"""Domain types, seeded randomness, and dataset/checkpoint serialization.

Everything here is shared plumbing: the trajectory and observation types the
model consumes, the feasible-region primitives used by planning objectives and
metrics, a deterministic random-stream abstraction, and the on-disk formats
(line-delimited JSON for datasets, a single JSON document for checkpoints).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence, Union

import numpy as np


class Scenario(Enum):
    LEFT_TURN = "LeftTurn"
    OVERTAKE = "Overtake"
    RIGHT_TURN = "RightTurn"


class HumanIntention(Enum):
    YIELD = "Yield"
    NO_YIELD = "NoYield"


@dataclass(frozen=True)
class Position:
    """A planar position in meters."""

    x: float
    y: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError("non-finite value")

    def to_array(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=np.float64)


@dataclass(frozen=True)
class JointState:
    """Positions of all agents at one time step. Index 0 is the robot."""

    positions: tuple[Position, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "positions", tuple(self.positions))
        if len(self.positions) < 2:
            raise ValueError("a joint state needs the robot plus at least one other agent")

    @property
    def num_agents(self) -> int:
        return len(self.positions)

    def to_array(self) -> np.ndarray:
        # shape (A, 2)
        return np.array([[p.x, p.y] for p in self.positions], dtype=np.float64)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> JointState:
        return cls(tuple(Position(float(r[0]), float(r[1])) for r in np.asarray(arr)))


@dataclass(frozen=True)
class JointTrajectory:
    """A fixed-length sequence of joint states."""

    steps: tuple[JointState, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "steps", tuple(self.steps))
        if len(self.steps) < 1:
            raise ValueError("trajectory must contain at least one step")
        agents = {s.num_agents for s in self.steps}
        if len(agents) != 1:
            raise ValueError("agent count must be constant over the trajectory")

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def num_agents(self) -> int:
        return self.steps[0].num_agents

    def to_array(self) -> np.ndarray:
        # shape (T, A, 2)
        return np.stack([s.to_array() for s in self.steps])

    @classmethod
    def from_array(cls, arr: np.ndarray) -> JointTrajectory:
        return cls(tuple(JointState.from_array(step) for step in np.asarray(arr)))


@dataclass(frozen=True)
class Observation:
    """What the planner and model see at decision time.

    ``past`` holds the most recent joint states, oldest first, so
    ``past[-1]`` is the current joint position.  ``context`` is a fixed-width
    vector of scene features (scenario one-hot, robot offset from the map
    center, goal offset from the robot, lane width); the model treats it as
    an opaque conditioning vector.
    """

    past: tuple[JointState, ...]
    context: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "past", tuple(self.past))
        object.__setattr__(self, "context", tuple(float(c) for c in self.context))
        if len(self.past) < 1:
            raise ValueError("observation needs at least one past state")
        if not all(math.isfinite(c) for c in self.context):
            raise ValueError("non-finite value")

    @property
    def num_agents(self) -> int:
        return self.past[0].num_agents

    def past_array(self) -> np.ndarray:
        # shape (H_p, A, 2)
        return np.stack([s.to_array() for s in self.past])

    def context_array(self) -> np.ndarray:
        return np.array(self.context, dtype=np.float64)


@dataclass(frozen=True)
class HalfPlane:
    """Feasible region {p : normal . p >= offset}.  normal need not be unit."""

    normal: tuple[float, float]
    offset: float

    def __post_init__(self) -> None:
        nx, ny = self.normal
        if math.hypot(nx, ny) == 0.0:
            raise ValueError("half-plane normal must be nonzero")


@dataclass(frozen=True)
class Box:
    """Axis-aligned box [lo, hi]; the flag says which side is feasible."""

    lo: tuple[float, float]
    hi: tuple[float, float]
    feasible_inside: bool = True

    def __post_init__(self) -> None:
        if not (self.lo[0] <= self.hi[0] and self.lo[1] <= self.hi[1]):
            raise ValueError("box corners must satisfy lo <= hi")


RegionConstraint = Union[HalfPlane, Box]


@dataclass(frozen=True)
class Goal:
    """A coordinate destination plus trajectory constraints.

    ``constraints`` are per-position region constraints.  ``min_separation``
    is an optional constraint on the joint trajectory: every pair of agents
    must stay at least this far apart (meters).
    """

    destination: Position
    constraints: tuple[RegionConstraint, ...] = ()
    min_separation: float | None = None


def signed_distance(constraint: RegionConstraint, position) -> float:
    """Signed distance from ``position`` to the constraint boundary.

    Negative inside the feasible region, positive outside, zero exactly on
    the boundary.  1-Lipschitz in the position.
    """
    if isinstance(position, Position):
        px, py = position.x, position.y
    else:
        px, py = float(position[0]), float(position[1])
    if isinstance(constraint, HalfPlane):
        nx, ny = constraint.normal
        norm = math.hypot(nx, ny)
        return (constraint.offset - (nx * px + ny * py)) / norm
    if isinstance(constraint, Box):
        # Standard box SDF: qx/qy are per-axis distances past the faces.
        qx = max(constraint.lo[0] - px, px - constraint.hi[0])
        qy = max(constraint.lo[1] - py, py - constraint.hi[1])
        outside = math.hypot(max(qx, 0.0), max(qy, 0.0))
        inside = min(max(qx, qy), 0.0)
        sd = outside + inside
        return sd if constraint.feasible_inside else -sd
    raise TypeError(f"unknown constraint type: {type(constraint).__name__}")


@dataclass(frozen=True)
class EpisodeRecord:
    """One logged episode: observation, realized future, and labels."""

    observation: Observation
    future: JointTrajectory
    scenario_id: Scenario
    human_intention: HumanIntention
    seed: int


class RngStream:
    """Deterministic random stream with named substreams.

    Equal seeds give bit-identical draw sequences on every platform (the
    underlying bit generator is PCG64, stable across numpy releases).
    ``child(name)`` derives an independent stream whose seed depends only on
    this stream's seed and the name, never on draw order.
    """

    def __init__(self, seed: int) -> None:
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, name: str) -> RngStream:
        digest = hashlib.sha256(f"{self.seed}/{name}".encode()).digest()
        return RngStream(int.from_bytes(digest[:8], "little"))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, shape=None) -> np.ndarray:
        return self._gen.standard_normal(size=shape)

    def uniform(self, low: float = 0.0, high: float = 1.0, shape=None) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int) -> int:
        return int(self._gen.integers(low, high))

    def shuffle(self, x) -> None:
        self._gen.shuffle(x)


# --- dataset serialization (line-delimited JSON) ---


def _record_to_dict(record: EpisodeRecord) -> dict:
    past = record.observation.past_array()
    future = record.future.to_array()
    context = record.observation.context_array()
    if not (np.isfinite(past).all() and np.isfinite(future).all() and np.isfinite(context).all()):
        raise ValueError("non-finite value")
    return {
        "past": past.tolist(),
        "future": future.tolist(),
        "context": context.tolist(),
        "scenario_id": record.scenario_id.value,
        "human_intention": record.human_intention.value,
        "seed": int(record.seed),
    }


def _record_from_dict(obj: dict) -> EpisodeRecord:
    observation = Observation(
        past=tuple(JointState.from_array(s) for s in obj["past"]),
        context=tuple(obj["context"]),
    )
    return EpisodeRecord(
        observation=observation,
        future=JointTrajectory.from_array(np.asarray(obj["future"], dtype=np.float64)),
        scenario_id=Scenario(obj["scenario_id"]),
        human_intention=HumanIntention(obj["human_intention"]),
        seed=int(obj["seed"]),
    )


def serialize_dataset(records: Sequence[EpisodeRecord]) -> bytes:
    """One compact JSON object per line; round-trips losslessly."""
    if len(records) == 0:
        raise ValueError("empty dataset")
    lines = [json.dumps(_record_to_dict(r), separators=(",", ":")) for r in records]
    return ("\n".join(lines) + "\n").encode("utf-8")


def deserialize_dataset(data: bytes | str) -> list[EpisodeRecord]:
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    lines = [line for line in data.splitlines() if line.strip()]
    if not lines:
        raise ValueError("empty dataset")
    records = [_record_from_dict(json.loads(line)) for line in lines]
    shapes = {(len(r.observation.past), len(r.future), r.future.num_agents) for r in records}
    if len(shapes) != 1:
        raise ValueError("records disagree on past length, horizon, or agent count")
    return records


def save_dataset(path, records: Sequence[EpisodeRecord]) -> None:
    with open(path, "wb") as f:
        f.write(serialize_dataset(records))


def load_dataset(path) -> list[EpisodeRecord]:
    with open(path, "rb") as f:
        return deserialize_dataset(f.read())


# --- checkpoint serialization (single JSON document) ---


def save_checkpoint(path, hyper: dict, params: dict[str, np.ndarray]) -> None:
    """Named flat parameter arrays plus a hyperparameter block."""
    blob = {"hyper": hyper, "params": {}}
    for name, arr in params.items():
        arr = np.asarray(arr, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise ValueError("non-finite value")
        blob["params"][name] = {"shape": list(arr.shape), "data": arr.ravel().tolist()}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(blob, f)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "r", encoding="utf-8") as f:
        blob = json.load(f)
    params = {}
    for name, entry in blob["params"].items():
        params[name] = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
    return blob["hyper"], params
