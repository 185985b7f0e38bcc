"""Three scripted two-agent driving scenarios with a latent human intention.

Each scenario is a small 2D world integrated at 0.4 s steps with PD position
tracking.  The human follows its lane and reacts to the robot's probe (does
it nose into the contested region?) according to a hidden intention drawn at
episode start: yielders brake to a stop short of the conflict zone, non
yielders press on.  A hand-scripted expert with four behavior branches
(stay out / enter then complete always / contingently / never) generates
demonstration data covering both outcomes of the interaction, and the
closed-loop evaluator replans a learned model every step and scores
episodes by goal-reaching, expert-time goal-reaching, and near-collisions.

Scenario layouts:

* left turn: robot turns left across an oncoming lane; the contested region
  is the oncoming lane inside the intersection.
* right turn (mirror image of the left turn).
* overtake: the robot's lane is closed ahead, so it must pass through the
  oncoming lane; the human approaches head-on.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, replace

import numpy as np

from . import flow as flow_mod
from . import planner as planner_mod
from .core import (
    Box,
    EpisodeRecord,
    Goal,
    HumanIntention,
    JointState,
    JointTrajectory,
    Observation,
    Position,
    RngStream,
    Scenario,
)

D_SAFE = 2.0  # near-collision threshold, meters
EXPERT_SLACK_STEPS = 8
PROBE_WITHDRAW_STEP = 8  # when a probe-only robot gives up and backs out
TARGET_JITTER = 0.05  # meters, on scripted targets
COMFORT_DECEL = 3.0  # m/s^2 used by scripted speed envelopes


@dataclass(frozen=True)
class ControllerGains:
    """PD position-tracking gains shared by both agents."""

    k_p: float = 5.0
    k_d: float = 2.0
    max_accel: float = 4.0

    def __post_init__(self) -> None:
        if self.k_p <= 0:
            raise ValueError("k_p must be positive")


@dataclass
class WorldState:
    robot_position: Position
    robot_velocity: tuple[float, float]
    human_position: Position
    human_velocity: tuple[float, float]
    human_intention: HumanIntention
    step: int = 0


@dataclass(frozen=True)
class ExpertBranch:
    """Scripted robot behavior: whether to probe, and how to finish.

    complete = "always" goes as soon as the gap merely looks open (risky),
    "contingent" goes once the human visibly yields or has passed,
    "never" waits for the human to pass no matter what (conservative).
    """

    enter: bool
    complete: str = "contingent"

    def __post_init__(self) -> None:
        if self.complete not in ("always", "contingent", "never"):
            raise ValueError("complete must be always, contingent, or never")


@dataclass(frozen=True)
class ScenarioConfig:
    scenario_id: Scenario
    center: Position
    lane_width: float
    goal_region: Box
    entry_zone: Box
    conflict_zone: Box
    goal: Goal
    robot_start: Position
    robot_cruise: float
    human_start: Position
    human_cruise: float
    human_yield_speed: float
    human_fast_speed: float
    human_stop_s: float  # arclength on the human route where a yielder stops
    human_decision_distance: float  # yield reaction arms within this range
    robot_route: tuple[Position, ...]
    human_route: tuple[Position, ...]
    stop_s: float  # robot-route arclength of the wait-outside hold point
    staging_s: float  # robot-route arclength of the in-zone observation point
    impatience_step: int  # a stopped yielder resumes after this step
    p_yield: float = 0.5
    dt: float = 0.4
    horizon_steps: int = 44
    speed_limit: float = 8.0
    past_len: int = 4
    record_horizon: int = 12
    maneuver_speed: float | None = None  # speed cap through the contested stretch
    maneuver_span: tuple[float, float] | None = None  # arclength window for the cap
    probe_hold_s: float | None = None  # probe-but-never-commit hold point, if not staging

    def __post_init__(self) -> None:
        if not (0.0 <= self.p_yield <= 1.0):
            raise ValueError("p_yield must be in [0, 1]")
        if self.dt <= 0 or self.horizon_steps < 1:
            raise ValueError("dt must be positive and horizon at least 1 step")
        if (self.maneuver_speed is None) != (self.maneuver_span is None):
            raise ValueError("maneuver_speed and maneuver_span must be set together")
        if self.maneuver_span is not None and self.maneuver_span[0] >= self.maneuver_span[1]:
            raise ValueError("maneuver_span must be an increasing arclength window")

    def initial_state(self, intention: HumanIntention) -> WorldState:
        rv = _route_direction(self.robot_route, _route_progress(self.robot_route, self.robot_start))
        hv = _route_direction(self.human_route, _route_progress(self.human_route, self.human_start))
        return WorldState(
            robot_position=self.robot_start,
            robot_velocity=(rv[0] * self.robot_cruise, rv[1] * self.robot_cruise),
            human_position=self.human_start,
            human_velocity=(hv[0] * self.human_cruise, hv[1] * self.human_cruise),
            human_intention=intention,
            step=0,
        )


@dataclass
class EpisodeMetrics:
    reached_goal: bool
    near_expert: bool
    near_collision: bool
    steps_to_goal: int
    min_distance: float
    contingency_divergence: float | None = None
    diagnostic: str = ""


# --- polyline routes ---


def _route_arrays(route: tuple[Position, ...]) -> tuple[np.ndarray, np.ndarray]:
    pts = np.array([[p.x, p.y] for p in route])
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    return pts, cum


def _route_progress(route: tuple[Position, ...], p: Position) -> float:
    """Arclength of the closest point on the polyline to p."""
    pts, cum = _route_arrays(route)
    q = np.array([p.x, p.y])
    best = (math.inf, 0.0)
    for i in range(len(pts) - 1):
        a, b = pts[i], pts[i + 1]
        ab = b - a
        denom = float(ab @ ab)
        t = 0.0 if denom == 0 else float(np.clip((q - a) @ ab / denom, 0.0, 1.0))
        closest = a + t * ab
        d = float(np.linalg.norm(q - closest))
        if d < best[0]:
            best = (d, float(cum[i]) + t * float(np.linalg.norm(ab)))
    return best[1]


def _route_point(route: tuple[Position, ...], s: float) -> tuple[float, float]:
    pts, cum = _route_arrays(route)
    s = float(np.clip(s, 0.0, cum[-1]))
    i = int(np.searchsorted(cum, s, side="right")) - 1
    i = min(max(i, 0), len(pts) - 2)
    seg_len = cum[i + 1] - cum[i]
    t = 0.0 if seg_len == 0 else (s - cum[i]) / seg_len
    xy = pts[i] + t * (pts[i + 1] - pts[i])
    return float(xy[0]), float(xy[1])


def _route_direction(route: tuple[Position, ...], s: float) -> tuple[float, float]:
    pts, cum = _route_arrays(route)
    i = int(np.searchsorted(cum, min(s, cum[-1] - 1e-9), side="right")) - 1
    i = min(max(i, 0), len(pts) - 2)
    d = pts[i + 1] - pts[i]
    n = float(np.linalg.norm(d))
    return (0.0, 0.0) if n == 0 else (float(d[0]) / n, float(d[1]) / n)


def _envelope_speed(cruise: float, stop_s: float | None, s: float) -> float:
    """Cruise speed capped by a braking envelope into an optional stop point."""
    if stop_s is None:
        return cruise
    dist = max(0.0, stop_s - s)
    return min(cruise, math.sqrt(2.0 * COMFORT_DECEL * dist))


def _route_speed_cap(config: "ScenarioConfig", s: float) -> float:
    """Top speed allowed at arclength s: tight maneuvers are driven slowly."""
    if config.maneuver_span is None or config.maneuver_speed is None:
        return config.robot_cruise
    lo, hi = config.maneuver_span
    return config.maneuver_speed if lo <= s < hi else config.robot_cruise


def _advance_target(route: tuple[Position, ...], pos: Position, speed: float, dt: float) -> tuple[float, float]:
    s = _route_progress(route, pos)
    return _route_point(route, s + speed * dt)


def _inside_box(box: Box, p: Position) -> bool:
    return box.lo[0] <= p.x <= box.hi[0] and box.lo[1] <= p.y <= box.hi[1]


def _speed(v: tuple[float, float]) -> float:
    return math.hypot(v[0], v[1])


# --- scenario configs ---


def left_turn_config() -> ScenarioConfig:
    robot_route = (
        Position(2.0, -20.0),
        Position(2.0, 0.0),
        Position(-0.5, 1.8),
        Position(-13.0, 2.0),
    )
    human_route = (Position(-2.0, 40.0), Position(-2.0, -80.0))
    # off-road block: the southwest corner would let a plan cut behind the
    # oncoming lane instead of taking the turn
    corner = Box((-20.0, -20.0), (0.0, -0.5), feasible_inside=False)
    return ScenarioConfig(
        scenario_id=Scenario.LEFT_TURN,
        center=Position(0.0, 0.0),
        lane_width=4.0,
        goal_region=Box((-15.0, 0.0), (-9.0, 4.0)),
        entry_zone=Box((0.0, -4.0), (4.0, 2.5)),
        conflict_zone=Box((-4.0, -4.0), (0.0, 4.0)),
        goal=Goal(destination=Position(-12.0, 2.0), constraints=(corner,), min_separation=4.0),
        robot_start=Position(2.0, -8.6),
        robot_cruise=4.5,
        human_start=Position(-2.0, 14.0),
        human_cruise=3.0,
        human_yield_speed=0.8,
        human_fast_speed=3.0,  # non-yielders hold their speed
        human_stop_s=32.5,  # y = +7.5, well short of the conflict zone
        human_decision_distance=22.0,
        robot_route=robot_route,
        human_route=human_route,
        stop_s=_route_progress(robot_route, Position(2.0, -5.0)),
        staging_s=_route_progress(robot_route, Position(2.0, 0.0)),
        probe_hold_s=_route_progress(robot_route, Position(2.0, -2.0)),
        impatience_step=24,
        horizon_steps=52,
        # the turn itself is taken slowly, so a robot that commits early is
        # still mid-crossing when a non-yielding human arrives
        maneuver_speed=1.6,
        maneuver_span=(
            _route_progress(robot_route, Position(2.0, 0.0)),
            _route_progress(robot_route, Position(-5.0, 2.0)),
        ),
    )


def right_turn_config() -> ScenarioConfig:
    """Exact mirror image (x -> -x) of the left turn."""
    cfg = left_turn_config()

    def m(p: Position) -> Position:
        return Position(-p.x, p.y)

    def mbox(b: Box) -> Box:
        return Box((-b.hi[0], b.lo[1]), (-b.lo[0], b.hi[1]), b.feasible_inside)

    return replace(
        cfg,
        scenario_id=Scenario.RIGHT_TURN,
        goal_region=mbox(cfg.goal_region),
        entry_zone=mbox(cfg.entry_zone),
        conflict_zone=mbox(cfg.conflict_zone),
        goal=Goal(
            destination=m(cfg.goal.destination),
            constraints=tuple(mbox(c) for c in cfg.goal.constraints),
            min_separation=cfg.goal.min_separation,
        ),
        robot_start=m(cfg.robot_start),
        human_start=m(cfg.human_start),
        robot_route=tuple(m(p) for p in cfg.robot_route),
        human_route=tuple(m(p) for p in cfg.human_route),
    )


def overtake_config() -> ScenarioConfig:
    # the robot's lane is closed for x in [8, 20]; the detour runs through
    # the oncoming lane, where the human approaches head-on
    robot_route = (
        Position(-20.0, -2.0),
        Position(4.0, -2.0),
        Position(8.0, 2.0),
        Position(20.0, 2.0),
        Position(24.0, -2.0),
        Position(34.0, -2.0),
    )
    human_route = (Position(50.0, 2.0), Position(-80.0, 2.0))
    closure = Box((8.0, -20.0), (20.0, 0.4), feasible_inside=False)
    shoulder = Box((8.0, 3.6), (20.0, 20.0), feasible_inside=False)
    return ScenarioConfig(
        scenario_id=Scenario.OVERTAKE,
        center=Position(15.0, 0.0),
        lane_width=4.0,
        goal_region=Box((30.0, -4.0), (44.0, 0.0)),
        entry_zone=Box((2.0, -4.0), (24.0, 4.0)),
        conflict_zone=Box((8.0, 0.0), (24.0, 4.0)),
        goal=Goal(destination=Position(33.0, -2.0), constraints=(closure, shoulder), min_separation=4.0),
        robot_start=Position(-10.0, -2.0),
        robot_cruise=4.5,
        human_start=Position(44.0, 2.0),
        human_cruise=3.6,
        human_yield_speed=2.0,
        human_fast_speed=3.6,  # non-yielders simply keep pressing on
        human_stop_s=22.0,  # x = +28, well east of the robot's merge-back point
        human_decision_distance=30.0,
        robot_route=robot_route,
        human_route=human_route,
        stop_s=_route_progress(robot_route, Position(0.0, -2.0)),
        staging_s=_route_progress(robot_route, Position(8.0, 2.0)),
        probe_hold_s=_route_progress(robot_route, Position(4.0, -2.0)),
        impatience_step=22,
        horizon_steps=72,
        # the whole detour through the oncoming lane is driven slowly
        maneuver_speed=2.5,
        maneuver_span=(
            _route_progress(robot_route, Position(8.0, 2.0)),
            _route_progress(robot_route, Position(24.0, -2.0)),
        ),
    )


def scenario_config(scenario: Scenario) -> ScenarioConfig:
    return {
        Scenario.LEFT_TURN: left_turn_config,
        Scenario.OVERTAKE: overtake_config,
        Scenario.RIGHT_TURN: right_turn_config,
    }[scenario]()


# --- dynamics ---


def env_step(
    state: WorldState,
    robot_target: Position,
    human_target: Position,
    gains: ControllerGains,
    dt: float,
    speed_limit: float | None = None,
) -> WorldState:
    """PD-track each agent toward its target for one semi-implicit step."""

    def advance(pos: Position, vel: tuple[float, float], target: Position):
        a = np.array([gains.k_p * (target.x - pos.x) - gains.k_d * vel[0], gains.k_p * (target.y - pos.y) - gains.k_d * vel[1]])
        norm = float(np.linalg.norm(a))
        if math.isfinite(gains.max_accel) and norm > gains.max_accel:
            a *= gains.max_accel / norm
        v = np.array(vel) + a * dt
        if speed_limit is not None:
            speed = float(np.linalg.norm(v))
            if speed > speed_limit:
                v *= speed_limit / speed
        return Position(pos.x + float(v[0]) * dt, pos.y + float(v[1]) * dt), (float(v[0]), float(v[1]))

    rp, rv = advance(state.robot_position, state.robot_velocity, robot_target)
    hp, hv = advance(state.human_position, state.human_velocity, human_target)
    return WorldState(rp, rv, hp, hv, state.human_intention, state.step + 1)


# --- interaction geometry shared by the policies ---


def _human_passed(config: ScenarioConfig, state: WorldState) -> bool:
    """Has the human moved beyond the robot's crossing corridor?"""
    s_h = _route_progress(config.human_route, state.human_position)
    if config.scenario_id is Scenario.OVERTAKE:
        # past the robot's wait point, heading away
        return state.human_position.x < state.robot_position.x - 2.0 or state.human_position.x < 2.0
    return s_h > _route_progress(config.human_route, _crossing_point(config)) + 3.0


def _crossing_point(config: ScenarioConfig) -> Position:
    # where the robot's route crosses the human's lane: center of the
    # conflict zone at the turn exit height
    cz = config.conflict_zone
    return Position((cz.lo[0] + cz.hi[0]) / 2.0, 2.0)


def _robot_probing(config: ScenarioConfig, state: WorldState) -> bool:
    return _inside_box(config.entry_zone, state.robot_position) or _inside_box(config.conflict_zone, state.robot_position)


def _human_dist_to_conflict(config: ScenarioConfig, state: WorldState) -> float:
    s_h = _route_progress(config.human_route, state.human_position)
    return config.human_stop_s + 2.0 - s_h  # stop point sits 2 m short


def _yield_active(config: ScenarioConfig, state: WorldState) -> bool:
    """Is a yield-intention human currently committed to waiting?"""
    if state.human_intention is not HumanIntention.YIELD:
        return False
    closing = _human_dist_to_conflict(config, state)
    if _human_passed(config, state) or closing < -1.0 or closing > config.human_decision_distance:
        return False
    if not _robot_probing(config, state):
        return False
    # a robot that probes but never commits gets waited out only so long
    if state.step >= config.impatience_step and not _inside_box(config.conflict_zone, state.robot_position):
        return False
    return True


def human_policy(state: WorldState, config: ScenarioConfig, rng: RngStream) -> Position:
    """Scripted human: lane-following with an intention-dependent reaction
    to the robot's probe.  Deterministic given (state, intention, stream)."""
    s_h = _route_progress(config.human_route, state.human_position)
    stop_s: float | None = None
    if _yield_active(config, state):
        speed = config.human_yield_speed
        stop_s = config.human_stop_s
    elif (
        state.human_intention is HumanIntention.NO_YIELD
        and config.human_fast_speed > config.human_cruise
        and not _human_passed(config, state)
        and (_robot_probing(config, state) or _speed(state.human_velocity) > config.human_cruise + 0.3)
    ):
        # assertive reaction: speed up to claim the gap; latched through
        # the agent's own elevated speed once triggered
        speed = config.human_fast_speed
    else:
        speed = config.human_cruise
    speed = _envelope_speed(speed, stop_s, s_h)
    tx, ty = _advance_target(config.human_route, state.human_position, speed, config.dt)
    jitter = rng.normal(2) * TARGET_JITTER
    return Position(tx + float(jitter[0]), ty + float(jitter[1]))


def _yield_confirmed(config: ScenarioConfig, state: WorldState) -> bool:
    """Does the human's motion show it is giving way?"""
    closing = _human_dist_to_conflict(config, state)
    return _speed(state.human_velocity) <= config.human_cruise - 1.0 and closing > -1.0 and not _human_passed(config, state)


def suboptimal_expert(state: WorldState, branch: ExpertBranch, config: ScenarioConfig) -> Position:
    """Scripted robot behaviors along the scenario route.

    The route threads the contested region, so "going" is just following it;
    holding brakes to a route point.  The overtake detour adds one twist: a
    probing robot facing an unmoved oncoming human must back out rather
    than hold, since its observation point lies in the human's lane.
    """
    s_r = _route_progress(config.robot_route, state.robot_position)
    passed = _human_passed(config, state)
    overtake = config.scenario_id is Scenario.OVERTAKE

    if s_r > config.staging_s + 3.0:
        # past the point of no return: finish the maneuver no matter what
        # the human does (its reaction to a fading probe must not be read
        # as a rescinded gap)
        stop_s = None
    elif not branch.enter:
        stop_s = None if passed else config.stop_s
    elif branch.complete == "never":
        # probe briefly, then think better of it and back out; parking at
        # the decision point forever would teach the model that a slowed
        # human means hold
        hold = config.probe_hold_s if config.probe_hold_s is not None else config.staging_s
        if passed:
            stop_s = None
        elif state.step < PROBE_WITHDRAW_STEP:
            stop_s = hold
        else:
            stop_s = config.stop_s
    else:
        confirmed = _yield_confirmed(config, state)
        if branch.complete == "always":
            # myopic gap check: go once the human is close enough to
            # "look clear", which is exactly when it is not
            go = passed or confirmed or _human_dist_to_conflict(config, state) <= 5.0
            if overtake:
                go = True  # presses through the detour regardless
        else:
            go = passed or confirmed
        if overtake and not go:
            # back out of the oncoming lane while the human bears down
            gap = state.human_position.x - state.robot_position.x
            stop_s = config.stop_s if gap < 16.0 else config.staging_s
        else:
            stop_s = None if go else config.staging_s

    end_s = float(_route_arrays(config.robot_route)[1][-1])
    speed = _envelope_speed(config.robot_cruise, end_s if stop_s is None else min(stop_s, end_s), s_r)
    speed = min(speed, _route_speed_cap(config, s_r))
    if stop_s is not None and s_r > stop_s + 0.3:
        # overshot the hold point (or retreating): track it directly
        tx, ty = _route_point(config.robot_route, stop_s)
    else:
        tx, ty = _advance_target(config.robot_route, state.robot_position, speed, config.dt)
    return Position(tx, ty)


# --- observations and data generation ---


def build_context(config: ScenarioConfig, anchor: Position) -> tuple[float, ...]:
    """Episode context: scenario one-hot, anchored map geometry (div by 10)."""
    one_hot = {Scenario.LEFT_TURN: (1.0, 0.0, 0.0), Scenario.OVERTAKE: (0.0, 1.0, 0.0), Scenario.RIGHT_TURN: (0.0, 0.0, 1.0)}
    g = config.goal.destination
    return one_hot[config.scenario_id] + (
        (anchor.x - config.center.x) / 10.0,
        (anchor.y - config.center.y) / 10.0,
        (g.x - anchor.x) / 10.0,
        (g.y - anchor.y) / 10.0,
        config.lane_width / 10.0,
    )


def _observation_from_states(config: ScenarioConfig, past: list[JointState]) -> Observation:
    anchor = past[-1].positions[0]
    return Observation(past=tuple(past), context=build_context(config, anchor))


def _simulate_scripted(
    config: ScenarioConfig,
    intention: HumanIntention,
    branch: ExpertBranch,
    rng: RngStream,
    gains: ControllerGains,
) -> list[JointState]:
    """Run one fully scripted episode; returns per-step joint positions."""
    state = config.initial_state(intention)
    human_rng = rng.child("human")
    robot_rng = rng.child("robot")
    log = [JointState((state.robot_position, state.human_position))]
    for _ in range(config.horizon_steps):
        rt = suboptimal_expert(state, branch, config)
        jit = robot_rng.normal(2) * TARGET_JITTER
        rt = Position(rt.x + float(jit[0]), rt.y + float(jit[1]))
        ht = human_policy(state, config, human_rng)
        state = env_step(state, rt, ht, gains, config.dt, config.speed_limit)
        log.append(JointState((state.robot_position, state.human_position)))
    return log


def _draw_branch(rng: RngStream) -> ExpertBranch:
    # contingent-heavy: the robot-enters-when-the-human-commits coupling is
    # the behavior the model has to pick up; the rest is coverage
    if rng.uniform() >= 0.85:
        return ExpertBranch(enter=False)
    u = rng.uniform()
    if u < 0.65:
        return ExpertBranch(enter=True, complete="contingent")
    if u < 0.825:
        return ExpertBranch(enter=True, complete="always")
    return ExpertBranch(enter=True, complete="never")


def episode_labels(config: ScenarioConfig, n_episodes: int, seed: int) -> list[tuple[HumanIntention, ExpertBranch]]:
    """The per-episode (intention, branch) draws generate_dataset will use."""
    root = RngStream(seed)
    labels = []
    for i in range(n_episodes):
        rng = root.child(f"episode{i}")
        intention = HumanIntention.YIELD if rng.uniform() < config.p_yield else HumanIntention.NO_YIELD
        labels.append((intention, _draw_branch(rng.child("branch"))))
    return labels


def generate_dataset(config: ScenarioConfig, n_episodes: int, seed: int) -> list[EpisodeRecord]:
    """Scripted episodes -> one (past, future) record each, window offset
    drawn uniformly over the episode."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be at least 1")
    gains = ControllerGains()
    records = []
    root = RngStream(seed)
    labels = episode_labels(config, n_episodes, seed)
    h_p, t_len = config.past_len, config.record_horizon
    for i in range(n_episodes):
        rng = root.child(f"episode{i}")
        intention, branch = labels[i]
        log = _simulate_scripted(config, intention, branch, rng.child("sim"), gains)
        max_offset = len(log) - (h_p + t_len)
        offset = int(rng.child("window").integers(0, max_offset + 1))
        past = log[offset : offset + h_p]
        future = log[offset + h_p : offset + h_p + t_len]
        records.append(
            EpisodeRecord(
                observation=_observation_from_states(config, past),
                future=JointTrajectory(steps=tuple(future)),
                scenario_id=config.scenario_id,
                human_intention=intention,
                seed=i,
            )
        )
    return records


# --- closed-loop evaluation ---


PLANNER_KINDS = ("cfo", "joint", "underconfident", "expert", "stationary")


@dataclass
class EvalConfig:
    """Per-replan budgets for the learned planners."""

    mc_samples: int = 16
    first_ascent_steps: int = 60
    ascent_steps: int = 12
    step_size: float = 0.08
    constraint_weight: float = 100.0
    sigma_g: float = 1.0


def candidate_paths(config: ScenarioConfig, position: Position, horizon: int) -> list[np.ndarray]:
    """Open-loop candidates: hold for w steps, then follow the route.

    Progress obeys the maneuver speed cap and saturates at the destination;
    overshooting toward the route's tail would make eager candidates end
    farther from the goal than lazy ones and stall the receding horizon.
    """
    s0 = _route_progress(config.robot_route, position)
    s_goal = max(s0, _route_progress(config.robot_route, config.goal.destination))
    paths = []
    for wait in (0, 1, 2, 3, 4, 6, 8, 10, horizon):
        pts = []
        s = s0
        for t in range(1, horizon + 1):
            if t > wait:
                s = min(s + _route_speed_cap(config, s) * config.dt, s_goal)
            pts.append(_route_point(config.robot_route, s))
        paths.append(np.array(pts))
    return paths


def _segment_min_distance(p0: np.ndarray, p1: np.ndarray, q0: np.ndarray, q1: np.ndarray) -> float:
    """Min distance between two points moving linearly over one step."""
    d0 = p0 - q0
    dv = (p1 - p0) - (q1 - q0)
    denom = float(dv @ dv)
    t = 0.0 if denom == 0 else float(np.clip(-(d0 @ dv) / denom, 0.0, 1.0))
    return float(np.linalg.norm(d0 + t * dv))


def _min_distance(log: list[JointState]) -> float:
    worst = math.inf
    for i in range(len(log)):
        a = log[i].to_array()
        worst = min(worst, float(np.linalg.norm(a[0] - a[1])))
        if i + 1 < len(log):
            b = log[i + 1].to_array()
            worst = min(worst, _segment_min_distance(a[0], b[0], a[1], b[1]))
    return worst


def _first_plan_position(model: flow_mod.FlowModel, observation: Observation, zr: np.ndarray) -> Position:
    """Decode the plan's first robot position (independent of human noise)."""
    zh = np.zeros((1, model.horizon, model.num_agents - 1, 2))
    trajs = planner_mod.rollout_batch(model, observation, zr, zh)
    return Position(float(trajs[0, 0, 0, 0]), float(trajs[0, 0, 0, 1]))


def _plan_divergence(model: flow_mod.FlowModel, observation: Observation, zr: np.ndarray, zh: np.ndarray) -> float:
    """Max spread of the planned robot positions across human samples over
    the first 4 plan steps."""
    trajs = planner_mod.rollout_batch(model, observation, zr, zh)
    robot = trajs[:, :4, 0, :]
    spread = 0.0
    for t in range(robot.shape[1]):
        diff = robot[:, None, t, :] - robot[None, :, t, :]
        spread = max(spread, float(np.sqrt((diff**2).sum(axis=-1)).max()))
    return spread


def _shift_warm_start(zr: np.ndarray) -> np.ndarray:
    return np.concatenate([zr[1:], np.zeros((1, 2))], axis=0)


def run_episode(
    planner_kind: str,
    model: flow_mod.FlowModel | None,
    config: ScenarioConfig,
    seed: int,
    eval_config: EvalConfig | None = None,
    intention: HumanIntention | None = None,
    expert_branch: ExpertBranch | None = None,
    collect_log: list[JointState] | None = None,
) -> EpisodeMetrics:
    """Closed loop: observe, plan, execute the first planned target, repeat."""
    if planner_kind not in PLANNER_KINDS:
        raise ValueError(f"unknown planner kind: {planner_kind}")
    if planner_kind in ("cfo", "joint", "underconfident") and model is None:
        raise ValueError(f"planner kind {planner_kind} requires a model")
    eval_config = eval_config or EvalConfig()
    gains = ControllerGains()
    rng = RngStream(seed)
    if intention is None:
        intention = HumanIntention.YIELD if rng.child("intention").uniform() < config.p_yield else HumanIntention.NO_YIELD
    state = config.initial_state(intention)
    human_rng = rng.child("human")

    # back-extrapolated warmup history at the initial velocity
    h_p = model.past_len if model is not None else config.past_len
    dt = config.dt
    past: list[JointState] = []
    for k in range(h_p - 1, -1, -1):
        past.append(
            JointState(
                (
                    Position(state.robot_position.x - state.robot_velocity[0] * dt * k, state.robot_position.y - state.robot_velocity[1] * dt * k),
                    Position(state.human_position.x - state.human_velocity[0] * dt * k, state.human_position.y - state.human_velocity[1] * dt * k),
                )
            )
        )

    log = [JointState((state.robot_position, state.human_position))]
    warm_zr: np.ndarray | None = None
    divergence: float | None = None
    diagnostic = ""
    steps_to_goal = config.horizon_steps
    reached = False
    expert_branch = expert_branch or ExpertBranch(enter=True, complete="contingent")

    for step in range(config.horizon_steps):
        obs = _observation_from_states(config, past[-h_p:])
        if planner_kind == "stationary":
            target = state.robot_position
        elif planner_kind == "expert":
            target = suboptimal_expert(state, expert_branch, config)
        else:
            plan_cfg = planner_mod.PlanConfig(
                mc_samples=eval_config.mc_samples,
                ascent_steps=eval_config.first_ascent_steps if warm_zr is None else eval_config.ascent_steps,
                step_size=eval_config.step_size,
                constraint_weight=eval_config.constraint_weight,
                sigma_g=eval_config.sigma_g,
                seed=seed * 100003 + step,
            )
            try:
                if planner_kind == "cfo":
                    plan = planner_mod.plan_cfo(model, obs, config.goal, plan_cfg, init_zr=warm_zr)
                    warm_zr = _shift_warm_start(plan.zr)
                    zh = planner_mod.frozen_human_noise(model, plan_cfg)
                    d = _plan_divergence(model, obs, plan.zr, zh)
                    divergence = d if divergence is None else max(divergence, d)
                    target = _first_plan_position(model, obs, plan.zr)
                elif planner_kind == "joint":
                    plan = planner_mod.plan_joint(model, obs, config.goal, plan_cfg, init_zr=warm_zr)
                    warm_zr = _shift_warm_start(plan.zr)
                    target = _first_plan_position(model, obs, plan.zr)
                else:
                    candidates = candidate_paths(config, state.robot_position, model.horizon)
                    plan = planner_mod.plan_underconfident(model, obs, config.goal, candidates, plan_cfg)
                    divergence = 0.0  # open-loop path: same under every sample
                    target = Position(float(plan.path[0, 0]), float(plan.path[0, 1]))
            except RuntimeError as exc:
                diagnostic = f"planner failure at step {step}: {exc}"
                return EpisodeMetrics(
                    reached_goal=False,
                    near_expert=False,
                    near_collision=_min_distance(log) < D_SAFE,
                    steps_to_goal=config.horizon_steps,
                    min_distance=_min_distance(log),
                    contingency_divergence=divergence,
                    diagnostic=diagnostic,
                )

        human_target = human_policy(state, config, human_rng)
        state = env_step(state, target, human_target, gains, dt, config.speed_limit)
        past.append(JointState((state.robot_position, state.human_position)))
        log.append(JointState((state.robot_position, state.human_position)))
        if not reached and _inside_box(config.goal_region, state.robot_position):
            reached = True
            steps_to_goal = step + 1

    if collect_log is not None:
        collect_log.extend(log)
    min_dist = _min_distance(log)
    near_collision = min_dist < D_SAFE
    budget = expert_time(config, intention) + EXPERT_SLACK_STEPS
    near_expert = reached and not near_collision and steps_to_goal <= budget
    return EpisodeMetrics(
        reached_goal=reached,
        near_expert=near_expert,
        near_collision=near_collision,
        steps_to_goal=steps_to_goal,
        min_distance=min_dist,
        contingency_divergence=divergence,
        diagnostic=diagnostic,
    )


_EXPERT_TIMES: dict[tuple[Scenario, HumanIntention], int] = {}


def expert_time(config: ScenarioConfig, intention: HumanIntention) -> int:
    """Steps the contingent scripted expert needs to reach the goal; the
    per-(scenario, intention) budget anchor for near-expert scoring."""
    key = (config.scenario_id, intention)
    if key not in _EXPERT_TIMES:
        gains = ControllerGains()
        branch = ExpertBranch(enter=True, complete="contingent")
        log = _simulate_scripted(config, intention, branch, RngStream(0).child("calibration"), gains)
        steps = next((i for i, s in enumerate(log) if _inside_box(config.goal_region, s.positions[0])), None)
        if steps is None:
            raise RuntimeError(f"contingent expert failed to reach the goal in {config.scenario_id.value}")
        _EXPERT_TIMES[key] = steps
    return _EXPERT_TIMES[key]


# --- reporting ---


def metrics_row(method: str, scenario: Scenario, seed: int, intention: HumanIntention, metrics: EpisodeMetrics) -> dict:
    return {
        "method": method,
        "scenario": scenario.value,
        "seed": seed,
        "RG": int(metrics.reached_goal),
        "RG_star": int(metrics.near_expert),
        "near_collision": int(metrics.near_collision),
        "steps": metrics.steps_to_goal,
        "intention": intention.value,
        "min_distance": round(metrics.min_distance, 4),
    }


def write_metrics_csv(path: str, rows: list[dict]) -> None:
    fields = ["method", "scenario", "seed", "RG", "RG_star", "near_collision", "steps", "intention", "min_distance"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in fields})


def write_episode_log(path: str, log: list[JointState]) -> None:
    with open(path, "w") as fh:
        for i, s in enumerate(log):
            arr = s.to_array()
            fh.write(json.dumps({"step": i, "robot": list(arr[0]), "human": list(arr[1])}) + "\n")
