"""Planning in the flow's latent space, plus both noncontingent ablations.

The contingent planner treats the robot's base-noise block z^r as the plan:
because the flow decodes noise autoregressively, a fixed z^r is a closed-loop
policy whose realized path depends on what the sampled humans do.  Planning
maximizes, by gradient ascent through the unrolled flow,

    E_{z^h ~ N(0,I)} [ log q(rollout | o) + log N(robot end; goal, sigma_g I)
                       + constraint term ]

with the expectation frozen to a fixed set of z^h samples per call (common
random numbers), so ascent is deterministic given the seed.

The two ablations bracket it from either side: the joint planner also
optimizes the humans' noise (overconfident, assumes they cooperate), and the
underconfident planner scores open-loop candidate paths against forecasts
that marginalize over robot behavior (it cannot condition the human response
on its own probing, so it waits).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import diffkit as dk
from . import flow as flow_mod
from .core import Box, Goal, HalfPlane, JointTrajectory, Observation, RngStream

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class PlanConfig:
    mc_samples: int = 32
    ascent_steps: int = 150
    step_size: float = 0.05
    constraint_weight: float = 100.0  # lambda
    sigma_g: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be at least 1")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")


@dataclass
class ContingencyPlan:
    zr: np.ndarray  # (T, 2)
    objective_history: list[float]
    final_objective: float


@dataclass
class JointPlan:
    zr: np.ndarray  # (T, 2)
    zh: np.ndarray  # (T, A-1, 2)
    objective_history: list[float]
    final_objective: float


@dataclass
class UnderconfidentPlan:
    index: int
    path: np.ndarray  # (T, 2) chosen open-loop robot trajectory
    scores: np.ndarray  # one per candidate


# --- rollout ---


def rollout(model: flow_mod.FlowModel, observation: Observation, zr: np.ndarray, zh: np.ndarray) -> JointTrajectory:
    """Decode one (robot, humans) noise assignment into a joint trajectory."""
    zr = np.asarray(zr, dtype=np.float64)
    zh = np.asarray(zh, dtype=np.float64)
    if zr.shape != (model.horizon, 2):
        raise ValueError(f"zr must have shape ({model.horizon}, 2)")
    if zh.shape != (model.horizon, model.num_agents - 1, 2):
        raise ValueError(f"zh must have shape ({model.horizon}, {model.num_agents - 1}, 2)")
    z = np.concatenate([zr[:, None, :], zh], axis=1)[None]
    return JointTrajectory.from_array(flow_mod.rollout_given_z(model, observation, z)[0])


def rollout_batch(model: flow_mod.FlowModel, observation: Observation, zr: np.ndarray, zh: np.ndarray) -> np.ndarray:
    """Roll one robot noise block against many human samples (S, T, A-1, 2)."""
    zh = np.asarray(zh, dtype=np.float64)
    s = zh.shape[0]
    zr_block = np.broadcast_to(np.asarray(zr, dtype=np.float64)[None, :, None, :], (s, zh.shape[1], 1, 2))
    z = np.concatenate([zr_block, zh], axis=2)
    return flow_mod.rollout_given_z(model, observation, z)


# --- constraint surrogate ---


def _separation_distances(step_positions: np.ndarray) -> np.ndarray:
    """Pairwise inter-agent distances at one step; input (..., A, 2)."""
    a_len = step_positions.shape[-2]
    out = []
    for i in range(a_len):
        for j in range(i + 1, a_len):
            diff = step_positions[..., i, :] - step_positions[..., j, :]
            out.append(np.sqrt((diff * diff).sum(axis=-1) + 1e-12))
    return np.stack(out, axis=-1)


def constraint_violations(goal: Goal, trajectory: np.ndarray) -> np.ndarray:
    """Per-sample sum of squared constraint violations; input (..., T, A, 2).

    Region constraints bind the robot only: the other agents are forecasts,
    not controlled, so penalizing them would just bend the prediction.
    Separation is pairwise over all agents.
    """
    lead = trajectory.shape[:-3]
    total = np.zeros(lead)
    flat_positions = trajectory[..., :, 0, :].reshape(*lead, -1, 2)
    for c in goal.constraints:
        if isinstance(c, HalfPlane):
            nx, ny = c.normal
            norm = math.hypot(nx, ny)
            sd = (c.offset - (nx * flat_positions[..., 0] + ny * flat_positions[..., 1])) / norm
            total += (np.maximum(sd, 0.0) ** 2).sum(axis=-1)
        elif isinstance(c, Box):
            qx = np.maximum(c.lo[0] - flat_positions[..., 0], flat_positions[..., 0] - c.hi[0])
            qy = np.maximum(c.lo[1] - flat_positions[..., 1], flat_positions[..., 1] - c.hi[1])
            if c.feasible_inside:
                # outside the box, max(0, sd)^2 is the squared euclidean
                # face excess, which splits by axis
                total += (np.maximum(qx, 0.0) ** 2 + np.maximum(qy, 0.0) ** 2).sum(axis=-1)
            else:
                # inside the obstacle, sd is the depth to the nearest face
                depth = np.maximum(-np.maximum(qx, qy), 0.0)
                total += (depth**2).sum(axis=-1)
        else:
            raise TypeError(f"unknown constraint type: {type(c).__name__}")
    if goal.min_separation is not None:
        dists = _separation_distances(trajectory)  # (..., T, pairs)
        violation = np.maximum(goal.min_separation - dists, 0.0)
        total += (violation**2).sum(axis=(-1, -2))
    return total


def constraint_term(goal: Goal, trajectory: JointTrajectory | np.ndarray, constraint_weight: float) -> float:
    """Smooth surrogate for the log constraint indicator: 0 when satisfied,
    -lambda * sum of squared violation distances otherwise."""
    if constraint_weight <= 0:
        raise ValueError("constraint weight must be positive")
    arr = trajectory.to_array() if isinstance(trajectory, JointTrajectory) else np.asarray(trajectory, dtype=np.float64)
    return float(-constraint_weight * constraint_violations(goal, arr))


# --- differentiable rollout + objective graph ---


@dataclass
class _GraphRollout:
    positions: list[list[dk.Node]]  # [t][a], each (S, 2)
    log_sigmas: list[dk.Node]  # one per (t, a), each (S, 2)
    n_samples: int


def _rollout_graph(model: flow_mod.FlowModel, observation: Observation, zr_node: dk.Node, zh) -> _GraphRollout:
    """Unroll the flow with the robot noise as a graph input.

    ``zh`` is either a constant array (S, T, A-1, 2) or a Node (T, A-1, 2)
    when the human noise is being optimized too (then S = 1).
    """
    t_len, a_len, k = model.horizon, model.num_agents, model.window
    zh_is_node = isinstance(zh, dk.Node)
    s = 1 if zh_is_node else zh.shape[0]

    past = observation.past_array()
    context = dk.constant(np.broadcast_to(observation.context_array(), (s, model.context_dim)))
    weights = [[dk.constant(w) for w in mlp.weights] for mlp in model.conditioners]
    biases = [[dk.constant(b) for b in mlp.biases] for mlp in model.conditioners]

    states: list[list[dk.Node]] = [
        [dk.constant(np.broadcast_to(past[i, a], (s, 2))) for a in range(a_len)] for i in range(past.shape[0])
    ]
    positions: list[list[dk.Node]] = []
    log_sigmas: list[dk.Node] = []
    for t in range(t_len):
        window = states[-k:]
        while len(window) < k:
            window = [window[0]] + window
        step_nodes = []
        for a in range(a_len):
            ref = window[-1][a]
            pieces = [(state[b] - ref) * flow_mod.FEATURE_SCALE for state in window for b in range(a_len)]
            feats = dk.concat(pieces + [context], axis=1)
            out = dk.mlp_apply(weights[a], biases[a], feats)
            mu = ref + out[:, 0:2]
            log_sigma = dk.clip(out[:, 2:4], model.log_sigma_min, model.log_sigma_max)
            if a == 0:
                z = zr_node[t]  # (2,), broadcasts across samples
            elif zh_is_node:
                z = zh[t, a - 1]
            else:
                z = dk.constant(zh[:, t, a - 1, :])
            x = mu + dk.exp(log_sigma) * z
            step_nodes.append(x)
            log_sigmas.append(log_sigma)
        states.append(step_nodes)
        positions.append(step_nodes)
    return _GraphRollout(positions=positions, log_sigmas=log_sigmas, n_samples=s)


def _constraint_penalty_nodes(goal: Goal, rolled: _GraphRollout) -> dk.Node | None:
    """Sum of squared violations as a per-sample (S,) node, or None."""
    per_sample = []
    for step in rolled.positions:
        for a, pos in enumerate(step):
            if a != 0:
                continue  # region constraints bind the robot only
            for c in goal.constraints:
                if isinstance(c, HalfPlane):
                    nx, ny = c.normal
                    norm = math.hypot(nx, ny)
                    sd = (c.offset - (pos[:, 0] * nx + pos[:, 1] * ny)) * (1.0 / norm)
                    per_sample.append(dk.square(dk.relu(sd)))
                elif isinstance(c, Box):
                    qx = dk.maximum(c.lo[0] - pos[:, 0], pos[:, 0] - c.hi[0])
                    qy = dk.maximum(c.lo[1] - pos[:, 1], pos[:, 1] - c.hi[1])
                    if c.feasible_inside:
                        per_sample.append(dk.square(dk.relu(qx)) + dk.square(dk.relu(qy)))
                    else:
                        per_sample.append(dk.square(dk.relu(-dk.maximum(qx, qy))))
                else:
                    raise TypeError(f"unknown constraint type: {type(c).__name__}")
        if goal.min_separation is not None:
            for i in range(len(step)):
                for j in range(i + 1, len(step)):
                    diff = step[i] - step[j]
                    dist = dk.sqrt(dk.node_sum(dk.square(diff), axis=1) + 1e-12)
                    per_sample.append(dk.square(dk.relu(goal.min_separation - dist)))
    if not per_sample:
        return None
    total = per_sample[0]
    for p in per_sample[1:]:
        total = total + p
    return total


def _objective_graph(
    model: flow_mod.FlowModel,
    observation: Observation,
    goal: Goal,
    zr_node: dk.Node,
    zh,
    config: PlanConfig,
) -> dk.Node:
    """The planning objective as a scalar node (mean over the sample set)."""
    rolled = _rollout_graph(model, observation, zr_node, zh)
    t_len, a_len = model.horizon, model.num_agents

    # behavioral prior, change-of-variables form:
    # sum_{t,a} [ -0.5 |z|^2 - sum log sigma - log 2 pi ]
    log_det = dk.node_sum(dk.concat(rolled.log_sigmas, axis=1), axis=1)  # (S,)
    prior = -dk.node_mean(log_det)
    prior = prior - 0.5 * dk.node_sum(dk.square(zr_node))
    if isinstance(zh, dk.Node):
        prior = prior - 0.5 * dk.node_sum(dk.square(zh))
    else:
        prior = prior + float(-0.5 * (zh**2).sum(axis=(1, 2, 3)).mean())
    prior = prior - t_len * a_len * LOG_2PI

    # destination likelihood at the robot's final step
    g = goal.destination.to_array()
    diff = (rolled.positions[-1][0] - g) * (1.0 / config.sigma_g)
    dest = -0.5 * dk.node_mean(dk.node_sum(dk.square(diff), axis=1))
    dest = dest - LOG_2PI - 2.0 * math.log(config.sigma_g)

    objective = prior + dest
    penalty = _constraint_penalty_nodes(goal, rolled)
    if penalty is not None:
        objective = objective - config.constraint_weight * dk.node_mean(penalty)
    return objective


# --- objective, numpy route (used for reporting and the bound check) ---


def per_sample_objective_terms(
    model: flow_mod.FlowModel,
    observation: Observation,
    goal: Goal,
    zr: np.ndarray,
    zh_samples: np.ndarray,
    config: PlanConfig,
) -> np.ndarray:
    """L_i = log q + destination + constraint, one entry per z^h sample.

    Computed through the plain-numpy rollout and likelihood paths, fully
    independent of the graph used for ascent.
    """
    trajs = rollout_batch(model, observation, zr, zh_samples)
    s = trajs.shape[0]
    mu, log_sigma = flow_mod._stats_for_trajectories(model, trajs, observation)
    z = (trajs - mu) / np.exp(log_sigma)
    log_q = (-0.5 * z * z - log_sigma - 0.5 * LOG_2PI).reshape(s, -1).sum(axis=1)

    g = goal.destination.to_array()
    diff = (trajs[:, -1, 0, :] - g) / config.sigma_g
    dest = -0.5 * (diff * diff).sum(axis=1) - LOG_2PI - 2.0 * math.log(config.sigma_g)

    penalty = -config.constraint_weight * constraint_violations(goal, trajs)
    return log_q + dest + penalty


def cfo_objective(
    model: flow_mod.FlowModel,
    observation: Observation,
    goal: Goal,
    zr: np.ndarray,
    zh_samples: np.ndarray,
    config: PlanConfig | None = None,
) -> float:
    """Mean-of-logs lower-bound objective on a fixed sample set."""
    config = config or PlanConfig()
    if len(zh_samples) == 0:
        raise ValueError("zh_samples must be non-empty")
    return float(per_sample_objective_terms(model, observation, goal, zr, zh_samples, config).mean())


def pre_bound_objective(
    model: flow_mod.FlowModel,
    observation: Observation,
    goal: Goal,
    zr: np.ndarray,
    zh_samples: np.ndarray,
    config: PlanConfig | None = None,
) -> float:
    """log-of-means estimator (before the Jensen swap): an upper envelope of
    the mean-of-logs objective on the same samples."""
    config = config or PlanConfig()
    terms = per_sample_objective_terms(model, observation, goal, zr, zh_samples, config)
    peak = terms.max()
    return float(peak + np.log(np.exp(terms - peak).mean()))


def lower_bound_gap(
    model: flow_mod.FlowModel,
    observation: Observation,
    goal: Goal,
    zr: np.ndarray,
    zh_samples: np.ndarray,
    config: PlanConfig | None = None,
) -> float:
    """pre-bound minus bound; Jensen says this is nonnegative."""
    config = config or PlanConfig()
    return pre_bound_objective(model, observation, goal, zr, zh_samples, config) - cfo_objective(
        model, observation, goal, zr, zh_samples, config
    )


# --- planners ---


def frozen_human_noise(model: flow_mod.FlowModel, config: PlanConfig) -> np.ndarray:
    """The fixed human noise block a plan with this config optimizes against."""
    rng = RngStream(config.seed)
    return rng.child("zh").normal((config.mc_samples, model.horizon, model.num_agents - 1, 2))


def plan_cfo(
    model: flow_mod.FlowModel,
    observation: Observation,
    goal: Goal,
    config: PlanConfig,
    init_zr: np.ndarray | None = None,
) -> ContingencyPlan:
    """Gradient ascent over the robot's noise block with frozen z^h samples.

    Returns the best iterate seen, with the evaluated objective at every
    step.  ``init_zr`` supports receding-horizon warm starts; the default is
    the base-distribution mode (all zeros).
    """
    t_len = model.horizon
    zh = frozen_human_noise(model, config)
    zr = np.zeros((t_len, 2)) if init_zr is None else np.asarray(init_zr, dtype=np.float64).copy()

    opt = dk.Adam(step_size=config.step_size)
    history: list[float] = []
    best_value = -math.inf
    best_zr = zr.copy()
    for _ in range(config.ascent_steps):
        zr_node = dk.leaf(zr)
        try:
            objective = _objective_graph(model, observation, goal, zr_node, zh, config)
        except ValueError as exc:
            raise RuntimeError("planning diverged: non-finite objective") from exc
        value = float(objective.value)
        if not math.isfinite(value):
            raise RuntimeError("planning diverged: non-finite objective")
        history.append(value)
        if value > best_value:
            best_value = value
            best_zr = zr.copy()
        dk.backward(objective)
        opt.step({"zr": zr}, {"zr": -zr_node.grad})  # ascent
    final_value = cfo_objective(model, observation, goal, zr, zh, config)
    if not math.isfinite(final_value):
        raise RuntimeError("planning diverged: non-finite objective")
    history.append(final_value)
    if final_value > best_value:
        best_value = final_value
        best_zr = zr.copy()
    return ContingencyPlan(zr=best_zr, objective_history=history, final_objective=best_value)


def plan_joint(
    model: flow_mod.FlowModel,
    observation: Observation,
    goal: Goal,
    config: PlanConfig,
    init_zr: np.ndarray | None = None,
    init_zh: np.ndarray | None = None,
) -> JointPlan:
    """Optimize robot AND human noise on a single rollout (no expectation).

    This is the overconfident ablation: it picks the best joint behavior as
    if the other agents will execute the robot's plan for them.
    """
    t_len, h_agents = model.horizon, model.num_agents - 1
    zr = np.zeros((t_len, 2)) if init_zr is None else np.asarray(init_zr, dtype=np.float64).copy()
    zh = np.zeros((t_len, h_agents, 2)) if init_zh is None else np.asarray(init_zh, dtype=np.float64).copy()

    opt = dk.Adam(step_size=config.step_size)
    history: list[float] = []
    best = (-math.inf, zr.copy(), zh.copy())
    # continuation on the penalty weight for the cold start: with the full
    # weight from step one, the gradient on zh is zero while the robot part
    # still holds back, and the ascent never finds the joint optimum where
    # the other agents are bent out of the way. Warm restarts refine an
    # already-chosen basin and use the full weight throughout.
    cold = init_zr is None
    warm_len = max(1, config.ascent_steps // 2)
    for i in range(config.ascent_steps):
        ramp = min(1.0, (i + 1) / warm_len) if cold else 1.0
        stage = replace(config, constraint_weight=ramp * config.constraint_weight)
        zr_node = dk.leaf(zr)
        zh_node = dk.leaf(zh)
        try:
            objective = _objective_graph(model, observation, goal, zr_node, zh_node, stage)
        except ValueError as exc:
            raise RuntimeError("planning diverged: non-finite objective") from exc
        value = float(objective.value)
        if not math.isfinite(value):
            raise RuntimeError("planning diverged: non-finite objective")
        history.append(value)
        if ramp >= 1.0 and value > best[0]:
            best = (value, zr.copy(), zh.copy())
        dk.backward(objective)
        grads = {"zr": -zr_node.grad}
        if zh_node.grad is not None:
            grads["zh"] = -zh_node.grad
        opt.step({"zr": zr, "zh": zh}, grads)
    final_value = float(cfo_objective(model, observation, goal, zr, zh[None], config))
    history.append(final_value)
    if final_value > best[0]:
        best = (final_value, zr.copy(), zh.copy())
    return JointPlan(zr=best[1], zh=best[2], objective_history=history, final_objective=best[0])


def plan_underconfident(
    model: flow_mod.FlowModel,
    observation: Observation,
    goal: Goal,
    candidate_paths: list[np.ndarray],
    config: PlanConfig,
) -> UnderconfidentPlan:
    """Score open-loop robot paths against robot-marginal human forecasts.

    Humans are forecast by sampling the joint model with the robot's noise
    from its prior (so the robot's influence is integrated out, never
    conditioned on the candidate).  Each candidate is scored by destination
    and constraint terms only, averaged over the forecasts; ties break
    toward the lowest index.
    """
    if len(candidate_paths) == 0:
        raise ValueError("empty candidate set")
    rng = RngStream(config.seed)
    trajs, _ = flow_mod.sample_joint_batch(model, observation, rng.child("forecast"), config.mc_samples)
    human_forecasts = trajs[:, :, 1:, :]  # (S, T, A-1, 2)

    g = goal.destination.to_array()
    scores = np.zeros(len(candidate_paths))
    for i, path in enumerate(candidate_paths):
        path = np.asarray(path, dtype=np.float64)
        if path.shape != (model.horizon, 2):
            raise ValueError(f"candidate paths must have shape ({model.horizon}, 2)")
        joint = np.concatenate(
            [np.broadcast_to(path[None, :, None, :], (config.mc_samples, model.horizon, 1, 2)), human_forecasts],
            axis=2,
        )
        diff = (path[-1] - g) / config.sigma_g
        dest = -0.5 * float(diff @ diff) - LOG_2PI - 2.0 * math.log(config.sigma_g)
        penalty = -config.constraint_weight * constraint_violations(goal, joint)
        scores[i] = dest + float(penalty.mean())
    index = int(np.argmax(scores))
    return UnderconfidentPlan(index=index, path=np.asarray(candidate_paths[index], dtype=np.float64).copy(), scores=scores)
