"""Conditional autoregressive normalizing flow over joint trajectories.

The model factorizes q(X_1..T^{1:A} | o) into per-step, per-agent Gaussians
whose parameters come from a conditioner MLP reading a window of the K most
recent joint positions (relative to the agent's own latest position) plus the
context vector.  Sampling rolls agents forward step by step; fixing an
agent's base noise therefore fixes a closed-loop policy for it, not a path.

Training is maximum likelihood with Adam on minibatches; the conditioner
math has a plain-numpy path (sampling, likelihood, data prep) and the graphs
for parameter gradients are built in diffkit on top of precomputed feature
arrays, so one epoch is a handful of matrix products per agent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffkit as dk
from .core import EpisodeRecord, JointTrajectory, Observation, RngStream

LOG_2PI = math.log(2.0 * math.pi)

# relative window coordinates are in meters with spans of tens of meters;
# shrinking them keeps the tanh conditioner out of saturation at init
FEATURE_SCALE = 0.1


@dataclass
class FlowModel:
    """Per-agent conditioner parameters plus the shape hyperparameters."""

    conditioners: list[dk.MlpParams]  # index 0 = robot
    past_len: int  # H_p
    horizon: int  # T
    context_dim: int  # C
    window: int  # K most recent joint states fed to the conditioner
    dt: float = 0.4  # seconds per step, carried for downstream consumers
    log_sigma_min: float = -4.0
    log_sigma_max: float = 2.0

    @property
    def num_agents(self) -> int:
        return len(self.conditioners)

    @property
    def input_dim(self) -> int:
        return 2 * self.num_agents * self.window + self.context_dim


@dataclass(frozen=True)
class ConditionerOutput:
    """Absolute mean position and clamped per-axis log scale for one step."""

    mu: np.ndarray  # (2,), meters
    log_sigma: np.ndarray  # (2,), in [log_sigma_min, log_sigma_max]

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma)


@dataclass(frozen=True)
class ZSequence:
    """Base-space noise for a whole joint trajectory, shape (T, A, 2)."""

    z: np.ndarray

    @property
    def zr(self) -> np.ndarray:
        return self.z[:, 0, :]

    @property
    def zh(self) -> np.ndarray:
        return self.z[:, 1:, :]


def build_model(
    rng: RngStream,
    past_len: int = 4,
    horizon: int = 12,
    num_agents: int = 2,
    context_dim: int = 8,
    window: int = 4,
    hidden: tuple[int, ...] = (64, 64),
    dt: float = 0.4,
) -> FlowModel:
    """Fresh glorot-initialized model; agents share no parameters."""
    input_dim = 2 * num_agents * window + context_dim
    sizes = [input_dim, *hidden, 4]  # outputs: displacement (2) + log sigma (2)
    conditioners = [dk.init_mlp(sizes, rng.child(f"agent{a}")) for a in range(num_agents)]
    return FlowModel(
        conditioners=conditioners,
        past_len=past_len,
        horizon=horizon,
        context_dim=context_dim,
        window=window,
        dt=dt,
    )


def model_to_checkpoint(model: FlowModel) -> tuple[dict, dict[str, np.ndarray]]:
    hyper = {
        "H_p": model.past_len,
        "T": model.horizon,
        "A": model.num_agents,
        "C": model.context_dim,
        "K": model.window,
        "hidden": list(model.conditioners[0].layer_sizes[1:-1]),
        "dt": model.dt,
        "log_sigma_min": model.log_sigma_min,
        "log_sigma_max": model.log_sigma_max,
    }
    params: dict[str, np.ndarray] = {}
    for a, mlp in enumerate(model.conditioners):
        for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
            params[f"agent{a}.w{i}"] = w
            params[f"agent{a}.b{i}"] = b
    return hyper, params


def model_from_checkpoint(hyper: dict, params: dict[str, np.ndarray]) -> FlowModel:
    num_agents = int(hyper["A"])
    n_layers = len(hyper["hidden"]) + 1
    conditioners = []
    for a in range(num_agents):
        weights = [params[f"agent{a}.w{i}"].copy() for i in range(n_layers)]
        biases = [params[f"agent{a}.b{i}"].copy() for i in range(n_layers)]
        conditioners.append(dk.MlpParams(weights, biases))
    return FlowModel(
        conditioners=conditioners,
        past_len=int(hyper["H_p"]),
        horizon=int(hyper["T"]),
        context_dim=int(hyper["C"]),
        window=int(hyper["K"]),
        dt=float(hyper["dt"]),
        log_sigma_min=float(hyper["log_sigma_min"]),
        log_sigma_max=float(hyper["log_sigma_max"]),
    )


def save_model(path, model: FlowModel) -> None:
    from .core import save_checkpoint

    hyper, params = model_to_checkpoint(model)
    save_checkpoint(path, hyper, params)


def load_model(path) -> FlowModel:
    from .core import load_checkpoint

    hyper, params = load_checkpoint(path)
    return model_from_checkpoint(hyper, params)


# --- conditioner feature construction (numpy path) ---


def _window_slice(history: np.ndarray, upto: int, window: int) -> np.ndarray:
    """Last ``window`` joint states before index ``upto``, repeating the
    oldest state if the history is shorter than the window."""
    start = upto - window
    if start >= 0:
        return history[..., start:upto, :, :]
    pad_shape = list(history.shape)
    pad_shape[-3] = -start
    pad = np.broadcast_to(history[..., 0:1, :, :], pad_shape)
    return np.concatenate([pad, history[..., 0:upto, :, :]], axis=-3)


def _features_from_window(window: np.ndarray, agent: int, context: np.ndarray) -> np.ndarray:
    """Flatten a (..., K, A, 2) window relative to the agent's latest
    position and append context: output (..., 2*A*K + C)."""
    ref = window[..., -1:, agent : agent + 1, :]
    rel = (window - ref) * FEATURE_SCALE
    lead = rel.shape[:-3]
    flat = rel.reshape(*lead, -1)
    return np.concatenate([flat, np.broadcast_to(context, (*lead, context.shape[-1]))], axis=-1)


def _mlp_forward_np(mlp: dk.MlpParams, x: np.ndarray) -> np.ndarray:
    h = x
    last = len(mlp.weights) - 1
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        h = h @ w + b
        if i != last:
            h = np.tanh(h)
    return h


def _conditioner_stats_np(model: FlowModel, agent: int, window: np.ndarray, context: np.ndarray):
    """(mu, log_sigma) for one agent given (..., K, A, 2) windows."""
    feats = _features_from_window(window, agent, context)
    out = _mlp_forward_np(model.conditioners[agent], feats)
    mu = window[..., -1, agent, :] + out[..., 0:2]
    log_sigma = np.clip(out[..., 2:4], model.log_sigma_min, model.log_sigma_max)
    return mu, log_sigma


def conditioner(model: FlowModel, agent: int, history: np.ndarray | None, observation: Observation) -> ConditionerOutput:
    """Distribution parameters for ``agent``'s next step.

    ``history`` holds the joint states generated so far, shape (t-1, A, 2);
    None or empty means the next step is the first one and the window comes
    entirely from the observation's past.
    """
    past = observation.past_array()
    if history is None or len(history) == 0:
        full = past
    else:
        history = np.asarray(history, dtype=np.float64)
        if not np.isfinite(history).all():
            raise ValueError("non-finite value")
        full = np.concatenate([past, history], axis=0)
    window = _window_slice(full, full.shape[0], model.window)
    mu, log_sigma = _conditioner_stats_np(model, agent, window, observation.context_array())
    return ConditionerOutput(mu=mu, log_sigma=log_sigma)


def transform(phi: ConditionerOutput, z: np.ndarray):
    """Affine map from base noise to a position: x = mu + sigma * z."""
    from .core import Position

    x = phi.mu + phi.sigma * np.asarray(z, dtype=np.float64)
    return Position(float(x[0]), float(x[1]))


def inverse_transform(phi: ConditionerOutput, x) -> np.ndarray:
    from .core import Position

    arr = x.to_array() if isinstance(x, Position) else np.asarray(x, dtype=np.float64)
    return (arr - phi.mu) / phi.sigma


# --- sampling ---


def rollout_given_z(model: FlowModel, observation: Observation, z: np.ndarray) -> np.ndarray:
    """Deterministically decode base noise (n, T, A, 2) into trajectories.

    This is the flow's forward map applied autoregressively; sampling and
    planning both go through it.
    """
    z = np.asarray(z, dtype=np.float64)
    n, t_len, a_len = z.shape[0], z.shape[1], z.shape[2]
    past = np.broadcast_to(observation.past_array(), (n, model.past_len, a_len, 2))
    context = np.broadcast_to(observation.context_array(), (n, model.context_dim))
    history = np.concatenate([past, np.zeros((n, t_len, a_len, 2))], axis=1)
    for t in range(t_len):
        upto = model.past_len + t
        window = _window_slice(history, upto, model.window)
        for a in range(a_len):
            mu, log_sigma = _conditioner_stats_np(model, a, window, context)
            history[:, upto, a, :] = mu + np.exp(log_sigma) * z[:, t, a, :]
    return history[:, model.past_len :, :, :].copy()


def sample_joint_batch(
    model: FlowModel,
    observation: Observation,
    rng: RngStream,
    n: int,
    override_zr: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized ancestral sampling: n futures under one observation.

    Returns (trajectories (n, T, A, 2), z (n, T, A, 2)).  The same base
    draws are consumed whether or not the robot slice is overridden, so the
    human samples match across calls with equal rng state.
    """
    t_len, a_len = model.horizon, model.num_agents
    z = rng.normal((n, t_len, a_len, 2))
    if override_zr is not None:
        override_zr = np.asarray(override_zr, dtype=np.float64)
        if override_zr.shape != (t_len, 2):
            raise ValueError(f"override_zr must have shape ({t_len}, 2)")
        z[:, :, 0, :] = override_zr
    return rollout_given_z(model, observation, z), z


def sample_joint(
    model: FlowModel,
    observation: Observation,
    rng: RngStream,
    override_zr: np.ndarray | None = None,
) -> tuple[JointTrajectory, ZSequence]:
    """One ancestral sample; see sample_joint_batch for the mechanics."""
    trajs, z = sample_joint_batch(model, observation, rng, 1, override_zr=override_zr)
    return JointTrajectory.from_array(trajs[0]), ZSequence(z[0])


# --- exact likelihood ---


def _stats_for_trajectories(model: FlowModel, trajectories: np.ndarray, observation: Observation):
    """(mu, log_sigma) arrays of shape (S, T, A, 2) for observed trajectories."""
    s_len, t_len = trajectories.shape[0], trajectories.shape[1]
    past = np.broadcast_to(observation.past_array(), (s_len, model.past_len, model.num_agents, 2))
    context = np.broadcast_to(observation.context_array(), (s_len, model.context_dim))
    full = np.concatenate([past, trajectories], axis=1)
    mu = np.zeros((s_len, t_len, model.num_agents, 2))
    log_sigma = np.zeros((s_len, t_len, model.num_agents, 2))
    for t in range(t_len):
        window = _window_slice(full, model.past_len + t, model.window)
        for a in range(model.num_agents):
            mu[:, t, a], log_sigma[:, t, a] = _conditioner_stats_np(model, a, window, context)
    return mu, log_sigma


def _stats_for_trajectory(model: FlowModel, trajectory: np.ndarray, observation: Observation):
    mu, log_sigma = _stats_for_trajectories(model, trajectory[None], observation)
    return mu[0], log_sigma[0]


def log_prob_terms(model: FlowModel, trajectory: JointTrajectory, observation: Observation) -> np.ndarray:
    """Per-(step, agent) log-likelihood contributions, shape (T, A)."""
    arr = trajectory.to_array()
    if not np.isfinite(arr).all():
        raise ValueError("non-finite value")
    mu, log_sigma = _stats_for_trajectory(model, arr, observation)
    z = (arr - mu) / np.exp(log_sigma)
    per_axis = -0.5 * z * z - log_sigma - 0.5 * LOG_2PI
    return per_axis.sum(axis=2)


def log_prob(model: FlowModel, trajectory: JointTrajectory, observation: Observation) -> float:
    """log q(trajectory | observation) as a direct sum of Gaussian terms."""
    return float(log_prob_terms(model, trajectory, observation).sum())


def log_prob_change_of_variables(model: FlowModel, trajectory: JointTrajectory, observation: Observation) -> float:
    """Same quantity via the base density minus the log-determinant."""
    arr = trajectory.to_array()
    mu, log_sigma = _stats_for_trajectory(model, arr, observation)
    z = (arr - mu) / np.exp(log_sigma)
    base = float((-0.5 * z * z - 0.5 * LOG_2PI).sum())
    log_det = float(log_sigma.sum())
    return base - log_det


def trajectory_to_z(model: FlowModel, trajectory: JointTrajectory, observation: Observation) -> ZSequence:
    """Invert the flow: recover the base noise that reproduces ``trajectory``."""
    arr = trajectory.to_array()
    mu, log_sigma = _stats_for_trajectory(model, arr, observation)
    return ZSequence((arr - mu) / np.exp(log_sigma))


# --- training ---


@dataclass
class TrainConfig:
    epochs: int = 150
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    val_fraction: float = 0.1


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_nll: float
    val_nll: float


@dataclass
class _TrainingArrays:
    features: np.ndarray  # (N, T, A, D_in)
    prev: np.ndarray  # (N, T, A, 2) agent position one step earlier
    targets: np.ndarray  # (N, T, A, 2)


def _prepare_arrays(model: FlowModel, records: list[EpisodeRecord]) -> _TrainingArrays:
    n = len(records)
    t_len, a_len, d_in = model.horizon, model.num_agents, model.input_dim
    features = np.zeros((n, t_len, a_len, d_in))
    prev = np.zeros((n, t_len, a_len, 2))
    targets = np.zeros((n, t_len, a_len, 2))
    for i, rec in enumerate(records):
        past = rec.observation.past_array()
        future = rec.future.to_array()
        if past.shape[0] != model.past_len or future.shape[0] != t_len:
            raise ValueError("record shape does not match the model hyperparameters")
        if len(rec.observation.context) != model.context_dim:
            raise ValueError("record context width does not match the model")
        context = rec.observation.context_array()
        full = np.concatenate([past, future], axis=0)
        for t in range(t_len):
            window = _window_slice(full, model.past_len + t, model.window)
            for a in range(a_len):
                features[i, t, a] = _features_from_window(window, a, context)
                prev[i, t, a] = window[-1, a]
                targets[i, t, a] = full[model.past_len + t, a]
    return _TrainingArrays(features, prev, targets)


def _nll_np(model: FlowModel, arrays: _TrainingArrays, idx: np.ndarray) -> float:
    """Mean per-record negative log-likelihood, plain numpy."""
    total = 0.0
    for a in range(model.num_agents):
        feats = arrays.features[idx, :, a, :].reshape(-1, model.input_dim)
        out = _mlp_forward_np(model.conditioners[a], feats)
        mu = arrays.prev[idx, :, a, :].reshape(-1, 2) + out[:, 0:2]
        log_sigma = np.clip(out[:, 2:4], model.log_sigma_min, model.log_sigma_max)
        diff = arrays.targets[idx, :, a, :].reshape(-1, 2) - mu
        z = diff / np.exp(log_sigma)
        total += float((0.5 * z * z + log_sigma + 0.5 * LOG_2PI).sum())
    return total / len(idx)


def _nll_graph(model: FlowModel, arrays: _TrainingArrays, idx: np.ndarray):
    """Build the minibatch NLL graph; returns (loss node, named param leaves)."""
    leaves: dict[str, dk.Node] = {}
    loss_terms = []
    for a in range(model.num_agents):
        mlp = model.conditioners[a]
        weights = []
        biases = []
        for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
            wn, bn = dk.leaf(w), dk.leaf(b)
            leaves[f"agent{a}.w{i}"] = wn
            leaves[f"agent{a}.b{i}"] = bn
            weights.append(wn)
            biases.append(bn)
        feats = dk.constant(arrays.features[idx, :, a, :].reshape(-1, model.input_dim))
        out = dk.mlp_apply(weights, biases, feats)
        mu = dk.constant(arrays.prev[idx, :, a, :].reshape(-1, 2)) + out[:, 0:2]
        log_sigma = dk.clip(out[:, 2:4], model.log_sigma_min, model.log_sigma_max)
        z = (dk.constant(arrays.targets[idx, :, a, :].reshape(-1, 2)) - mu) / dk.exp(log_sigma)
        nll = 0.5 * dk.square(z) + log_sigma + 0.5 * LOG_2PI
        loss_terms.append(dk.node_sum(nll))
    loss = loss_terms[0]
    for term in loss_terms[1:]:
        loss = loss + term
    loss = loss * (1.0 / len(idx))
    return loss, leaves


def train(model: FlowModel, records: list[EpisodeRecord], config: TrainConfig) -> list[EpochStats]:
    """Maximum-likelihood training; mutates ``model`` and returns the curve.

    Row 0 is the untouched initial model; row e is after epoch e.  Raises if
    the objective goes non-finite.
    """
    if not records:
        raise ValueError("empty dataset")
    rng = RngStream(config.seed)
    arrays = _prepare_arrays(model, records)

    n = len(records)
    indices = np.arange(n)
    rng.child("split").shuffle(indices)
    if n == 1:
        train_idx = val_idx = indices
    else:
        n_val = min(max(1, int(round(config.val_fraction * n))), n - 1)
        val_idx = indices[:n_val]
        train_idx = indices[n_val:]

    opt = dk.Adam(step_size=config.learning_rate)
    params_by_name: dict[str, np.ndarray] = {}
    for a, mlp in enumerate(model.conditioners):
        for i in range(len(mlp.weights)):
            params_by_name[f"agent{a}.w{i}"] = mlp.weights[i]
            params_by_name[f"agent{a}.b{i}"] = mlp.biases[i]

    curve = [EpochStats(0, _nll_np(model, arrays, train_idx), _nll_np(model, arrays, val_idx))]
    batch = max(1, min(config.batch_size, len(train_idx)))
    for epoch in range(1, config.epochs + 1):
        order = train_idx.copy()
        rng.child(f"epoch{epoch}").shuffle(order)
        for start in range(0, len(order), batch):
            chunk = order[start : start + batch]
            loss, leaves = _nll_graph(model, arrays, chunk)
            if not math.isfinite(float(loss.value)):
                raise RuntimeError(f"training diverged: non-finite NLL in epoch {epoch}")
            dk.backward(loss)
            grads = {name: node.grad for name, node in leaves.items() if node.grad is not None}
            opt.step(params_by_name, grads)
        stats = EpochStats(epoch, _nll_np(model, arrays, train_idx), _nll_np(model, arrays, val_idx))
        if not (math.isfinite(stats.train_nll) and math.isfinite(stats.val_nll)):
            raise RuntimeError(f"training diverged: non-finite NLL in epoch {epoch}")
        curve.append(stats)
    return curve
