"""Exact value functions for four planner idealizations on tabular games.

The lab compares planners along two independent axes on tiny finite games
where every expectation and max can be enumerated:

* open-loop vs contingent: whether the robot commits to its whole action
  sequence up front, or picks each action after seeing the human's moves
  so far;
* robot-agnostic vs robot-conditioned forecasts: whether the human model
  ignores the robot's planned actions (marginalizing them out under a
  training-time prior) or conditions on them.

Kind codes combine the axes: ``nl`` open-loop agnostic, ``rl`` open-loop
conditioned, ``hl`` contingent agnostic, ``cl`` contingent conditioned.

Two exact facts are checked by the tests.  First, contingency can only
help: for every first action, q_nl <= q_hl and q_rl <= q_cl, because the
contingent form moves a max inside an expectation and max is convex.
Second, planning with the robot-agnostic forecast carries a price that the
planner's own estimate hides: the agnostic planners' first actions must be
re-scored under the conditioned model to get their true values, and those
true values never exceed the conditioned planners' values.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .core import RngStream

PLANNER_KINDS = ("nl", "rl", "hl", "cl")

# q_tstep enumerates every history, so keep the tree small.
MAX_TSTEP_HORIZON = 5
MAX_TSTEP_ALPHABET = 3

ORDERING_TOLERANCE = 1e-12

History = tuple[int, ...]


@dataclass
class FiniteGame:
    """Two-agent tabular game with a robot-conditioned human model.

    ``human_start`` is p(xh_1); ``green[(xr_prefix, xh_prefix)]`` is the row
    p(xh_t | xr_{1:t-1}, xh_{1:t-1}) for t >= 2, with both prefixes of
    length t-1.  The human at step t sees robot actions strictly before t.
    ``returns`` maps a full (robot sequence, human sequence) pair to its
    trajectory return.  ``robot_prior`` supplies p(xr'_t) rows used when the
    robot is marginalized out; None means uniform.
    """

    horizon: int
    robot_actions: tuple[int, ...]
    human_actions: tuple[int, ...]
    human_start: tuple[float, ...]
    green: dict[tuple[History, History], tuple[float, ...]]
    returns: dict[tuple[History, History], float]
    robot_prior: tuple[tuple[float, ...], ...] | None = None

    def __post_init__(self) -> None:
        T = self.horizon
        if T < 2:
            raise ValueError("horizon must be at least 2")
        if len(self.robot_actions) != T or len(self.human_actions) != T:
            raise ValueError("action set sizes must list one entry per step")
        if any(n < 1 for n in self.robot_actions + self.human_actions):
            raise ValueError("action set sizes must be positive")
        _check_row(self.human_start, self.human_actions[0], "human_start")
        for t in range(2, T + 1):
            for xr in _prefixes(self.robot_actions, t - 1):
                for xh in _prefixes(self.human_actions, t - 1):
                    row = self.green.get((xr, xh))
                    if row is None:
                        raise ValueError(f"missing conditional for step {t} at {(xr, xh)}")
                    _check_row(row, self.human_actions[t - 1], f"green step {t}")
        for xr in _prefixes(self.robot_actions, T):
            for xh in _prefixes(self.human_actions, T):
                value = self.returns.get((xr, xh))
                if value is None:
                    raise ValueError(f"missing return entry for {(xr, xh)}")
                if not math.isfinite(value):
                    raise ValueError("returns must be finite")
        if self.robot_prior is not None:
            if len(self.robot_prior) != T:
                raise ValueError("robot_prior must list one row per step")
            for t, row in enumerate(self.robot_prior):
                _check_row(row, self.robot_actions[t], f"robot_prior step {t + 1}")

    def human_row(self, t: int, xr_prefix: History, xh_prefix: History) -> tuple[float, ...]:
        """p(xh_t | xr_{1:t-1}, xh_{1:t-1}); t is 1-indexed."""
        if t == 1:
            return tuple(self.human_start)
        return self.green[(xr_prefix, xh_prefix)]

    def value(self, xr_seq: History, xh_seq: History) -> float:
        return self.returns[(xr_seq, xh_seq)]

    def prior_row(self, t: int) -> tuple[float, ...]:
        """p(xr'_t), the marginalization prior at 1-indexed step t."""
        if self.robot_prior is not None:
            return self.robot_prior[t - 1]
        n = self.robot_actions[t - 1]
        return tuple(1.0 / n for _ in range(n))


def _check_row(row, size: int, name: str) -> None:
    if len(row) != size:
        raise ValueError(f"{name} row has wrong length")
    if any(p < 0.0 for p in row) or abs(sum(row) - 1.0) > 1e-9:
        raise ValueError(f"{name} row is not normalized")


def _prefixes(sizes: tuple[int, ...], length: int):
    return itertools.product(*(range(n) for n in sizes[:length]))


def orange_conditional(game: FiniteGame) -> dict[History, tuple[float, ...]]:
    """Human model with the robot marginalized out, as a prefix-keyed table.

    Returns the exact conditionals of the joint over human sequences induced
    by drawing the robot from its prior.  At step t the mixture weights are
    the posterior over robot prefixes given the human actions observed so
    far; at t = 2 no evidence has accumulated and they reduce to the prior.
    If a human prefix has probability zero under the marginal joint, the
    prior weights are used for that row.
    """
    table: dict[History, tuple[float, ...]] = {(): tuple(game.human_start)}
    for t in range(2, game.horizon + 1):
        for xh_prefix in _prefixes(game.human_actions, t - 1):
            weights = []
            rows = []
            for xr_prefix in _prefixes(game.robot_actions, t - 1):
                prior = 1.0
                for s, action in enumerate(xr_prefix, start=1):
                    prior *= game.prior_row(s)[action]
                likelihood = 1.0
                for s in range(2, t):
                    row = game.human_row(s, xr_prefix[: s - 1], xh_prefix[: s - 1])
                    likelihood *= row[xh_prefix[s - 1]]
                weights.append((prior, prior * likelihood))
                rows.append(game.human_row(t, xr_prefix, xh_prefix))
            total = sum(w for _, w in weights)
            if total > 0.0:
                mix = [w / total for _, w in weights]
            else:
                prior_total = sum(p for p, _ in weights)
                mix = [p / prior_total for p, _ in weights]
            size = game.human_actions[t - 1]
            merged = tuple(
                sum(m * row[x] for m, row in zip(mix, rows)) for x in range(size)
            )
            table[xh_prefix] = merged
    return table


def _require_two_step(game: FiniteGame) -> None:
    if game.horizon != 2:
        raise ValueError("two-step form requires horizon 2")


def _orange_step2(game: FiniteGame, xh1: int) -> tuple[float, ...]:
    # Direct prior mixture; the two-step forms stay independent of
    # orange_conditional so the general recursion can be checked against them.
    size = game.human_actions[1]
    merged = [0.0] * size
    for xr1, p in enumerate(game.prior_row(1)):
        row = game.human_row(2, (xr1,), (xh1,))
        for x in range(size):
            merged[x] += p * row[x]
    return tuple(merged)


def q_nl(game: FiniteGame, xr1: int) -> float:
    """Open-loop plan scored under the robot-agnostic forecast."""
    _require_two_step(game)
    best = -math.inf
    for xr2 in range(game.robot_actions[1]):
        total = 0.0
        for xh1, p1 in enumerate(game.human_start):
            row = _orange_step2(game, xh1)
            for xh2, p2 in enumerate(row):
                total += p1 * p2 * game.value((xr1, xr2), (xh1, xh2))
        best = max(best, total)
    return best


def q_rl(game: FiniteGame, xr1: int) -> float:
    """Open-loop plan scored under the robot-conditioned forecast."""
    _require_two_step(game)
    best = -math.inf
    for xr2 in range(game.robot_actions[1]):
        total = 0.0
        for xh1, p1 in enumerate(game.human_start):
            row = game.human_row(2, (xr1,), (xh1,))
            for xh2, p2 in enumerate(row):
                total += p1 * p2 * game.value((xr1, xr2), (xh1, xh2))
        best = max(best, total)
    return best


def q_hl(game: FiniteGame, xr1: int) -> float:
    """Contingent plan scored under the robot-agnostic forecast."""
    _require_two_step(game)
    total = 0.0
    for xh1, p1 in enumerate(game.human_start):
        row = _orange_step2(game, xh1)
        best = -math.inf
        for xr2 in range(game.robot_actions[1]):
            inner = sum(
                p2 * game.value((xr1, xr2), (xh1, xh2)) for xh2, p2 in enumerate(row)
            )
            best = max(best, inner)
        total += p1 * best
    return total


def q_cl(game: FiniteGame, xr1: int) -> float:
    """Contingent plan scored under the robot-conditioned forecast."""
    _require_two_step(game)
    total = 0.0
    for xh1, p1 in enumerate(game.human_start):
        row = game.human_row(2, (xr1,), (xh1,))
        best = -math.inf
        for xr2 in range(game.robot_actions[1]):
            inner = sum(
                p2 * game.value((xr1, xr2), (xh1, xh2)) for xh2, p2 in enumerate(row)
            )
            best = max(best, inner)
        total += p1 * best
    return total


def q_tstep(game: FiniteGame, kind: str, xr1: int) -> float:
    """General-horizon Q for any planner kind, by exhaustive recursion.

    Contingent kinds alternate: draw xh_t, then choose xr_{t+1} knowing the
    whole history so far.  Open-loop kinds choose the entire robot suffix
    first and only then take the chain expectation.  At horizon 2 this
    agrees with the dedicated two-step forms to within float roundoff.
    """
    if kind not in PLANNER_KINDS:
        raise ValueError(f"unknown planner kind {kind!r}")
    if game.horizon > MAX_TSTEP_HORIZON:
        raise ValueError(f"horizon above {MAX_TSTEP_HORIZON} not supported")
    if any(
        n > MAX_TSTEP_ALPHABET for n in game.robot_actions + game.human_actions
    ):
        raise ValueError(f"alphabet above {MAX_TSTEP_ALPHABET} not supported")
    T = game.horizon
    aware = kind in ("rl", "cl")
    orange = None if aware else orange_conditional(game)

    def human_row(t: int, xr_hist: History, xh_hist: History) -> tuple[float, ...]:
        if aware:
            return game.human_row(t, xr_hist[: t - 1], xh_hist)
        return orange[xh_hist]

    if kind in ("hl", "cl"):

        def contingent(xr_hist: History, xh_hist: History) -> float:
            t = len(xh_hist) + 1
            row = human_row(t, xr_hist, xh_hist)
            total = 0.0
            for xh, p in enumerate(row):
                if p == 0.0:
                    continue
                grown = xh_hist + (xh,)
                if t == T:
                    total += p * game.value(xr_hist, grown)
                else:
                    best = max(
                        contingent(xr_hist + (nxt,), grown)
                        for nxt in range(game.robot_actions[t])
                    )
                    total += p * best
            return total

        return contingent((xr1,), ())

    def chain(xr_seq: History, xh_hist: History) -> float:
        t = len(xh_hist) + 1
        row = human_row(t, xr_seq, xh_hist)
        total = 0.0
        for xh, p in enumerate(row):
            if p == 0.0:
                continue
            grown = xh_hist + (xh,)
            if t == T:
                total += p * game.value(xr_seq, grown)
            else:
                total += p * chain(xr_seq, grown)
        return total

    best = -math.inf
    for suffix in itertools.product(
        *(range(game.robot_actions[t]) for t in range(1, T))
    ):
        best = max(best, chain((xr1,) + suffix, ()))
    return best


def planner_q(game: FiniteGame, kind: str, xr1: int) -> float:
    """Dispatch to the dedicated two-step forms at horizon 2."""
    if kind not in PLANNER_KINDS:
        raise ValueError(f"unknown planner kind {kind!r}")
    if game.horizon == 2:
        return {"nl": q_nl, "rl": q_rl, "hl": q_hl, "cl": q_cl}[kind](game, xr1)
    return q_tstep(game, kind, xr1)


def v(kind: str, game: FiniteGame) -> tuple[float, int]:
    """Max over first actions and the argmax, ties to the lowest index."""
    best_value = -math.inf
    best_action = 0
    for xr1 in range(game.robot_actions[0]):
        value = planner_q(game, kind, xr1)
        if value > best_value:
            best_value = value
            best_action = xr1
    return best_value, best_action


def true_value_hl(game: FiniteGame) -> float:
    """The contingent-agnostic planner's pick, re-scored under the
    robot-conditioned contingent value.  Never exceeds v("cl")."""
    _, choice = v("hl", game)
    return planner_q(game, "cl", choice)


def true_value_nl(game: FiniteGame) -> float:
    """The open-loop-agnostic planner's pick, re-scored under the
    robot-conditioned open-loop value.  Never exceeds v("rl")."""
    _, choice = v("nl", game)
    return planner_q(game, "rl", choice)


@dataclass
class ValueReport:
    """Per-first-action Q tables plus the four headline values.

    ``v_nl`` and ``v_hl_true`` are true values: the agnostic planners'
    first actions re-scored under the robot-conditioned model.  ``v_rl``
    and ``v_cl`` need no correction because their own estimates already
    use that model.
    """

    q_tables: dict[str, tuple[float, ...]]
    v_nl: float
    v_rl: float
    v_hl_true: float
    v_cl: float
    argmax: dict[str, int]


def value_report(game: FiniteGame) -> ValueReport:
    q_tables = {
        kind: tuple(
            planner_q(game, kind, xr1) for xr1 in range(game.robot_actions[0])
        )
        for kind in PLANNER_KINDS
    }
    argmax = {}
    for kind, table in q_tables.items():
        best = max(range(len(table)), key=lambda i: (table[i], -i))
        argmax[kind] = best
    return ValueReport(
        q_tables=q_tables,
        v_nl=q_tables["rl"][argmax["nl"]],
        v_rl=q_tables["rl"][argmax["rl"]],
        v_hl_true=q_tables["cl"][argmax["hl"]],
        v_cl=q_tables["cl"][argmax["cl"]],
        argmax=argmax,
    )


def check_orderings(game: FiniteGame) -> dict:
    """Margins for the four provable inequalities; violations are counted,
    never raised.

    Per first action: q_nl <= q_hl and q_rl <= q_cl.  On values: the true
    open-loop-agnostic value is at most v("rl"), and the true
    contingent-agnostic value is at most v("cl").
    """
    report = value_report(game)
    jensen_nl_hl = [
        hl - nl for nl, hl in zip(report.q_tables["nl"], report.q_tables["hl"])
    ]
    jensen_rl_cl = [
        cl - rl for rl, cl in zip(report.q_tables["rl"], report.q_tables["cl"])
    ]
    margins = {
        "jensen_nl_hl": min(jensen_nl_hl),
        "jensen_rl_cl": min(jensen_rl_cl),
        "value_nl_rl": report.v_rl - report.v_nl,
        "value_hl_cl": report.v_cl - report.v_hl_true,
    }
    violations = sum(1 for m in margins.values() if m < -ORDERING_TOLERANCE)
    return {
        "margins": margins,
        "per_action": {"nl_hl": jensen_nl_hl, "rl_cl": jensen_rl_cl},
        "violations": violations,
        "report": report,
    }


def random_game(
    rng: RngStream,
    horizon: int = 2,
    robot_actions: int = 2,
    human_actions: int = 2,
) -> FiniteGame:
    """Dirichlet(1) conditional rows, returns uniform in [-1, 1].

    Return entries get a deterministic index-scaled 1e-6 perturbation so no
    two are exactly tied and every argmax is unambiguous.
    """
    r_sizes = tuple(robot_actions for _ in range(horizon))
    h_sizes = tuple(human_actions for _ in range(horizon))
    gen = rng.generator
    start = tuple(float(p) for p in gen.dirichlet(np.ones(human_actions)))
    green: dict[tuple[History, History], tuple[float, ...]] = {}
    for t in range(2, horizon + 1):
        for xr in _prefixes(r_sizes, t - 1):
            for xh in _prefixes(h_sizes, t - 1):
                row = gen.dirichlet(np.ones(human_actions))
                green[(xr, xh)] = tuple(float(p) for p in row)
    returns: dict[tuple[History, History], float] = {}
    index = 0
    for xr in _prefixes(r_sizes, horizon):
        for xh in _prefixes(h_sizes, horizon):
            returns[(xr, xh)] = float(gen.uniform(-1.0, 1.0)) + index * 1e-6
            index += 1
    return FiniteGame(horizon, r_sizes, h_sizes, start, green, returns)


def strict_gap_game(probe_cost: float = 0.01) -> FiniteGame:
    """Probing game where ignoring the robot's influence forfeits value.

    The robot can probe at step 1, which makes the human yield with
    probability 0.9 instead of 0.1 at step 2.  Turning into a yielding
    human pays +1; turning into one that goes costs -2; holding pays 0.
    The robot-agnostic forecast averages the two yield rates, so probing
    looks like a pure cost to it and it stays put, worth 0 in the real
    game, while the robot-conditioned planner probes and turns for 0.7
    minus the probe cost.
    """
    if probe_cost < 0.0:
        raise ValueError("probe_cost must be nonnegative")
    # Robot step 1: 0 = wait, 1 = probe. Step 2: 0 = hold, 1 = turn.
    # Human step 1 is vacuous; step 2: 0 = yield, 1 = go.
    r_sizes = (2, 2)
    h_sizes = (1, 2)
    green = {
        ((0,), (0,)): (0.1, 0.9),
        ((1,), (0,)): (0.9, 0.1),
    }
    second = {(0, 0): 0.0, (0, 1): 0.0, (1, 0): 1.0, (1, 1): -2.0}
    returns = {}
    for xr1 in range(2):
        for xr2 in range(2):
            for xh2 in range(2):
                pay = second[(xr2, xh2)] - probe_cost * xr1
                returns[((xr1, xr2), (0, xh2))] = pay
    return FiniteGame(2, r_sizes, h_sizes, (1.0,), green, returns)
