"""Finite-alphabet autoregressive flows and an exhaustive policy oracle.

A discrete flow draws a base symbol per (step, agent) and relabels it through
a bijection conditioned on everything realized earlier in autoregressive
order.  Fixing the robot's base symbols therefore pins down one robot action
at every history node, i.e. a complete decision tree.  This module enumerates
which trees are reachable that way and classifies the rest.

The central fact, checked exhaustively in the tests: a tree is reachable
exactly when the rank of its action under the model's one-step conditional
is the same at every node of a given step.  Trees that pick the most likely
action after one history and a less likely one after another are outside the
family, no matter how the bijections are chosen.

Agents act in index order within a step; agent 0 is the robot, so its
bijection at step t sees both agents' actions at steps < t but nothing from
step t itself.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

from .core import RngStream

ROBOT = 0

# Exhaustive enumeration is only sane for small games.
MAX_POLICIES = 1_000_000

# Random base pmfs keep at least this much daylight between any two symbol
# probabilities so that ranks are unambiguous.
MIN_PROB_GAP = 1e-3

History = tuple[int, ...]
Permutation = tuple[int, ...]


@dataclass
class DiscreteFlow:
    """Autoregressive relabeling model over finite per-(step, agent) alphabets.

    ``base[t][a]`` is the base pmf for agent ``a`` at step ``t``.
    ``tables[(t, a)]`` maps the flat realized prefix (step-major, agent-minor,
    so length ``t * num_agents + a``) to the permutation applied to the base
    symbol: outcome = perm[base symbol].
    """

    horizon: int
    num_agents: int
    alphabet_sizes: tuple[tuple[int, ...], ...]
    base: tuple[tuple[float, ...], ...]
    tables: dict[tuple[int, int], dict[History, Permutation]]
    tie_perturbations: int = 0

    def __post_init__(self) -> None:
        if self.horizon < 1 or self.num_agents < 1:
            raise ValueError("horizon and num_agents must be positive")
        if len(self.alphabet_sizes) != self.horizon or len(self.base) != self.horizon:
            raise ValueError("alphabet_sizes and base must have one row per step")
        for t in range(self.horizon):
            if len(self.alphabet_sizes[t]) != self.num_agents:
                raise ValueError("alphabet_sizes row must have one entry per agent")
            for a in range(self.num_agents):
                size = self.alphabet_sizes[t][a]
                if size < 1:
                    raise ValueError("alphabet size must be positive")
                pmf = self.base[t][a]
                if len(pmf) != size:
                    raise ValueError("base pmf length must match alphabet size")
                if any(p < 0.0 for p in pmf) or abs(sum(pmf) - 1.0) > 1e-9:
                    raise ValueError("base pmf must be a probability vector")
        for (t, a), table in self.tables.items():
            size = self.alphabet_sizes[t][a]
            for history, perm in table.items():
                if len(history) != t * self.num_agents + a:
                    raise ValueError(
                        f"history key of wrong length for step {t} agent {a}"
                    )
                if sorted(perm) != list(range(size)):
                    raise ValueError(f"table entry for {history} is not a permutation")

    def bijection(self, t: int, a: int, history: History) -> Permutation:
        table = self.tables.get((t, a))
        if table is None or history not in table:
            raise ValueError(f"no bijection for step {t} agent {a} history {history}")
        return table[history]

    def conditional_pmf(self, t: int, a: int, history: History) -> tuple[float, ...]:
        """Outcome-symbol pmf at this node: mass of the preimage of each symbol."""
        perm = self.bijection(t, a, history)
        pmf = [0.0] * self.alphabet_sizes[t][a]
        for z, x in enumerate(perm):
            pmf[x] = self.base[t][a][z]
        return tuple(pmf)


@dataclass(frozen=True)
class PolicyTree:
    """A robot action at every node, nodes keyed by the other agents' past.

    The robot's own earlier actions are implied by the tree, so a node at
    step t is the flat tuple of the other agents' actions at steps < t.
    ``actions`` is stored sorted for hashing and equality.
    """

    horizon: int
    actions: tuple[tuple[History, int], ...] = field(default=())

    @staticmethod
    def from_map(horizon: int, mapping: dict[History, int]) -> PolicyTree:
        return PolicyTree(horizon, tuple(sorted(mapping.items())))

    def as_map(self) -> dict[History, int]:
        return dict(self.actions)

    def action(self, node: History) -> int:
        for key, value in self.actions:
            if key == node:
                return value
        raise KeyError(node)


def complete_tables(
    horizon: int,
    num_agents: int,
    alphabet_sizes: tuple[tuple[int, ...], ...],
    make_perm,
) -> dict[tuple[int, int], dict[History, Permutation]]:
    """Build a full table set with ``make_perm(t, a, history) -> permutation``."""
    tables: dict[tuple[int, int], dict[History, Permutation]] = {}
    for t in range(horizon):
        for a in range(num_agents):
            prefix_sizes: list[int] = []
            for s in range(t):
                prefix_sizes.extend(alphabet_sizes[s])
            prefix_sizes.extend(alphabet_sizes[t][:a])
            table: dict[History, Permutation] = {}
            for history in itertools.product(*(range(n) for n in prefix_sizes)):
                table[history] = tuple(make_perm(t, a, history))
            tables[(t, a)] = table
    return tables


def identity_flow(
    horizon: int,
    num_agents: int,
    base: tuple[tuple[tuple[float, ...], ...], ...],
) -> DiscreteFlow:
    sizes = tuple(tuple(len(pmf) for pmf in row) for row in base)
    tables = complete_tables(
        horizon, num_agents, sizes, lambda t, a, h: range(sizes[t][a])
    )
    return DiscreteFlow(horizon, num_agents, sizes, base, tables)


def _tie_free_pmf(rng: RngStream, size: int) -> tuple[tuple[float, ...], int]:
    """Random pmf whose entries are pairwise separated by at least MIN_PROB_GAP."""
    perturbations = 0
    while True:
        raw = rng.uniform(0.1, 1.0, shape=size)
        pmf = raw / raw.sum()
        gaps = [
            abs(pmf[i] - pmf[j]) for i in range(size) for j in range(i + 1, size)
        ]
        if not gaps or min(gaps) >= MIN_PROB_GAP:
            return tuple(float(p) for p in pmf), perturbations
        perturbations += 1


def random_flow(
    rng: RngStream,
    horizon: int,
    num_agents: int = 2,
    alphabet_size: int = 2,
) -> DiscreteFlow:
    """Random flow with tie-free base pmfs and full random permutation tables."""
    sizes = tuple(
        tuple(alphabet_size for _ in range(num_agents)) for _ in range(horizon)
    )
    base_rows = []
    perturbations = 0
    for t in range(horizon):
        row = []
        for a in range(num_agents):
            pmf, bumps = _tie_free_pmf(rng.child(f"base{t}.{a}"), alphabet_size)
            row.append(pmf)
            perturbations += bumps
        base_rows.append(tuple(row))
    perm_rng = rng.child("perms")

    def make_perm(t: int, a: int, history: History) -> Permutation:
        node = perm_rng.child(f"{t}.{a}.{history}")
        return tuple(int(i) for i in node.generator.permutation(sizes[t][a]))

    tables = complete_tables(horizon, num_agents, sizes, make_perm)
    return DiscreteFlow(
        horizon, num_agents, sizes, tuple(base_rows), tables, perturbations
    )


def pmf(flow: DiscreteFlow, x: tuple[tuple[int, ...], ...]) -> float:
    """Probability of the full joint assignment ``x[t][a]``."""
    if len(x) != flow.horizon:
        raise ValueError("assignment must cover every step")
    prob = 1.0
    history: list[int] = []
    for t in range(flow.horizon):
        if len(x[t]) != flow.num_agents:
            raise ValueError("assignment must cover every agent")
        for a in range(flow.num_agents):
            symbol = x[t][a]
            size = flow.alphabet_sizes[t][a]
            if not 0 <= symbol < size:
                raise ValueError(f"symbol {symbol} outside alphabet of size {size}")
            perm = flow.bijection(t, a, tuple(history))
            prob *= flow.base[t][a][perm.index(symbol)]
            history.append(symbol)
    return prob


def _ranked_symbols(pmf_row: tuple[float, ...]) -> list[int]:
    # Descending probability, ties to the smaller symbol.
    return sorted(range(len(pmf_row)), key=lambda s: (-pmf_row[s], s))


def nth_best_base(flow: DiscreteFlow, t: int, n: int) -> int:
    """The n-th most likely robot base symbol at step t (1-indexed rank)."""
    pmf_row = flow.base[t][ROBOT]
    if not 1 <= n <= len(pmf_row):
        raise ValueError(f"rank {n} out of range for alphabet of size {len(pmf_row)}")
    return _ranked_symbols(pmf_row)[n - 1]


def symbol_rank(pmf_row: tuple[float, ...], symbol: int) -> int:
    """1-indexed rank of a symbol, ties broken toward the smaller index."""
    return _ranked_symbols(pmf_row).index(symbol) + 1


def _others_alphabets(flow: DiscreteFlow, t: int) -> list[int]:
    return [flow.alphabet_sizes[t][a] for a in range(flow.num_agents) if a != ROBOT]


def _policy_nodes(flow: DiscreteFlow, t: int) -> list[History]:
    sizes: list[int] = []
    for s in range(t):
        sizes.extend(_others_alphabets(flow, s))
    return list(itertools.product(*(range(n) for n in sizes)))


def _walk_policy(flow: DiscreteFlow, act):
    """Drive ``act(t, node, full_history) -> robot action`` over the whole tree.

    Maintains the realized flat prefix along every branch so conditionals can
    depend on the robot's own earlier actions, which the node key omits.
    """
    mapping: dict[History, int] = {}
    frontier: list[tuple[History, History]] = [((), ())]
    for t in range(flow.horizon):
        next_frontier: list[tuple[History, History]] = []
        for node, realized in frontier:
            action = act(t, node, realized)
            mapping[node] = action
            if t + 1 == flow.horizon:
                continue
            for others in itertools.product(
                *(range(n) for n in _others_alphabets(flow, t))
            ):
                # Robot is agent 0, so its action precedes the others'.
                child = node + others
                next_frontier.append((child, realized + (action,) + others))
        frontier = next_frontier
    return mapping


def induced_policy(flow: DiscreteFlow, zr_choice: tuple[int, ...]) -> PolicyTree:
    """The decision tree obtained by freezing the robot's base symbols."""
    if len(zr_choice) != flow.horizon:
        raise ValueError("zr_choice must supply one base symbol per step")
    for t, z in enumerate(zr_choice):
        if not 0 <= z < flow.alphabet_sizes[t][ROBOT]:
            raise ValueError(f"base symbol {z} outside alphabet at step {t}")

    def act(t: int, node: History, realized: History) -> int:
        return flow.bijection(t, ROBOT, realized)[zr_choice[t]]

    return PolicyTree.from_map(flow.horizon, _walk_policy(flow, act))


def policy_rank_sets(flow: DiscreteFlow, policy: PolicyTree) -> list[set[int]]:
    """Per-step set of action ranks the tree realizes across its nodes.

    Ranks are taken under the model's one-step robot conditional at the full
    history the tree itself produces at each node.
    """
    mapping = policy.as_map()
    sets: list[set[int]] = [set() for _ in range(flow.horizon)]

    def act(t: int, node: History, realized: History) -> int:
        action = mapping[node]
        conditional = flow.conditional_pmf(t, ROBOT, realized)
        sets[t].add(symbol_rank(conditional, action))
        return action

    _walk_policy(flow, act)
    return sets


def has_history_independent_ranks(flow: DiscreteFlow, policy: PolicyTree) -> bool:
    return all(len(s) == 1 for s in policy_rank_sets(flow, policy))


def all_policies(flow: DiscreteFlow) -> set[PolicyTree]:
    """Every complete assignment of robot actions to tree nodes."""
    nodes: list[tuple[int, History]] = []
    total = 1
    for t in range(flow.horizon):
        for node in _policy_nodes(flow, t):
            nodes.append((t, node))
            total *= flow.alphabet_sizes[t][ROBOT]
            if total > MAX_POLICIES:
                raise ValueError(f"more than {MAX_POLICIES} policies to enumerate")
    policies = set()
    choices = [range(flow.alphabet_sizes[t][ROBOT]) for t, _ in nodes]
    for assignment in itertools.product(*choices):
        mapping = {node: action for (_, node), action in zip(nodes, assignment)}
        policies.add(PolicyTree.from_map(flow.horizon, mapping))
    return policies


def representable_set(flow: DiscreteFlow) -> set[PolicyTree]:
    """Trees reachable by some choice of frozen robot base symbols."""
    total = 1
    for t in range(flow.horizon):
        total *= flow.alphabet_sizes[t][ROBOT]
        if total > MAX_POLICIES:
            raise ValueError(f"more than {MAX_POLICIES} base choices to enumerate")
    choices = [range(flow.alphabet_sizes[t][ROBOT]) for t in range(flow.horizon)]
    return {induced_policy(flow, zr) for zr in itertools.product(*choices)}


def classify_policies(flow: DiscreteFlow) -> dict[str, object]:
    """Exhaustive report: which trees the frozen-base family covers and why.

    The ``unrepresentable`` entries carry the per-step rank sets that witness
    the history dependence.
    """
    everything = all_policies(flow)
    reachable = representable_set(flow)
    unrepresentable = []
    for policy in sorted(everything - reachable, key=lambda p: p.actions):
        sets = policy_rank_sets(flow, policy)
        unrepresentable.append(
            {"policy": policy, "rank_sets": [sorted(s) for s in sets]}
        )
    return {
        "total": len(everything),
        "representable": len(reachable),
        "representable_policies": reachable,
        "unrepresentable": unrepresentable,
        "tie_perturbations": flow.tie_perturbations,
    }
