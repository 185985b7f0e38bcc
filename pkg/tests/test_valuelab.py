"""Tests for the tabular planner-value lab."""

from __future__ import annotations

import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowplan.core import RngStream
from flowplan.valuelab import (
    PLANNER_KINDS,
    FiniteGame,
    check_orderings,
    orange_conditional,
    planner_q,
    q_cl,
    q_hl,
    q_nl,
    q_rl,
    q_tstep,
    random_game,
    strict_gap_game,
    true_value_hl,
    true_value_nl,
    v,
    value_report,
)


def turn_or_wait_game() -> FiniteGame:
    """Single robot first action; payout decided by step-2 turn vs step-1 human.

    Human step 1 is yield (0) or go (1), uniform, robot-independent; human
    step 2 is vacuous.  Turning (1) pays +1 against yield and -1 against go;
    waiting (0) pays 0 either way.
    """
    green = {}
    for xr1 in range(1):
        for xh1 in range(2):
            green[((xr1,), (xh1,))] = (1.0,)
    returns = {}
    for xr2 in range(2):
        for xh1 in range(2):
            pay = 0.0 if xr2 == 0 else (1.0 if xh1 == 0 else -1.0)
            returns[((0, xr2), (xh1, 0))] = pay
    return FiniteGame(2, (1, 2), (2, 1), (0.5, 0.5), green, returns)


def robot_blind_game(seed: int) -> FiniteGame:
    """Random game whose human model never looks at the robot prefix."""
    base = random_game(RngStream(seed), horizon=2, robot_actions=2, human_actions=2)
    shared = {}
    for (xr, xh), row in base.green.items():
        shared.setdefault(xh, row)
    green = {key: shared[key[1]] for key in base.green}
    return FiniteGame(
        base.horizon,
        base.robot_actions,
        base.human_actions,
        base.human_start,
        green,
        base.returns,
    )


class TestValidation:
    def test_unnormalized_start_rejected(self):
        with pytest.raises(ValueError, match="not normalized"):
            FiniteGame(2, (1, 1), (1, 1), (0.9,), {((0,), (0,)): (1.0,)},
                       {((0, 0), (0, 0)): 0.0})

    def test_missing_green_row_rejected(self):
        with pytest.raises(ValueError, match="missing conditional"):
            FiniteGame(2, (1, 1), (1, 1), (1.0,), {}, {((0, 0), (0, 0)): 0.0})

    def test_missing_return_rejected(self):
        with pytest.raises(ValueError, match="missing return"):
            FiniteGame(2, (1, 1), (1, 1), (1.0,), {((0,), (0,)): (1.0,)}, {})

    def test_nonfinite_return_rejected(self):
        with pytest.raises(ValueError, match="finite"):
            FiniteGame(2, (1, 1), (1, 1), (1.0,), {((0,), (0,)): (1.0,)},
                       {((0, 0), (0, 0)): float("nan")})

    def test_bad_prior_rejected(self):
        with pytest.raises(ValueError, match="not normalized"):
            FiniteGame(2, (2, 1), (1, 1), (1.0,),
                       {((xr,), (0,)): (1.0,) for xr in range(2)},
                       {((xr, 0), (0, 0)): 0.0 for xr in range(2)},
                       robot_prior=((0.5, 0.6), (1.0,)))

    def test_short_horizon_rejected(self):
        with pytest.raises(ValueError, match="horizon"):
            FiniteGame(1, (1,), (1,), (1.0,), {}, {((0,), (0,)): 0.0})


class TestOrangeConditional:
    def test_probe_sensitivity_averages_under_uniform_prior(self):
        game = strict_gap_game()
        table = orange_conditional(game)
        assert table[(0,)] == pytest.approx((0.5, 0.5))

    def test_robot_blind_green_passes_through(self):
        game = robot_blind_game(3)
        table = orange_conditional(game)
        for xh1 in range(2):
            assert table[(xh1,)] == pytest.approx(game.green[((0,), (xh1,))])

    @pytest.mark.parametrize("seed", range(20))
    def test_rows_sum_to_one(self, seed):
        game = random_game(RngStream(seed), horizon=3)
        table = orange_conditional(game)
        for row in table.values():
            assert sum(row) == pytest.approx(1.0, abs=1e-12)

    def test_custom_prior_reweights_the_mixture(self):
        game = strict_gap_game()
        skewed = FiniteGame(
            game.horizon, game.robot_actions, game.human_actions,
            game.human_start, game.green, game.returns,
            robot_prior=((0.8, 0.2), (0.5, 0.5)),
        )
        table = orange_conditional(skewed)
        expected = tuple(
            0.8 * a + 0.2 * b
            for a, b in zip(game.green[((0,), (0,))], game.green[((1,), (0,))])
        )
        assert table[(0,)] == pytest.approx(expected)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_conditional_of_marginalized_joint(self, seed):
        # Brute-force route: build the robot-marginal joint over human
        # sequences, then condition it directly.
        game = random_game(RngStream(seed + 100), horizon=3)
        table = orange_conditional(game)
        joint = {}
        for xh_seq in itertools.product(range(2), repeat=3):
            mass = 0.0
            for xr_seq in itertools.product(range(2), repeat=2):
                w = game.prior_row(1)[xr_seq[0]] * game.prior_row(2)[xr_seq[1]]
                p = game.human_start[xh_seq[0]]
                p *= game.human_row(2, xr_seq[:1], xh_seq[:1])[xh_seq[1]]
                p *= game.human_row(3, xr_seq[:2], xh_seq[:2])[xh_seq[2]]
                mass += w * p
            joint[xh_seq] = mass
        for prefix_len in (1, 2):
            for prefix in itertools.product(range(2), repeat=prefix_len):
                num = [0.0, 0.0]
                for xh_seq, mass in joint.items():
                    if xh_seq[:prefix_len] == prefix:
                        num[xh_seq[prefix_len]] += mass
                total = sum(num)
                if total <= 0.0:
                    continue
                assert table[prefix] == pytest.approx(
                    tuple(n / total for n in num), abs=1e-12
                )


class TestTwoStepForms:
    def test_turn_or_wait_values(self):
        game = turn_or_wait_game()
        assert q_nl(game, 0) == pytest.approx(0.0)
        assert q_hl(game, 0) == pytest.approx(0.5)
        assert v("nl", game) == (pytest.approx(0.0), 0)
        assert v("hl", game) == (pytest.approx(0.5), 0)

    def test_turn_or_wait_true_value_matches_cl(self):
        # Step-1 human ignores the robot here, so nothing is forfeited.
        game = turn_or_wait_game()
        assert true_value_hl(game) == pytest.approx(v("cl", game)[0])

    def test_degenerate_human_collapses_all_kinds(self):
        green = {((xr,), (0,)): (1.0,) for xr in range(2)}
        returns = {
            ((xr1, xr2), (0, 0)): float(xr1 + 2 * xr2) for xr1 in range(2)
            for xr2 in range(2)
        }
        game = FiniteGame(2, (2, 2), (1, 1), (1.0,), green, returns)
        values = [planner_q(game, kind, 1) for kind in PLANNER_KINDS]
        assert all(val == pytest.approx(values[0]) for val in values)

    @pytest.mark.parametrize("seed", range(10))
    def test_robot_blind_green_equates_the_axes(self, seed):
        game = robot_blind_game(seed)
        for xr1 in range(2):
            assert q_nl(game, xr1) == pytest.approx(q_rl(game, xr1), abs=1e-12)
            assert q_hl(game, xr1) == pytest.approx(q_cl(game, xr1), abs=1e-12)

    def test_two_step_forms_require_horizon_two(self):
        game = random_game(RngStream(0), horizon=3)
        with pytest.raises(ValueError, match="horizon 2"):
            q_nl(game, 0)


class TestTstepRecursion:
    @pytest.mark.parametrize("seed", range(30))
    def test_horizon_two_agrees_with_dedicated_forms(self, seed):
        game = random_game(RngStream(seed), horizon=2, robot_actions=3,
                           human_actions=2)
        direct = {"nl": q_nl, "rl": q_rl, "hl": q_hl, "cl": q_cl}
        for kind in PLANNER_KINDS:
            for xr1 in range(3):
                assert q_tstep(game, kind, xr1) == pytest.approx(
                    direct[kind](game, xr1), abs=1e-12
                )

    def test_zero_returns_give_zero_values(self):
        base = random_game(RngStream(1), horizon=3)
        zeroed = FiniteGame(
            base.horizon, base.robot_actions, base.human_actions,
            base.human_start, base.green, {k: 0.0 for k in base.returns},
        )
        for kind in PLANNER_KINDS:
            assert q_tstep(zeroed, kind, 0) == pytest.approx(0.0, abs=1e-15)

    @pytest.mark.parametrize("seed", range(20))
    def test_contingency_jensen_gap_at_horizon_three(self, seed):
        game = random_game(RngStream(seed + 500), horizon=3)
        for xr1 in range(2):
            assert q_tstep(game, "nl", xr1) <= q_tstep(game, "hl", xr1) + 1e-12
            assert q_tstep(game, "rl", xr1) <= q_tstep(game, "cl", xr1) + 1e-12

    def test_horizon_guard_trips(self):
        game = random_game(RngStream(2), horizon=6)
        with pytest.raises(ValueError, match="horizon above"):
            q_tstep(game, "cl", 0)

    def test_alphabet_guard_trips(self):
        game = random_game(RngStream(3), horizon=2, robot_actions=4)
        with pytest.raises(ValueError, match="alphabet above"):
            q_tstep(game, "cl", 0)

    def test_unknown_kind_rejected(self):
        game = random_game(RngStream(4), horizon=2)
        with pytest.raises(ValueError, match="unknown planner kind"):
            q_tstep(game, "zz", 0)


class TestValues:
    def test_single_first_action_value_equals_q(self):
        game = turn_or_wait_game()
        for kind in PLANNER_KINDS:
            value, action = v(kind, game)
            assert action == 0
            assert value == pytest.approx(planner_q(game, kind, 0))

    def test_first_action_ties_break_to_the_low_index(self):
        base = random_game(RngStream(9), horizon=2)
        # Make the return blind to the first robot action: exact tie.
        returns = {
            ((xr1, xr2), xh): base.returns[((0, xr2), xh)]
            for (xr1, xr2), xh in (key for key in base.returns)
        }
        green = {
            ((xr1,), xh): base.green[((0,), xh)] for (xr1,), xh in base.green
        }
        game = FiniteGame(2, base.robot_actions, base.human_actions,
                          base.human_start, green, returns)
        for kind in PLANNER_KINDS:
            assert v(kind, game)[1] == 0

    @pytest.mark.parametrize("seed", range(10))
    def test_positive_affine_returns_leave_argmaxes_alone(self, seed):
        base = random_game(RngStream(seed + 40), horizon=2, robot_actions=3)
        scaled = FiniteGame(
            base.horizon, base.robot_actions, base.human_actions,
            base.human_start, base.green,
            {k: 3.7 * val - 11.0 for k, val in base.returns.items()},
        )
        before = value_report(base).argmax
        after = value_report(scaled).argmax
        assert before == after


class TestTrueValues:
    def test_strict_gap_game_numbers(self):
        game = strict_gap_game(probe_cost=0.01)
        report = value_report(game)
        assert report.q_tables["hl"] == pytest.approx((0.0, -0.01))
        assert report.q_tables["cl"] == pytest.approx((0.0, 0.69))
        assert report.argmax["hl"] == 0
        assert report.argmax["cl"] == 1
        assert true_value_hl(game) == pytest.approx(0.0)
        assert report.v_cl == pytest.approx(0.69)
        assert report.v_cl - true_value_hl(game) > 0.5

    def test_probing_pays_even_without_probe_cost(self):
        game = strict_gap_game(probe_cost=0.0)
        assert true_value_hl(game) == pytest.approx(0.0)
        assert v("cl", game)[0] == pytest.approx(0.7)

    def test_robot_blind_green_closes_the_gap(self):
        game = robot_blind_game(17)
        assert true_value_hl(game) == pytest.approx(v("cl", game)[0], abs=1e-12)

    def test_true_value_nl_never_beats_rl(self):
        for seed in range(20):
            game = random_game(RngStream(seed + 300), horizon=2)
            assert true_value_nl(game) <= v("rl", game)[0] + 1e-12


class TestCheckOrderings:
    @pytest.mark.parametrize("seed", range(200))
    def test_random_two_step_games_never_violate(self, seed):
        game = random_game(RngStream(seed), horizon=2)
        assert check_orderings(game)["violations"] == 0

    @pytest.mark.parametrize("seed", range(30))
    def test_random_three_step_games_never_violate(self, seed):
        game = random_game(RngStream(seed + 2000), horizon=3)
        assert check_orderings(game)["violations"] == 0

    def test_turn_or_wait_margin_is_half(self):
        result = check_orderings(turn_or_wait_game())
        assert result["margins"]["jensen_nl_hl"] == pytest.approx(0.5)

    def test_fixed_human_sequence_has_zero_margins(self):
        green = {((xr,), (0,)): (0.0, 1.0) for xr in range(2)}
        returns = {
            ((xr1, xr2), (0, xh2)): float(xr1 - xr2 + xh2)
            for xr1 in range(2) for xr2 in range(2) for xh2 in range(2)
        }
        game = FiniteGame(2, (2, 2), (1, 2), (1.0,), green, returns)
        result = check_orderings(game)
        for margin in result["margins"].values():
            assert margin == pytest.approx(0.0, abs=1e-15)

    @settings(deadline=None, max_examples=60)
    @given(seed=st.integers(0, 100_000))
    def test_orderings_hold_for_arbitrary_seeds(self, seed):
        game = random_game(RngStream(seed), horizon=2, robot_actions=3,
                           human_actions=3)
        assert check_orderings(game)["violations"] == 0

    def test_report_values_match_tables(self):
        game = random_game(RngStream(77), horizon=2)
        report = value_report(game)
        assert report.v_rl == pytest.approx(max(report.q_tables["rl"]))
        assert report.v_cl == pytest.approx(max(report.q_tables["cl"]))
        assert report.v_nl <= report.v_rl + 1e-12
        assert report.v_hl_true <= report.v_cl + 1e-12
