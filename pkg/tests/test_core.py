"""Tests for domain types, signed distances, rng streams, and serialization."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowplan.core import (
    Box,
    EpisodeRecord,
    Goal,
    HalfPlane,
    HumanIntention,
    JointState,
    JointTrajectory,
    Observation,
    Position,
    RngStream,
    Scenario,
    deserialize_dataset,
    load_checkpoint,
    save_checkpoint,
    serialize_dataset,
    signed_distance,
)


def make_record(seed: int = 0, t: int = 2, a: int = 2, h_p: int = 2) -> EpisodeRecord:
    rng = RngStream(seed)
    past = tuple(JointState.from_array(rng.normal((a, 2))) for _ in range(h_p))
    future = JointTrajectory.from_array(rng.normal((t, a, 2)))
    obs = Observation(past=past, context=tuple(rng.normal(8)))
    return EpisodeRecord(
        observation=obs,
        future=future,
        scenario_id=Scenario.LEFT_TURN,
        human_intention=HumanIntention.YIELD,
        seed=seed,
    )


class TestSerialization:
    def test_single_record_round_trip(self):
        record = make_record(seed=3, t=2, a=2)
        blob = serialize_dataset([record])
        assert blob.count(b"\n") == 1
        back = deserialize_dataset(blob)
        assert len(back) == 1
        assert back[0] == record

    def test_many_record_round_trip(self):
        records = [make_record(seed=i, t=3, a=2, h_p=4) for i in range(7)]
        assert deserialize_dataset(serialize_dataset(records)) == records

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError, match="empty dataset"):
            serialize_dataset([])

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError, match="non-finite value"):
            Position(float("nan"), 0.0)

    def test_mixed_horizons_rejected(self):
        blob = serialize_dataset([make_record(t=2)]) + serialize_dataset([make_record(t=3)])
        with pytest.raises(ValueError):
            deserialize_dataset(blob)


class TestSignedDistance:
    def test_half_plane_inside(self):
        hp = HalfPlane(normal=(1.0, 0.0), offset=0.0)
        assert signed_distance(hp, Position(2.0, 5.0)) == pytest.approx(-2.0)

    def test_half_plane_outside(self):
        hp = HalfPlane(normal=(1.0, 0.0), offset=0.0)
        assert signed_distance(hp, Position(-3.0, 0.0)) == pytest.approx(3.0)

    def test_half_plane_unnormalized(self):
        hp = HalfPlane(normal=(2.0, 0.0), offset=2.0)
        # same geometry as {x >= 1}
        assert signed_distance(hp, Position(4.0, -7.0)) == pytest.approx(-3.0)

    def test_box_center(self):
        box = Box(lo=(0.0, 0.0), hi=(1.0, 1.0))
        assert signed_distance(box, Position(0.5, 0.5)) == pytest.approx(-0.5)

    def test_box_against_boundary_brute_force(self):
        box = Box(lo=(-1.0, 0.5), hi=(2.0, 3.0))
        ts = np.linspace(0.0, 1.0, 4001)
        edges = [
            np.stack([box.lo[0] + ts * (box.hi[0] - box.lo[0]), np.full_like(ts, box.lo[1])], axis=1),
            np.stack([box.lo[0] + ts * (box.hi[0] - box.lo[0]), np.full_like(ts, box.hi[1])], axis=1),
            np.stack([np.full_like(ts, box.lo[0]), box.lo[1] + ts * (box.hi[1] - box.lo[1])], axis=1),
            np.stack([np.full_like(ts, box.hi[0]), box.lo[1] + ts * (box.hi[1] - box.lo[1])], axis=1),
        ]
        boundary = np.concatenate(edges)
        rng = RngStream(11)
        for _ in range(50):
            p = rng.uniform(-4.0, 6.0, 2)
            dist = float(np.min(np.linalg.norm(boundary - p, axis=1)))
            inside = box.lo[0] <= p[0] <= box.hi[0] and box.lo[1] <= p[1] <= box.hi[1]
            want = -dist if inside else dist
            assert signed_distance(box, p) == pytest.approx(want, abs=2e-3)

    def test_outside_feasible_box_flips_sign(self):
        obstacle = Box(lo=(0.0, 0.0), hi=(1.0, 1.0), feasible_inside=False)
        assert signed_distance(obstacle, Position(0.5, 0.5)) == pytest.approx(0.5)
        assert signed_distance(obstacle, Position(3.0, 0.5)) == pytest.approx(-2.0)

    def test_zero_on_boundary(self):
        box = Box(lo=(0.0, 0.0), hi=(2.0, 2.0))
        assert signed_distance(box, Position(0.0, 1.0)) == pytest.approx(0.0, abs=1e-12)
        hp = HalfPlane(normal=(0.0, 1.0), offset=2.0)
        assert signed_distance(hp, Position(5.0, 2.0)) == pytest.approx(0.0, abs=1e-12)

    @given(st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=60, deadline=None)
    def test_lipschitz(self, seed):
        rng = RngStream(seed)
        constraints = [
            HalfPlane(normal=(float(rng.normal()) + 1e-3, float(rng.normal())), offset=float(rng.normal())),
            Box(lo=(-1.0, -2.0), hi=(1.5, 0.5)),
            Box(lo=(0.0, 0.0), hi=(3.0, 1.0), feasible_inside=False),
        ]
        p = rng.uniform(-5.0, 5.0, 2)
        q = rng.uniform(-5.0, 5.0, 2)
        gap = float(np.linalg.norm(p - q))
        for c in constraints:
            assert abs(signed_distance(c, p) - signed_distance(c, q)) <= gap + 1e-9


class TestRngStream:
    def test_equal_seeds_identical(self):
        a = RngStream(42)
        b = RngStream(42)
        assert np.array_equal(a.normal(100), b.normal(100))
        assert a.integers(0, 1_000_000) == b.integers(0, 1_000_000)

    def test_known_first_draw(self):
        # Pinned so a platform or numpy change that breaks reproducibility fails loudly.
        assert RngStream(0).normal() == pytest.approx(0.1257302210933933, abs=1e-15)

    def test_children_independent_of_draw_order(self):
        a = RngStream(7)
        a.normal(50)
        b = RngStream(7)
        assert np.array_equal(a.child("x").normal(10), b.child("x").normal(10))

    def test_children_distinct(self):
        root = RngStream(7)
        assert root.child("x").seed != root.child("y").seed


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = RngStream(5)
        params = {"w0": rng.normal((4, 3)), "b0": rng.normal(3), "scalar": np.array(2.5)}
        hyper = {"H_p": 4, "T": 12, "A": 2, "C": 8, "hidden": [64, 64], "dt": 0.4}
        path = tmp_path / "model.json"
        save_checkpoint(path, hyper, params)
        hyper2, params2 = load_checkpoint(path)
        assert hyper2 == hyper
        assert set(params2) == set(params)
        for name in params:
            assert np.array_equal(params2[name], np.asarray(params[name]))

    def test_non_finite_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="non-finite value"):
            save_checkpoint(tmp_path / "bad.json", {}, {"w": np.array([1.0, float("inf")])})


class TestGoal:
    def test_defaults(self):
        g = Goal(destination=Position(1.0, 2.0))
        assert g.constraints == ()
        assert g.min_separation is None
