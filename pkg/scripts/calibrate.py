"""Print scripted-world timings and distances for every scenario, intention,
and expert branch.  Used to sanity-check the scenario geometry: the risky
branch must actually produce near-collisions against non-yielders, the
contingent branch must stay safe, and the cautious wait-it-out timings must
overshoot the contingent expert's time by a comfortable margin.

Usage: python3 scripts/calibrate.py [--episodes-per-cell N]
"""

import argparse
import math
import sys

import numpy as np

from flowplan.core import HumanIntention, RngStream, Scenario
from flowplan.simworld import (
    ControllerGains,
    ExpertBranch,
    _inside_box,
    _min_distance,
    _simulate_scripted,
    expert_time,
    scenario_config,
)

BRANCHES = {
    "no-enter": ExpertBranch(enter=False),
    "risky": ExpertBranch(enter=True, complete="always"),
    "contingent": ExpertBranch(enter=True, complete="contingent"),
    "never": ExpertBranch(enter=True, complete="never"),
}


def steps_to_goal(config, log) -> int | None:
    for i, s in enumerate(log):
        if _inside_box(config.goal_region, s.positions[0]):
            return i
    return None


def human_min_speed_near_conflict(config, log) -> float:
    """Min human speed while within 6 m of its stop point (crude, from
    position differences)."""
    worst = math.inf
    stop = np.array(
        [
            config.human_route[0].x + (config.human_route[1].x - config.human_route[0].x) * 0,
            0.0,
        ]
    )
    from flowplan.simworld import _route_point

    stop = np.array(_route_point(config.human_route, config.human_stop_s))
    for i in range(1, len(log)):
        h0, h1 = log[i - 1].to_array()[1], log[i].to_array()[1]
        if np.linalg.norm(h1 - stop) < 6.0:
            worst = min(worst, float(np.linalg.norm(h1 - h0)) / config.dt)
    return worst


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--episodes-per-cell", type=int, default=5)
    args = parser.parse_args()

    for scenario in Scenario:
        config = scenario_config(scenario)
        print(f"\n=== {scenario.value} (horizon {config.horizon_steps} steps) ===")
        for intention in HumanIntention:
            t_star = expert_time(config, intention)
            print(f"  expert_time[{intention.value}] = {t_star} (budget {t_star + 8})")
        for name, branch in BRANCHES.items():
            for intention in HumanIntention:
                goals, dists, hspeeds = [], [], []
                for ep in range(args.episodes_per_cell):
                    rng = RngStream(1000 + ep).child("sim")
                    log = _simulate_scripted(config, intention, branch, rng, ControllerGains())
                    g = steps_to_goal(config, log)
                    goals.append(g if g is not None else -1)
                    dists.append(_min_distance(log))
                    hspeeds.append(human_min_speed_near_conflict(config, log))
                print(
                    f"  {name:10s} {intention.value:7s}  steps={goals}  "
                    f"min_dist={min(dists):5.2f}  h_speed_near_stop={min(hspeeds):5.2f}"
                )
    return 0


if __name__ == "__main__":
    sys.exit(main())
