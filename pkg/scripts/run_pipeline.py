"""End-to-end experiment driver: scripted data -> flow training -> closed-loop
planner evaluation -> benchmark table.

Writes model checkpoint, training curve, per-episode metrics CSV, and a
summary JSON with the per-method aggregates into --out.

Usage:
  python3 scripts/run_pipeline.py --out runs/full
  python3 scripts/run_pipeline.py --out runs/quick --episodes-per-scenario 60 \
      --epochs 20 --eval-episodes 4
"""

import argparse
import json
import pathlib
import sys
import time

from flowplan import flow as flow_mod
from flowplan import simworld
from flowplan.core import HumanIntention, RngStream, Scenario


def aggregate(rows: list[dict]) -> dict:
    n = len(rows)
    if n == 0:
        return {}
    out = {
        "episodes": n,
        "RG": sum(r["RG"] for r in rows) / n,
        "RG_star": sum(r["RG_star"] for r in rows) / n,
        "near_collision": sum(r["near_collision"] for r in rows) / n,
    }
    for intention in HumanIntention:
        sub = [r for r in rows if r["intention"] == intention.value]
        if sub:
            out[f"RG_star[{intention.value}]"] = sum(r["RG_star"] for r in sub) / len(sub)
            out[f"near_collision[{intention.value}]"] = sum(r["near_collision"] for r in sub) / len(sub)
            out[f"episodes[{intention.value}]"] = len(sub)
    return out


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", default="runs/pipeline")
    parser.add_argument("--episodes-per-scenario", type=int, default=400)
    parser.add_argument("--epochs", type=int, default=80)
    parser.add_argument("--learning-rate", type=float, default=1e-3)
    parser.add_argument("--eval-episodes", type=int, default=30)
    parser.add_argument("--methods", default="cfo,joint,underconfident")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--model", default=None, help="reuse a trained checkpoint, skip training")
    args = parser.parse_args()

    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scenarios = list(Scenario)
    methods = args.methods.split(",")
    t_start = time.time()

    if args.model is None:
        t0 = time.time()
        records = []
        for i, scenario in enumerate(scenarios):
            config = simworld.scenario_config(scenario)
            records.extend(simworld.generate_dataset(config, args.episodes_per_scenario, seed=args.seed * 17 + i))
        print(f"[data] {len(records)} records in {time.time() - t0:.1f}s", flush=True)

        t0 = time.time()
        model = flow_mod.build_model(RngStream(args.seed).child("model"))
        curve = flow_mod.train(
            model,
            records,
            flow_mod.TrainConfig(epochs=args.epochs, learning_rate=args.learning_rate, seed=args.seed),
        )
        with open(out / "curve.csv", "w") as fh:
            fh.write("epoch,train_nll,val_nll\n")
            for row in curve:
                fh.write(f"{row.epoch},{row.train_nll:.6f},{row.val_nll:.6f}\n")
        flow_mod.save_model(out / "model.npz", model)
        print(
            f"[train] epochs={args.epochs} nll {curve[0].val_nll:.3f} -> {curve[-1].val_nll:.3f} "
            f"in {time.time() - t0:.1f}s",
            flush=True,
        )
    else:
        model = flow_mod.load_model(args.model)
        print(f"[train] loaded {args.model}", flush=True)

    rows = []
    witness: dict[str, list[float]] = {}
    for scenario in scenarios:
        config = simworld.scenario_config(scenario)
        for method in methods:
            t0 = time.time()
            for ep in range(args.eval_episodes):
                seed = args.seed * 100000 + 1000 * scenarios.index(scenario) + ep
                metrics = simworld.run_episode(method, model, config, seed=seed)
                intention = (
                    HumanIntention.YIELD
                    if RngStream(seed).child("intention").uniform() < config.p_yield
                    else HumanIntention.NO_YIELD
                )
                rows.append(simworld.metrics_row(method, scenario, seed, intention, metrics))
                if metrics.contingency_divergence is not None:
                    witness.setdefault(f"{method}/{scenario.value}", []).append(metrics.contingency_divergence)
            print(
                f"[eval] {method:>15s} {scenario.value:<10s} {args.eval_episodes} episodes "
                f"in {time.time() - t0:.1f}s",
                flush=True,
            )

    simworld.write_metrics_csv(str(out / "metrics.csv"), rows)

    summary: dict = {"wall_clock_s": round(time.time() - t_start, 1)}
    for method in methods:
        for scenario in scenarios:
            sub = [r for r in rows if r["method"] == method and r["scenario"] == scenario.value]
            summary[f"{method}/{scenario.value}"] = aggregate(sub)
    for key, values in witness.items():
        hits = sum(1 for v in values if v >= 0.5)
        summary[f"witness[{key}]"] = {"rate": hits / len(values), "median": sorted(values)[len(values) // 2]}
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)

    print(f"\n{'method':>15s} {'scenario':<10s} {'RG':>6s} {'RG*':>6s} {'NC':>6s}  extras")
    for method in methods:
        for scenario in scenarios:
            agg = summary[f"{method}/{scenario.value}"]
            extras = []
            if f"RG_star[{HumanIntention.YIELD.value}]" in agg:
                extras.append(f"RG*[Y]={agg['RG_star[Yield]']:.2f}")
            if f"near_collision[{HumanIntention.NO_YIELD.value}]" in agg:
                extras.append(f"NC[NY]={agg['near_collision[NoYield]']:.2f}")
            wkey = f"witness[{method}/{scenario.value}]"
            if wkey in summary:
                extras.append(f"witness={summary[wkey]['rate']:.2f}")
            print(
                f"{method:>15s} {scenario.value:<10s} {agg['RG']:6.2f} {agg['RG_star']:6.2f} "
                f"{agg['near_collision']:6.2f}  {' '.join(extras)}"
            )
    print(f"\n[total] {summary['wall_clock_s']:.1f}s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
