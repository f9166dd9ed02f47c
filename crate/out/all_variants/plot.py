#!/usr/bin/env python3
"""Moving-average reward per step, averaged over seeds, one line per variant.

Usage: python3 plot.py [window]   (run from anywhere; reads traces/ next to this file)
"""
import csv
import sys
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

HERE = Path(__file__).resolve().parent
WINDOW = int(sys.argv[1]) if len(sys.argv) > 1 else 50
VARIANTS = ["CBRQ", "CFOnly", "EpsilonGreedyQ", "GreedyQ", "HyQL"]


def moving_average(xs, w):
    out, acc = [], 0.0
    for i, x in enumerate(xs):
        acc += x
        if i >= w:
            acc -= xs[i - w]
        out.append(acc / min(i + 1, w))
    return out


curves = defaultdict(list)
for variant in VARIANTS:
    for path in sorted((HERE / "traces").glob(variant + "-*.csv")):
        with path.open() as f:
            rewards = [float(row["reward"]) for row in csv.DictReader(f)]
        curves[variant].append(moving_average(rewards, WINDOW))

fig, ax = plt.subplots(figsize=(8, 4.5))
for variant in VARIANTS:
    runs = curves[variant]
    if not runs:
        continue
    n = min(len(r) for r in runs)
    mean = [sum(r[i] for r in runs) / len(runs) for i in range(n)]
    ax.plot(range(1, n + 1), mean, label=f"{variant} ({len(runs)} seeds)")
ax.axvline(1000, color="grey", linestyle=":")
ax.set_xlabel("step")
ax.set_ylabel(f"reward, {WINDOW}-step moving average")
ax.set_ylim(0, 1)
ax.legend()
fig.tight_layout()
fig.savefig(HERE / "reward.png", dpi=150)
print("wrote", HERE / "reward.png")
