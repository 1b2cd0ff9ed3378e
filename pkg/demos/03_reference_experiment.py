"""
Single-stage continuation: FFT versus LAFT-URIEL
================================================

Inception on one shard of every language, then one continuation arm per
language on the second shard. Pass ``--full`` for the reference setting
(3 seeds, about three minutes); the default is a one-seed smoke run.
"""

import sys
from pathlib import Path

from cmlab.runner import ExperimentConfig, emit_artifacts, format_summary, reference_config, run_experiment

ROOT = Path(__file__).resolve().parents[1]

if "--full" in sys.argv:
    cfg = reference_config(trajectories=[], out_dir="runs/demo_reference")
else:
    cfg = ExperimentConfig.load(ROOT / "configs" / "smoke.json").replace(trajectories=[], out_dir="runs/demo_smoke")

result = run_experiment(cfg)
print(format_summary(result))

# the mean heatmap of each strategy: rows are continuation languages
for name, r in sorted(result.strategies.items()):
    m = r.mean_matrix
    print(f"\n{name}")
    print("      " + " ".join(f"{c:>7s}" for c in m.languages))
    for row, vals in zip(m.rows, m.values):
        print(f"{row:>5s} " + " ".join(f"{v:7.2f}" for v in vals))

paths = emit_artifacts(result, cfg.out_dir)
print(f"\n{len(paths)} files under {cfg.out_dir}")
