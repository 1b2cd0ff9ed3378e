"""
Trajectories through every language
===================================

High-to-low and low-to-high resource orders, continuing the same model
stage after stage. The worst-case stage is the one with the largest
average loss.
"""

import sys
from pathlib import Path

from cmlab.runner import H2L, L2H, ExperimentConfig, reference_config, run_trajectory

ROOT = Path(__file__).resolve().parents[1]
cfg = reference_config() if "--full" in sys.argv else ExperimentConfig.load(ROOT / "configs" / "smoke.json")

result = run_trajectory(cfg, orders=(H2L, L2H))
for key, t in sorted(result.trajectories.items()):
    losses = ", ".join(f"{x:.2f}" for x in t.mean_stage_losses)
    print(f"{key:16s} {' > '.join(t.order)}")
    print(f"{'':16s} stage losses [{losses}]  worst {t.mean_worst_loss:.2f}")
