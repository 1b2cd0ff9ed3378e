"""
Adapter bottleneck width
========================

LAFT-URIEL with narrower adapters, on the smoke configuration.
Pass a wider set of widths or the reference config to explore further.
"""

from pathlib import Path

from cmlab.runner import ExperimentConfig, bottleneck_ablation

ROOT = Path(__file__).resolve().parents[1]
cfg = ExperimentConfig.load(ROOT / "configs" / "smoke.json")

for b_dim, r in bottleneck_ablation(cfg, dims=(16, 8, 4)).items():
    s = r.report
    print(f"b_dim {b_dim:2d}  AvgPercentLoss {s.avg_percent_loss:.3f}  NumImprovedLangs {s.num_improved_langs:.2f}  "
          f"dev {r.mean_baseline('dev'):.2f}")
