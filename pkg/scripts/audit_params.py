"""Print the calibration-parameter census of every variant at full width."""

import argparse

from recalnet.blocks import recal_weight_formula
from recalnet.model import PLACEMENTS, VARIANTS, ModelConfig, build_model, census

parser = argparse.ArgumentParser(description=__doc__)
parser.add_argument("--width-scale", type=int, default=1)
args = parser.parse_args()

totals = {}
for variant in VARIANTS:
    c = census(build_model(ModelConfig(variant=variant, width_scale=args.width_scale), init=False))
    totals[variant] = c
    print(f"{variant:>8}: calibration {c.calibration_total:>9,}  network {c.total_weights:>12,}")

recal = totals["recal"]
print("\nrecal per placement (census / closed form):")
for name, width in zip(PLACEMENTS, ModelConfig(width_scale=args.width_scale).placement_widths):
    print(f"  {name} (C={width}): {recal.per_placement[name]:>8,} / {recal_weight_formula(width):>8,}")
print(f"\nrecal - scse = {recal.calibration_total - totals['scse'].calibration_total:,}")
