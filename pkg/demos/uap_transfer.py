"""
One perturbation, many scene families
=====================================

Trains a universal perturbation on 20 frames of one family, then measures
mean box counts with and without it on held-out frames of all seven
families. Pass a family number to train on a different family.

    python demos/uap_transfer.py [family]
"""

import sys

from hitm import attack as atk
from hitm import detector as det
from hitm.experiments import uap_transfer

family = int(sys.argv[1]) if len(sys.argv) > 1 else 1
weights = det.load_weights(det.PINNED_WEIGHTS)
cfg = atk.AttackConfig(loss="pcb", epsilon=8 / 255, decay=0.98, iterations=100)
pert, series, rows = uap_transfer(weights, cfg, train_family=family)

print(f"UAP trained on family {family}: {len(series)} epochs, "
      f"final mean boxes on the training frames {series.num_boxes[-1]:.2f}")
print(f"\n{'family':<26}{'clean':>7}{'attacked':>10}{'gain':>7}")
for r in rows:
    print(f"{r.family:<26}{r.clean:>7.2f}{r.attacked:>10.2f}{r.gain:>6.2f}x")

# The ranking across families mostly follows how easy each target family is
# to fool: try a few training families and compare which row comes out on top.
