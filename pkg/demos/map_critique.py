"""
Why mAP is the wrong scoreboard for attacks
===========================================

Two attacked outputs on the same image. One fabricates a crowd of
confident boxes away from the objects. The other wipes out every
detection. mAP gives both exactly 0. The confidence variation and the box
count tell them apart.

    python demos/map_critique.py
"""

import numpy as np

from hitm.detector import GroundTruth, RawDetections
from hitm.metrics import average_precision, mean_confidence_variation
from hitm.nms import nms

truth = GroundTruth([0, 1], [[0.3125, 0.3125, 0.3, 0.3], [0.6875, 0.6875, 0.25, 0.25]])

# Raw logits for the 128 candidates (8x8 cells, 2 anchors): column 4 is the
# confidence logit and columns 5-7 the class logits.
clean = np.zeros((128, 8))
clean[:, 4] = -4.0

fabricated = clean.copy()
for i in range(16):  # top rows of the grid, far from both objects
    fabricated[i, 4] = 6.0
    fabricated[i, 2:4] = -3.0
    fabricated[i, 5 + i % 3] = 3.0

vanished = clean.copy()
vanished[:, 4] = -9.0

raw_clean, raw_fab, raw_van = (RawDetections.from_logits(z) for z in (clean, fabricated, vanished))

for name, raw in (("fabrication", raw_fab), ("vanishing", raw_van)):
    boxes = nms(raw)
    m = average_precision([boxes], [truth], num_classes=3)[1]
    mcv = mean_confidence_variation(raw, raw_clean)
    print(f"{name:12s} mAP={m:.1f}  boxes={len(boxes):2d}  mean confidence variation={mcv:+.3f}")
