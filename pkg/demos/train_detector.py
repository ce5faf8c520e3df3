"""
Training the micro detector
===========================

Rebuilds the weights shipped in ``hitm/data/micro_detector.pcbw``.

The detector trains on 200 scenes mixed from the seven built-in families.
Training runs in rounds of 25 epochs. After each round the checkpoint is
scored by mAP on 70 held-out scenes, and the best round is kept. The
selection looks only at detection quality, never at how well any attack
does. Runs in a few minutes on one CPU core.

    python demos/train_detector.py [out.pcbw]
"""

import sys

import numpy as np

from hitm import detector as det
from hitm.metrics import average_precision
from hitm.nms import nms
from hitm.scenes import FAMILY_IDS, generate

ROUNDS = 4
EPOCHS_PER_ROUND = 25
LR = 1e-2

# 200 training scenes: 29 per family (seeds 101..107), truncated
train = []
for i, fam in enumerate(FAMILY_IDS, start=1):
    train += generate(fam, 200 // len(FAMILY_IDS) + 1, 100 + i)
train = [(s.image, s.truth) for s in train[:200]]

# 70 validation scenes: 10 per family, seeds disjoint from training
val = []
for i, fam in enumerate(FAMILY_IDS, start=1):
    val += generate(fam, 10, 999 + i)


def validation_map(weights):
    dets = [nms(det.forward(weights, s.image)) for s in val]
    return average_precision(dets, [s.truth for s in val], num_classes=3)[1]


weights = det.init_weights(0)
best = (-np.inf, None, None)
for r in range(ROUNDS):
    # each round reshuffles with its own seed
    weights, history = det.train(weights, train, EPOCHS_PER_ROUND, LR, seed=r)
    score = validation_map(weights)
    epochs = EPOCHS_PER_ROUND * (r + 1)
    print(f"epochs {epochs:3d}  loss {history[-1]:.3f}  val mAP {score:.3f}")
    if score > best[0]:
        best = (score, epochs, weights)

print(f"keeping epoch {best[1]} (val mAP {best[0]:.3f})")
out = sys.argv[1] if len(sys.argv) > 1 else "micro_detector.pcbw"
det.save_weights(best[2], out)
print("wrote", out)
