"""
Man in the middle of a frame stream
===================================

Wires source, injector and sink together over OS pipes in one process.
First the injector passes frames through untouched, then it runs the
online attack (one gradient step per frame) and the sink counts boxes.

The same roles run as separate processes from the command line:

    hitm stream source --scenes frames/ \\
      | hitm stream inject --online --weights W.pcbw \\
      | hitm stream sink --weights W.pcbw

    python demos/stream_demo.py
"""

import numpy as np

from hitm import attack as atk
from hitm import detector as det
from hitm import stream as st
from hitm.scenes import generate

weights = det.load_weights(det.PINNED_WEIGHTS)
frames = [s.image for s in generate(1, 60, 7)]

_, clean = st.run_pipeline(frames, weights, delta=np.zeros((3, 64, 64)))
print("identity:", clean.summary())

online = st.OnlineAttacker(weights, atk.AttackConfig(loss="pcb", decay=1.0))
stats, attacked = st.run_pipeline(frames, weights, online=online)
print("online:  ", attacked.summary())
print(f"max |delta| injected: {stats.max_abs_delta * 255:.1f}/255")

print("\nframe  clean boxes  attacked boxes")
for a, b in list(zip(clean.frames, attacked.frames))[::6]:
    print(f"{a.index:5d}  {a.num_boxes:11d}  {b.num_boxes:14d}")
