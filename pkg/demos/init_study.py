"""
Zero versus uniform initialization
==================================

Runs the same image-specific attack once from a zero perturbation and ten
times from uniform noise in the budget, all with identical budgets.

    python demos/init_study.py
"""

from hitm import attack as atk
from hitm import detector as det
from hitm.experiments import format_init_table, init_study
from hitm.scenes import generate

weights = det.load_weights(det.PINNED_WEIGHTS)
image = generate(1, 1, 91)[0].image
rows = init_study(weights, image, atk.AttackConfig(iterations=100, decay=0.98), runs=10)
print(format_init_table(rows))

zero = rows[0]
better = [r.label for r in rows[1:] if r.final_boxes > zero.final_boxes]
print(f"\n{len(better)} of 10 uniform runs finish with more boxes than zero init: {better}")
