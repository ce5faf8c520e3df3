"""Seeded harnesses behind the headline experiments: attack efficacy, the
effect of step-size decay, UAP transfer across scene families and the
initialization study. Each returns plain numbers so callers can print,
pin or plot them."""

from dataclasses import dataclass, replace

import numpy as np

from . import attack as atk
from . import detector as det
from .metrics import mean_confidence_variation, number_of_boxes
from .nms import NMSConfig
from .scenes import FAMILY_IDS, generate

EFFICACY_SEED = 2024
UAP_TRAIN_SEED = 500
UAP_HELDOUT_SEED = 900


@dataclass
class EfficacyResult:
    mode: str
    clean_boxes: list
    final_boxes: list

    @property
    def successes(self):
        if self.mode == "fabrication":
            return [f > c for c, f in zip(self.clean_boxes, self.final_boxes)]
        return [f == 0 for f in self.final_boxes]

    @property
    def rate(self):
        return float(np.mean(self.successes))


def attack_efficacy(weights, cfg, scenes, nms_config=NMSConfig()):
    """Image-specific attack on every scene; records clean and final counts."""
    clean, final = [], []
    for s in scenes:
        clean.append(number_of_boxes(det.forward(weights, s.image), nms_config))
        _, series = atk.attack_image(s.image, weights, cfg, nms_config)
        final.append(series.num_boxes[-1])
    return EfficacyResult(cfg.mode, clean, final)


def efficacy_scenes(count=50, family=1, seed=EFFICACY_SEED):
    return generate(family, count, seed)


def decay_effect(weights, scenes, decays=(0.90, 1.00), base=None, nms_config=NMSConfig()):
    """Mean final box count per decay factor, same budget otherwise."""
    base = base or atk.AttackConfig(iterations=100)
    out = {}
    for k in decays:
        cfg = replace(base, decay=k)
        finals = [atk.attack_image(s.image, weights, cfg, nms_config)[1].num_boxes[-1] for s in scenes]
        out[k] = float(np.mean(finals))
    return out


@dataclass
class TransferRow:
    family: str
    clean: float
    attacked: float

    @property
    def gain(self):
        """Attacked over clean mean box count (inf when clean is 0)."""
        if self.clean == 0:
            return float("inf") if self.attacked > 0 else 1.0
        return self.attacked / self.clean


def uap_transfer(weights, cfg, train_family=1, train_count=20, eval_count=20,
                 nms_config=NMSConfig()):
    """Train a UAP on one family and measure mean box counts, clean and
    attacked, on held-out frames of every built-in family.

    Returns ``(perturbation, series, rows)`` with one row per family.
    """
    train = [s.image for s in generate(train_family, train_count, UAP_TRAIN_SEED)]
    pert, series = atk.attack_universal(train, weights, cfg, nms_config)
    rows = []
    for fam in FAMILY_IDS:
        held = generate(fam, eval_count, UAP_HELDOUT_SEED)
        clean = [number_of_boxes(det.forward(weights, s.image), nms_config) for s in held]
        adv = [number_of_boxes(det.forward(weights, pert.apply(s.image)), nms_config) for s in held]
        rows.append(TransferRow(fam, float(np.mean(clean)), float(np.mean(adv))))
    return pert, series, rows


@dataclass
class InitRun:
    label: str
    final_mcv: float
    final_boxes: int
    mcv_vs_clean: float


def init_study(weights, image, cfg, runs=10, nms_config=NMSConfig()):
    """One zero-init run plus ``runs`` uniform-init runs (seeds 0..runs-1).

    ``final_mcv`` is the last per-step confidence variation;
    ``mcv_vs_clean`` compares the final attacked output with the clean one.
    """
    clean = det.forward(weights, image)
    rows = []
    configs = [("zero", replace(cfg, init="zero"))]
    configs += [(f"uniform seed {i}", replace(cfg, init="uniform", seed=i)) for i in range(runs)]
    for label, c in configs:
        pert, series = atk.attack_image(image, weights, c, nms_config)
        final = det.forward(weights, pert.apply(image))
        rows.append(InitRun(label, series.mean_conf_variation[-1], series.num_boxes[-1],
                            mean_confidence_variation(final, clean)))
    return rows


def format_init_table(rows):
    lines = [f"{'init':<16}{'final mcv':>12}{'boxes':>7}{'mcv vs clean':>14}"]
    for r in rows:
        lines.append(f"{r.label:<16}{r.final_mcv:>12.4f}{r.final_boxes:>7d}{r.mcv_vs_clean:>14.4f}")
    return "\n".join(lines)
