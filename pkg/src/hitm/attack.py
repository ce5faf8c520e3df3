"""PCB attack engine: adversarial losses, the signed-gradient PGD step with
learning-rate decay, and the image-specific and universal attack loops.

All perturbation magnitudes are in normalized ``[0, 1]`` pixel units, so an
8-bit budget of 8 maps to ``epsilon = 8 / 255``.
"""

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import detector as det
from . import numerics as nx
from ._binfmt import FormatError, read_blob, write_blob
from .metrics import MetricSeries, mean_confidence_variation, number_of_boxes, relative_box_variation
from .nms import NMSConfig

LOSSES = ("pc", "pcb", "tog")
MODES = ("fabrication", "vanishing")
INITS = ("zero", "uniform")
DENOM_GUARD = 1e-8

PERTURBATION_MAGIC = b"PCBUAP01"
PERTURBATION_VERSION = 1

_MODE_ALIASES = {"fab": "fabrication", "fabrication": "fabrication",
                 "vanish": "vanishing", "vanishing": "vanishing"}


class AttackError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    loss: str = "pcb"
    mode: str = "fabrication"
    alpha: float = 8 / 255
    decay: float = 0.98
    iterations: int = 100
    epsilon: float = 8 / 255
    init: str = "zero"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "loss", str(self.loss).lower())
        mode = _MODE_ALIASES.get(str(self.mode).lower())
        if mode is None:
            raise ValueError(f"mode must be one of {MODES} (or fab/vanish), got {self.mode!r}")
        object.__setattr__(self, "mode", mode)
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.init not in INITS:
            raise ValueError(f"init must be one of {INITS}, got {self.init!r}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if not 0 < self.decay <= 1:
            raise ValueError(f"decay must be in (0, 1], got {self.decay}")
        if int(self.iterations) != self.iterations or self.iterations < 1:
            raise ValueError(f"iterations must be an int >= 1, got {self.iterations}")

    @property
    def direction(self):
        """+1 to ascend the loss, -1 to descend it.

        The TOG loss is already negated and its target encodes the mode, so
        it is always ascended.
        """
        if self.loss == "tog" or self.mode == "fabrication":
            return 1.0
        return -1.0


@dataclass
class Perturbation:
    delta: np.ndarray
    config: AttackConfig = field(default_factory=AttackConfig)
    iterations: int = 0

    def __post_init__(self):
        self.delta = nx.as_tensor(self.delta)

    def apply(self, image):
        """``clamp(image + delta, 0, 1)``."""
        return np.clip(image + self.delta, 0.0, 1.0)


def init_perturbation(cfg, shape=det.IMAGE_SHAPE):
    if cfg.init == "zero":
        delta = np.zeros(shape)
    else:
        delta = np.random.default_rng(cfg.seed).uniform(-cfg.epsilon, cfg.epsilon, size=shape)
    return Perturbation(delta, cfg, 0)


# ------------------------------------------------------------------ losses

def _pc_parts(raw):
    sc = nx.sigmoid_forward(raw.logits[:, 4])
    sp = nx.sigmoid_forward(raw.logits[:, 5:])
    return sc, sp, sp.sum(axis=1)


def loss_pc(raw):
    """Sum over candidates of sig(conf logit) * sum_k sig(class logit k)."""
    sc, sp, sps = _pc_parts(raw)
    value = float(np.sum(sc * sps))
    grad = np.zeros_like(raw.logits)
    grad[:, 4] = sc * (1.0 - sc) * sps
    grad[:, 5:] = sc[:, None] * sp * (1.0 - sp)
    return value, grad


def loss_pcb(raw):
    """The PC objective divided by ``sum_i (sig(t_w) * sig(t_h))^2``.

    The denominator is floored at ``DENOM_GUARD``. Maximizing it favors many
    small boxes.
    """
    num, gnum = loss_pc(raw)
    sw = nx.sigmoid_forward(raw.logits[:, 2])
    sh = nx.sigmoid_forward(raw.logits[:, 3])
    area = sw * sh
    den_raw = float(np.sum(area * area))
    den = max(DENOM_GUARD, den_raw)
    value = num / den
    grad = gnum / den
    if den_raw > DENOM_GUARD:
        scale = -num / (den * den) * 2.0 * area
        grad[:, 2] += scale * sh * sw * (1.0 - sw)
        grad[:, 3] += scale * sw * sh * (1.0 - sh)
    return value, grad


@dataclass
class AdversarialTarget:
    """Desired outputs for the TOG-style loss.

    ``boxes`` holds the targets in the loss' sigmoid space, i.e. the desired
    ``(sig(t_x), sig(t_y), sig(t_w), sig(t_h))`` per candidate.
    """

    positive: np.ndarray
    classes: np.ndarray
    boxes: np.ndarray

    def __post_init__(self):
        n = len(self.positive)
        if self.classes.shape != (n,) or self.boxes.shape != (n, 4):
            raise ValueError("target arrays must all cover the same N candidates")


def make_tog_target(raw, mode):
    """Fabrication: every candidate is an object of its current top class at
    its current box. Vanishing: no candidate is an object."""
    mode = _MODE_ALIASES[mode]
    n = raw.num_candidates
    boxes = nx.sigmoid_forward(raw.logits[:, :4])
    if mode == "fabrication":
        return AdversarialTarget(np.ones(n, dtype=bool), np.argmax(raw.logits[:, 5:], axis=1), boxes)
    return AdversarialTarget(np.zeros(n, dtype=bool), np.zeros(n, dtype=np.int64), boxes)


def loss_tog(raw, target):
    """Negated detector training loss against ``target``.

    Ascending this value drives the outputs toward the target.
    """
    if len(target.positive) != raw.num_candidates:
        raise ValueError("target does not match the number of candidates")
    terms, grad = det.yolo_loss_terms(raw.logits, target.positive, target.boxes, target.classes)
    return -float(sum(terms)), -grad


def adversarial_loss(raw, cfg, target=None):
    if cfg.loss == "pc":
        return loss_pc(raw)
    if cfg.loss == "pcb":
        return loss_pcb(raw)
    if target is None:
        raise ValueError("the TOG loss needs an AdversarialTarget")
    return loss_tog(raw, target)


# -------------------------------------------------------------------- step

def _evaluate(weights, x_adv, cfg, target):
    raw, cache = det.forward_with_cache(weights, x_adv)
    loss, lgrad = adversarial_loss(raw, cfg, target)
    grad = det.backward_from_cache(weights, cache, lgrad)
    return raw, loss, grad


def _apply_step(delta, grad, alpha, cfg):
    if not np.all(np.isfinite(grad)):
        raise AttackError("non-finite input gradient; aborting the attack")
    delta = delta + cfg.direction * alpha * np.sign(grad)
    delta = np.clip(delta, -1.0, 1.0)
    return np.clip(delta, -cfg.epsilon, cfg.epsilon)


def pgd_step(pert, x, weights, cfg, alpha_t, target=None):
    """One signed-gradient step at ``x' = clamp(x + delta)`` followed by the
    unit clip and the l-inf projection. Returns a new Perturbation."""
    if not alpha_t > 0:
        raise ValueError(f"step size must be > 0, got {alpha_t}")
    _, _, grad = _evaluate(weights, pert.apply(x), cfg, target)
    return Perturbation(_apply_step(pert.delta, grad, alpha_t, cfg), cfg, pert.iterations + 1)


# ------------------------------------------------------------------- loops

def attack_image(x, weights, cfg, nms_config=NMSConfig(), callback=None, init=None):
    """Image-specific attack: ``cfg.iterations`` PGD steps on one image, the
    step size multiplied by ``cfg.decay`` after each step.

    ``callback(t, perturbation, step_size)`` runs after every step.
    Returns ``(Perturbation, MetricSeries)``.
    """
    x = nx.as_tensor(x)
    pert = init if init is not None else init_perturbation(cfg, x.shape)
    x_adv = pert.apply(x)
    target = None
    if cfg.loss == "tog":
        target = make_tog_target(det.forward(weights, x_adv), cfg.mode)
    raw_prev, loss, grad = _evaluate(weights, x_adv, cfg, target)
    series = MetricSeries()
    alpha = cfg.alpha
    for t in range(1, cfg.iterations + 1):
        pert = Perturbation(_apply_step(pert.delta, grad, alpha, cfg), cfg, pert.iterations + 1)
        raw, loss, grad = _evaluate(weights, pert.apply(x), cfg, target)
        series.append(mean_confidence_variation(raw, raw_prev),
                      number_of_boxes(raw, nms_config),
                      relative_box_variation(raw, raw_prev, nms_config),
                      loss, alpha)
        if callback is not None:
            callback(t, pert, alpha)
        raw_prev = raw
        alpha *= cfg.decay
    return pert, series


def attack_universal(images, weights, cfg, nms_config=NMSConfig(), callback=None, init=None):
    """Image-agnostic attack: each epoch takes one PGD step per image in
    input order at a fixed step size, then decays the step size once.

    Metrics per epoch are averages over ``images`` of the per-image metrics
    between this epoch's and the previous epoch's perturbation.
    ``callback(epoch, image_index, perturbation, step_size)`` runs after
    every inner step.
    """
    images = [nx.as_tensor(x) for x in images]
    if not images:
        raise ValueError("need at least one image")
    pert = init if init is not None else init_perturbation(cfg, images[0].shape)
    raws = [det.forward(weights, pert.apply(x)) for x in images]
    targets = [make_tog_target(r, cfg.mode) if cfg.loss == "tog" else None for r in raws]
    series = MetricSeries()
    alpha = cfg.alpha
    for epoch in range(1, cfg.iterations + 1):
        for j, x in enumerate(images):
            pert = pgd_step(pert, x, weights, cfg, alpha, targets[j])
            if callback is not None:
                callback(epoch, j, pert, alpha)
        mcv = boxes = rbv = loss = 0.0
        new_raws = []
        for j, x in enumerate(images):
            raw = det.forward(weights, pert.apply(x))
            mcv += mean_confidence_variation(raw, raws[j])
            boxes += number_of_boxes(raw, nms_config)
            rbv += relative_box_variation(raw, raws[j], nms_config)
            loss += adversarial_loss(raw, cfg, targets[j])[0]
            new_raws.append(raw)
        m = len(images)
        series.append(mcv / m, boxes / m, rbv / m, loss / m, alpha)
        raws = new_raws
        alpha *= cfg.decay
    return pert, series


# ------------------------------------------------------------ file format

def save_perturbation(pert, path):
    cfg = pert.config
    header = {
        "version": PERTURBATION_VERSION,
        "shape": list(pert.delta.shape),
        "epsilon": cfg.epsilon,
        "decay": cfg.decay,
        "alpha0": cfg.alpha,
        "iterations": cfg.iterations,
        "completed": pert.iterations,
        "loss": cfg.loss,
        "mode": cfg.mode,
        "init": cfg.init,
        "seed": cfg.seed,
    }
    write_blob(path, PERTURBATION_MAGIC, header, [pert.delta])


def load_perturbation(path):
    header, payload = read_blob(path, PERTURBATION_MAGIC)
    if header.get("version") != PERTURBATION_VERSION:
        raise FormatError(f"{path}: unsupported version {header.get('version')}")
    shape = tuple(header["shape"])
    if payload.size != int(np.prod(shape)):
        raise FormatError(f"{path}: payload has {payload.size} floats, shape {shape} needs {int(np.prod(shape))}")
    cfg = AttackConfig(loss=header["loss"], mode=header["mode"], alpha=header["alpha0"],
                       decay=header["decay"], iterations=header["iterations"],
                       epsilon=header["epsilon"], init=header.get("init", "zero"),
                       seed=header.get("seed", 0))
    delta = payload.reshape(shape)
    if np.max(np.abs(delta), initial=0.0) > cfg.epsilon:
        raise FormatError(f"{path}: delta exceeds its epsilon {cfg.epsilon}")
    return Perturbation(delta, cfg, header.get("completed", 0))


def config_dict(cfg):
    return asdict(cfg)


def with_overrides(cfg, **kw):
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
