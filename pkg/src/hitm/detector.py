"""Micro one-stage detector with a YOLO-style grid head.

Architecture (fixed)::

    3x64x64 -> conv 8 3x3 pad1 + leaky(0.1) -> maxpool2
            -> conv 16 3x3 pad1 + leaky     -> maxpool2
            -> conv 32 3x3 pad1 + leaky     -> maxpool2
            -> conv A*(5+K) 1x1             -> S x S grid, A anchors

Candidate ``i`` lives in grid cell ``i // A`` (row-major over the grid) and
uses anchor ``i % A``. Each candidate carries raw logits
``(t_x, t_y, t_w, t_h, t_c, t_p[0..K))`` and decodes to a box in image
fractions with ``b_x = (col + sig(t_x)) / S``, ``b_y = (row + sig(t_y)) / S``,
``b_w = sig(t_w)``, ``b_h = sig(t_h)``.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from ._binfmt import FormatError, read_blob, write_blob

IMAGE_SHAPE = (3, 64, 64)
GRID = 8
ANCHORS_PER_CELL = 2
NUM_CLASSES = 3
ANCHORS = ((0.2, 0.2), (0.5, 0.5))
LEAKY_SLOPE = 0.1
LAMBDA_COORD = 5.0
LAMBDA_NOOBJ = 0.5

WEIGHTS_MAGIC = b"PCBWGT01"
WEIGHTS_VERSION = 1

# Trained weights shipped with the package; see demos/train_detector.py.
PINNED_WEIGHTS = os.path.join(os.path.dirname(__file__), "data", "micro_detector.pcbw")

# (name, out channels, kernel size, pad); input channels follow the chain.
_CONV_LAYOUT = (("conv1", 8, 3, 1), ("conv2", 16, 3, 1), ("conv3", 32, 3, 1))


class WeightFileError(FormatError):
    pass


def layer_shapes(num_classes=NUM_CLASSES, anchors_per_cell=ANCHORS_PER_CELL):
    """``[(name, kernel_shape, bias_shape), ...]`` in declaration order."""
    shapes = []
    c_in = IMAGE_SHAPE[0]
    for name, c_out, k, _ in _CONV_LAYOUT:
        shapes.append((name, (c_out, c_in, k, k), (c_out,)))
        c_in = c_out
    head = anchors_per_cell * (5 + num_classes)
    shapes.append(("head", (head, c_in, 1, 1), (head,)))
    return shapes


@dataclass(frozen=True)
class DetectorWeights:
    """Per-layer ``(kernel, bias)`` pairs plus grid metadata."""

    layers: tuple
    num_classes: int = NUM_CLASSES
    grid: int = GRID
    anchors: tuple = ANCHORS

    def __post_init__(self):
        expected = layer_shapes(self.num_classes, len(self.anchors))
        if len(self.layers) != len(expected):
            raise ValueError(f"expected {len(expected)} layers, got {len(self.layers)}")
        for (name, ks, bs), (k, b) in zip(expected, self.layers):
            if k.shape != ks or b.shape != bs:
                raise ValueError(
                    f"layer {name}: got kernel {k.shape} bias {b.shape}, expected {ks} {bs}")
        if self.grid != IMAGE_SHAPE[1] // 8:
            raise ValueError(f"grid size {self.grid} inconsistent with three 2x pools on 64x64")

    @property
    def anchors_per_cell(self):
        return len(self.anchors)

    @property
    def num_candidates(self):
        return self.grid * self.grid * self.anchors_per_cell

    def copy(self):
        return DetectorWeights(tuple((k.copy(), b.copy()) for k, b in self.layers),
                               self.num_classes, self.grid, self.anchors)


def init_weights(seed=0, num_classes=NUM_CLASSES):
    """He-uniform kernels, zero biases."""
    rng = np.random.default_rng(seed)
    layers = []
    for _, ks, bs in layer_shapes(num_classes):
        fan_in = ks[1] * ks[2] * ks[3]
        lim = np.sqrt(6.0 / fan_in)
        layers.append((rng.uniform(-lim, lim, size=ks), np.zeros(bs)))
    return DetectorWeights(tuple(layers), num_classes)


def zero_weights(num_classes=NUM_CLASSES):
    return DetectorWeights(
        tuple((np.zeros(ks), np.zeros(bs)) for _, ks, bs in layer_shapes(num_classes)),
        num_classes)


@dataclass
class GroundTruth:
    """Boxes in center format ``(cx, cy, w, h)`` as image fractions."""

    classes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))

    def __post_init__(self):
        self.classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        if len(self.classes) != len(self.boxes):
            raise ValueError("classes and boxes differ in length")
        if np.any(self.boxes < 0) or np.any(self.boxes > 1):
            raise ValueError("ground-truth boxes must lie within [0, 1]")

    def __len__(self):
        return len(self.classes)

    def validate(self, num_classes):
        if np.any((self.classes < 0) | (self.classes >= num_classes)):
            raise ValueError(f"class ids must be in [0, {num_classes})")

    def to_json(self):
        return [{"class": int(c), "box": [float(v) for v in b]}
                for c, b in zip(self.classes, self.boxes)]

    @classmethod
    def from_json(cls, objs):
        if not objs:
            return cls()
        return cls([o["class"] for o in objs], [o["box"] for o in objs])


@dataclass
class RawDetections:
    """The ``N`` candidate outputs of one forward pass.

    ``logits`` is ``N x (5+K)``; the decoded fields are derived from it.
    """

    logits: np.ndarray
    boxes: np.ndarray
    confidence: np.ndarray
    class_probs: np.ndarray

    @classmethod
    def from_logits(cls, logits, grid=GRID, anchors_per_cell=ANCHORS_PER_CELL):
        logits = nx.as_tensor(logits)
        n = logits.shape[0]
        if n != grid * grid * anchors_per_cell:
            raise ValueError(f"{n} candidates do not fit a {grid}x{grid}x{anchors_per_cell} grid")
        sig = nx.sigmoid_forward(logits[:, :5])
        cell = np.arange(n) // anchors_per_cell
        row, col = cell // grid, cell % grid
        boxes = np.stack([(col + sig[:, 0]) / grid, (row + sig[:, 1]) / grid,
                          sig[:, 2], sig[:, 3]], axis=1)
        return cls(logits, boxes, sig[:, 4].copy(), nx.softmax_forward(logits[:, 5:], axis=-1))

    @property
    def num_candidates(self):
        return self.logits.shape[0]

    @property
    def num_classes(self):
        return self.class_probs.shape[1]

    @property
    def conf_logits(self):
        return self.logits[:, 4]


# ---------------------------------------------------------------- network

def _check_images(images):
    images = nx.as_tensor(images)
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4 or images.shape[1:] != IMAGE_SHAPE:
        raise ValueError(f"image must be {IMAGE_SHAPE}, got {images.shape}")
    return images


def _network_forward(weights, images):
    """Batched forward. Returns logits ``B x N x (5+K)`` and the backward cache."""
    cache = []
    h = images
    for (name, _, _, pad), (k, b) in zip(_CONV_LAYOUT, weights.layers):
        z = nx.conv2d_forward(h, k, b, stride=1, pad=pad)
        a = nx.leaky_relu_forward(z, LEAKY_SLOPE)
        p = nx.maxpool2_forward(a)
        cache.append((h, z, a))
        h = p
    kh, bh = weights.layers[-1]
    out = nx.conv2d_forward(h, kh, bh)
    cache.append(h)
    bsz, s, na = out.shape[0], weights.grid, weights.anchors_per_cell
    d = 5 + weights.num_classes
    # (B, A*D, S, S) -> (B, S, S, A, D) -> (B, N, D)
    logits = out.reshape(bsz, na, d, s, s).transpose(0, 3, 4, 1, 2).reshape(bsz, -1, d)
    return np.ascontiguousarray(logits), cache


def _network_backward(weights, cache, dlogits, need_params=True):
    """Backprop ``dlogits`` (``B x N x (5+K)``) to the input and the parameters."""
    bsz = dlogits.shape[0]
    s, na, d = weights.grid, weights.anchors_per_cell, 5 + weights.num_classes
    dout = dlogits.reshape(bsz, s, s, na, d).transpose(0, 3, 4, 1, 2).reshape(bsz, na * d, s, s)
    dout = np.ascontiguousarray(dout)
    grads = [None] * len(weights.layers)
    h_head = cache[-1]
    dh, gk, gb = nx.conv2d_backward(dout, h_head, weights.layers[-1][0])
    grads[-1] = (gk, gb)
    for li in range(len(_CONV_LAYOUT) - 1, -1, -1):
        h, z, a = cache[li]
        da = nx.maxpool2_backward(dh, a)
        dz = nx.leaky_relu_backward(da, z, LEAKY_SLOPE)
        pad = _CONV_LAYOUT[li][3]
        dh, gk, gb = nx.conv2d_backward(dz, h, weights.layers[li][0], stride=1, pad=pad)
        grads[li] = (gk, gb)
    return dh, (grads if need_params else None)


def activation_pattern(weights, image):
    """Leaky-ReLU signs and max-pool winners for one image.

    The network is piecewise smooth; it is smooth around ``image`` wherever
    this pattern does not change.
    """
    _, cache = _network_forward(weights, _check_images(image))
    parts = []
    for _, z, a in cache[:-1]:
        b, c, hh, ww = a.shape
        win = a.reshape(b, c, hh // 2, 2, ww // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        parts.append(np.packbits(z > 0))
        parts.append(win.reshape(b, c, hh // 2, ww // 2, 4).argmax(axis=-1).astype(np.uint8))
    return np.concatenate([p.ravel() for p in parts])


def smooth_coordinates(weights, image, coords, h):
    """The flat indices in ``coords`` whose probes ``image +- h`` leave the
    activation pattern unchanged, so a central difference there does not
    straddle a kink."""
    image = nx.as_tensor(image)
    base = activation_pattern(weights, image)
    keep = []
    for i in coords:
        ok = True
        for step in (h, -h):
            probe = image.copy().reshape(-1)
            probe[i] += step
            if not np.array_equal(activation_pattern(weights, probe.reshape(image.shape)), base):
                ok = False
                break
        if ok:
            keep.append(int(i))
    return keep


def forward_logits(weights, image):
    """Raw logits ``N x (5+K)`` for one image (no decoding)."""
    logits, _ = _network_forward(weights, _check_images(image))
    return logits[0]


def forward(weights, image):
    """Run the detector on one ``3x64x64`` image in ``[0, 1]``."""
    logits = forward_logits(weights, image)
    return RawDetections.from_logits(logits, weights.grid, weights.anchors_per_cell)


def forward_with_cache(weights, image):
    images = _check_images(image)
    logits, cache = _network_forward(weights, images)
    raw = RawDetections.from_logits(logits[0], weights.grid, weights.anchors_per_cell)
    return raw, cache


def backward_from_cache(weights, cache, loss_grad):
    loss_grad = nx.as_tensor(loss_grad)
    dx, _ = _network_backward(weights, cache, loss_grad[None], need_params=False)
    return dx[0]


def input_gradient(weights, image, loss_grad):
    """d(loss)/d(image) given the loss gradient w.r.t. the raw logits."""
    loss_grad = nx.as_tensor(loss_grad)
    expected = (weights.num_candidates, 5 + weights.num_classes)
    if loss_grad.shape != expected:
        raise ValueError(f"loss_grad shape {loss_grad.shape} != logits shape {expected}")
    _, cache = forward_with_cache(weights, image)
    return backward_from_cache(weights, cache, loss_grad)


# ------------------------------------------------------------------ losses

def _softplus(z):
    return np.logaddexp(0.0, z)


def yolo_loss_terms(logits, positive, box_targets, class_targets,
                    lambda_coord=LAMBDA_COORD, lambda_noobj=LAMBDA_NOOBJ):
    """Composite loss given per-candidate targets.

    ``positive`` marks candidates whose objectness target is 1; the rest
    target 0 and are weighted by ``lambda_noobj``. ``box_targets`` are the
    desired ``(sig(t_x), sig(t_y), sig(t_w), sig(t_h))`` and ``class_targets``
    the desired class ids; both are read only where ``positive``.
    Leading batch axes are allowed. Returns ``(coord, conf, cls), grad``.
    """
    logits = nx.as_tensor(logits)
    pos = np.asarray(positive, dtype=bool)
    posf = pos.astype(np.float64)
    grad = np.zeros_like(logits)

    sig = nx.sigmoid_forward(logits[..., :4])
    diff = (sig - box_targets) * posf[..., None]
    coord = lambda_coord * np.sum(diff * diff)
    grad[..., :4] = lambda_coord * 2.0 * diff * sig * (1.0 - sig)

    tc = logits[..., 4]
    # -log sig(z) = softplus(-z); -log(1 - sig(z)) = softplus(z)
    w_neg = lambda_noobj * (1.0 - posf)
    conf = np.sum(posf * _softplus(-tc) + w_neg * _softplus(tc))
    pc = nx.sigmoid_forward(tc)
    grad[..., 4] = posf * (pc - 1.0) + w_neg * pc

    tp = logits[..., 5:]
    k = tp.shape[-1]
    onehot = (np.asarray(class_targets)[..., None] == np.arange(k)) & pos[..., None]
    logp = tp - tp.max(axis=-1, keepdims=True)
    logp = logp - np.log(np.exp(logp).sum(axis=-1, keepdims=True))
    cls = -np.sum(onehot * logp)
    grad[..., 5:] = posf[..., None] * np.exp(logp) - onehot
    return (coord, conf, cls), grad


def _anchor_for(w, h, anchors):
    best, best_iou = 0, -1.0
    for a, (aw, ah) in enumerate(anchors):
        inter = min(w, aw) * min(h, ah)
        iou = inter / (w * h + aw * ah - inter) if (w * h + aw * ah - inter) > 0 else 0.0
        if iou > best_iou:
            best, best_iou = a, iou
    return best


def assign_targets(truth, grid=GRID, anchors=ANCHORS):
    """Map each truth box to (cell holding its center, best-shape anchor).

    When two truths land on the same slot the first one keeps it.
    """
    na = len(anchors)
    n = grid * grid * na
    positive = np.zeros(n, dtype=bool)
    box_targets = np.zeros((n, 4))
    class_targets = np.zeros(n, dtype=np.int64)
    for c, (cx, cy, w, h) in zip(truth.classes, truth.boxes):
        col = min(int(cx * grid), grid - 1)
        row = min(int(cy * grid), grid - 1)
        i = (row * grid + col) * na + _anchor_for(w, h, anchors)
        if positive[i]:
            continue
        positive[i] = True
        box_targets[i] = (cx * grid - col, cy * grid - row, w, h)
        class_targets[i] = c
    return positive, box_targets, class_targets


def training_loss(raw, truth, lambda_coord=LAMBDA_COORD, lambda_noobj=LAMBDA_NOOBJ,
                  grid=GRID, anchors=ANCHORS):
    """YOLO-style composite loss of ``raw`` against ``truth``.

    Returns ``(loss, loss_grad)`` where ``loss_grad`` has the logits' shape.
    """
    truth.validate(raw.num_classes)
    positive, box_t, cls_t = assign_targets(truth, grid, anchors)
    terms, grad = yolo_loss_terms(raw.logits, positive, box_t, cls_t, lambda_coord, lambda_noobj)
    return float(sum(terms)), grad


# ----------------------------------------------------------------- trainer

class TrainingError(RuntimeError):
    pass


def train(weights, scenes, epochs, lr, seed=0, batch_size=8, log=None):
    """Minibatch gradient descent on the training loss (fixed ``lr``, no momentum).

    ``scenes`` is a sequence of ``(image, GroundTruth)``. Each epoch visits the
    scenes in a seeded random order. Returns ``(new_weights, history)`` with
    one mean per-scene loss per epoch.
    """
    if len(scenes) < 1:
        raise ValueError("need at least one scene")
    images = np.stack([_check_images(img)[0] for img, _ in scenes])
    targets = [assign_targets(t, weights.grid, weights.anchors) for _, t in scenes]
    for _, t in scenes:
        t.validate(weights.num_classes)
    pos = np.stack([t[0] for t in targets])
    box_t = np.stack([t[1] for t in targets])
    cls_t = np.stack([t[2] for t in targets])

    params = [(k.copy(), b.copy()) for k, b in weights.layers]
    current = DetectorWeights(tuple(params), weights.num_classes, weights.grid, weights.anchors)
    rng = np.random.default_rng(seed)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(scenes))
        total = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            logits, cache = _network_forward(current, images[idx])
            terms, dlogits = yolo_loss_terms(logits, pos[idx], box_t[idx], cls_t[idx])
            loss = float(sum(terms))
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss} at epoch {epoch}, batch at {start}")
            total += loss
            _, grads = _network_backward(current, cache, dlogits / len(idx))
            for (k, b), (gk, gb) in zip(params, grads):
                k -= lr * gk
                b -= lr * gb
        history.append(total / len(scenes))
        if log is not None:
            log(epoch, history[-1])
    return current, history


# -------------------------------------------------------------- weight file

def save_weights(weights, path):
    header = {
        "version": WEIGHTS_VERSION,
        "S": weights.grid,
        "A": weights.anchors_per_cell,
        "K": weights.num_classes,
        "anchors": [list(a) for a in weights.anchors],
        "layers": [{"name": n, "kernel": list(ks), "bias": list(bs)}
                   for n, ks, bs in layer_shapes(weights.num_classes, weights.anchors_per_cell)],
    }
    arrays = [a for kb in weights.layers for a in kb]
    write_blob(path, WEIGHTS_MAGIC, header, arrays)


def load_weights(path, num_classes=NUM_CLASSES):
    """Load a weight file, checking it against the fixed architecture."""
    header, payload = read_blob(path, WEIGHTS_MAGIC)
    if header.get("version") != WEIGHTS_VERSION:
        raise WeightFileError(f"{path}: unsupported version {header.get('version')}")
    k, a = header.get("K"), header.get("A")
    anchors = tuple(tuple(float(v) for v in an) for an in header.get("anchors", ()))
    if header.get("S") != GRID or a != len(anchors) or a != ANCHORS_PER_CELL:
        raise WeightFileError(f"{path}: grid S={header.get('S')} A={a} does not match {GRID}x{ANCHORS_PER_CELL}")
    if k != num_classes:
        raise WeightFileError(
            f"{path}: file has K={k} classes (head {a * (5 + k)} channels), "
            f"expected K={num_classes} (head {a * (5 + num_classes)} channels)")
    expected = layer_shapes(k, a)
    declared = [(d["name"], tuple(d["kernel"]), tuple(d["bias"])) for d in header.get("layers", [])]
    if declared != expected:
        raise WeightFileError(f"{path}: layer shapes {declared} do not match architecture {expected}")
    sizes = [int(np.prod(s)) for _, ks, bs in expected for s in (ks, bs)]
    if payload.size != sum(sizes):
        raise WeightFileError(f"{path}: payload has {payload.size} floats, expected {sum(sizes)}")
    arrays, off = [], 0
    shapes = [s for _, ks, bs in expected for s in (ks, bs)]
    for shape, size in zip(shapes, sizes):
        arrays.append(payload[off:off + size].reshape(shape).copy())
        off += size
    layers = tuple(zip(arrays[0::2], arrays[1::2]))
    return DetectorWeights(layers, k, GRID, anchors)
