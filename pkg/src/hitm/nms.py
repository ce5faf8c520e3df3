"""Confidence filtering, IoU and greedy per-class non-maximum suppression."""

from dataclasses import dataclass

import numpy as np

CONF_THRESHOLD = 0.5
IOU_THRESHOLD = 0.45


@dataclass(frozen=True)
class NMSConfig:
    conf_threshold: float = CONF_THRESHOLD
    iou_threshold: float = IOU_THRESHOLD

    def __post_init__(self):
        for name in ("conf_threshold", "iou_threshold"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")


@dataclass(frozen=True)
class Detection:
    box: tuple            # (cx, cy, w, h), image fractions
    confidence: float
    class_id: int
    class_prob: float
    index: int            # candidate index in the input set


def iou(a, b):
    """IoU of two center-format boxes; 0 when the union is empty."""
    ax0, ax1 = a[0] - a[2] / 2, a[0] + a[2] / 2
    ay0, ay1 = a[1] - a[3] / 2, a[1] + a[3] / 2
    bx0, bx1 = b[0] - b[2] / 2, b[0] + b[2] / 2
    by0, by1 = b[1] - b[3] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    if union <= 0:
        return 0.0
    return min(1.0, max(0.0, inter / union))


def iou_one_to_many(box, boxes):
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(box[0] + box[2] / 2, boxes[:, 0] + boxes[:, 2] / 2) - \
        np.maximum(box[0] - box[2] / 2, boxes[:, 0] - boxes[:, 2] / 2)
    ih = np.minimum(box[1] + box[3] / 2, boxes[:, 1] + boxes[:, 3] / 2) - \
        np.maximum(box[1] - box[3] / 2, boxes[:, 1] - boxes[:, 3] / 2)
    inter = np.maximum(iw, 0.0) * np.maximum(ih, 0.0)
    union = box[2] * box[3] + boxes[:, 2] * boxes[:, 3] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return np.clip(out, 0.0, 1.0)


def nms_arrays(boxes, confidence, classes, conf_threshold=CONF_THRESHOLD,
               iou_threshold=IOU_THRESHOLD):
    """Indices kept by greedy NMS, in keep order.

    Candidates below ``conf_threshold`` are dropped. Ties on confidence go to
    the lower index. Boxes of different classes never suppress each other.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    confidence = np.asarray(confidence, dtype=np.float64).reshape(-1)
    classes = np.asarray(classes).reshape(-1)
    idx = np.flatnonzero(confidence >= conf_threshold)
    order = idx[np.lexsort((idx, -confidence[idx]))]
    alive = np.ones(len(order), dtype=bool)
    keep = []
    for pos in range(len(order)):
        if not alive[pos]:
            continue
        i = order[pos]
        keep.append(int(i))
        rest = order[pos + 1:]
        same = classes[rest] == classes[i]
        over = iou_one_to_many(boxes[i], boxes[rest]) > iou_threshold
        alive[pos + 1:] &= ~(same & over)
    return keep


def _detections(boxes, confidence, classes, probs, keep):
    return [Detection(tuple(float(v) for v in boxes[i]), float(confidence[i]), int(classes[i]),
                      float(probs[i, classes[i]]), int(i)) for i in keep]


def nms(raw, conf_threshold=CONF_THRESHOLD, iou_threshold=IOU_THRESHOLD):
    """Final detections for a RawDetections; class = argmax of the class probabilities."""
    classes = np.argmax(raw.class_probs, axis=1)
    keep = nms_arrays(raw.boxes, raw.confidence, classes, conf_threshold, iou_threshold)
    return _detections(raw.boxes, raw.confidence, classes, raw.class_probs, keep)


def nms_oracle(raw, conf_threshold=CONF_THRESHOLD, iou_threshold=IOU_THRESHOLD):
    """Reference greedy NMS written as a plain O(n^2) loop over Python lists."""
    cands = []
    for i in range(raw.num_candidates):
        c = float(raw.confidence[i])
        if c >= conf_threshold:
            probs = [float(p) for p in raw.class_probs[i]]
            cls = probs.index(max(probs))
            cands.append((i, c, cls, tuple(float(v) for v in raw.boxes[i])))
    kept, removed = [], set()
    while True:
        best = None
        for cand in cands:
            if cand[0] in removed:
                continue
            if best is None or cand[1] > best[1] or (cand[1] == best[1] and cand[0] < best[0]):
                best = cand
        if best is None:
            break
        kept.append(best)
        removed.add(best[0])
        for cand in cands:
            if cand[0] not in removed and cand[2] == best[2] and iou(best[3], cand[3]) > iou_threshold:
                removed.add(cand[0])
    return [Detection(box, c, cls, float(raw.class_probs[i, cls]), i) for i, c, cls, box in kept]
