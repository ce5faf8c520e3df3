"""Attack metrics (confidence variation, box count, relative box variation),
VOC-style average precision, and the clean/attacked error decomposition."""

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .nms import NMSConfig, iou_one_to_many, nms, nms_arrays

CSV_HEADER = ("iteration", "mean_conf_variation", "num_boxes", "relative_box_variation", "adv_loss")


def _check_same_n(a, b):
    if a.num_candidates != b.num_candidates:
        raise ValueError(f"candidate counts differ: {a.num_candidates} vs {b.num_candidates}")


def mean_confidence_variation(raw_t, raw_prev):
    """Mean change of the raw (pre-sigmoid) confidence logits, ``raw_t - raw_prev``."""
    _check_same_n(raw_t, raw_prev)
    return float(np.mean(raw_t.conf_logits - raw_prev.conf_logits))


def number_of_boxes(raw, nms_config=NMSConfig()):
    return len(nms(raw, nms_config.conf_threshold, nms_config.iou_threshold))


def relative_box_variation(raw_t, raw_prev, nms_config=NMSConfig()):
    """Fraction of boxes at ``t`` that survive unchanged from ``raw_prev``.

    With ``A = NMS(raw_t)``, ``B = NMS(raw_prev)`` and ``J`` the NMS of both
    candidate sets concatenated, returns ``(|A| + |B| - |J|) / |A|`` clamped
    to ``[0, 1]``, and 0 when ``A`` is empty.
    """
    _check_same_n(raw_t, raw_prev)
    ct, cp = nms_config.conf_threshold, nms_config.iou_threshold
    a = len(nms(raw_t, ct, cp))
    if a == 0:
        return 0.0
    b = len(nms(raw_prev, ct, cp))
    boxes = np.concatenate([raw_t.boxes, raw_prev.boxes])
    conf = np.concatenate([raw_t.confidence, raw_prev.confidence])
    classes = np.concatenate([np.argmax(raw_t.class_probs, axis=1),
                              np.argmax(raw_prev.class_probs, axis=1)])
    j = len(nms_arrays(boxes, conf, classes, ct, cp))
    return float(min(1.0, max(0.0, (a + b - j) / a)))


# ------------------------------------------------------------------ series

@dataclass
class MetricSeries:
    """One record per completed attack iteration (or UAP epoch)."""

    mean_conf_variation: list = field(default_factory=list)
    num_boxes: list = field(default_factory=list)
    relative_box_variation: list = field(default_factory=list)
    adv_loss: list = field(default_factory=list)
    step_sizes: list = field(default_factory=list)

    def __len__(self):
        return len(self.num_boxes)

    def append(self, mcv, boxes, rbv, loss, step_size=None):
        if not 0.0 <= rbv <= 1.0:
            raise ValueError(f"relative box variation {rbv} outside [0, 1]")
        self.mean_conf_variation.append(float(mcv))
        self.num_boxes.append(boxes)
        self.relative_box_variation.append(float(rbv))
        self.adv_loss.append(float(loss))
        if step_size is not None:
            self.step_sizes.append(float(step_size))

    def rows(self):
        for i in range(len(self)):
            yield (i + 1, self.mean_conf_variation[i], self.num_boxes[i],
                   self.relative_box_variation[i], self.adv_loss[i])

    def to_csv(self, path_or_file):
        if isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__"):
            with open(path_or_file, "w", newline="") as fh:
                self.to_csv(fh)
            return
        writer = csv.writer(path_or_file, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for row in self.rows():
            writer.writerow([_fmt(v) for v in row])

    def to_csv_string(self):
        buf = io.StringIO()
        self.to_csv(buf)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, path_or_file):
        if isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__"):
            with open(path_or_file, newline="") as fh:
                return cls.from_csv(fh)
        reader = csv.reader(path_or_file)
        header = tuple(next(reader))
        if header != CSV_HEADER:
            raise ValueError(f"unexpected metric CSV header {header}")
        out = cls()
        for row in reader:
            boxes = float(row[2])
            out.append(float(row[1]), int(boxes) if boxes.is_integer() else boxes,
                       float(row[3]), float(row[4]))
        return out


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


# ---------------------------------------------------------------------- AP

def average_precision(detections, truths, iou_threshold=0.5, num_classes=None):
    """VOC all-points AP per class and their mean.

    ``detections[i]`` is the list of :class:`~hitm.nms.Detection` for image
    ``i`` and ``truths[i]`` its GroundTruth. Classes without any truth
    instance are left out of the mean. Returns ``(ap_by_class, mAP)``; mAP is
    NaN when no class has a truth instance.
    """
    if len(detections) != len(truths):
        raise ValueError("detections and truths must cover the same images")
    if num_classes is None:
        seen = [int(c) for t in truths for c in t.classes]
        seen += [d.class_id for dets in detections for d in dets]
        num_classes = max(seen) + 1 if seen else 0
    ap = {}
    for c in range(num_classes):
        gt = [t.boxes[t.classes == c] for t in truths]
        npos = sum(len(g) for g in gt)
        if npos == 0:
            continue
        dets = [(d.confidence, img, k, d.box) for img, ds in enumerate(detections)
                for k, d in enumerate(ds) if d.class_id == c]
        # stable: ties keep image/detection order
        dets.sort(key=lambda r: -r[0])
        matched = [np.zeros(len(g), dtype=bool) for g in gt]
        tp = np.zeros(len(dets))
        fp = np.zeros(len(dets))
        for r, (_, img, _, box) in enumerate(dets):
            g = gt[img]
            if len(g):
                ious = iou_one_to_many(box, g)
                j = int(np.argmax(ious))
                if ious[j] >= iou_threshold and not matched[img][j]:
                    matched[img][j] = True
                    tp[r] = 1
                    continue
            fp[r] = 1
        ap[c] = _voc_ap(np.cumsum(tp), np.cumsum(fp), npos)
    mean = float(np.mean(list(ap.values()))) if ap else float("nan")
    return ap, mean


def _voc_ap(ctp, cfp, npos):
    if len(ctp) == 0:
        return 0.0
    rec = ctp / npos
    prec = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).eps)
    mrec = np.concatenate([[0.0], rec, [1.0]])
    mpre = np.concatenate([[0.0], prec, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    i = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))


# ----------------------------------------------------------- decomposition

@dataclass
class ErrorReport:
    """Attack error (attacked vs clean output) kept apart from model error
    (clean output vs truth)."""

    mean_conf_variation: float
    boxes_clean: int
    boxes_adv: int
    relative_box_variation: float
    ap_clean: dict
    map_clean: float
    ap_adv: dict
    map_adv: float

    def summary(self):
        return (f"attack error: mean_conf_variation={self.mean_conf_variation:.4f} "
                f"boxes {self.boxes_clean}->{self.boxes_adv} "
                f"relative_box_variation={self.relative_box_variation:.4f}; "
                f"model error: mAP(clean)={self.map_clean:.4f}; "
                f"overall: mAP(attacked)={self.map_adv:.4f}")


def error_decomposition(raw_clean, raw_adv, truth, nms_config=NMSConfig()):
    ct, it = nms_config.conf_threshold, nms_config.iou_threshold
    det_clean = nms(raw_clean, ct, it)
    det_adv = nms(raw_adv, ct, it)
    k = raw_clean.num_classes
    ap_c, map_c = average_precision([det_clean], [truth], num_classes=k)
    ap_a, map_a = average_precision([det_adv], [truth], num_classes=k)
    return ErrorReport(
        mean_confidence_variation(raw_adv, raw_clean),
        len(det_clean), len(det_adv),
        relative_box_variation(raw_adv, raw_clean, nms_config),
        ap_c, map_c, ap_a, map_a)
