"""Synthetic shapes-on-background scenes and binary PPM (P6) I/O.

Classes: 0 = filled axis-aligned rectangle, 1 = filled disc, 2 = filled
isoceles triangle (apex up). Boxes are ``(cx, cy, w, h)`` image fractions.

Every scene consumes the same number of random draws whatever the family
config, so two families generated with one seed differ only through their
configs (same object classes, same layout choices).
"""

import json
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .detector import GroundTruth, IMAGE_SHAPE

MAX_OBJECTS = 4
PLACEMENT_TRIES = 20
MAX_PLACEMENT_IOU = 0.05
MIN_CONTRAST = 0.15
MAX_PPM_PIXELS = 1 << 24


@dataclass(frozen=True)
class FamilyConfig:
    """Appearance distribution for one scene family (a stand-in for a map)."""

    name: str
    background: tuple = (0.5, 0.5, 0.5)
    background_jitter: float = 0.05
    noise: float = 0.02
    size_range: tuple = (0.15, 0.35)

    def __post_init__(self):
        if len(self.background) != 3 or not all(0 <= v <= 1 for v in self.background):
            raise ValueError(f"background must be 3 values in [0,1], got {self.background}")
        lo, hi = self.size_range
        if not 0 < lo <= hi <= 0.9:
            raise ValueError(f"size_range must satisfy 0 < min <= max <= 0.9, got {self.size_range}")
        if self.noise < 0 or self.background_jitter < 0:
            raise ValueError("noise and background_jitter must be non-negative")

    @classmethod
    def from_dict(cls, doc):
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown family config keys: {sorted(unknown)}")
        if "name" not in doc:
            raise ValueError("family config needs a name")
        doc = dict(doc)
        for key in ("background", "size_range"):
            if key in doc:
                doc[key] = tuple(float(v) for v in doc[key])
        return cls(**doc)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        return asdict(self)


FAMILIES = {
    f.name: f for f in (
        FamilyConfig("f1_clear_noon_city", (0.55, 0.55, 0.58), 0.04, 0.005, (0.16, 0.34)),
        FamilyConfig("f2_clear_noon_suburban", (0.38, 0.55, 0.30), 0.04, 0.005, (0.16, 0.34)),
        FamilyConfig("f3_hard_rain_sunset", (0.62, 0.42, 0.30), 0.04, 0.015, (0.16, 0.34)),
        FamilyConfig("f4_wet_cloudy_night", (0.12, 0.12, 0.18), 0.03, 0.01, (0.16, 0.34)),
        FamilyConfig("f5_soft_rain_noon", (0.72, 0.74, 0.78), 0.03, 0.0125, (0.16, 0.34)),
        FamilyConfig("f6_cloudy_highway", (0.42, 0.44, 0.48), 0.04, 0.0075, (0.14, 0.30)),
        FamilyConfig("f7_rural_sunset", (0.52, 0.36, 0.20), 0.04, 0.0075, (0.18, 0.36)),
    )
}
FAMILY_IDS = tuple(FAMILIES)


def get_family(family):
    """Accept a FamilyConfig, a built-in name, a 1-based index or a JSON path."""
    if isinstance(family, FamilyConfig):
        return family
    key = str(family)
    if key in FAMILIES:
        return FAMILIES[key]
    if key.isdigit() and 1 <= int(key) <= len(FAMILY_IDS):
        return FAMILIES[FAMILY_IDS[int(key) - 1]]
    if os.path.isfile(key):
        return FamilyConfig.from_json(key)
    raise ValueError(f"unknown family {family!r}; built-ins: {', '.join(FAMILY_IDS)}")


@dataclass
class Scene:
    image: np.ndarray
    truth: GroundTruth = field(default_factory=GroundTruth)
    family: str = ""


def _box_iou(a, b):
    ax0, ay0, ax1, ay1 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx0, by0, bx1, by1 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def shape_mask(cls, box, height, width):
    """Boolean mask of pixel centers covered by the shape of class ``cls``."""
    cx, cy, w, h = box[0] * width, box[1] * height, box[2] * width, box[3] * height
    py = (np.arange(height) + 0.5)[:, None]
    px = (np.arange(width) + 0.5)[None, :]
    if cls == 0:
        return (np.abs(px - cx) <= w / 2) & (np.abs(py - cy) <= h / 2)
    if cls == 1:
        r = w / 2
        return (px - cx) ** 2 + (py - cy) ** 2 <= r * r
    if cls == 2:
        top = cy - h / 2
        depth = py - top
        inside = (depth >= 0) & (depth <= h)
        return inside & (np.abs(px - cx) <= (w / 2) * depth / h)
    raise ValueError(f"unknown shape class {cls}")


def _object_color(u, bg):
    color = u.copy()
    if np.mean(np.abs(color - bg)) < MIN_CONTRAST:
        color = (bg + 0.5) % 1.0
    return color


def _render_scene(rng, family):
    _, height, width = IMAGE_SHAPE
    lo, hi = family.size_range
    # Fixed-size draws: the stream position never depends on the config.
    n_u = rng.random()
    bg_u = rng.random(3)
    obj_u = rng.random((MAX_OBJECTS, 1 + 2 + 2 * PLACEMENT_TRIES + 3))
    noise = rng.standard_normal((3, height, width))

    bg = np.clip(np.asarray(family.background) + family.background_jitter * (2 * bg_u - 1), 0, 1)
    image = np.broadcast_to(bg[:, None, None], (3, height, width)).copy()
    n_obj = 1 + int(n_u * MAX_OBJECTS)
    classes, boxes = [], []
    for j in range(n_obj):
        u = obj_u[j]
        cls = min(int(u[0] * 3), 2)
        w = lo + (hi - lo) * u[1]
        h = w if cls == 1 else lo + (hi - lo) * u[2]
        placed = None
        for t in range(PLACEMENT_TRIES):
            cx = w / 2 + (1 - w) * u[3 + 2 * t]
            cy = h / 2 + (1 - h) * u[4 + 2 * t]
            cand = (cx, cy, w, h)
            if all(_box_iou(cand, b) <= MAX_PLACEMENT_IOU for b in boxes):
                placed = cand
                break
        if placed is None:
            continue
        color = _object_color(u[-3:], bg)
        mask = shape_mask(cls, placed, height, width)
        image[:, mask] = color[:, None]
        classes.append(cls)
        boxes.append(placed)
    image = np.clip(image + family.noise * noise, 0.0, 1.0)
    return image, GroundTruth(classes, boxes)


def generate(family, count, seed):
    """Render ``count`` scenes of ``family`` deterministically from ``seed``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    family = get_family(family)
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        image, truth = _render_scene(rng, family)
        out.append(Scene(image, truth, family.name))
    return out


# ------------------------------------------------------------------ PPM I/O

def to_rgb24(image):
    """``3xHxW`` float tensor -> ``HxWx3`` uint8 with round(clamp(v)*255)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected 3xHxW, got {image.shape}")
    q = np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    return np.ascontiguousarray(q.transpose(1, 2, 0))


def from_rgb24(pixels):
    """``HxWx3`` uint8 -> ``3xHxW`` float64 with b/255."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    return np.ascontiguousarray(pixels.transpose(2, 0, 1), dtype=np.float64) / 255.0


def encode_ppm(image):
    rgb = to_rgb24(image)
    h, w, _ = rgb.shape
    return b"P6\n%d %d\n255\n" % (w, h) + rgb.tobytes()


def decode_ppm(data, name="<bytes>"):
    if data[:2] != b"P6":
        raise ValueError(f"{name}: not a binary PPM (magic {data[:2]!r})")
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ValueError(f"{name}: malformed PPM header")
        tokens.append(int(data[start:pos]))
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise ValueError(f"{name}: malformed PPM header")
    pos += 1
    width, height, maxval = tokens
    if maxval != 255:
        raise ValueError(f"{name}: only maxval 255 is supported, got {maxval}")
    if width < 1 or height < 1 or width * height > MAX_PPM_PIXELS:
        raise ValueError(f"{name}: image size {width}x{height} out of range")
    need = width * height * 3
    payload = data[pos:pos + need]
    if len(payload) < need:
        raise ValueError(f"{name}: truncated payload ({len(payload)} of {need} bytes)")
    rgb = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return from_rgb24(rgb)


def save_ppm(path, image):
    with open(path, "wb") as fh:
        fh.write(encode_ppm(image))


def load_ppm(path):
    with open(path, "rb") as fh:
        return decode_ppm(fh.read(), str(path))


# ------------------------------------------------------------ scene folders

TRUTH_FILE = "truth.json"


def write_scene_dir(directory, scenes):
    """Write ``frame_NNNN.ppm`` files plus ``truth.json``."""
    os.makedirs(directory, exist_ok=True)
    records = []
    for i, sc in enumerate(scenes):
        fname = f"frame_{i:04d}.ppm"
        save_ppm(os.path.join(directory, fname), sc.image)
        records.append({"file": fname, "family": sc.family, "objects": sc.truth.to_json()})
    with open(os.path.join(directory, TRUTH_FILE), "w") as fh:
        json.dump(records, fh, indent=1)
    return records


def read_scene_dir(directory):
    """Load scenes written by :func:`write_scene_dir` (images are 8-bit quantized)."""
    path = os.path.join(directory, TRUTH_FILE)
    if os.path.exists(path):
        with open(path) as fh:
            records = json.load(fh)
    else:
        records = [{"file": f, "family": "", "objects": []}
                   for f in sorted(os.listdir(directory)) if f.endswith(".ppm")]
    return [Scene(load_ppm(os.path.join(directory, r["file"])),
                  GroundTruth.from_json(r.get("objects", [])), r.get("family", ""))
            for r in records]
