"""Frame-stream simulation of the camera -> detector channel with an injector
in the middle.

Wire format, repeated per frame (integers little-endian)::

    magic "HITM" | version u8 = 1 | width u32 | height u32 | index u64 | RGB24 payload

The payload is ``height * width * 3`` bytes, row-major, interleaved RGB. A
record with ``width == height == 0`` is an error record: it is followed by a
u32 length and a UTF-8 message, and ends the stream. A clean end of stream
is EOF on a record boundary.
"""

import os
import socket
import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import attack as atk
from . import detector as det
from .nms import NMSConfig, nms
from .scenes import Scene, from_rgb24, load_ppm, to_rgb24

MAGIC = b"HITM"
VERSION = 1
HEADER = struct.Struct("<4sBIIQ")
_U32 = struct.Struct("<I")


class StreamError(RuntimeError):
    def __init__(self, message, index=None):
        super().__init__(message if index is None else f"frame {index}: {message}")
        self.index = index


@dataclass
class Frame:
    index: int
    pixels: np.ndarray      # H x W x 3 uint8

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    def image(self):
        """The frame as a ``3xHxW`` float tensor in ``[0, 1]``."""
        return from_rgb24(self.pixels)


def encode_frame(frame):
    px = np.ascontiguousarray(frame.pixels, dtype=np.uint8)
    if px.ndim != 3 or px.shape[2] != 3:
        raise ValueError(f"frame pixels must be HxWx3, got {px.shape}")
    h, w, _ = px.shape
    return HEADER.pack(MAGIC, VERSION, w, h, frame.index) + px.tobytes()


def write_frame(fh, frame):
    fh.write(encode_frame(frame))
    fh.flush()


def write_error(fh, index, message):
    msg = message.encode("utf-8")
    fh.write(HEADER.pack(MAGIC, VERSION, 0, 0, index) + _U32.pack(len(msg)) + msg)
    fh.flush()


def _read_exact(fh, n, index=None, eof_ok=False):
    chunks, got = [], 0
    while got < n:
        b = fh.read(n - got)
        if not b:
            break
        chunks.append(b)
        got += len(b)
    data = b"".join(chunks)
    if len(data) < n and not (eof_ok and not data):
        raise StreamError(f"truncated record ({len(data)} of {n} bytes)", index)
    return data


def read_frame(fh, expect_index=None):
    """Next frame, or None at clean EOF. Raises StreamError on a malformed
    header, a truncated payload or an upstream error record."""
    head = _read_exact(fh, HEADER.size, expect_index, eof_ok=True)
    if not head:
        return None
    magic, version, w, h, index = HEADER.unpack(head)
    where = expect_index if expect_index is not None else index
    if magic != MAGIC:
        raise StreamError(f"bad magic {magic!r}", where)
    if version != VERSION:
        raise StreamError(f"unsupported version {version}", where)
    if w == 0 and h == 0:
        (n,) = _U32.unpack(_read_exact(fh, _U32.size, index))
        msg = _read_exact(fh, n, index).decode("utf-8", "replace") if n else ""
        raise StreamError(f"upstream error: {msg}", index)
    if w == 0 or h == 0 or w * h > (1 << 24):
        raise StreamError(f"bad frame size {w}x{h}", where)
    payload = _read_exact(fh, w * h * 3, index)
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return Frame(index, pixels)


def read_frames(fh):
    """Yield frames until EOF, checking that indices increase strictly."""
    last = -1
    while True:
        frame = read_frame(fh, last + 1)
        if frame is None:
            return
        if frame.index <= last:
            raise StreamError(f"index {frame.index} does not follow {last}", frame.index)
        last = frame.index
        yield frame


# ------------------------------------------------------------------ source

def _as_pixels(item):
    if isinstance(item, Scene):
        item = item.image
    arr = np.asarray(item)
    if arr.dtype == np.uint8 and arr.ndim == 3 and arr.shape[2] == 3:
        return arr
    return to_rgb24(arr)


def ppm_frames(directory):
    """Loaders for the ``.ppm`` files of ``directory`` in name order."""
    names = sorted(f for f in os.listdir(directory) if f.endswith(".ppm"))
    return [lambda p=os.path.join(directory, n): load_ppm(p) for n in names]


def source(frames, out, fps=None, sleep=time.sleep, clock=time.perf_counter):
    """Emit ``frames`` with indices 0, 1, 2, ... at no more than ``fps``.

    Items may be images, Scenes, uint8 arrays, or zero-argument callables
    returning one of those. If loading an item fails, an error record is
    written and StreamError is raised. Returns the number of frames sent.
    """
    period = 1.0 / fps if fps else 0.0
    start = clock()
    sent = 0
    for item in frames:
        try:
            pixels = _as_pixels(item() if callable(item) else item)
        except (OSError, ValueError) as exc:
            write_error(out, sent, str(exc))
            raise StreamError(f"unreadable frame: {exc}", sent) from exc
        if period:
            wait = start + sent * period - clock()
            if wait > 0:
                sleep(wait)
        write_frame(out, Frame(sent, pixels))
        sent += 1
    return sent


# ---------------------------------------------------------------- injector

def quantize_injection(pixels, delta):
    """``clamp(round(p + 255 * delta), 0, 255)`` with round-half-away-from-zero."""
    v = pixels.astype(np.float64) + 255.0 * np.transpose(delta, (1, 2, 0))
    r = np.sign(v) * np.floor(np.abs(v) + 0.5)
    return np.clip(r, 0, 255).astype(np.uint8)


class OnlineAttacker:
    """Carries one perturbation across frames, taking one PGD step per frame
    on the previous frame before injecting into the current one."""

    def __init__(self, weights, cfg, init=None):
        self.weights = weights
        self.cfg = cfg
        self.pert = init if init is not None else atk.init_perturbation(cfg)
        self.alpha = cfg.alpha
        self.prev = None
        self.deltas = []

    def next_delta(self, image):
        if self.prev is not None:
            target = None
            if self.cfg.loss == "tog":
                target = atk.make_tog_target(det.forward(self.weights, self.pert.apply(self.prev)),
                                             self.cfg.mode)
            self.pert = atk.pgd_step(self.pert, self.prev, self.weights, self.cfg, self.alpha, target)
            self.alpha *= self.cfg.decay
        self.prev = image
        return self.pert.delta


@dataclass
class InjectStats:
    frames: int = 0
    max_abs_delta: float = 0.0
    deltas: list = field(default_factory=list)


def inject(inp, out, delta=None, online=None, keep_deltas=False):
    """Copy frames from ``inp`` to ``out`` adding a perturbation.

    Static mode uses the fixed array ``delta`` (``3xHxW``). Online mode takes
    an :class:`OnlineAttacker` instead. Headers pass through unchanged.
    """
    if (delta is None) == (online is None):
        raise ValueError("give exactly one of delta (static) or online")
    stats = InjectStats()
    try:
        for frame in read_frames(inp):
            if online is not None:
                d = online.next_delta(frame.image())
            else:
                d = delta
            if d.shape != (3, frame.height, frame.width):
                raise StreamError(
                    f"perturbation {d.shape} does not match frame {(3, frame.height, frame.width)}",
                    frame.index)
            write_frame(out, Frame(frame.index, quantize_injection(frame.pixels, d)))
            stats.frames += 1
            stats.max_abs_delta = max(stats.max_abs_delta, float(np.max(np.abs(d))))
            if keep_deltas:
                stats.deltas.append(np.array(d))
    except StreamError as exc:
        write_error(out, exc.index if exc.index is not None else stats.frames, str(exc))
        raise
    return stats


# -------------------------------------------------------------------- sink

@dataclass
class FrameLog:
    index: int
    num_boxes: int
    mean_confidence: float


@dataclass
class SinkReport:
    frames: list = field(default_factory=list)
    elapsed: float = 0.0
    payloads: list = field(default_factory=list)

    @property
    def fps(self):
        return len(self.frames) / self.elapsed if self.elapsed > 0 else float("inf")

    def summary(self):
        n = len(self.frames)
        boxes = sum(f.num_boxes for f in self.frames)
        return f"frames={n} boxes={boxes} elapsed={self.elapsed:.3f}s fps={self.fps:.2f}"


def sink(inp, weights, nms_config=NMSConfig(), keep_payloads=False, log=None,
         clock=time.perf_counter):
    """Run the detector on every frame; FPS is measured from the first frame's
    arrival to the last frame's processing."""
    report = SinkReport()
    start = None
    for frame in read_frames(inp):
        if start is None:
            start = clock()
        raw = det.forward(weights, frame.image())
        dets = nms(raw, nms_config.conf_threshold, nms_config.iou_threshold)
        entry = FrameLog(frame.index, len(dets), float(np.mean(raw.confidence)))
        report.frames.append(entry)
        if keep_payloads:
            report.payloads.append(frame.pixels.tobytes())
        if log is not None:
            log(entry)
    if start is not None:
        report.elapsed = clock() - start
    return report


# --------------------------------------------------------------- transport

def parse_hostport(text):
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"expected host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


def tcp_listen(hostport, mode="wb", timeout=None):
    """Accept one connection on ``host:port``; returns ``(conn, file)`` where
    ``file`` is opened with ``mode`` ("rb" or "wb"). Close the file, then the
    connection, to end the stream."""
    host, port = parse_hostport(hostport)
    with socket.create_server((host, port)) as srv:
        srv.settimeout(timeout)
        conn, _ = srv.accept()
    conn.settimeout(None)
    return conn, conn.makefile(mode)


def tcp_connect(hostport, mode="rb", retries=50, delay=0.1):
    """Connect to ``host:port``, retrying while the peer is not yet listening."""
    host, port = parse_hostport(hostport)
    for attempt in range(retries):
        try:
            conn = socket.create_connection((host, port))
            return conn, conn.makefile(mode)
        except ConnectionRefusedError:
            if attempt == retries - 1:
                raise
            time.sleep(delay)


def run_pipeline(frames, weights, delta=None, online=None, fps=None,
                 nms_config=NMSConfig(), keep_payloads=False):
    """Wire source -> injector -> sink with OS pipes, one thread per role.

    Returns ``(InjectStats, SinkReport)``; errors in any role are re-raised.
    """
    r1, w1 = os.pipe()
    r2, w2 = os.pipe()
    errors = []
    result = {}

    def role(name, fn, closers):
        try:
            result[name] = fn()
        except BaseException as exc:  # surfaced below
            errors.append(exc)
        finally:
            for c in closers:
                c.close()

    src_out = open(w1, "wb")
    inj_in, inj_out = open(r1, "rb"), open(w2, "wb")
    snk_in = open(r2, "rb")
    threads = [
        threading.Thread(target=role, args=("source", lambda: source(frames, src_out, fps), [src_out])),
        threading.Thread(target=role, args=("inject", lambda: inject(inj_in, inj_out, delta, online),
                                            [inj_in, inj_out])),
    ]
    for t in threads:
        t.start()
    role("sink", lambda: sink(snk_in, weights, nms_config, keep_payloads), [snk_in])
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    return result["inject"], result["sink"]
