"""Middlebury .flo files, PPM images, flow colour coding and end-point error.

Flows are ``(H, W, 2)`` float32 arrays of (u, v) pixel displacements, first
frame to last frame. Images are ``(H, W, 3)`` uint8 arrays.
"""
from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np

FLO_MAGIC = np.float32(202021.25)
MAX_FLO_DIM = 100_000
UNKNOWN_FLOW_THRESHOLD = 1e9


class FlowFormatError(ValueError):
    pass


class FlowLengthError(FlowFormatError):
    pass


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def _check_flow(flow: np.ndarray) -> np.ndarray:
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"flow must have shape (H, W, 2), got {flow.shape}")
    return flow


def flo_bytes(flow: np.ndarray) -> bytes:
    flow = _check_flow(flow)
    h, w = flow.shape[:2]
    header = FLO_MAGIC.astype("<f4").tobytes() + np.array([w, h], dtype="<i4").tobytes()
    return header + np.ascontiguousarray(flow, dtype="<f4").tobytes()


def write_flo(flow: np.ndarray, path) -> None:
    _atomic_write(path, flo_bytes(flow))


def read_flo(path, permissive: bool = False) -> np.ndarray:
    """Read a .flo file.

    Non-finite values raise unless ``permissive``; in permissive mode they and
    the unknown-flow sentinel (|value| > 1e9) are mapped to 0.
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 12:
        raise FlowLengthError(f"{path}: {len(raw)} bytes is shorter than the 12-byte header")
    magic = np.frombuffer(raw, dtype="<f4", count=1)[0]
    if magic != FLO_MAGIC:
        raise FlowFormatError(f"{path}: bad magic {magic!r} at byte offset 0 (expected 202021.25)")
    w, h = (int(v) for v in np.frombuffer(raw, dtype="<i4", count=2, offset=4))
    if not (0 < w <= MAX_FLO_DIM and 0 < h <= MAX_FLO_DIM):
        raise FlowFormatError(f"{path}: implausible dimensions {w}x{h} at byte offset 4")
    expected = 12 + 8 * w * h
    if len(raw) != expected:
        raise FlowLengthError(f"{path}: expected {expected} bytes for {w}x{h} flow, found {len(raw)}")
    flow = np.frombuffer(raw, dtype="<f4", offset=12).reshape(h, w, 2).astype(np.float32)
    finite = np.isfinite(flow)
    if permissive:
        flow[~finite | (np.abs(flow) > UNKNOWN_FLOW_THRESHOLD)] = 0.0
    elif not finite.all():
        raise FlowFormatError(f"{path}: contains non-finite values")
    return flow


# ---------------------------------------------------------------------------
# PPM (P6, maxval 255)
# ---------------------------------------------------------------------------

def to_uint8(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    """Write an (H, W, 3) image; float input is taken to be in [0, 1]."""
    img = to_uint8(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"PPM image must be (H, W, 3), got {img.shape}")
    h, w = img.shape[:2]
    _atomic_write(path, f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img).tobytes())


def _header_tokens(raw: bytes, count: int):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PPM header")
        tokens.append(raw[start:pos])
    return tokens, pos + 1


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    try:
        tokens, offset = _header_tokens(raw, 4)
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from None
    if tokens[0] != b"P6" or tokens[3] != b"255":
        raise ValueError(f"{path}: only binary P6 with maxval 255 is supported")
    w, h = int(tokens[1]), int(tokens[2])
    data = raw[offset:offset + w * h * 3]
    if len(data) != w * h * 3:
        raise ValueError(f"{path}: truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).copy()


# ---------------------------------------------------------------------------
# colour coding
# ---------------------------------------------------------------------------

def make_colorwheel() -> np.ndarray:
    """Middlebury 55-entry colour wheel, (55, 3) in [0, 255]."""
    segments = [(15, "RY"), (6, "YG"), (4, "GC"), (11, "CB"), (13, "BM"), (6, "MR")]
    wheel = np.zeros((sum(n for n, _ in segments), 3))
    col = 0
    for n, name in segments:
        ramp = np.floor(255 * np.arange(n) / n)
        rows = slice(col, col + n)
        if name == "RY":
            wheel[rows, 0] = 255
            wheel[rows, 1] = ramp
        elif name == "YG":
            wheel[rows, 0] = 255 - ramp
            wheel[rows, 1] = 255
        elif name == "GC":
            wheel[rows, 1] = 255
            wheel[rows, 2] = ramp
        elif name == "CB":
            wheel[rows, 1] = 255 - ramp
            wheel[rows, 2] = 255
        elif name == "BM":
            wheel[rows, 2] = 255
            wheel[rows, 0] = ramp
        else:
            wheel[rows, 2] = 255 - ramp
            wheel[rows, 0] = 255
        col += n
    return wheel


def flow_to_color(flow: np.ndarray, max_mag: float | None = None) -> np.ndarray:
    flow = _check_flow(flow).astype(np.float64)
    u, v = flow[..., 0], flow[..., 1]
    unknown = ~np.isfinite(u) | ~np.isfinite(v) | (np.abs(u) > UNKNOWN_FLOW_THRESHOLD) | (
        np.abs(v) > UNKNOWN_FLOW_THRESHOLD
    )
    u = np.where(unknown, 0.0, u)
    v = np.where(unknown, 0.0, v)
    mag = np.hypot(u, v)
    if max_mag is None:
        max_mag = float(mag.max()) if mag.size else 0.0
    rad = mag / max_mag if max_mag > 0 else np.zeros_like(mag)

    wheel = make_colorwheel()
    ncols = wheel.shape[0]
    angle = np.arctan2(-v, -u) / np.pi
    angle = np.where(angle >= 1.0, -1.0, angle)  # +pi and -pi are the same hue
    fk = (angle + 1.0) / 2.0 * (ncols - 1)
    k0 = np.floor(fk).astype(int)
    k1 = (k0 + 1) % ncols
    f = fk - k0
    img = np.empty(flow.shape[:2] + (3,))
    inside = rad <= 1
    for ch in range(3):
        col = ((1 - f) * wheel[k0, ch] + f * wheel[k1, ch]) / 255.0
        col = np.where(inside, 1 - rad * (1 - col), col * 0.75)
        img[..., ch] = col
    img[unknown] = 0.0
    return np.floor(255.0 * img + 0.5).clip(0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# end-point error
# ---------------------------------------------------------------------------

def epe_map(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, float]:
    pred, gt = _check_flow(pred), _check_flow(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"epe_map: shape mismatch {pred.shape} vs {gt.shape}")
    diff = pred.astype(np.float64) - gt.astype(np.float64)
    err = np.hypot(diff[..., 0], diff[..., 1])
    return err, float(err.mean())


def epe_to_image(err: np.ndarray, max_err: float | None = None) -> np.ndarray:
    """Grey-scale rendering of an EPE map (white = ``max_err`` or more)."""
    top = float(err.max()) if max_err is None else max_err
    level = err / top if top > 0 else np.zeros_like(err)
    return to_uint8(np.repeat(np.clip(level, 0, 1)[..., None], 3, axis=2))
