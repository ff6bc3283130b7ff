"""Image geometry on C x H x W float arrays, and binary PPM I/O."""
from pathlib import Path

import numpy as np

from .errors import FormatError, ParameterError


def _axis_coords(n_in, n_out, start=0.0, extent=None):
    extent = n_in if extent is None else extent
    src = start + (np.arange(n_out) + 0.5) * (extent / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_bilinear(img, out_h, out_w, box=None):
    """Bilinear resample (half-pixel centres, edge clamp).

    ``box = (top, left, height, width)`` resamples only that window, in source
    pixel units, which fuses crop and resize.
    """
    c, h, w = img.shape
    if out_h < 1 or out_w < 1:
        raise ParameterError(f"resize target must be positive, got {out_h}x{out_w}")
    top, left, bh, bw = box if box is not None else (0.0, 0.0, h, w)
    y0, y1, wy = _axis_coords(h, out_h, top, bh)
    x0, x1, wx = _axis_coords(w, out_w, left, bw)
    rows = img[:, y0, :] * (1.0 - wy)[None, :, None] + img[:, y1, :] * wy[None, :, None]
    return rows[:, :, x0] * (1.0 - wx) + rows[:, :, x1] * wx


def center_crop(img, size):
    """Centered ``size x size`` window; images smaller than ``size`` are zero-padded symmetrically first."""
    c, h, w = img.shape
    ph, pw = max(0, size - h), max(0, size - w)
    if ph or pw:
        img = np.pad(img, ((0, 0), (ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2)))
        h, w = img.shape[1:]
    top = (h - size) // 2
    left = (w - size) // 2
    return img[:, top : top + size, left : left + size]


def resize_short_edge(img, size):
    c, h, w = img.shape
    if h <= w:
        return resize_bilinear(img, size, max(1, int(round(w * size / h))))
    return resize_bilinear(img, max(1, int(round(h * size / w))), size)


def hflip(img):
    return img[:, :, ::-1]


def to_uint8(img):
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, img):
    """Binary P6, maxval 255. ``img`` is 3 x H x W in [0, 1]."""
    c, h, w = img.shape
    if c != 3:
        raise ParameterError(f"PPM needs 3 channels, got {c}")
    pixels = to_uint8(img).transpose(1, 2, 0).tobytes()
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + pixels)


def _tokens(buf, count):
    out, pos = [], 2
    while len(out) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PPM header", offset=pos)
        out.append(int(buf[start:pos]))
    return out, pos + 1


def read_ppm(path):
    buf = Path(path).read_bytes()
    if buf[:2] != b"P6":
        raise FormatError(f"{path}: not a binary PPM", offset=0)
    (w, h, maxval), start = _tokens(buf, 3)
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 is supported, got {maxval}", offset=start)
    need = start + 3 * w * h
    if len(buf) < need:
        raise FormatError(f"{path}: truncated pixel data", offset=len(buf))
    arr = np.frombuffer(buf, dtype=np.uint8, count=3 * w * h, offset=start).reshape(h, w, 3)
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0
