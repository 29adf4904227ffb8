"""Image file I/O.

Images in memory are float64 numpy arrays in [0, 1]: grayscale (H, W) or
color (H, W, 3). PNG goes through Pillow; binary PGM (P5) and PPM (P6) are
read and written directly so test fixtures stay dependency-free.
"""

import numpy as np
from PIL import Image as PILImage


def load_image(path):
    """Read an 8-bit PNG/PGM/PPM file into a [0, 1] float array."""
    path = str(path)
    if path.endswith((".pgm", ".ppm", ".pnm")):
        return _read_pnm(path)
    with PILImage.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB" if im.mode in ("RGBA", "P", "CMYK") else "L")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return arr


def save_image(path, img):
    """Write a [0, 1] float image as 8-bit PNG/PGM/PPM."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    raw = np.round(arr * 255.0).astype(np.uint8)
    path = str(path)
    if path.endswith((".pgm", ".ppm", ".pnm")):
        _write_pnm(path, raw)
        return
    mode = "L" if raw.ndim == 2 else "RGB"
    PILImage.fromarray(raw, mode=mode).save(path)


def _read_pnm(path):
    with open(path, "rb") as f:
        blob = f.read()
    magic, rest = blob.split(None, 1)
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: unsupported PNM magic {magic!r}")
    fields = []
    pos = 0
    while len(fields) < 3:
        while pos < len(rest) and rest[pos:pos + 1].isspace():
            pos += 1
        if rest[pos:pos + 1] == b"#":
            pos = rest.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(rest) and not rest[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(rest[start:pos]))
    pos += 1  # single whitespace byte before the payload
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PNM supported (maxval {maxval})")
    channels = 1 if magic == b"P5" else 3
    data = np.frombuffer(rest, dtype=np.uint8, count=w * h * channels, offset=pos)
    arr = data.reshape((h, w) if channels == 1 else (h, w, 3))
    return arr.astype(np.float64) / 255.0


def _write_pnm(path, raw):
    if raw.ndim == 2:
        magic = b"P5"
        h, w = raw.shape
    elif raw.ndim == 3 and raw.shape[2] == 3:
        magic = b"P6"
        h, w = raw.shape[:2]
    else:
        raise ValueError(f"cannot write PNM for shape {raw.shape}")
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h))
        f.write(raw.tobytes())
