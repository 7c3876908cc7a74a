"""PFM / PPM / PGM readers and writers plus the dataset manifest format.

PFM files are written as grayscale "Pf", 32-bit floats, scale -1.0
(little-endian), rows bottom-to-top. The reader also accepts positive-scale
(big-endian) files and byte-swaps; the scale magnitude is parsed but not
applied, matching common practice. PPM is binary "P6" 8-bit; PGM is binary
"P5" 8-bit, used for boolean masks.
"""

from __future__ import annotations

import numpy as np

from .exceptions import IoError, MalformedHeader


def _read_token(f) -> bytes:
    tok = b""
    while True:
        c = f.read(1)
        if not c:
            raise MalformedHeader("unexpected end of header")
        if c.isspace():
            if tok:
                return tok
            continue
        tok += c


def write_pfm(path, grid: np.ndarray, allow_non_finite: bool = False) -> None:
    """Write a (H, W) float grid as little-endian grayscale PFM."""
    arr = np.asarray(grid, dtype=np.float32)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise IoError(f"PFM writer expects a 2D grid, got shape {arr.shape}")
    if not allow_non_finite and not np.isfinite(arr).all():
        raise IoError("refusing to write non-finite values (pass allow_non_finite)")
    h, w = arr.shape
    data = np.flipud(arr).astype("<f4").tobytes()
    try:
        with open(path, "wb") as f:
            f.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
            f.write(data)
    except OSError as e:
        raise IoError(str(e)) from e


def read_pfm(path) -> np.ndarray:
    """Read a grayscale PFM into a (H, W) float32 array (top-to-bottom rows)."""
    try:
        with open(path, "rb") as f:
            magic = _read_token(f)
            if magic not in (b"Pf", b"PF"):
                raise MalformedHeader(f"bad PFM magic {magic!r}")
            channels = 1 if magic == b"Pf" else 3
            try:
                w = int(_read_token(f))
                h = int(_read_token(f))
                scale = float(_read_token(f))
            except ValueError as e:
                raise MalformedHeader(f"bad PFM header: {e}") from e
            if w <= 0 or h <= 0 or scale == 0.0:
                raise MalformedHeader("non-positive dimension or zero scale")
            count = w * h * channels
            buf = f.read(count * 4)
            if len(buf) != count * 4:
                raise MalformedHeader("PFM payload shorter than header declares")
            dtype = "<f4" if scale < 0 else ">f4"
            img = np.frombuffer(buf, dtype=dtype).astype(np.float32)
            if channels == 3:
                img = img.reshape(h, w, 3)[..., 0]
            else:
                img = img.reshape(h, w)
            return np.flipud(img).copy()
    except OSError as e:
        raise IoError(str(e)) from e


def write_ppm(path, image: np.ndarray) -> None:
    """Write a (C, H, W) image in [-1, 1] as binary 8-bit P6 (C in {1, 3})."""
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise IoError(f"PPM writer expects (1|3, H, W), got {arr.shape}")
    if arr.shape[0] == 1:
        arr = np.repeat(arr, 3, axis=0)
    q = np.clip(np.rint((arr + 1.0) * 0.5 * 255.0), 0, 255).astype(np.uint8)
    h, w = q.shape[1:]
    try:
        with open(path, "wb") as f:
            f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            f.write(q.transpose(1, 2, 0).tobytes())
    except OSError as e:
        raise IoError(str(e)) from e


def read_ppm(path) -> np.ndarray:
    """Read binary P6 into a (3, H, W) float32 image in [-1, 1]."""
    try:
        with open(path, "rb") as f:
            if _read_token(f) != b"P6":
                raise MalformedHeader("not a binary PPM (P6)")
            try:
                w = int(_read_token(f))
                h = int(_read_token(f))
                maxval = int(_read_token(f))
            except ValueError as e:
                raise MalformedHeader(f"bad PPM header: {e}") from e
            if maxval != 255:
                raise MalformedHeader(f"unsupported maxval {maxval}")
            buf = f.read(w * h * 3)
            if len(buf) != w * h * 3:
                raise MalformedHeader("PPM payload shorter than header declares")
            q = np.frombuffer(buf, dtype=np.uint8).reshape(h, w, 3)
            return (q.transpose(2, 0, 1).astype(np.float32) / 255.0) * 2.0 - 1.0
    except OSError as e:
        raise IoError(str(e)) from e


def write_pgm(path, mask: np.ndarray) -> None:
    """Write a boolean (H, W) mask as binary P5 (255 = true)."""
    m = np.asarray(mask, dtype=bool)
    if m.ndim != 2:
        raise IoError(f"PGM writer expects (H, W), got {m.shape}")
    try:
        with open(path, "wb") as f:
            f.write(f"P5\n{m.shape[1]} {m.shape[0]}\n255\n".encode("ascii"))
            f.write((m.astype(np.uint8) * 255).tobytes())
    except OSError as e:
        raise IoError(str(e)) from e


def read_pgm(path) -> np.ndarray:
    """Read binary P5 into a boolean (H, W) mask (values > 127 are true)."""
    try:
        with open(path, "rb") as f:
            if _read_token(f) != b"P5":
                raise MalformedHeader("not a binary PGM (P5)")
            try:
                w = int(_read_token(f))
                h = int(_read_token(f))
                maxval = int(_read_token(f))
            except ValueError as e:
                raise MalformedHeader(f"bad PGM header: {e}") from e
            if maxval <= 0 or maxval > 255:
                raise MalformedHeader(f"unsupported maxval {maxval}")
            buf = f.read(w * h)
            if len(buf) != w * h:
                raise MalformedHeader("PGM payload shorter than header declares")
            return np.frombuffer(buf, dtype=np.uint8).reshape(h, w) > 127
    except OSError as e:
        raise IoError(str(e)) from e


def write_manifest(path, records: list[tuple[str, str, str]]) -> None:
    """One record per line: `<image_path> <depth_path> <source_tag>`."""
    try:
        with open(path, "w", encoding="ascii") as f:
            for image_path, depth_path, tag in records:
                f.write(f"{image_path} {depth_path} {tag}\n")
    except OSError as e:
        raise IoError(str(e)) from e


def read_manifest(path) -> list[tuple[str, str, str]]:
    try:
        records = []
        with open(path, "r", encoding="ascii") as f:
            for line_no, line in enumerate(f, 1):
                line = line.strip()
                if not line:
                    continue
                parts = line.split()
                if len(parts) != 3:
                    raise MalformedHeader(
                        f"{path}:{line_no}: expected 3 fields, got {len(parts)}")
                records.append((parts[0], parts[1], parts[2]))
        return records
    except OSError as e:
        raise IoError(str(e)) from e
