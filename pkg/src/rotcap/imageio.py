"""Raw image loading and saving.

PPM (P6 binary, P3 ascii) is handled natively so datasets round-trip with
no image library at all; everything else (PNG at minimum) goes through
Pillow.  Raw images are uint8 arrays of shape H x W x 3.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DataError


def validate_raw_image(pixels: np.ndarray, source: str = "image") -> np.ndarray:
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise DataError(f"{source}: expected H x W x 3 pixels, got shape {pixels.shape}")
    if pixels.shape[0] < 1 or pixels.shape[1] < 1:
        raise DataError(f"{source}: empty image")
    if pixels.dtype != np.uint8:
        raise DataError(f"{source}: expected uint8 pixels, got {pixels.dtype}")
    return pixels


def _read_ppm_tokens(data: bytes, count: int, pos: int) -> tuple[list[int], int]:
    # Header tokens are whitespace separated; '#' starts a comment to EOL.
    tokens: list[int] = []
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos < n and data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError("ppm: truncated header")
        tokens.append(int(data[start:pos]))
    return tokens, pos


def read_ppm(path: str | Path) -> np.ndarray:
    path = Path(path)
    data = path.read_bytes()
    if data[:2] not in (b"P6", b"P3"):
        raise DataError(f"{path}: not a PPM file (bad magic {data[:2]!r})")
    binary = data[:2] == b"P6"
    try:
        (width, height, maxval), pos = _read_ppm_tokens(data, 3, 2)
    except (ValueError, DataError) as exc:
        raise DataError(f"{path}: bad PPM header: {exc}") from None
    if maxval != 255:
        raise DataError(f"{path}: only maxval 255 PPM is supported, got {maxval}")
    if binary:
        pos += 1  # single whitespace byte after maxval
        raster = np.frombuffer(data, dtype=np.uint8, count=-1, offset=pos)
        if raster.size < width * height * 3:
            raise DataError(f"{path}: truncated PPM raster")
        pixels = raster[: width * height * 3].reshape(height, width, 3).copy()
    else:
        try:
            values, _ = _read_ppm_tokens(data, width * height * 3, pos)
        except DataError:
            raise DataError(f"{path}: truncated PPM raster") from None
        pixels = np.array(values, dtype=np.uint8).reshape(height, width, 3)
    return validate_raw_image(pixels, str(path))


def write_ppm(path: str | Path, pixels: np.ndarray) -> None:
    pixels = validate_raw_image(np.asarray(pixels), str(path))
    height, width = pixels.shape[:2]
    header = f"P6\n{width} {height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + pixels.tobytes())


def load_image(path: str | Path) -> np.ndarray:
    """Load any supported image file as uint8 H x W x 3."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"image file not found: {path}")
    if path.suffix.lower() in (".ppm", ".pnm"):
        return read_ppm(path)
    try:
        from PIL import Image

        with Image.open(path) as img:
            pixels = np.asarray(img.convert("RGB"), dtype=np.uint8)
    except DataError:
        raise
    except Exception as exc:
        raise DataError(f"{path}: cannot decode image: {exc}") from None
    return validate_raw_image(pixels, str(path))


def save_image(path: str | Path, pixels: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() in (".ppm", ".pnm"):
        write_ppm(path, pixels)
        return
    from PIL import Image

    Image.fromarray(validate_raw_image(np.asarray(pixels), str(path))).save(path)
