"""8-bit image files: PNG through Pillow, PGM/PPM (binary) by hand.

PNG files are walked chunk by chunk before decoding so a corrupt file is
reported with the byte offset where parsing failed.
"""

from __future__ import annotations

import io
import struct
import zlib
from pathlib import Path

import numpy as np
from PIL import Image

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


class ImageParseError(ValueError):
    def __init__(self, path, offset: int, reason: str):
        super().__init__(f"{path}: byte {offset}: {reason}")
        self.path = path
        self.offset = offset
        self.reason = reason


def _validate_png(path, blob: bytes) -> None:
    if not blob.startswith(PNG_SIGNATURE):
        raise ImageParseError(path, 0, "missing PNG signature")
    pos = len(PNG_SIGNATURE)
    seen_end = False
    while pos < len(blob):
        if pos + 8 > len(blob):
            raise ImageParseError(path, pos, "truncated chunk header")
        length, ctype = struct.unpack(">I4s", blob[pos:pos + 8])
        end = pos + 12 + length
        if end > len(blob):
            raise ImageParseError(path, pos, f"chunk {ctype!r} runs past end of file")
        (crc,) = struct.unpack(">I", blob[end - 4:end])
        if zlib.crc32(blob[pos + 4:end - 4]) & 0xFFFFFFFF != crc:
            raise ImageParseError(path, pos, f"CRC mismatch in chunk {ctype!r}")
        pos = end
        if ctype == b"IEND":
            seen_end = True
            break
    if not seen_end:
        raise ImageParseError(path, pos, "no IEND chunk")


def _read_netpbm(path, blob: bytes) -> np.ndarray:
    magic = blob[:2]
    if magic not in (b"P5", b"P6"):
        raise ImageParseError(path, 0, f"unsupported netpbm magic {magic!r}")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and blob[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ImageParseError(path, pos, "expected an integer header field")
        fields.append(int(blob[start:pos]))
    pos += 1  # single whitespace before raster
    width, height, maxval = fields
    if maxval != 255:
        raise ImageParseError(path, pos, f"only maxval 255 supported, got {maxval}")
    channels = 1 if magic == b"P5" else 3
    need = width * height * channels
    if len(blob) - pos < need:
        raise ImageParseError(path, len(blob), f"raster truncated: need {need} bytes after offset {pos}")
    arr = np.frombuffer(blob, dtype=np.uint8, count=need, offset=pos)
    return arr.reshape(height, width) if channels == 1 else arr.reshape(height, width, 3)


def _write_netpbm(path: Path, arr: np.ndarray) -> None:
    magic = b"P5" if arr.ndim == 2 else b"P6"
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(arr, dtype=np.uint8).tobytes())


def write_image(path, arr: np.ndarray) -> None:
    """Write an (H, W) or (H, W, 3) uint8 array; format chosen by suffix."""
    path = Path(path)
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise TypeError(f"expected uint8 pixels, got {arr.dtype}")
    if path.suffix.lower() in (".pgm", ".ppm"):
        _write_netpbm(path, arr)
    else:
        Image.fromarray(arr).save(path, format="PNG")


def read_image(path) -> np.ndarray:
    path = Path(path)
    blob = path.read_bytes()
    if path.suffix.lower() in (".pgm", ".ppm"):
        return _read_netpbm(path, blob).copy()
    _validate_png(path, blob)
    try:
        with Image.open(io.BytesIO(blob)) as im:
            im.load()
            return np.asarray(im).copy()
    except (OSError, SyntaxError) as exc:
        raise ImageParseError(path, len(PNG_SIGNATURE), f"undecodable PNG data ({exc})") from exc


def write_gray(path, arr: np.ndarray) -> None:
    write_image(path, np.asarray(arr, dtype=np.uint8))


def write_sample(directory, sample_id: str, image: np.ndarray, mask: np.ndarray, ext: str = ".png"):
    """Store one sample as ``<id>_img`` (RGB) and ``<id>_mask`` ({0, 255}) files.

    ``image`` is (3, H, W) float in [0, 1]; ``mask`` is (H, W) or (1, H, W) binary.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rgb = np.round(np.clip(np.asarray(image), 0.0, 1.0).transpose(1, 2, 0) * 255.0).astype(np.uint8)
    m = np.asarray(mask).reshape(rgb.shape[:2])
    m8 = np.where(m > 0.5, 255, 0).astype(np.uint8)
    img_path = directory / f"{sample_id}_img{ext}"
    mask_path = directory / f"{sample_id}_mask{ext}"
    write_image(img_path, rgb)
    write_image(mask_path, m8)
    return img_path, mask_path


def read_sample(img_path, mask_path) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`write_sample`: (3, H, W) float image, (H, W) {0, 1} mask."""
    rgb = read_image(img_path)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ImageParseError(img_path, 0, f"expected an RGB image, got array shape {rgb.shape}")
    m8 = read_image(mask_path)
    if m8.ndim != 2:
        raise ImageParseError(mask_path, 0, f"expected a single-channel mask, got array shape {m8.shape}")
    bad = np.setdiff1d(np.unique(m8), [0, 255])
    if bad.size:
        raise ImageParseError(mask_path, 0, f"mask holds values other than 0/255: {bad[:5].tolist()}")
    return rgb.transpose(2, 0, 1).astype(np.float64) / 255.0, (m8 == 255).astype(np.float64)
