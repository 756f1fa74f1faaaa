"""Binary PGM (P5) / PPM (P6) codec, 8-bit only."""

from __future__ import annotations

from pathlib import Path

import numpy as np

_WHITESPACE = b" \t\r\n\x0b\x0c"


class NetpbmError(ValueError):
    pass


def _header_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    i = 0
    while len(tokens) < count:
        if i >= len(buf):
            raise NetpbmError("truncated header")
        c = buf[i:i + 1]
        if c in _WHITESPACE and c:
            i += 1
        elif c == b"#":
            end = buf.find(b"\n", i)
            if end < 0:
                raise NetpbmError("truncated header comment")
            i = end + 1
        else:
            j = i
            while j < len(buf) and buf[j:j + 1] not in _WHITESPACE and buf[j:j + 1] != b"#":
                j += 1
            tokens.append(buf[i:j])
            i = j
    # exactly one whitespace byte separates maxval from the raster
    if i >= len(buf) or buf[i:i + 1] not in _WHITESPACE:
        raise NetpbmError("missing whitespace after header")
    return tokens, i + 1


def decode(buf: bytes) -> np.ndarray:
    """Decode P5/P6 bytes into a uint8 array of shape [C, H, W]."""
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise NetpbmError(f"unsupported magic {magic!r}; expected P5 or P6")
    channels = 1 if magic == b"P5" else 3
    tokens, offset = _header_tokens(buf[2:], 3)
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise NetpbmError(f"non-integer header field in {tokens!r}") from exc
    if width < 1 or height < 1:
        raise NetpbmError(f"invalid dimensions {width}x{height}")
    if not 0 < maxval < 256:
        raise NetpbmError(f"only 8-bit rasters are supported, maxval={maxval}")
    start = 2 + offset
    need = width * height * channels
    raster = buf[start:start + need]
    if len(raster) < need:
        raise NetpbmError(f"raster truncated: expected {need} bytes, found {len(raster)}")
    img = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, channels)
    if maxval != 255:
        img = np.round(img.astype(np.float64) * (255.0 / maxval)).astype(np.uint8)
    return np.ascontiguousarray(img.transpose(2, 0, 1))


def encode(img: np.ndarray) -> bytes:
    """Encode a uint8 [C, H, W] array (C = 1 or 3) as P5 or P6."""
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise NetpbmError(f"expected uint8 pixels, got {img.dtype}")
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise NetpbmError(f"expected [1|3, H, W], got shape {img.shape}")
    c, h, w = img.shape
    magic = b"P5" if c == 1 else b"P6"
    header = magic + f"\n{w} {h}\n255\n".encode("ascii")
    return header + np.ascontiguousarray(img.transpose(1, 2, 0)).tobytes()


def read(path: str | Path) -> np.ndarray:
    path = Path(path)
    try:
        return decode(path.read_bytes())
    except NetpbmError as exc:
        raise NetpbmError(f"{path}: {exc}") from exc


def write(path: str | Path, img: np.ndarray) -> None:
    Path(path).write_bytes(encode(img))
