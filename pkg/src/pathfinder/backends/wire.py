"""JSON payload encodings shared by the remote clients and the stub server.

Images travel as base64 raw RGB with explicit width/height/channels; float
arrays as base64 little-endian data with a dtype tag and shape.  Heatmaps
are always ``<f4``; embeddings and triage grids ``<f8``.
"""

from __future__ import annotations

import base64

import numpy as np

from ..errors import ProtocolError
from ..slide_io import PatchCoord, PatchPixels
from ..triage import PaddedGrid

_FLOAT_TYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def _unb64(text) -> bytes:
    if not isinstance(text, str):
        raise ProtocolError(f"base64 payload must be a string, got {type(text).__name__}")
    try:
        raw = base64.b64decode(text)
    except ValueError as exc:
        raise ProtocolError(f"bad base64 payload ({exc})") from None
    # The lenient decoder skips stray characters; a canonical encoding has no
    # room for any, so a length check rejects them without a regex pass.
    if len(text) != 4 * ((len(raw) + 2) // 3):
        raise ProtocolError("bad base64 payload (non-canonical length or stray characters)")
    return raw


def encode_image(pixels) -> dict:
    px = np.ascontiguousarray(pixels, dtype=np.uint8)
    if px.ndim != 3:
        raise ValueError("expected an (height, width, channels) image")
    h, w, c = px.shape
    return {"width": w, "height": h, "channels": c, "data": _b64(px.tobytes())}


def decode_image(obj) -> np.ndarray:
    try:
        w, h, c = int(obj["width"]), int(obj["height"]), int(obj["channels"])
        raw = _unb64(obj["data"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ProtocolError(f"bad image payload ({exc})") from None
    if c != 3:
        raise ProtocolError(f"images must be RGB, got {c} channels")
    if len(raw) != w * h * c:
        raise ProtocolError(f"image payload has {len(raw)} bytes, {w}x{h}x{c} needs {w * h * c}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, c).copy()


def encode_floats(values, dtype="<f8") -> dict:
    arr = np.ascontiguousarray(values, dtype=_FLOAT_TYPES[dtype])
    return {"shape": list(arr.shape), "dtype": dtype, "data": _b64(arr.tobytes())}


def decode_floats(obj) -> np.ndarray:
    try:
        dtype = _FLOAT_TYPES[obj["dtype"]]
        shape = tuple(int(s) for s in obj["shape"])
        raw = _unb64(obj["data"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ProtocolError(f"bad float payload ({exc})") from None
    if len(raw) != int(np.prod(shape, dtype=np.int64)) * dtype.itemsize:
        raise ProtocolError(f"float payload size does not match shape {shape}")
    return np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def encode_heatmap(heatmap) -> dict:
    return encode_floats(heatmap, "<f4")


def encode_mask(mask) -> list:
    return [[bool(v) for v in row] for row in np.asarray(mask)]


def decode_mask(obj) -> np.ndarray:
    try:
        mask = np.array(obj, dtype=bool)
    except (TypeError, ValueError) as exc:
        raise ProtocolError(f"bad mask ({exc})") from None
    if mask.ndim != 2 or mask.shape[0] != mask.shape[1]:
        raise ProtocolError(f"mask must be a square grid, got shape {mask.shape}")
    return mask


def encode_patch(patch: PatchPixels) -> dict:
    return {"coord": patch.coord.to_dict(), "image": encode_image(patch.pixels)}


def decode_patch(obj) -> PatchPixels:
    try:
        coord = PatchCoord.from_dict(obj["coord"])
        image = obj["image"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ProtocolError(f"bad patch payload ({exc})") from None
    return PatchPixels(coord, decode_image(image))


def encode_grid(grid: PaddedGrid) -> dict:
    return {"side": grid.side, "pad_count": grid.pad_count, "rows": encode_floats(grid.rows)}


def decode_grid(obj) -> PaddedGrid:
    try:
        return PaddedGrid(int(obj["side"]), decode_floats(obj["rows"]), int(obj["pad_count"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ProtocolError(f"bad grid payload ({exc})") from None
