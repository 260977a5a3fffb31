"""Deterministic in-process stand-ins for the model backends.

They are "signal aware": each reads the synthetic stain colours the slide
generator plants, so an end-to-end run on synthetic slides can recover the
planted class.  Every mock is a pure function of its input and constructor
arguments.
"""

from __future__ import annotations

import colorsys
import hashlib
import math
import re
import threading

import numpy as np

from ..diagnosis import DiagnosisClass, descriptions_from_prompt
from ..errors import InvalidRequestError
from ..slide_io import PatchPixels, pixel_saturation

# Per-pixel saturation above which a pixel counts as stained.
STAIN_FLOOR = 40.0
# Saturation above which a pixel counts as strongly stained (classes II-IV only).
STRONG_STAIN = 100.0

# Layout of the mock patch embedding; remaining dimensions are zero.
PATCH_FEATURES = ("mean_red", "mean_green", "mean_blue", "mean_saturation", "strong_stain_fraction")
STRONG_STAIN_SLOT = PATCH_FEATURES.index("strong_stain_fraction")


class MockNavigator:
    """Heat = stain density of the (masked) thumbnail, or a flat map for ``variant="uniform"``.

    The conditioning vector is accepted and ignored: the planted-lesion slides
    need no text feedback to be navigated, and ignoring it keeps the mock pure.
    """

    variants = ("stain_density", "uniform")

    def __init__(self, variant="stain_density", floor=STAIN_FLOOR):
        if variant not in self.variants:
            raise ValueError(f"unknown navigator variant {variant!r}")
        self.variant = variant
        self.floor = float(floor)

    def navigate(self, thumbnail, mask, embedding=None):
        thumbnail = np.asarray(thumbnail)
        if thumbnail.ndim != 3 or thumbnail.shape[2] != 3:
            raise InvalidRequestError(f"thumbnail must be RGB, got shape {thumbnail.shape}")
        if self.variant == "uniform":
            return np.ones(thumbnail.shape[:2], dtype=np.float32)
        r, g, b = thumbnail[..., 0], thumbnail[..., 1], thumbnail[..., 2]
        mx = np.maximum(np.maximum(r, g), b)
        mn = np.minimum(np.minimum(r, g), b)
        sat = (mx - mn).astype(np.float32) * np.float32(255.0) / np.maximum(mx, 1).astype(np.float32)
        # Saturation never exceeds 255, so the heat never exceeds 1.
        heat = np.maximum(sat - np.float32(self.floor), np.float32(0.0))
        return heat * np.float32(1.0 / (255.0 - self.floor))


def mean_color(pixels) -> np.ndarray:
    flat = np.asarray(pixels).reshape(-1, 3)
    # Sum through a matrix product: exact for uint8 inputs and much faster than a strided mean.
    return (np.ones(flat.shape[0]) @ flat) / flat.shape[0]


def _stain_summary(pixels):
    sat = pixel_saturation(pixels)
    stained = sat > STAIN_FLOOR
    return sat, stained


class MockDescriber:
    """Template descriptions keyed on stain fraction, saturation band and hue band."""

    UNREMARKABLE = "unremarkable epidermis and superficial dermis, no atypical melanocytes"
    TEMPLATES = {
        "nevus": "benign-appearing nevus with nests of bland melanocytes",
        "in situ": "atypical junctional melanocytes consistent with melanoma in situ, severe cytologic atypia",
        "invasive": "invasive melanoma cells in the papillary dermis, thin lesion",
        "advanced": "advanced invasive melanoma with deep dermal nests and frequent mitoses",
    }

    def __init__(self, min_stained_fraction=0.05, dense_saturation=110.0):
        self.min_stained_fraction = min_stained_fraction
        self.dense_saturation = dense_saturation

    @staticmethod
    def hue_keyword(hue_deg: float) -> str:
        if 225.0 <= hue_deg < 265.0:
            return "advanced"
        if 265.0 <= hue_deg < 310.0:
            return "in situ"
        if hue_deg >= 310.0 or hue_deg < 15.0:
            return "invasive"
        return "nevus"

    def keyword(self, pixels) -> str:
        sat, stained = _stain_summary(pixels)
        if stained.mean() < self.min_stained_fraction:
            return "unremarkable"
        if sat[stained].mean() < self.dense_saturation:
            return "nevus"
        r, g, b = pixels[stained].mean(axis=0) / 255.0
        hue = colorsys.rgb_to_hsv(r, g, b)[0] * 360.0
        return self.hue_keyword(hue)

    def describe(self, patch: PatchPixels) -> str:
        pixels = np.asarray(patch.pixels)
        if pixels.size == 0:
            raise InvalidRequestError("empty patch")
        key = self.keyword(pixels)
        text = self.UNREMARKABLE if key == "unremarkable" else self.TEMPLATES[key]
        r, g, b = (int(v) // 32 for v in mean_color(pixels))
        sat = float(pixel_saturation(pixels).mean())
        band = "light" if sat < 15 else "moderate" if sat < 60 else "dense"
        return f"{text}; {band} staining, tone {r}-{g}-{b}"


class MockEmbedder:
    """Seeded feature hashing for text; colour statistics for patches.

    Text vectors hash unigrams and bigrams into signed buckets, add a dense
    component keyed on the whole string (so distinct texts never share a
    vector short of a 128-bit hash collision) and are scaled to unit norm.
    """

    def __init__(self, dim=768, seed=0):
        if dim < 1:
            raise ValueError("embedding dimension must be positive")
        self.dim = int(dim)
        self.seed = int(seed)
        self._key = (self.seed & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "little")

    def _hash(self, text: str, size=8) -> int:
        digest = hashlib.blake2b(text.encode("utf-8"), digest_size=size, key=self._key).digest()
        return int.from_bytes(digest, "little")

    def embed_text(self, text: str) -> np.ndarray:
        if not isinstance(text, str) or not text.strip():
            raise InvalidRequestError("cannot embed empty text")
        tokens = re.findall(r"[a-z0-9]+", text.lower())
        features = tokens + [a + " " + b for a, b in zip(tokens, tokens[1:])]
        vec = np.zeros(self.dim)
        for f in features:
            h = self._hash(f)
            vec[h % self.dim] += 1.0 if (h >> 63) & 1 else -1.0
        dense = np.random.default_rng(self._hash("\x00" + text, 16)).standard_normal(self.dim)
        vec += 0.5 * dense / math.sqrt(self.dim)
        return vec / np.linalg.norm(vec)

    def embed_patch(self, patch: PatchPixels) -> np.ndarray:
        pixels = np.asarray(patch.pixels)
        if pixels.size == 0:
            raise InvalidRequestError("empty patch")
        sat = pixel_saturation(pixels)
        stats = np.concatenate([
            mean_color(pixels) / 255.0,
            [sat.mean() / 255.0, (sat > STRONG_STAIN).mean()],
        ])
        vec = np.zeros(self.dim)
        n = min(self.dim, stats.size)
        vec[:n] = stats[:n]
        return vec

    def embed(self, item):
        return self.embed_patch(item) if isinstance(item, PatchPixels) else self.embed_text(item)


class MockTriage:
    """Logistic of the grid's mean strong-stain fraction against a cut-off."""

    def __init__(self, slot=STRONG_STAIN_SLOT, cut=0.01, gain=200.0):
        self.slot = slot
        self.cut = cut
        self.gain = gain

    def score(self, grid) -> float:
        rows = np.asarray(grid.rows)
        if rows.ndim != 2 or rows.shape[1] <= self.slot:
            raise InvalidRequestError(f"features need more than {self.slot} dimensions")
        proxy = float(rows[:, self.slot].mean())
        z = self.gain * (proxy - self.cut)
        # Stable logistic.
        if z >= 0:
            return 1.0 / (1.0 + math.exp(-z))
        e = math.exp(z)
        return e / (1.0 + e)


class MockDiagnoser:
    """Keyword priority scan over the descriptions section of the prompt."""

    def diagnose(self, prompt: str) -> str:
        text = "\n".join(descriptions_from_prompt(prompt)).lower()
        if "advanced" in text:
            label = DiagnosisClass.IV
        elif "invasive" in text:
            label = DiagnosisClass.III
        else:
            # "in situ"/"severe" and the post-triage floor both land on II.
            label = DiagnosisClass.II
        return label.option_text


class MockRephraser:
    SYNONYMS = (
        ("unremarkable epidermis", "epidermis without notable change"),
        ("superficial dermis", "upper dermis"),
        ("atypical", "irregular"),
        ("nests", "clusters"),
        ("bland", "uniform"),
        ("frequent", "numerous"),
        ("benign-appearing", "harmless-looking"),
    )

    def rephrase(self, text: str) -> str:
        if not isinstance(text, str) or not text.strip():
            raise InvalidRequestError("cannot rephrase empty text")
        for old, new in self.SYNONYMS:
            text = text.replace(old, new)
        return text


class Recorder:
    """Wraps a backend and logs every method call as ``(name, args, kwargs)``."""

    def __init__(self, backend):
        self._backend = backend
        self._lock = threading.Lock()
        self.calls = []

    def __getattr__(self, name):
        attr = getattr(self._backend, name)
        if not callable(attr):
            return attr

        def wrapper(*args, **kwargs):
            with self._lock:
                self.calls.append((name, _snapshot(args), _snapshot(kwargs)))
            return attr(*args, **kwargs)

        return wrapper

    def calls_to(self, name) -> list:
        return [c for c in self.calls if c[0] == name]


def _snapshot(obj):
    if isinstance(obj, np.ndarray):
        return obj.copy()
    if isinstance(obj, tuple):
        return tuple(_snapshot(o) for o in obj)
    if isinstance(obj, dict):
        return {k: _snapshot(v) for k, v in obj.items()}
    return obj
