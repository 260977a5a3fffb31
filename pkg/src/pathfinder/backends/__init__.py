"""Backend contracts, configuration and construction.

A :class:`BackendSet` bundles one implementation per agent.  Each kind is
either an in-process mock or a remote HTTP client; the config file maps
kind -> ``{"mode", "url", "timeout_s", "retries"}``::

    {"embedding_dim": 768,
     "navigator": {"mode": "remote", "url": "http://127.0.0.1:8500", "timeout_s": 5, "retries": 2},
     "diagnoser": {"mode": "mock"}}

Kinds left out default to mocks.  ``"rephraser": null`` disables rephrasing.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol

import numpy as np

from ..errors import DataError, ProtocolError
from . import mock, remote

KINDS = ("navigator", "describer", "embedder", "triage", "diagnoser", "rephraser")
ENV_VAR = "PATHFINDER_BACKENDS"
DEFAULT_EMBEDDING_DIM = 768


class Navigator(Protocol):
    def navigate(self, thumbnail: np.ndarray, mask: np.ndarray,
                 embedding: Optional[np.ndarray] = None) -> np.ndarray: ...


class Describer(Protocol):
    def describe(self, patch) -> str: ...


class Embedder(Protocol):
    def embed_text(self, text: str) -> np.ndarray: ...

    def embed_patch(self, patch) -> np.ndarray: ...


class TriageBackend(Protocol):
    def score(self, grid) -> float: ...


class Diagnoser(Protocol):
    def diagnose(self, prompt: str) -> str: ...


class Rephraser(Protocol):
    def rephrase(self, text: str) -> str: ...


@dataclass(frozen=True)
class BackendEndpoint:
    kind: str
    mode: str = "mock"
    url: Optional[str] = None
    timeout: float = 10.0
    retries: int = 2
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown backend kind {self.kind!r}")
        if self.mode not in ("mock", "remote"):
            raise ValueError(f"backend mode must be 'mock' or 'remote', got {self.mode!r}")
        if (self.mode == "remote") != (self.url is not None):
            raise ValueError(f"{self.kind}: a url is required for remote mode and only there")
        if self.timeout <= 0:
            raise ValueError(f"{self.kind}: timeout must be positive")
        if self.retries < 0:
            raise ValueError(f"{self.kind}: retries must be non-negative")

    def to_dict(self) -> dict:
        d = {"mode": self.mode, "url": self.url, "timeout_s": self.timeout, "retries": self.retries}
        d.update(self.options)
        return d


@dataclass(frozen=True)
class BackendConfig:
    endpoints: dict
    embedding_dim: int = DEFAULT_EMBEDDING_DIM
    seed: int = 0

    def to_dict(self) -> dict:
        d = {"embedding_dim": self.embedding_dim, "seed": self.seed}
        for kind in KINDS:
            ep = self.endpoints.get(kind)
            d[kind] = ep.to_dict() if ep else None
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "BackendConfig":
        if not isinstance(data, dict):
            raise DataError("backend config must be a JSON object")
        unknown = set(data) - set(KINDS) - {"embedding_dim", "seed"}
        if unknown:
            raise DataError(f"unknown backend config keys {sorted(unknown)}")
        endpoints = {}
        for kind in KINDS:
            if kind in data and data[kind] is None:
                continue
            spec = dict(data.get(kind) or {})
            try:
                endpoints[kind] = BackendEndpoint(
                    kind,
                    mode=spec.pop("mode", "mock"),
                    url=spec.pop("url", None),
                    timeout=float(spec.pop("timeout_s", 10.0)),
                    retries=int(spec.pop("retries", 2)),
                    options=spec,
                )
            except (TypeError, ValueError) as exc:
                raise DataError(f"backend config: {exc}") from None
        return cls(endpoints, int(data.get("embedding_dim", DEFAULT_EMBEDDING_DIM)),
                   int(data.get("seed", 0)))

    @classmethod
    def all_mock(cls, embedding_dim=DEFAULT_EMBEDDING_DIM, **options) -> "BackendConfig":
        return cls({k: BackendEndpoint(k, options=dict(options.get(k, {}))) for k in KINDS},
                   embedding_dim)

    @classmethod
    def all_remote(cls, url, embedding_dim=DEFAULT_EMBEDDING_DIM, timeout=10.0, retries=2):
        return cls({k: BackendEndpoint(k, "remote", url, timeout, retries) for k in KINDS},
                   embedding_dim)


def load_config(source=None) -> BackendConfig:
    """Resolve ``"mock"``, an ``http(s)://`` base URL, or a JSON file path.

    With no source, ``$PATHFINDER_BACKENDS`` is consulted, then all-mock.
    """
    if source is None:
        source = os.environ.get(ENV_VAR) or "mock"
    if isinstance(source, BackendConfig):
        return source
    if isinstance(source, dict):
        return BackendConfig.from_dict(source)
    source = str(source)
    if source == "mock":
        return BackendConfig.all_mock()
    if source.startswith(("http://", "https://")):
        return BackendConfig.all_remote(source)
    path = Path(source)
    if not path.is_file():
        raise DataError(f"backend config {source!r} is neither 'mock', a URL, nor a file")
    try:
        data = json.loads(path.read_text())
    except ValueError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    return BackendConfig.from_dict(data)


class CheckedEmbedder:
    """Rejects vectors of the wrong dimension or with non-finite entries."""

    def __init__(self, inner, dim):
        self.inner = inner
        self.dim = dim

    def _check(self, vec):
        v = np.asarray(vec, dtype=np.float64)
        if v.shape != (self.dim,):
            raise ProtocolError(f"embedder returned shape {v.shape}, expected ({self.dim},)")
        if not np.all(np.isfinite(v)):
            raise ProtocolError("embedder returned non-finite values")
        return v

    def embed_text(self, text):
        return self._check(self.inner.embed_text(text))

    def embed_patch(self, patch):
        return self._check(self.inner.embed_patch(patch))


@dataclass
class BackendSet:
    navigator: Navigator
    describer: Describer
    embedder: Embedder
    triage: TriageBackend
    diagnoser: Diagnoser
    rephraser: Optional[Rephraser] = None
    embedding_dim: int = DEFAULT_EMBEDDING_DIM

    def replace(self, **changes) -> "BackendSet":
        return BackendSet(**{**self.__dict__, **changes})


_MOCKS = {
    "navigator": lambda ep, cfg: mock.MockNavigator(**ep.options),
    "describer": lambda ep, cfg: mock.MockDescriber(**ep.options),
    "embedder": lambda ep, cfg: mock.MockEmbedder(cfg.embedding_dim, ep.options.get("seed", cfg.seed)),
    "triage": lambda ep, cfg: mock.MockTriage(**ep.options),
    "diagnoser": lambda ep, cfg: mock.MockDiagnoser(),
    "rephraser": lambda ep, cfg: mock.MockRephraser(),
}

_REMOTES = {
    "navigator": remote.RemoteNavigator,
    "describer": remote.RemoteDescriber,
    "embedder": remote.RemoteEmbedder,
    "triage": remote.RemoteTriage,
    "diagnoser": remote.RemoteDiagnoser,
    "rephraser": remote.RemoteRephraser,
}


def build_backends(config=None) -> BackendSet:
    config = load_config(config)
    built = {}
    for kind in KINDS:
        ep = config.endpoints.get(kind)
        if ep is None:
            built[kind] = None
        elif ep.mode == "mock":
            try:
                built[kind] = _MOCKS[kind](ep, config)
            except TypeError as exc:
                raise DataError(f"bad options for mock {kind}: {exc}") from None
        else:
            built[kind] = _REMOTES[kind](ep.url, timeout=ep.timeout, retries=ep.retries)
    missing = [k for k in KINDS[:-1] if built[k] is None]
    if missing:
        raise DataError(f"backend config lacks required kinds {missing}")
    built["embedder"] = CheckedEmbedder(built["embedder"], config.embedding_dim)
    return BackendSet(embedding_dim=config.embedding_dim, **built)


def mock_backends(embedding_dim=DEFAULT_EMBEDDING_DIM, navigator="stain_density", seed=0,
                  rephraser=True) -> BackendSet:
    """All-mock backends; ``navigator="uniform"`` gives uniform random cell selection."""
    return BackendSet(
        navigator=mock.MockNavigator(navigator),
        describer=mock.MockDescriber(),
        embedder=mock.MockEmbedder(embedding_dim, seed),
        triage=mock.MockTriage(),
        diagnoser=mock.MockDiagnoser(),
        rephraser=mock.MockRephraser() if rephraser else None,
        embedding_dim=embedding_dim,
    )


__all__ = [
    "BackendConfig", "BackendEndpoint", "BackendSet", "CheckedEmbedder", "KINDS",
    "build_backends", "load_config", "mock_backends",
]
