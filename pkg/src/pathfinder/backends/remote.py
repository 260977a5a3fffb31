"""HTTP clients for remote model backends.

Every call is ``POST {url}/v1/{route}`` with a JSON body; the server answers
``{"ok": bool, "result": ..., "error": {"type": ..., "message": ...}}``.
Connection failures, timeouts and 5xx responses are retried ``retries`` times
and then raised as :class:`TransportError`; an ``ok: false`` envelope is
raised at once as the error type it names.
"""

from __future__ import annotations

import logging
import threading
import time

import numpy as np
import requests

from ..errors import ERROR_TYPES, BackendError, ProtocolError, TransportError
from . import wire

log = logging.getLogger(__name__)


class RemoteClient:
    route = ""

    def __init__(self, url, timeout=10.0, retries=2, backoff=0.0):
        if timeout <= 0:
            raise ValueError("timeout must be positive")
        self.url = url.rstrip("/")
        self.timeout = float(timeout)
        self.retries = int(retries)
        self.backoff = float(backoff)
        self._local = threading.local()

    def __repr__(self):
        return f"{type(self).__name__}({self.url!r}, timeout={self.timeout}, retries={self.retries})"

    def __getstate__(self):
        state = self.__dict__.copy()
        del state["_local"]
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._local = threading.local()

    @property
    def _session(self) -> requests.Session:
        # One session per thread: pooled connections without sharing across workers.
        session = getattr(self._local, "session", None)
        if session is None:
            session = self._local.session = requests.Session()
        return session

    def _post(self, payload):
        endpoint = f"{self.url}/v1/{self.route}"
        last = None
        for attempt in range(self.retries + 1):
            if attempt and self.backoff:
                time.sleep(self.backoff * attempt)
            try:
                resp = self._session.post(endpoint, json=payload, timeout=self.timeout)
            except (requests.ConnectionError, requests.Timeout) as exc:
                last = exc
                log.debug("%s attempt %d failed: %s", endpoint, attempt + 1, exc)
                continue
            if resp.status_code >= 500:
                last = f"HTTP {resp.status_code}"
                continue
            return self._unwrap(resp)
        raise TransportError(f"{endpoint}: no response after {self.retries + 1} attempts ({last})")

    def _unwrap(self, resp):
        try:
            env = resp.json()
        except ValueError:
            raise ProtocolError(f"{resp.url}: response is not JSON (HTTP {resp.status_code})") from None
        if not isinstance(env, dict) or "ok" not in env:
            raise ProtocolError(f"{resp.url}: response lacks the envelope")
        if not env["ok"]:
            err = env.get("error") or {}
            cls = ERROR_TYPES.get(err.get("type"), BackendError)
            raise cls(err.get("message", "remote backend reported an error"))
        if "result" not in env:
            raise ProtocolError(f"{resp.url}: envelope has no result")
        return env["result"]


def _text(result, what):
    if not isinstance(result, str) or not result.strip():
        raise ProtocolError(f"remote {what} returned no text")
    return result


class RemoteNavigator(RemoteClient):
    route = "navigate"

    def navigate(self, thumbnail, mask, embedding=None):
        payload = {"thumbnail": wire.encode_image(thumbnail), "mask": wire.encode_mask(mask)}
        if embedding is not None:
            payload["embedding"] = wire.encode_floats(embedding)
        return wire.decode_floats(self._post(payload))


class RemoteDescriber(RemoteClient):
    route = "describe"

    def describe(self, patch):
        return _text(self._post({"patch": wire.encode_patch(patch)}), "describer")


class RemoteEmbedder(RemoteClient):
    route = "embed"

    def embed_text(self, text):
        return wire.decode_floats(self._post({"text": text}))

    def embed_patch(self, patch):
        return wire.decode_floats(self._post({"patch": wire.encode_patch(patch)}))


class RemoteTriage(RemoteClient):
    route = "triage"

    def score(self, grid):
        result = self._post({"grid": wire.encode_grid(grid)})
        if isinstance(result, bool) or not isinstance(result, (int, float)):
            raise ProtocolError(f"triage score must be a number, got {result!r}")
        score = float(result)
        if not np.isfinite(score) or not 0.0 <= score <= 1.0:
            raise ProtocolError(f"triage score {score!r} is outside [0, 1]")
        return score


class RemoteDiagnoser(RemoteClient):
    route = "diagnose"

    def diagnose(self, prompt):
        return _text(self._post({"prompt": prompt}), "diagnoser")


class RemoteRephraser(RemoteClient):
    route = "rephrase"

    def rephrase(self, text):
        return _text(self._post({"text": text}), "rephraser")
