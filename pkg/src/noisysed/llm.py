"""Client for an external noise-selection language model.

Wire protocol, one JSON object per line::

    request  {"id": "...", "prompt": "..."}
    response {"id": "...", "classes": ["rain", "..."]}

The endpoint is either an ``http(s)://`` URL (the request is POSTed as the
body) or a shell command whose child process speaks the protocol on its
standard streams.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shlex
import subprocess
import threading
import time
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

log = logging.getLogger(__name__)

ENDPOINT_ENV = "NOISE_LLM_ENDPOINT"


class TransportError(Exception):
    pass


def encode_request(req_id: str, prompt: str) -> str:
    return json.dumps({"id": req_id, "prompt": prompt})


def decode_response(line: str) -> dict:
    try:
        msg = json.loads(line)
    except json.JSONDecodeError as exc:
        raise TransportError(f"malformed response: {exc}") from None
    if not isinstance(msg, dict) or "classes" not in msg:
        raise TransportError("response lacks 'classes'")
    return msg


def parse_classes(raw) -> list[str]:
    """Accept a list of names or a newline/comma separated string."""
    if isinstance(raw, str):
        raw = raw.replace("\n", ",").split(",")
    if not isinstance(raw, (list, tuple)):
        raise TransportError(f"cannot parse class list from {type(raw).__name__}")
    out = []
    for item in raw:
        name = str(item).strip()
        if name and name not in out:
            out.append(name)
    return out


def prompt_sha256(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


class _HttpTransport:
    def __init__(self, url: str, timeout: float):
        self.url = url
        self.timeout = timeout

    def __call__(self, req_id: str, prompt: str):
        body = encode_request(req_id, prompt).encode("utf-8")
        req = urllib.request.Request(
            self.url, data=body, headers={"Content-Type": "application/json"}
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return decode_response(resp.read().decode("utf-8"))["classes"]
        except OSError as exc:
            raise TransportError(str(exc)) from exc


class _ProcessTransport:
    def __init__(self, command: str):
        self.command = command
        self.proc: subprocess.Popen | None = None

    def _ensure(self):
        if self.proc is None or self.proc.poll() is not None:
            self.proc = subprocess.Popen(
                shlex.split(self.command),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
        return self.proc

    def __call__(self, req_id: str, prompt: str):
        try:
            proc = self._ensure()
            proc.stdin.write(encode_request(req_id, prompt) + "\n")
            proc.stdin.flush()
            line = proc.stdout.readline()
        except OSError as exc:
            self.proc = None
            raise TransportError(str(exc)) from exc
        if not line:
            self.proc = None
            raise TransportError("backend closed the stream")
        msg = decode_response(line)
        if msg.get("id") != req_id:
            raise TransportError(f"response id {msg.get('id')!r} != request id {req_id!r}")
        return msg["classes"]

    def close(self):
        if self.proc is not None:
            self.proc.stdin.close()
            self.proc.wait(timeout=5)
            self.proc = None


@dataclass
class LlmClientConfig:
    endpoint: str | None = None
    attempts: int = 3
    backoff_seconds: float = 0.5
    timeout_seconds: float = 60.0
    cache_path: str | None = None
    # injected transport, used instead of ``endpoint`` when given
    transport: Callable[[str, str], object] | None = None

    @classmethod
    def from_env(cls, **kw) -> "LlmClientConfig":
        return cls(endpoint=os.environ.get(ENDPOINT_ENV) or None, **kw)

    @property
    def configured(self) -> bool:
        return self.transport is not None or bool(self.endpoint)


class LlmClient:
    """Serializes requests, retries with exponential backoff and caches by prompt hash."""

    def __init__(self, cfg: LlmClientConfig, sleep=time.sleep):
        self.cfg = cfg
        self._sleep = sleep
        self._lock = threading.Lock()
        self._counter = 0
        self.cache: dict[str, dict] = {}
        if cfg.transport is not None:
            self._transport = cfg.transport
        elif cfg.endpoint and cfg.endpoint.startswith(("http://", "https://")):
            self._transport = _HttpTransport(cfg.endpoint, cfg.timeout_seconds)
        elif cfg.endpoint:
            self._transport = _ProcessTransport(cfg.endpoint)
        else:
            self._transport = None
        if cfg.cache_path and Path(cfg.cache_path).exists():
            for line in Path(cfg.cache_path).read_text().splitlines():
                if line.strip():
                    rec = json.loads(line)
                    self.cache[rec["prompt_sha256"]] = rec

    def query(self, prompt: str) -> list[str]:
        """Send ``prompt``; raises TransportError once every attempt has failed."""
        if self._transport is None:
            raise TransportError("no LLM endpoint configured")
        with self._lock:
            last: Exception | None = None
            for attempt in range(self.cfg.attempts):
                self._counter += 1
                try:
                    return parse_classes(self._transport(f"req-{self._counter}", prompt))
                except (TransportError, KeyError, ValueError) as exc:
                    last = exc
                    log.warning("LLM request failed (attempt %d): %s", attempt + 1, exc)
                    if attempt + 1 < self.cfg.attempts:
                        self._sleep(self.cfg.backoff_seconds * 2**attempt)
            raise TransportError(f"all {self.cfg.attempts} attempts failed: {last}")

    def cached(self, prompt: str) -> dict | None:
        return self.cache.get(prompt_sha256(prompt))

    def remember(self, prompt: str, classes, source: str) -> dict:
        rec = {"prompt_sha256": prompt_sha256(prompt), "classes": sorted(classes), "source": source}
        with self._lock:
            self.cache[rec["prompt_sha256"]] = rec
            if self.cfg.cache_path:
                with open(self.cfg.cache_path, "a") as fh:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return rec

    def close(self):
        close = getattr(self._transport, "close", None)
        if close:
            close()
