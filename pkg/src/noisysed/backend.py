"""Newline-delimited JSON protocol for external SED and separation backends.

Requests::

    {"op": "sed", "id", "mel": [[...]], "hop_seconds"}
        -> {"id", "framewise": [[...]], "clipwise": [...]}
    {"op": "separate", "id", "sample_rate", "audio": [...], "query"}
        -> {"id", "audio": [...]}

An address is either ``tcp://host:port`` or a shell command spawned as a
child process that speaks the protocol on stdin/stdout.
"""

from __future__ import annotations

import json
import queue
import shlex
import socket
import subprocess
import threading
from contextlib import contextmanager

import numpy as np

from .errors import BackendError


def encode_sed_request(req_id: str, mel: np.ndarray, hop_seconds: float) -> str:
    return json.dumps(
        {"op": "sed", "id": req_id, "mel": np.asarray(mel, float).tolist(), "hop_seconds": hop_seconds}
    )


def encode_separate_request(req_id: str, audio: np.ndarray, sample_rate: int, query: str) -> str:
    return json.dumps(
        {
            "op": "separate",
            "id": req_id,
            "sample_rate": int(sample_rate),
            "audio": np.asarray(audio, float).tolist(),
            "query": query,
        }
    )


def decode_request(line: str) -> dict:
    msg = json.loads(line)
    op = msg.get("op")
    if op == "sed":
        return {
            "op": "sed",
            "id": msg["id"],
            "mel": np.asarray(msg["mel"], dtype=np.float64),
            "hop_seconds": float(msg["hop_seconds"]),
        }
    if op == "separate":
        return {
            "op": "separate",
            "id": msg["id"],
            "sample_rate": int(msg["sample_rate"]),
            "audio": np.asarray(msg["audio"], dtype=np.float64),
            "query": msg["query"],
        }
    raise BackendError(f"unknown op {op!r}")


def encode_sed_response(req_id: str, framewise: np.ndarray, clipwise: np.ndarray) -> str:
    return json.dumps(
        {
            "id": req_id,
            "framewise": np.asarray(framewise, float).tolist(),
            "clipwise": np.asarray(clipwise, float).tolist(),
        }
    )


def encode_separate_response(req_id: str, audio: np.ndarray) -> str:
    return json.dumps({"id": req_id, "audio": np.asarray(audio, float).tolist()})


def decode_response(line: str, req_id: str) -> dict:
    if not line:
        raise BackendError("backend closed the connection")
    try:
        msg = json.loads(line)
    except json.JSONDecodeError as exc:
        raise BackendError(f"malformed backend response: {exc}") from None
    if "error" in msg:
        raise BackendError(str(msg["error"]))
    if msg.get("id") != req_id:
        raise BackendError(f"response id {msg.get('id')!r} does not match {req_id!r}")
    return msg


class BackendConnection:
    """One connection; serves a single request at a time."""

    def __init__(self, address: str, timeout: float = 120.0):
        self.address = address
        self.timeout = timeout
        self._proc = None
        self._sock = None
        self._rfile = None
        self._wfile = None
        self._counter = 0
        self._lock = threading.Lock()

    def _open(self):
        if self._wfile is not None:
            return
        if self.address.startswith("tcp://"):
            host, port = self.address[len("tcp://") :].rsplit(":", 1)
            self._sock = socket.create_connection((host, int(port)), timeout=self.timeout)
            self._rfile = self._sock.makefile("r", encoding="utf-8")
            self._wfile = self._sock.makefile("w", encoding="utf-8")
        else:
            self._proc = subprocess.Popen(
                shlex.split(self.address),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
            self._rfile, self._wfile = self._proc.stdout, self._proc.stdin

    def request(self, make_line) -> dict:
        with self._lock:
            self._counter += 1
            req_id = f"r{self._counter}"
            try:
                self._open()
                self._wfile.write(make_line(req_id) + "\n")
                self._wfile.flush()
                line = self._rfile.readline()
            except OSError as exc:
                self.close()
                raise BackendError(f"{self.address}: {exc}") from exc
            return decode_response(line, req_id)

    def sed(self, mel: np.ndarray, hop_seconds: float) -> tuple[np.ndarray, np.ndarray]:
        msg = self.request(lambda rid: encode_sed_request(rid, mel, hop_seconds))
        return np.asarray(msg["framewise"], float), np.asarray(msg["clipwise"], float)

    def separate(self, audio: np.ndarray, sample_rate: int, query: str) -> np.ndarray:
        msg = self.request(lambda rid: encode_separate_request(rid, audio, sample_rate, query))
        return np.asarray(msg["audio"], float)

    def close(self):
        for f in (self._wfile, self._rfile):
            try:
                if f is not None:
                    f.close()
            except OSError:
                pass
        if self._proc is not None:
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()
        if self._sock is not None:
            self._sock.close()
        self._proc = self._sock = self._rfile = self._wfile = None


class BackendPool:
    """A fixed number of independent connections handed out one caller at a time."""

    def __init__(self, address: str, size: int = 1):
        self.address = address
        self._free: queue.Queue = queue.Queue()
        for _ in range(max(1, size)):
            self._free.put(BackendConnection(address))

    @contextmanager
    def connection(self):
        conn = self._free.get()
        try:
            yield conn
        finally:
            self._free.put(conn)

    def close(self):
        while not self._free.empty():
            self._free.get().close()


_pools: dict[tuple[str, int], BackendPool] = {}
_pools_lock = threading.Lock()


def get_pool(address: str, size: int = 1) -> BackendPool:
    with _pools_lock:
        key = (address, size)
        if key not in _pools:
            _pools[key] = BackendPool(address, size)
        return _pools[key]
