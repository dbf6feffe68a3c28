"""Environment contract plus a line-delimited adapter for external benchmarks.

Any object with ``reset(task) -> observation``, ``step(action) ->
(observation, done, success)``, and ``action_space_text() -> str`` can drive
an episode. This module lets that contract cross a process boundary as
newline-delimited UTF-8 messages:

    RESET <task-json>          ->  <observation>
    STEP <action>              ->  <observation>\\t<done>\\t<success>
    CLOSE                      ->  (connection ends)

Observations are escaped so embedded tabs/newlines survive the framing; a
server-side failure comes back as an ``ERR <message>`` line, which the client
raises. Success and done are serialized as ``true``/``false``.
"""

from __future__ import annotations

import json
import socket
import socketserver
import subprocess
from typing import IO, Callable, Protocol

from .store import TaskSpec


class EnvironmentProtocolError(Exception):
    """Raised when the remote side reports an error or breaks framing."""


class Environment(Protocol):
    def reset(self, task: TaskSpec) -> str: ...

    def step(self, action_text: str) -> tuple[str, bool, bool]: ...

    def action_space_text(self) -> str: ...


def _escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace("\n", "\\n").replace("\t", "\\t")


def _unescape(text: str) -> str:
    out = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch == "\\" and i + 1 < len(text):
            nxt = text[i + 1]
            out.append({"n": "\n", "t": "\t", "\\": "\\"}.get(nxt, nxt))
            i += 2
        else:
            out.append(ch)
            i += 1
    return "".join(out)


def serve_environment(env: Environment, rfile: IO[str], wfile: IO[str]) -> None:
    """Answer RESET/STEP/CLOSE commands on a text stream until it closes."""
    for line in rfile:
        line = line.rstrip("\n")
        if not line:
            continue
        if line == "CLOSE":
            break
        try:
            if line.startswith("RESET "):
                task = TaskSpec.from_json(json.loads(_unescape(line[len("RESET "):])))
                wfile.write(_escape(env.reset(task)) + "\n")
            elif line.startswith("STEP "):
                obs, done, success = env.step(_unescape(line[len("STEP "):]))
                wfile.write(f"{_escape(obs)}\t{str(done).lower()}\t{str(success).lower()}\n")
            else:
                wfile.write(f"ERR unknown command: {_escape(line.split(' ')[0])}\n")
        except Exception as exc:
            wfile.write(f"ERR {_escape(str(exc))}\n")
        wfile.flush()


class ExternalEnvClient:
    """Client half of the adapter; looks like a local environment."""

    def __init__(self, rfile: IO[str], wfile: IO[str], action_space: str,
                 closer: Callable[[], None] | None = None):
        self._rfile = rfile
        self._wfile = wfile
        self._action_space = action_space
        self._closer = closer

    def action_space_text(self) -> str:
        return self._action_space

    def _request(self, message: str) -> str:
        self._wfile.write(message + "\n")
        self._wfile.flush()
        line = self._rfile.readline()
        if not line:
            raise EnvironmentProtocolError("environment server closed the connection")
        line = line.rstrip("\n")
        if line.startswith("ERR "):
            raise EnvironmentProtocolError(_unescape(line[len("ERR "):]))
        return line

    def reset(self, task: TaskSpec) -> str:
        payload = _escape(json.dumps(task.to_json(), ensure_ascii=False))
        return _unescape(self._request(f"RESET {payload}"))

    def step(self, action_text: str) -> tuple[str, bool, bool]:
        reply = self._request(f"STEP {_escape(action_text)}")
        parts = reply.split("\t")
        if len(parts) != 3:
            raise EnvironmentProtocolError(f"malformed STEP reply: {reply!r}")
        obs, done, success = parts
        return _unescape(obs), done == "true", success == "true"

    def close(self) -> None:
        try:
            self._wfile.write("CLOSE\n")
            self._wfile.flush()
        except (OSError, ValueError):
            pass
        if self._closer:
            self._closer()

    @classmethod
    def from_command(cls, argv: list[str], action_space: str) -> "ExternalEnvClient":
        """Spawn a subprocess speaking the protocol on stdin/stdout."""
        proc = subprocess.Popen(argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                text=True, encoding="utf-8")
        assert proc.stdin is not None and proc.stdout is not None
        return cls(proc.stdout, proc.stdin, action_space,
                   closer=lambda: proc.terminate())

    @classmethod
    def connect_tcp(cls, host: str, port: int, action_space: str) -> "ExternalEnvClient":
        sock = socket.create_connection((host, port))
        rfile = sock.makefile("r", encoding="utf-8", newline="\n")
        wfile = sock.makefile("w", encoding="utf-8", newline="\n")
        return cls(rfile, wfile, action_space, closer=sock.close)


def serve_tcp(env_factory: Callable[[], Environment], host: str = "127.0.0.1",
              port: int = 0) -> socketserver.ThreadingTCPServer:
    """Start a TCP server handing each connection its own environment instance.

    Returns the (already bound) server; callers run ``serve_forever`` on a
    thread and read the chosen port from ``server.server_address``.
    """

    class Handler(socketserver.StreamRequestHandler):
        def handle(self):
            serve_environment(
                env_factory(),
                rfile=_TextReader(self.rfile),
                wfile=_TextWriter(self.wfile),
            )

    class Server(socketserver.ThreadingTCPServer):
        allow_reuse_address = True
        daemon_threads = True

    return Server((host, port), Handler)


class _TextReader:
    """Line iterator over a binary stream, decoding UTF-8."""

    def __init__(self, raw):
        self._raw = raw

    def __iter__(self):
        return self

    def __next__(self) -> str:
        line = self._raw.readline()
        if not line:
            raise StopIteration
        return line.decode("utf-8")

    def readline(self) -> str:
        return self._raw.readline().decode("utf-8")


class _TextWriter:
    def __init__(self, raw):
        self._raw = raw

    def write(self, text: str) -> None:
        self._raw.write(text.encode("utf-8"))

    def flush(self) -> None:
        self._raw.flush()
