"""Wire protocol for querying an oracle in another process.

Line-delimited JSON over a child process's stdio or a TCP connection:

    -> {"op": "hello", "version": 1}
    <- {"op": "hello", "classes": n, "shape": [C, H, W]}
    -> {"op": "predict", "id": k, "images": [<base64 little-endian f32>, ...]}
    <- {"op": "probs", "id": k, "probs": [[...], ...]}

Every image payload is the raw C*H*W float32 buffer, little-endian,
base64-encoded. Any reply outside this shape is a ProtocolError. The
scanner can only ever see probabilities through this channel, so the
black-box constraint holds by construction.

`python -m dbkd.remote --model net.dbkn (--stdio | --port N)` serves a
native net for loopback testing; third-party models are served by the
separate bridge package speaking the same protocol.
"""

from __future__ import annotations

import base64
import json
import selectors
import socket
import subprocess
import sys
import time
from dataclasses import dataclass

import numpy as np

from .errors import ConfigInvalid, ConnectionClosed, ProtocolError, RemoteTimeout
from .oracle import ModelOracle, NativeOracle, load_net

PROTOCOL_VERSION = 1
DEFAULT_TIMEOUT = 30.0
_MAX_LINE = 256 * 1024 * 1024


@dataclass(frozen=True)
class RemoteEndpoint:
    """Where the opaque model lives.

    transport "tcp": address is "host:port". transport "command": address is
    a shell-style command line to spawn, speaking the protocol on stdio.
    `parallel_ok` tells the detector it may open one connection (or spawn
    one process) per worker.
    """

    transport: str
    address: str
    timeout: float = DEFAULT_TIMEOUT
    version: int = PROTOCOL_VERSION
    parallel_ok: bool = True

    def __post_init__(self):
        if self.transport not in ("tcp", "command"):
            raise ConfigInvalid(f"unknown transport {self.transport!r}")
        if self.version != PROTOCOL_VERSION:
            raise ConfigInvalid(f"unsupported protocol version {self.version}")

    @staticmethod
    def parse(text: str, timeout: float = DEFAULT_TIMEOUT) -> "RemoteEndpoint":
        """"tcp://host:port" or "cmd:<command line>"."""
        if text.startswith("tcp://"):
            return RemoteEndpoint("tcp", text[len("tcp://"):], timeout)
        if text.startswith("cmd:"):
            return RemoteEndpoint("command", text[len("cmd:"):], timeout)
        raise ConfigInvalid(f"endpoint must be tcp://host:port or cmd:<command>, got {text!r}")


def _encode_images(stack: np.ndarray) -> list[str]:
    return [base64.b64encode(np.ascontiguousarray(img, dtype="<f4").tobytes()).decode("ascii")
            for img in stack]


def _decode_image(text: str, shape: tuple[int, int, int]) -> np.ndarray:
    raw = base64.b64decode(text)
    expected = 4 * shape[0] * shape[1] * shape[2]
    if len(raw) != expected:
        raise ProtocolError(f"image payload is {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape)


class _Channel:
    """A line-oriented connection with a deadline on reads."""

    def send_line(self, line: str) -> None:
        raise NotImplementedError

    def recv_line(self, timeout: float) -> str:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError


class _TcpChannel(_Channel):
    def __init__(self, host: str, port: int, timeout: float):
        try:
            self.sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise ConnectionClosed(f"cannot connect to {host}:{port}: {exc}") from exc
        self.buf = b""

    def send_line(self, line: str) -> None:
        try:
            self.sock.sendall(line.encode("utf-8") + b"\n")
        except OSError as exc:
            raise ConnectionClosed(f"send failed: {exc}") from exc

    def recv_line(self, timeout: float) -> str:
        deadline = time.monotonic() + timeout
        while b"\n" not in self.buf:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise RemoteTimeout(f"no reply within {timeout}s")
            self.sock.settimeout(remaining)
            try:
                chunk = self.sock.recv(1 << 20)
            except socket.timeout as exc:
                raise RemoteTimeout(f"no reply within {timeout}s") from exc
            except OSError as exc:
                raise ConnectionClosed(f"recv failed: {exc}") from exc
            if not chunk:
                raise ConnectionClosed("server closed the connection")
            self.buf += chunk
            if len(self.buf) > _MAX_LINE:
                raise ProtocolError("reply line exceeds the size limit")
        line, self.buf = self.buf.split(b"\n", 1)
        return line.decode("utf-8")

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


class _ProcChannel(_Channel):
    def __init__(self, command: str, timeout: float):
        import shlex
        argv = shlex.split(command)
        try:
            self.proc = subprocess.Popen(argv, stdin=subprocess.PIPE,
                                         stdout=subprocess.PIPE)
        except OSError as exc:
            raise ConnectionClosed(f"cannot spawn {argv[0]!r}: {exc}") from exc
        self.sel = selectors.DefaultSelector()
        self.sel.register(self.proc.stdout, selectors.EVENT_READ)
        self.buf = b""

    def send_line(self, line: str) -> None:
        if self.proc.poll() is not None:
            raise ConnectionClosed("oracle process has exited")
        try:
            self.proc.stdin.write(line.encode("utf-8") + b"\n")
            self.proc.stdin.flush()
        except (OSError, BrokenPipeError) as exc:
            raise ConnectionClosed(f"send failed: {exc}") from exc

    def recv_line(self, timeout: float) -> str:
        deadline = time.monotonic() + timeout
        while b"\n" not in self.buf:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise RemoteTimeout(f"no reply within {timeout}s")
            if not self.sel.select(remaining):
                raise RemoteTimeout(f"no reply within {timeout}s")
            chunk = self.proc.stdout.read1(1 << 20)
            if not chunk:
                raise ConnectionClosed("oracle process closed its stdout")
            self.buf += chunk
            if len(self.buf) > _MAX_LINE:
                raise ProtocolError("reply line exceeds the size limit")
        line, self.buf = self.buf.split(b"\n", 1)
        return line.decode("utf-8")

    def close(self) -> None:
        self.sel.close()
        for stream in (self.proc.stdin, self.proc.stdout):
            try:
                stream.close()
            except OSError:
                pass
        self.proc.terminate()
        try:
            self.proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            self.proc.kill()


def _open_channel(endpoint: RemoteEndpoint) -> _Channel:
    if endpoint.transport == "tcp":
        host, _, port = endpoint.address.rpartition(":")
        if not host or not port.isdigit():
            raise ConfigInvalid(f"bad tcp address {endpoint.address!r}")
        return _TcpChannel(host, int(port), endpoint.timeout)
    return _ProcChannel(endpoint.address, endpoint.timeout)


class RemoteOracle(ModelOracle):
    """Client for an oracle behind the wire protocol.

    The handshake fixes the class count and input shape; every predict
    round-trips one JSON line each way. Replies that do not match the
    protocol raise ProtocolError.
    """

    def __init__(self, endpoint: RemoteEndpoint):
        self.endpoint = endpoint
        self._channel = _open_channel(endpoint)
        self._next_id = 0
        try:
            self._channel.send_line(json.dumps({"op": "hello", "version": endpoint.version}))
            reply = self._read_reply()
            if reply.get("op") != "hello":
                raise ProtocolError(f"handshake reply has op {reply.get('op')!r}")
            classes = reply.get("classes")
            shape = reply.get("shape")
            if (not isinstance(classes, int) or classes < 1
                    or not isinstance(shape, list) or len(shape) != 3
                    or not all(isinstance(v, int) and v > 0 for v in shape)):
                raise ProtocolError(f"malformed handshake reply: {reply}")
        except Exception:
            self._channel.close()
            raise
        super().__init__(classes, tuple(shape))

    def _read_reply(self) -> dict:
        line = self._channel.recv_line(self.endpoint.timeout)
        try:
            reply = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"reply is not JSON: {line[:200]!r}") from exc
        if not isinstance(reply, dict):
            raise ProtocolError("reply is not a JSON object")
        if reply.get("op") == "error":
            raise ProtocolError(f"server error: {reply.get('message')!r}")
        return reply

    def _predict(self, stack: np.ndarray) -> np.ndarray:
        qid = self._next_id
        self._next_id += 1
        self._channel.send_line(json.dumps(
            {"op": "predict", "id": qid, "images": _encode_images(stack)}))
        reply = self._read_reply()
        if reply.get("op") != "probs" or reply.get("id") != qid:
            raise ProtocolError(f"expected probs reply for id {qid}, got {reply.get('op')!r}")
        probs = reply.get("probs")
        if not isinstance(probs, list) or len(probs) != stack.shape[0]:
            raise ProtocolError("probs reply has the wrong row count")
        out = np.empty((stack.shape[0], self.class_count), dtype=np.float32)
        for i, row in enumerate(probs):
            if not isinstance(row, list) or len(row) != self.class_count:
                raise ProtocolError(f"probs row {i} has length "
                                    f"{len(row) if isinstance(row, list) else 'n/a'}, "
                                    f"expected {self.class_count}")
            out[i] = row
        return out

    def close(self) -> None:
        self._channel.close()

    def __reduce__(self):
        # Workers reconnect rather than sharing a socket.
        return (RemoteOracle, (self.endpoint,))


# --- server side (loopback / development) --------------------------------------


def _handle_request(oracle: ModelOracle, line: str) -> str:
    try:
        req = json.loads(line)
    except json.JSONDecodeError:
        return json.dumps({"op": "error", "message": "request is not JSON"})
    if not isinstance(req, dict):
        return json.dumps({"op": "error", "message": "request is not an object"})
    op = req.get("op")
    if op == "hello":
        if req.get("version") != PROTOCOL_VERSION:
            return json.dumps({"op": "error",
                               "message": f"unsupported version {req.get('version')}"})
        return json.dumps({"op": "hello", "classes": oracle.class_count,
                           "shape": list(oracle.input_shape)})
    if op == "predict":
        images = req.get("images")
        if not isinstance(images, list) or not images:
            return json.dumps({"op": "error", "message": "predict needs images"})
        try:
            stack = np.stack([_decode_image(t, oracle.input_shape) for t in images])
        except (ProtocolError, ValueError, TypeError) as exc:
            return json.dumps({"op": "error", "message": str(exc)})
        probs = oracle.predict_array(stack)
        return json.dumps({"op": "probs", "id": req.get("id"),
                           "probs": [[float(v) for v in row] for row in probs]})
    return json.dumps({"op": "error", "message": f"unknown op {op!r}"})


def serve_stream(oracle: ModelOracle, rfile, wfile) -> None:
    """Answer requests line by line until EOF. Malformed requests get an
    error reply and the connection stays open."""
    for raw in rfile:
        line = raw.decode("utf-8") if isinstance(raw, bytes) else raw
        line = line.strip()
        if not line:
            continue
        reply = _handle_request(oracle, line)
        wfile.write((reply + "\n").encode("utf-8") if "b" in getattr(wfile, "mode", "b")
                    else reply + "\n")
        wfile.flush()


def serve_tcp(oracle: ModelOracle, host: str, port: int, ready_callback=None,
              max_connections: int | None = None) -> None:
    """Serve connections sequentially; intended for tests and local use."""
    with socket.create_server((host, port)) as server:
        if ready_callback is not None:
            ready_callback(server.getsockname()[1])
        served = 0
        while max_connections is None or served < max_connections:
            conn, _ = server.accept()
            with conn, conn.makefile("rb") as rfile, conn.makefile("wb") as wfile:
                serve_stream(oracle, rfile, wfile)
            served += 1


def main(argv=None) -> int:
    import argparse
    parser = argparse.ArgumentParser(
        prog="python -m dbkd.remote",
        description="Serve a native net over the oracle wire protocol.")
    parser.add_argument("--model", required=True, help="path to a .dbkn weights file")
    group = parser.add_mutually_exclusive_group(required=True)
    group.add_argument("--stdio", action="store_true", help="serve on stdin/stdout")
    group.add_argument("--port", type=int, help="serve on a TCP port")
    parser.add_argument("--host", default="127.0.0.1")
    args = parser.parse_args(argv)
    oracle = NativeOracle(load_net(args.model))
    if args.stdio:
        serve_stream(oracle, sys.stdin.buffer, sys.stdout.buffer)
    else:
        serve_tcp(oracle, args.host, args.port)
    return 0


if __name__ == "__main__":
    sys.exit(main())
