"""Length-prefixed request/response protocol between a plant server and a learner client.

Frame layout (little-endian)::

    u32  length   bytes that follow this field (1 + 4 + 8 * n_values)
    u8   kind     low 7 bits: message kind; bit 7 set on replies
    u32  seq      request id; a reply echoes the id of its request
    f64  values[n_values]

Payload sizes are fixed per (kind, direction):

    ======== ======================= ===============================================
    kind     request                 reply
    ======== ======================= ===============================================
    RESET    x_tar, y_tar, mode      delta1, delta2, tip_x, tip_y, tip_z
    OBSERVE  (none)                  delta1, delta2, tip_x, tip_y, tip_z
    ACT      action1, action2        delta1, delta2, tip_x, tip_y, tip_z,
                                     reward1, reward2, done, success, saturated
    INFO     (none)                  16-value setup digest (env.config_vector)
    ERROR    code                    code
    ======== ======================= ===============================================

RESET ``mode`` is 0 for a full reset to the home pose and 1 to move the target only.
Flags travel as 0.0 / 1.0.
"""

from __future__ import annotations

import enum
import os
import socket
import struct
import threading
from dataclasses import dataclass

from .env import EpisodeConfig, ObservationState, StepResult, Target
from .errors import ContinuumRLError, DomainError, EnvironmentFault

PORT_ENV_VAR = "CONTINUUM_RL_PORT"
DEFAULT_PORT = 50515
DEFAULT_TIMEOUT = 2.0
REPLY_FLAG = 0x80
_HEAD = struct.Struct("<IBI")
INFO_SIZE = 16


class Kind(enum.IntEnum):
    RESET = 1
    OBSERVE = 2
    ACT = 3
    INFO = 4
    ERROR = 5


class ErrorCode(enum.IntEnum):
    BUSY = 1
    PROTOCOL = 2
    DOMAIN = 3
    INTERNAL = 4


PAYLOAD_SIZES = {
    (Kind.RESET, False): 3,
    (Kind.RESET, True): 5,
    (Kind.OBSERVE, False): 0,
    (Kind.OBSERVE, True): 5,
    (Kind.ACT, False): 2,
    (Kind.ACT, True): 10,
    (Kind.INFO, False): 0,
    (Kind.INFO, True): INFO_SIZE,
    (Kind.ERROR, False): 1,
    (Kind.ERROR, True): 1,
}

MAX_FRAME = _HEAD.size + 8 * max(PAYLOAD_SIZES.values())


class ProtocolError(ContinuumRLError):
    pass


class IncompleteFrame(ProtocolError):
    """Not enough bytes yet for a whole frame; nothing was consumed."""


class UnknownKind(ProtocolError):
    pass


class LengthMismatch(ProtocolError):
    pass


class SequenceError(ProtocolError):
    pass


@dataclass(frozen=True)
class Message:
    kind: Kind
    seq: int
    values: tuple = ()
    reply: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if not 0 <= self.seq < 2**32:
            raise ValueError("sequence id must fit in u32")
        expected = PAYLOAD_SIZES[(self.kind, self.reply)]
        if len(self.values) != expected:
            raise LengthMismatch(
                f"{self.kind.name} {'reply' if self.reply else 'request'} carries {expected} values, got {len(self.values)}"
            )


def encode(msg):
    n = len(msg.values)
    kind = int(msg.kind) | (REPLY_FLAG if msg.reply else 0)
    return _HEAD.pack(1 + 4 + 8 * n, kind, msg.seq) + struct.pack(f"<{n}d", *msg.values)


def decode(data):
    """Decode one frame from the start of ``data``; returns ``(message, bytes_consumed)``."""
    if len(data) < 4:
        raise IncompleteFrame("need a 4-byte length prefix")
    (length,) = struct.unpack_from("<I", data, 0)
    if length < 5 or (length - 5) % 8 or length + 4 > MAX_FRAME:
        raise LengthMismatch(f"invalid frame length {length}")
    if len(data) < 4 + length:
        raise IncompleteFrame(f"frame needs {4 + length} bytes, have {len(data)}")
    _, kind_byte, seq = _HEAD.unpack_from(data, 0)
    reply = bool(kind_byte & REPLY_FLAG)
    try:
        kind = Kind(kind_byte & ~REPLY_FLAG)
    except ValueError:
        raise UnknownKind(f"unknown message kind 0x{kind_byte:02x}") from None
    n = (length - 5) // 8
    if n != PAYLOAD_SIZES[(kind, reply)]:
        raise LengthMismatch(f"{kind.name} frame with {n} values")
    values = struct.unpack_from(f"<{n}d", data, _HEAD.size)
    return Message(kind, seq, values, reply), 4 + length


def split_frames(data):
    """Split a byte stream into complete frames plus the unconsumed remainder."""
    out = []
    view = bytes(data)
    pos = 0
    while True:
        try:
            msg, used = decode(view[pos:])
        except IncompleteFrame:
            return out, view[pos:]
        out.append(msg)
        pos += used


def parse_endpoint(endpoint=None):
    """``host:port`` -> (host, port); the port falls back to $CONTINUUM_RL_PORT."""
    default_port = int(os.environ.get(PORT_ENV_VAR, DEFAULT_PORT))
    if not endpoint:
        return "127.0.0.1", default_port
    host, _, port = str(endpoint).rpartition(":")
    if not host:
        return port or "127.0.0.1", default_port
    return host, int(port) if port else default_port


def _recv_exact(sock, n):
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed the connection")
        buf += chunk
    return bytes(buf)


def recv_message(sock):
    head = _recv_exact(sock, 4)
    (length,) = struct.unpack("<I", head)
    if length + 4 > MAX_FRAME:
        raise LengthMismatch(f"invalid frame length {length}")
    msg, _ = decode(head + _recv_exact(sock, length))
    return msg


def _obs_tip(env_obs, tip):
    return (env_obs.delta1, env_obs.delta2, tip[0], tip[1], tip[2])


class PlantServer:
    """Serves one client at a time; a second concurrent client gets ERROR(busy)."""

    def __init__(self, env, endpoint=None):
        self.env = env
        self.host, self.port = parse_endpoint(endpoint)
        self._sock = None
        self._stop = threading.Event()
        self._busy = threading.Lock()
        self._thread = None
        self._handlers = []

    @property
    def endpoint(self):
        return f"{self.host}:{self.port}"

    def start(self):
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind((self.host, self.port))
        sock.listen(2)
        sock.settimeout(0.1)
        self.port = sock.getsockname()[1]
        self._sock = sock
        self._thread = threading.Thread(target=self._accept_loop, name="plant-server", daemon=True)
        self._thread.start()
        return self

    def wait(self):
        """Block until ``stop`` is called (polls so Ctrl-C still gets through)."""
        while not self._stop.is_set():
            self._stop.wait(0.5)

    def serve_forever(self):
        self.start()
        try:
            self.wait()
        finally:
            self.stop()

    def stop(self):
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=2.0)
        for t in self._handlers:
            t.join(timeout=2.0)
        if self._sock is not None:
            self._sock.close()
            self._sock = None

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    def _accept_loop(self):
        while not self._stop.is_set():
            try:
                conn, _ = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            if not self._busy.acquire(blocking=False):
                try:
                    conn.sendall(encode(Message(Kind.ERROR, 0, (ErrorCode.BUSY,), reply=True)))
                finally:
                    conn.close()
                continue
            t = threading.Thread(target=self._handle, args=(conn,), daemon=True)
            self._handlers = [h for h in self._handlers if h.is_alive()] + [t]
            t.start()

    def _handle(self, conn):
        conn.settimeout(0.2)
        last_seq = -1
        try:
            while not self._stop.is_set():
                try:
                    msg = recv_message(conn)
                except socket.timeout:
                    continue
                except ConnectionError:
                    return
                except ProtocolError:
                    conn.sendall(encode(Message(Kind.ERROR, 0, (ErrorCode.PROTOCOL,), reply=True)))
                    return
                if msg.reply or msg.seq <= last_seq:
                    conn.sendall(encode(Message(Kind.ERROR, msg.seq, (ErrorCode.PROTOCOL,), reply=True)))
                    return
                last_seq = msg.seq
                conn.sendall(encode(self.dispatch(msg)))
        except OSError:
            return
        finally:
            conn.close()
            self._busy.release()

    def dispatch(self, msg):
        env = self.env
        try:
            if msg.kind is Kind.RESET:
                x, y, mode = msg.values
                target = Target(x, y)
                obs = env.retarget(target) if mode == 1.0 else env.reset(target)
                return Message(Kind.RESET, msg.seq, _obs_tip(obs, env.state.tip), reply=True)
            if msg.kind is Kind.OBSERVE:
                return Message(Kind.OBSERVE, msg.seq, _obs_tip(env.observe(), env.state.tip), reply=True)
            if msg.kind is Kind.ACT:
                r = env.step(msg.values)
                vals = _obs_tip(r.obs, r.tip) + (*r.rewards, float(r.done), float(r.success), float(r.saturated))
                return Message(Kind.ACT, msg.seq, vals, reply=True)
            if msg.kind is Kind.INFO:
                return Message(Kind.INFO, msg.seq, env.info(), reply=True)
        except DomainError:
            return Message(Kind.ERROR, msg.seq, (ErrorCode.DOMAIN,), reply=True)
        except Exception:
            return Message(Kind.ERROR, msg.seq, (ErrorCode.INTERNAL,), reply=True)
        return Message(Kind.ERROR, msg.seq, (ErrorCode.PROTOCOL,), reply=True)


def serve_plant(env, endpoint=None):
    """Block serving ``env`` on ``endpoint`` until interrupted."""
    PlantServer(env, endpoint).serve_forever()


class RemoteEnv:
    """Client-side environment with the same reset/retarget/step surface as ``ContinuumEnv``.

    Any timeout or lost connection raises :class:`EnvironmentFault`.
    """

    def __init__(self, endpoint=None, timeout=DEFAULT_TIMEOUT, expected_info=None):
        self.host, self.port = parse_endpoint(endpoint)
        self.timeout = timeout
        self._seq = 0
        try:
            self._sock = socket.create_connection((self.host, self.port), timeout=timeout)
        except OSError as exc:
            raise EnvironmentFault(f"cannot reach plant at {self.host}:{self.port}: {exc}") from exc
        self._sock.settimeout(timeout)
        self._obs = None
        self.tip = None
        info = self.info()
        if expected_info is not None and tuple(expected_info) != tuple(info):
            self.close()
            raise EnvironmentFault("remote plant configuration digest does not match the local configuration")
        self.episode_cfg = EpisodeConfig(max_steps=int(info[13]), arrival_radius=info[14], dwell_steps=int(info[15]))

    def close(self):
        try:
            self._sock.close()
        except OSError:
            pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _call(self, kind, values=()):
        self._seq += 1
        req = Message(kind, self._seq, values)
        try:
            self._sock.sendall(encode(req))
            reply = recv_message(self._sock)
        except socket.timeout as exc:
            raise EnvironmentFault(f"plant did not answer {kind.name} within {self.timeout} s") from exc
        except (OSError, ConnectionError, ProtocolError) as exc:
            raise EnvironmentFault(f"lost plant connection: {exc}") from exc
        if reply.kind is Kind.ERROR:
            code = ErrorCode(int(reply.values[0]))
            if code is ErrorCode.DOMAIN:
                raise DomainError(f"plant rejected {kind.name} request {values}")
            raise EnvironmentFault(f"plant replied ERROR({code.name})")
        if reply.seq != req.seq or reply.kind is not kind:
            raise EnvironmentFault("reply does not match request")
        return reply.values

    def _set(self, vals):
        self._obs = ObservationState(vals[0], vals[1])
        self.tip = (vals[2], vals[3], vals[4])
        return self._obs

    def info(self):
        return self._call(Kind.INFO)

    def reset(self, target):
        return self._set(self._call(Kind.RESET, (target.x_tar, target.y_tar, 0.0)))

    def retarget(self, target):
        return self._set(self._call(Kind.RESET, (target.x_tar, target.y_tar, 1.0)))

    def observe(self):
        return self._set(self._call(Kind.OBSERVE))

    def step(self, action):
        v = self._call(Kind.ACT, (float(action[0]), float(action[1])))
        obs = self._set(v)
        return StepResult(obs, (v[5], v[6]), v[7] != 0.0, v[8] != 0.0, self.tip, v[9] != 0.0)


def remote_plant(endpoint=None, timeout=DEFAULT_TIMEOUT, expected_info=None):
    return RemoteEnv(endpoint, timeout, expected_info)
