"""Stream-socket transport: framed messages, connect/accept with deadlines,
and an in-process fault-injection shim.

Every blocking call takes a timeout and raises the shared error taxonomy:
timeouts and vanished peers are Recoverable, garbage frames are Fatal.
A connection is owned by one execution context at a time; concurrent use
of *different* connections from different threads is fine.

Fault rules model network trouble on inter-replica data links (ring chunks
and state fetches). Control traffic (quorum reports, intra-replica frames)
is exempt: the coordinator link is assumed reliable and intra-replica links
model a local interconnect, not the network. Rule windows are keyed to the
logical clock observed from quorum decisions, so runs stay reproducible.
"""

from __future__ import annotations

import logging
import queue
import socket
import threading
import time
from dataclasses import dataclass, field

from ftdp import wire
from ftdp.errors import (
    ConfigError,
    Fatal,
    PEER_DOWN,
    PEER_RESET,
    PROTOCOL_VIOLATION,
    Recoverable,
    TIMEOUT,
)

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT_S = 5.0
_RETRY_PAUSE_S = 0.05

FAULT_KINDS = ("drop_connection", "delay", "blackhole")
# Purposes subject to fault rules (inter-replica data plane).
_FAULTABLE = {wire.HELLO_RING, wire.HELLO_FETCH}


@dataclass(frozen=True)
class PeerAddress:
    replica_id: int
    rank_id: int
    host: str
    port: int

    def endpoint(self) -> tuple[str, int]:
        return (self.host, self.port)


@dataclass
class FaultRule:
    """One injected network fault against a replica's data links.

    The window opens at the first observation of target_step >= at_step and
    lasts duration_steps logical epochs. Epochs advance even when a step is
    being retried, so a rule that itself causes retries still expires.
    """

    kind: str
    replica_id: int
    at_step: int
    duration_steps: int = 1
    latency_multiplier: float = 1.0
    base_latency_s: float = 0.001
    activated_epoch: int | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in FAULT_KINDS:
            raise ConfigError(f"unknown fault kind: {self.kind}")
        if self.latency_multiplier < 1.0:
            raise ConfigError("latency_multiplier must be >= 1")
        if self.duration_steps < 1:
            raise ConfigError("fault duration_steps must be >= 1")


def validate_rules(rules: list[FaultRule]) -> None:
    """Reject contradictory overlapping rules on the same link."""
    for i, a in enumerate(rules):
        for b in rules[i + 1:]:
            if a.replica_id != b.replica_id or a.kind == b.kind:
                continue
            if a.at_step < b.at_step + b.duration_steps and b.at_step < a.at_step + a.duration_steps:
                raise ConfigError(
                    f"contradictory fault rules on replica {a.replica_id}: "
                    f"{a.kind} and {b.kind} overlap at step {max(a.at_step, b.at_step)}"
                )


class FaultPlan:
    """Process-local rule table plus the logical clock that drives it.

    The engine calls observe() once per decision; IO paths call effects()
    with the remote replica id. The table is read-shared; the clock is only
    written at step boundaries.
    """

    def __init__(self, rules: list[FaultRule] | None = None, self_replica: int | None = None):
        self.rules = list(rules or [])
        validate_rules(self.rules)
        self.self_replica = self_replica
        self.epoch = 0
        self.target = 0
        self._lock = threading.Lock()

    def observe(self, target_step: int, epoch: int) -> None:
        with self._lock:
            self.target = max(self.target, target_step)
            self.epoch = max(self.epoch, epoch)
            for rule in self.rules:
                if rule.activated_epoch is None and self.target >= rule.at_step:
                    rule.activated_epoch = self.epoch

    def effects(self, peer_replica: int | None) -> list[FaultRule]:
        if not self.rules:
            return []
        with self._lock:
            out = []
            for rule in self.rules:
                if rule.activated_epoch is None:
                    continue
                if self.epoch >= rule.activated_epoch + rule.duration_steps:
                    continue
                if rule.replica_id == peer_replica or rule.replica_id == self.self_replica:
                    out.append(rule)
            return out


class Connection:
    """One framed duplex stream. Counters are plain ints (GIL-atomic)."""

    def __init__(self, sock: socket.socket, peer: PeerAddress | None = None,
                 purpose: int = 0, plan: FaultPlan | None = None):
        self.sock = sock
        self.peer = peer
        self.purpose = purpose
        self.plan = plan
        self.bytes_sent = 0
        self.bytes_received = 0
        self.closed = False
        self._dropped: set[int] = set()
        self._rxbuf = bytearray()
        self._scratch = bytearray(65536)
        try:
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        except OSError:
            pass

    # -- fault shim ---------------------------------------------------------

    def _active_faults(self) -> list[FaultRule]:
        if self.plan is None or self.purpose not in _FAULTABLE:
            return []
        peer_replica = self.peer.replica_id if self.peer else None
        return self.plan.effects(peer_replica)

    def _apply_send_faults(self) -> bool:
        """Returns True if the write should be swallowed (blackhole)."""
        swallowed = False
        for rule in self._active_faults():
            if rule.kind == "drop_connection" and id(rule) not in self._dropped:
                self._dropped.add(id(rule))
                self.close()
                raise Recoverable(PEER_RESET, "injected connection drop")
            if rule.kind == "delay":
                time.sleep(rule.latency_multiplier * rule.base_latency_s)
            if rule.kind == "blackhole":
                swallowed = True
        return swallowed

    def _apply_recv_faults(self, deadline: float) -> bool:
        """Returns True if reads are black-holed until the deadline."""
        for rule in self._active_faults():
            if rule.kind == "drop_connection" and id(rule) not in self._dropped:
                self._dropped.add(id(rule))
                self.close()
                raise Recoverable(PEER_RESET, "injected connection drop")
            if rule.kind == "blackhole":
                return True
        return False

    # -- framed IO ----------------------------------------------------------

    def send_frame(self, msg_type: int, step: int = 0, seq: int = 0,
                   payload: bytes = b"", timeout: float = DEFAULT_TIMEOUT_S) -> None:
        if self.closed:
            raise Recoverable(PEER_RESET, "connection closed")
        data = wire.encode_frame(msg_type, step, seq, payload)
        if self._apply_send_faults():
            return  # black hole: swallow silently, peer sees nothing
        try:
            self.sock.settimeout(timeout)
            self.sock.sendall(data)
            self.bytes_sent += len(data)
        except socket.timeout as exc:
            raise Recoverable(TIMEOUT, f"send to {self.peer}: {exc}") from exc
        except (BrokenPipeError, ConnectionResetError, ConnectionAbortedError) as exc:
            self.close()
            raise Recoverable(PEER_RESET, f"send to {self.peer}: {exc}") from exc
        except OSError as exc:
            self.close()
            raise Recoverable(PEER_RESET, f"send to {self.peer}: {exc}") from exc

    def recv_frame(self, timeout: float = DEFAULT_TIMEOUT_S) -> wire.Frame:
        if self.closed:
            raise Recoverable(PEER_RESET, "connection closed")
        deadline = time.monotonic() + timeout
        if self._apply_recv_faults(deadline):
            time.sleep(timeout)
            raise Recoverable(TIMEOUT, f"recv from {self.peer}: black-holed")
        # Consumed bytes are parked in _rxbuf and only removed once a whole
        # frame is present. A timeout mid-frame must leave the stream in
        # place: dropping a half-read frame would make the next call parse
        # mid-frame bytes as a length prefix and desync the stream for good.
        buf = self._rxbuf
        while True:
            if len(buf) >= 4:
                (total,) = wire._LEN.unpack_from(buf)
                if total < wire.HEADER_LEN or total > wire.MAX_FRAME_LEN:
                    raise Fatal(PROTOCOL_VIOLATION, f"bad frame length {total}")
                if len(buf) >= 4 + total:
                    frame = wire.decode_frame(bytes(buf[4:4 + total]))
                    del buf[:4 + total]
                    self.bytes_received += 4 + total
                    return frame
            self._fill(deadline)

    def _fill(self, deadline: float) -> None:
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            raise Recoverable(TIMEOUT, f"recv from {self.peer}: timed out")
        try:
            self.sock.settimeout(remaining)
            k = self.sock.recv_into(self._scratch)
        except socket.timeout as exc:
            raise Recoverable(TIMEOUT, f"recv from {self.peer}: {exc}") from exc
        except (ConnectionResetError, ConnectionAbortedError) as exc:
            self.close()
            raise Recoverable(PEER_RESET, f"recv from {self.peer}: {exc}") from exc
        except OSError as exc:
            self.close()
            raise Recoverable(PEER_RESET, f"recv from {self.peer}: {exc}") from exc
        if k == 0:
            self.close()
            raise Recoverable(PEER_RESET, f"recv from {self.peer}: peer closed")
        self._rxbuf += memoryview(self._scratch)[:k]

    def close(self) -> None:
        self.closed = True
        try:
            self.sock.close()
        except OSError:
            pass


def connect(addr: PeerAddress, purpose: int, hello_args: tuple[int, int, int, int],
            deadline_s: float = DEFAULT_TIMEOUT_S, plan: FaultPlan | None = None) -> Connection:
    """Dial addr and send the routing hello. Retries refused connections
    until the deadline; a peer that never answers is Recoverable(peer_down).

    hello_args = (replica_id, rank_id, incarnation, aux) of the dialer.
    """
    deadline = time.monotonic() + deadline_s
    if plan is not None and purpose in _FAULTABLE:
        for rule in plan.effects(addr.replica_id):
            if rule.kind == "blackhole":
                time.sleep(max(0.0, deadline - time.monotonic()))
                raise Recoverable(PEER_DOWN, f"connect to {addr}: black-holed")
            if rule.kind == "delay":
                time.sleep(rule.latency_multiplier * rule.base_latency_s)
    last_exc: Exception | None = None
    while True:
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            raise Recoverable(PEER_DOWN, f"connect to {addr}: {last_exc}")
        try:
            sock = socket.create_connection(addr.endpoint(), timeout=remaining)
            break
        except (ConnectionRefusedError, ConnectionResetError, OSError) as exc:
            last_exc = exc
            time.sleep(min(_RETRY_PAUSE_S, max(0.0, deadline - time.monotonic())))
    conn = Connection(sock, peer=addr, purpose=purpose, plan=plan)
    replica_id, rank_id, incarnation, aux = hello_args
    conn.send_frame(
        wire.HEARTBEAT,
        payload=wire.encode_hello(purpose, replica_id, rank_id, incarnation, aux),
        timeout=max(0.05, deadline - time.monotonic()),
    )
    return conn


@dataclass
class Hello:
    purpose: int
    replica_id: int
    rank_id: int
    incarnation: int
    aux: int


class Listener:
    def __init__(self, host: str = "127.0.0.1", port: int = 0, backlog: int = 64):
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self.sock.bind((host, port))
        self.sock.listen(backlog)
        self.host, self.port = self.sock.getsockname()

    def accept(self, timeout: float | None = None) -> socket.socket:
        self.sock.settimeout(timeout)
        try:
            sock, _ = self.sock.accept()
            return sock
        except socket.timeout as exc:
            raise Recoverable(TIMEOUT, "accept timed out") from exc

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


class ConnectionRouter:
    """Accept loop for a rank's single listener.

    Each inbound connection announces itself with a hello frame; the router
    parks it in a per-purpose bucket until the owning logic claims it with
    take(). Claiming transfers ownership; the router never reads a
    connection past its hello.
    """

    def __init__(self, listener: Listener, plan: FaultPlan | None = None):
        self.listener = listener
        self.plan = plan
        self._buckets: dict[int, list[tuple[Hello, Connection]]] = {}
        self._cv = threading.Condition()
        self._stop = False
        self._thread = threading.Thread(target=self._accept_loop, daemon=True)

    def start(self) -> "ConnectionRouter":
        self._thread.start()
        return self

    def _accept_loop(self) -> None:
        while not self._stop:
            try:
                sock = self.listener.accept(timeout=0.2)
            except Recoverable:
                continue
            except OSError:
                return
            threading.Thread(target=self._greet, args=(sock,), daemon=True).start()

    def _greet(self, sock: socket.socket) -> None:
        conn = Connection(sock)
        try:
            frame = conn.recv_frame(timeout=DEFAULT_TIMEOUT_S)
            if frame.msg_type != wire.HEARTBEAT:
                raise Fatal(PROTOCOL_VIOLATION, f"expected hello, got {frame.name}")
            hello = Hello(*wire.decode_hello(frame.payload))
        except (Recoverable, Fatal) as exc:
            log.debug("router: dropping inbound connection: %s", exc)
            conn.close()
            return
        conn.peer = PeerAddress(hello.replica_id, hello.rank_id, "", 0)
        conn.purpose = hello.purpose
        conn.plan = self.plan
        with self._cv:
            self._buckets.setdefault(hello.purpose, []).append((hello, conn))
            self._cv.notify_all()

    def take(self, purpose: int, pred=None, timeout: float = DEFAULT_TIMEOUT_S,
             discard=None) -> tuple[Hello, Connection]:
        """Claim the first parked connection matching pred. Connections
        matching discard (e.g. stale generations) are closed and removed."""
        deadline = time.monotonic() + timeout
        with self._cv:
            while True:
                bucket = self._buckets.get(purpose, [])
                if discard is not None:
                    stale = [item for item in bucket if discard(item[0])]
                    for item in stale:
                        bucket.remove(item)
                        item[1].close()
                for item in bucket:
                    if pred is None or pred(item[0]):
                        bucket.remove(item)
                        return item
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise Recoverable(TIMEOUT, f"no inbound connection for purpose {purpose}")
                self._cv.wait(remaining)

    def stop(self) -> None:
        self._stop = True
        self.listener.close()
        with self._cv:
            for bucket in self._buckets.values():
                for _, conn in bucket:
                    conn.close()
            self._buckets.clear()
            self._cv.notify_all()
