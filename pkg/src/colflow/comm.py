"""Loosely-synchronous communicator.

p symmetric workers, no coordinator. Point-to-point messages are buffered
(send never waits for a matching recv) and order-preserving per
(src, dst, tag). Collectives are built from gather-to-rank-0 plus broadcast,
which fixes the reduction/concatenation order and makes every collective
result bitwise reproducible and transport-independent.

Two transports:
  * in-process -- workers are threads sharing a mailbox array; the default
    test vehicle.
  * tcp -- full mesh over loopback/LAN; worker i accepts connections from
    every lower rank and dials every higher rank, which makes rendezvous
    deterministic.

Tags below 2**16 belong to user point-to-point traffic; each collective
consumes one tag from an internal epoch counter starting at 2**16 so that
successive collectives can never cross-talk.
"""

from __future__ import annotations

import queue
import socket
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass, field

from .columnar import (
    Table,
    concat,
    deserialize_table,
    fnv1a64,
    serialize_table,
    take,
)
from .errors import (
    CommTimeout,
    LengthMismatch,
    OverflowFault,
    PeerClosed,
    RankCollision,
    RendezvousTimeout,
    SchemaMismatch,
    VersionMismatch,
)

USER_TAG_LIMIT = 1 << 16
HANDSHAKE_MAGIC = b"TMTC"
PROTOCOL_VERSION = 1

_INT64_MIN = -(1 << 63)
_INT64_MAX = (1 << 63) - 1


class ReduceOp:
    SUM = "sum"
    MIN = "min"
    MAX = "max"


@dataclass
class WorkerSpec:
    rank: int
    world_size: int
    transport: str = "in-process"
    peers: list[tuple[int, str, int]] = field(default_factory=list)
    rendezvous_timeout: float = 30.0
    op_timeout: float | None = None


class _Mailbox:
    """Per-worker inbox: (src, tag) -> FIFO of payloads."""

    def __init__(self):
        self._lock = threading.Lock()
        self._cond = threading.Condition(self._lock)
        self._queues: dict[tuple[int, int], deque] = {}
        self.closed = False

    def put(self, src: int, tag: int, payload: bytes):
        with self._cond:
            self._queues.setdefault((src, tag), deque()).append(payload)
            self._cond.notify_all()

    def get(self, src: int, tag: int, timeout: float | None) -> bytes:
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while True:
                q = self._queues.get((src, tag))
                if q:
                    return q.popleft()
                if self.closed:
                    raise PeerClosed(f"world closed while waiting on ({src},{tag})")
                if deadline is None:
                    self._cond.wait()
                else:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        raise CommTimeout(f"recv timeout on ({src},{tag})")
                    self._cond.wait(remaining)

    def close(self):
        with self._cond:
            self.closed = True
            self._cond.notify_all()


class Communicator:
    """Per-worker handle; one collective at a time per handle."""

    def __init__(self, rank: int, world_size: int, mailbox: _Mailbox,
                 op_timeout: float | None = None):
        self.rank = rank
        self.world_size = world_size
        self._mailbox = mailbox
        self._epoch = USER_TAG_LIMIT
        self.op_timeout = op_timeout

    # transport hook: deliver payload to dst's mailbox
    def _transport_send(self, dst: int, tag: int, payload: bytes):
        raise NotImplementedError

    def send(self, dst: int, tag: int, payload: bytes):
        if dst == self.rank:
            self._mailbox.put(self.rank, tag, payload)
            return
        self._transport_send(dst, tag, payload)

    def recv(self, src: int, tag: int, timeout: float | None = None) -> bytes:
        return self._mailbox.get(src, tag, timeout if timeout is not None
                                 else self.op_timeout)

    def close(self):
        self._mailbox.close()

    # -- collectives -----------------------------------------------------

    def _next_tag(self) -> int:
        tag = self._epoch
        self._epoch += 1
        return tag

    def _gather_raw(self, root: int, payload: bytes, tag: int):
        if self.rank == root:
            out = []
            for src in range(self.world_size):
                if src == root:
                    out.append(payload)
                else:
                    out.append(self.recv(src, tag))
            return out
        self.send(root, tag, payload)
        return None

    def _broadcast_raw(self, root: int, payload: bytes | None, tag: int) -> bytes:
        if self.rank == root:
            assert payload is not None
            for dst in range(self.world_size):
                if dst != root:
                    self.send(dst, tag, payload)
            return payload
        return self.recv(root, tag)

    def barrier(self):
        tag = self._next_tag()
        self._gather_raw(0, b"", tag)
        self._broadcast_raw(0, b"" if self.rank == 0 else None, tag)

    def broadcast_bytes(self, root: int, payload: bytes | None = None) -> bytes:
        tag = self._next_tag()
        return self._broadcast_raw(root, payload, tag)

    def gather_bytes(self, root: int, payload: bytes) -> list[bytes] | None:
        tag = self._next_tag()
        return self._gather_raw(root, payload, tag)

    @staticmethod
    def _pack_list(parts: list[bytes]) -> bytes:
        out = bytearray(struct.pack("<I", len(parts)))
        for p in parts:
            out += struct.pack("<Q", len(p))
            out += p
        return bytes(out)

    @staticmethod
    def _unpack_list(buf: bytes) -> list[bytes]:
        (n,) = struct.unpack_from("<I", buf, 0)
        pos = 4
        parts = []
        for _ in range(n):
            (ln,) = struct.unpack_from("<Q", buf, pos)
            pos += 8
            parts.append(buf[pos : pos + ln])
            pos += ln
        return parts

    def allgather_bytes(self, payload: bytes) -> list[bytes]:
        gathered = self.gather_bytes(0, payload)
        packed = self._pack_list(gathered) if self.rank == 0 else None
        return self._unpack_list(self.broadcast_bytes(0, packed))

    def allreduce(self, values, op: str):
        """Element-wise reduction in fixed rank order 0..p-1; result is
        identical (bitwise, for floats) on every rank and across runs."""
        is_int = all(isinstance(v, int) and not isinstance(v, bool) for v in values)
        fmt = "q" if is_int else "d"
        vals = list(values) if is_int else [float(v) for v in values]
        payload = struct.pack("<B", 1 if is_int else 0) + struct.pack(
            f"<{len(vals)}{fmt}", *vals
        )
        gathered = self.gather_bytes(0, payload)
        if self.rank == 0:
            try:
                result = self._reduce_gathered(gathered, op)
                reply = b"\x00" + result
            except (LengthMismatch, OverflowFault) as e:
                reply = b"\x01" + type(e).__name__.encode() + b":" + str(e).encode()
            out = self.broadcast_bytes(0, reply)
        else:
            out = self.broadcast_bytes(0)
        if out[:1] == b"\x01":
            kind, _, msg = out[1:].decode().partition(":")
            exc = LengthMismatch if kind == "LengthMismatch" else OverflowFault
            raise exc(msg)
        body = out[1:]
        is_int_r = body[0] == 1
        n = (len(body) - 1) // 8
        res = list(struct.unpack_from(f"<{n}{'q' if is_int_r else 'd'}", body, 1))
        if n != len(vals):
            raise LengthMismatch(
                f"local vector length {len(vals)} != reduced length {n}"
            )
        return res

    @staticmethod
    def _reduce_gathered(gathered: list[bytes], op: str) -> bytes:
        vecs = []
        is_int = None
        for buf in gathered:
            bi = buf[0] == 1
            if is_int is None:
                is_int = bi
            elif is_int != bi:
                raise LengthMismatch("mixed element types across ranks")
            n = (len(buf) - 1) // 8
            vecs.append(list(struct.unpack_from(f"<{n}{'q' if bi else 'd'}", buf, 1)))
        n0 = len(vecs[0])
        for v in vecs[1:]:
            if len(v) != n0:
                raise LengthMismatch(
                    f"allreduce vector lengths differ: {n0} vs {len(v)}"
                )
        acc = list(vecs[0])
        for v in vecs[1:]:
            if op == ReduceOp.SUM:
                for i in range(n0):
                    acc[i] += v[i]
            elif op == ReduceOp.MIN:
                for i in range(n0):
                    if v[i] < acc[i]:
                        acc[i] = v[i]
            elif op == ReduceOp.MAX:
                for i in range(n0):
                    if v[i] > acc[i]:
                        acc[i] = v[i]
            else:
                raise ValueError(f"unknown reduce op {op!r}")
        if is_int and op == ReduceOp.SUM:
            for x in acc:
                if not _INT64_MIN <= x <= _INT64_MAX:
                    raise OverflowFault("Int64 SUM overflow")
        return struct.pack("<B", 1 if is_int else 0) + struct.pack(
            f"<{n0}{'q' if is_int else 'd'}", *acc
        )

    # -- table collectives -----------------------------------------------

    def shuffle_table(self, t: Table, dest: list[int]) -> Table:
        """Route each row to dest[row]; result on each rank is ordered by
        source rank then source row order."""
        if len(dest) != t.nrows:
            raise LengthMismatch("dest length must equal nrows")
        digest = fnv1a64(repr(t.schema.fields).encode())
        digests = self.allgather_bytes(struct.pack("<Q", digest))
        if any(d != digests[0] for d in digests):
            raise SchemaMismatch("shuffle_table schemas differ across ranks")
        tag = self._next_tag()
        by_dst: list[list[int]] = [[] for _ in range(self.world_size)]
        for r, d in enumerate(dest):
            by_dst[d].append(r)
        for dst in range(self.world_size):
            self.send(dst, tag, serialize_table(take(t, by_dst[dst])))
        parts = [deserialize_table(self.recv(src, tag))
                 for src in range(self.world_size)]
        return concat(parts, schema=t.schema)

    def broadcast_table(self, root: int, t: Table | None = None) -> Table:
        payload = serialize_table(t) if self.rank == root else None
        return deserialize_table(self.broadcast_bytes(root, payload))

    def gather_table(self, root: int, t: Table) -> Table | None:
        parts = self.gather_bytes(root, serialize_table(t))
        if parts is None:
            return None
        tables = [deserialize_table(p) for p in parts]
        return concat(tables, schema=t.schema)

    def allgather_table(self, t: Table) -> Table:
        parts = self.allgather_bytes(serialize_table(t))
        return concat([deserialize_table(p) for p in parts], schema=t.schema)


# -- in-process transport --------------------------------------------------

class InProcessCommunicator(Communicator):
    def __init__(self, rank, world_size, mailboxes, op_timeout=None):
        super().__init__(rank, world_size, mailboxes[rank], op_timeout)
        self._mailboxes = mailboxes

    def _transport_send(self, dst, tag, payload):
        box = self._mailboxes[dst]
        if box.closed:
            raise PeerClosed(f"rank {dst} mailbox closed")
        box.put(self.rank, tag, payload)


def make_in_process_world(world_size: int,
                          op_timeout: float | None = None
                          ) -> list[InProcessCommunicator]:
    boxes = [_Mailbox() for _ in range(world_size)]
    return [InProcessCommunicator(r, world_size, boxes, op_timeout)
            for r in range(world_size)]


def run_threads(world_size: int, fn, *args, op_timeout: float | None = None,
                **kwargs) -> list:
    """Run fn(comm, *args, **kwargs) on world_size worker threads; returns
    per-rank results. First worker exception is re-raised after the world
    is torn down (so no peer blocks forever)."""
    comms = make_in_process_world(world_size, op_timeout)
    results: list = [None] * world_size
    errors: list = [None] * world_size

    def runner(rank):
        try:
            results[rank] = fn(comms[rank], *args, **kwargs)
        except BaseException as e:  # noqa: BLE001 - propagated below
            errors[rank] = e
            for c in comms:
                c.close()

    threads = [threading.Thread(target=runner, args=(r,), daemon=True)
               for r in range(world_size)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    real = [e for e in errors if e is not None and not isinstance(e, PeerClosed)]
    if real:
        raise real[0]
    for e in errors:
        if e is not None:
            raise e
    return results


# -- tcp transport ---------------------------------------------------------

_FRAME_HDR = struct.Struct("<IIQ")  # tag, src, len


def parse_hostfile(text: str) -> list[tuple[int, str, int]]:
    """One line per rank: `<rank> <host>:<port>`; '#' starts a comment.
    Ranks must be dense from 0 and unique."""
    peers = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2 or ":" not in parts[1]:
            raise ValueError(f"bad hostfile line: {raw!r}")
        rank = int(parts[0])
        host, port = parts[1].rsplit(":", 1)
        peers.append((rank, host, int(port)))
    ranks = sorted(r for r, _, _ in peers)
    if len(set(ranks)) != len(ranks):
        dupes = sorted({r for r in ranks if ranks.count(r) > 1})
        raise RankCollision(f"duplicate ranks in hostfile: {dupes}")
    if ranks != list(range(len(ranks))):
        raise ValueError(f"hostfile ranks not dense from 0: {ranks}")
    return peers


class _PeerWriter:
    """Serializes outbound frames to one peer on a dedicated thread, so
    user-level send never blocks on the socket."""

    def __init__(self, sock: socket.socket):
        self._sock = sock
        self._q: queue.Queue = queue.Queue()
        self._thread = threading.Thread(target=self._run, daemon=True)
        self.failed = False
        self._thread.start()

    def enqueue(self, frame: bytes):
        if self.failed:
            raise PeerClosed("peer connection lost")
        self._q.put(frame)

    def _run(self):
        while True:
            frame = self._q.get()
            if frame is None:
                break
            try:
                self._sock.sendall(frame)
            except OSError:
                self.failed = True
                break

    def stop(self):
        self._q.put(None)
        self._thread.join(timeout=5)


class TcpCommunicator(Communicator):
    """Full-mesh TCP transport. Rank i accepts connections from all j < i
    and dials all j > i; a handshake carries magic, protocol version and
    the claimed rank."""

    def __init__(self, spec: WorkerSpec):
        super().__init__(spec.rank, spec.world_size, _Mailbox(),
                         spec.op_timeout)
        self._spec = spec
        self._socks: dict[int, socket.socket] = {}
        self._writers: dict[int, _PeerWriter] = {}
        self._readers: list[threading.Thread] = []
        self._connect_mesh()

    def _connect_mesh(self):
        spec = self._spec
        by_rank = {r: (h, p) for r, h, p in spec.peers}
        if sorted(by_rank) != list(range(spec.world_size)):
            raise RankCollision(
                f"peer list must cover ranks 0..{spec.world_size - 1} exactly once"
            )
        deadline = time.monotonic() + spec.rendezvous_timeout
        host, port = by_rank[spec.rank]
        listener = None
        if spec.rank > 0:
            listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            listener.bind((host, port))
            listener.listen(spec.world_size)
            listener.settimeout(spec.rendezvous_timeout)
        try:
            # dial higher ranks
            for peer in range(spec.rank + 1, spec.world_size):
                self._socks[peer] = self._dial(by_rank[peer], peer, deadline)
            # accept lower ranks
            expected = set(range(spec.rank))
            while expected:
                try:
                    conn, _ = listener.accept()
                except socket.timeout as e:
                    raise RendezvousTimeout(
                        f"rank {spec.rank}: still waiting for ranks {sorted(expected)}"
                    ) from e
                peer = self._read_handshake(conn)
                if peer not in expected:
                    conn.close()
                    raise RankCollision(
                        f"rank {peer} connected twice or out of order"
                    )
                conn.sendall(self._handshake_bytes())
                expected.discard(peer)
                self._socks[peer] = conn
        finally:
            if listener is not None:
                listener.close()
        for peer, sock in self._socks.items():
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._writers[peer] = _PeerWriter(sock)
            th = threading.Thread(target=self._reader_loop, args=(peer, sock),
                                  daemon=True)
            th.start()
            self._readers.append(th)

    def _handshake_bytes(self) -> bytes:
        return HANDSHAKE_MAGIC + struct.pack("<II", PROTOCOL_VERSION, self.rank)

    def _dial(self, addr, peer, deadline) -> socket.socket:
        last_err = None
        while time.monotonic() < deadline:
            try:
                sock = socket.create_connection(addr, timeout=1.0)
                sock.settimeout(None)
                sock.sendall(self._handshake_bytes())
                got = self._read_handshake(sock)
                if got != peer:
                    sock.close()
                    raise RankCollision(
                        f"expected rank {peer} at {addr}, peer claims {got}"
                    )
                return sock
            except (ConnectionRefusedError, socket.timeout, OSError) as e:
                last_err = e
                time.sleep(0.05)
        raise RendezvousTimeout(f"cannot reach rank {peer} at {addr}: {last_err}")

    @staticmethod
    def _read_handshake(sock: socket.socket) -> int:
        buf = _recv_exact(sock, 12)
        if buf[:4] != HANDSHAKE_MAGIC:
            raise VersionMismatch("bad handshake magic")
        version, rank = struct.unpack("<II", buf[4:])
        if version != PROTOCOL_VERSION:
            raise VersionMismatch(
                f"protocol version {version}, expected {PROTOCOL_VERSION}"
            )
        return rank

    def _reader_loop(self, peer: int, sock: socket.socket):
        # EOF here just means the peer is done sending (graceful teardown);
        # crash detection is left to op timeouts (fault tolerance is out of
        # scope), so the mailbox stays open for traffic from other peers.
        try:
            while True:
                hdr = _recv_exact(sock, _FRAME_HDR.size)
                tag, src, ln = _FRAME_HDR.unpack(hdr)
                payload = _recv_exact(sock, ln)
                self._mailbox.put(src, tag, payload)
        except (OSError, PeerClosed):
            pass

    def _transport_send(self, dst, tag, payload):
        frame = _FRAME_HDR.pack(tag, self.rank, len(payload)) + payload
        self._writers[dst].enqueue(frame)

    def close(self):
        for w in self._writers.values():
            w.stop()
        for s in self._socks.values():
            try:
                s.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            s.close()
        super().close()


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise PeerClosed("connection closed mid-frame")
        buf += chunk
    return bytes(buf)


def init(spec: WorkerSpec) -> Communicator:
    """Stand up a ready communicator for one worker."""
    if spec.world_size == 1:
        return make_in_process_world(1, spec.op_timeout)[0]
    if spec.transport == "tcp":
        return TcpCommunicator(spec)
    raise ValueError(
        "in-process transport spans one OS process; build the whole world "
        "with make_in_process_world/run_threads instead"
    )
