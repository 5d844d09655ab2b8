"""Wire protocol for running the block store in a separate process.

Frames are ``length (u32 BE) | opcode (u8) | body`` with all integers
big-endian and fixed width; every request yields exactly one reply
(opcode | 0x80) or an error frame (0xFF).  For a fixed setup the size of a
FETCH_BLOCKS frame depends only on the number of referenced levels, never
on which block the client is after.

The server is the untrusted party: it sees sealed blocks, level geometry
and fill state, and nothing else.  There is deliberately no transport
encryption; the threat model already hands the server every byte it
stores.
"""

import socket
import socketserver
import struct
import threading

import numpy as np

from .blockstore import (BlockStore, Geometry, LevelRef, LevelUpload,
                         ProtocolError, TransferStats, UPLOAD_FIELD,
                         UPLOAD_RAW, UPLOAD_SIM_HALF)

OP_FETCH_BLOCKS = 0x01
OP_STORE_LEVEL = 0x02
OP_FETCH_META = 0x03
OP_MARK_UNFILLED = 0x04
OP_STATS = 0x05
OP_SETUP = 0x06
OP_REPLY = 0x80
OP_ERROR = 0xFF

ERR_MALFORMED = 1
ERR_CONTRACT = 2
ERR_VERSION = 3
ERR_INTERNAL = 4

WIRE_VERSION = 1

_REF = struct.Struct(">IHI")          # partition, level, epoch
_FETCH_ITEM = struct.Struct(">IHII")  # partition, level, epoch, offset


class TransportError(Exception):
    """The connection failed mid-operation (distinct from integrity errors)."""


class RemoteProtocolError(ProtocolError):
    """The server answered with an error frame."""


# ---------------------------------------------------------------------------
# framing helpers
# ---------------------------------------------------------------------------

def _recv_exact(sock, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise TransportError("connection closed mid-frame")
        buf.extend(chunk)
    return bytes(buf)


def write_frame(sock, opcode: int, body: bytes):
    sock.sendall(struct.pack(">IB", len(body), opcode) + body)


def read_frame(sock):
    header = _recv_exact(sock, 5)
    length, opcode = struct.unpack(">IB", header)
    return opcode, _recv_exact(sock, length)


def _encode_block(blob, sim: bool, sealed_size: int) -> bytes:
    if sim:
        return struct.pack(">Q", int(blob))
    if len(blob) != sealed_size:
        raise ProtocolError("sealed block has the wrong wire size")
    return blob


def _block_wire_size(sim: bool, sealed_size: int) -> int:
    return 8 if sim else sealed_size


def _encode_meta(meta, sim: bool) -> bytes:
    if sim:
        ids, digest = meta
        arr = np.asarray(ids, dtype=">i8")
        return struct.pack(">IQ", len(arr), digest) + arr.tobytes()
    return struct.pack(">I", len(meta)) + meta


def _decode_meta(body: bytes, sim: bool):
    if sim:
        count, digest = struct.unpack_from(">IQ", body)
        ids = np.frombuffer(body, dtype=">i8", count=count, offset=12)
        return (ids.astype(np.int64), digest), 12 + 8 * count
    (length,) = struct.unpack_from(">I", body)
    return body[4:4 + length], 4 + length


# ---------------------------------------------------------------------------
# server
# ---------------------------------------------------------------------------

class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        backend = self.server.backend
        lock = self.server.backend_lock
        sock = self.request
        while True:
            try:
                opcode, body = read_frame(sock)
            except TransportError:
                return
            try:
                with lock:
                    reply_op, reply = self._dispatch(backend, opcode, body)
            except ProtocolError as exc:
                reply_op, reply = OP_ERROR, self._error(ERR_CONTRACT, str(exc))
            except (struct.error, IndexError, ValueError) as exc:
                reply_op, reply = OP_ERROR, self._error(ERR_MALFORMED, str(exc))
            except Exception as exc:  # keep the connection alive regardless
                reply_op, reply = OP_ERROR, self._error(ERR_INTERNAL, repr(exc))
            try:
                write_frame(sock, reply_op, reply)
            except OSError:
                return

    @staticmethod
    def _error(code: int, message: str) -> bytes:
        encoded = message.encode()[:1000]
        return struct.pack(">BH", code, len(encoded)) + encoded

    def _dispatch(self, backend, opcode, body):
        geo = backend.geometry
        if opcode == OP_SETUP:
            version, flags, partitions, levels, sealed, top = \
                struct.unpack_from(">BBIHII", body)
            if version != WIRE_VERSION:
                return OP_ERROR, self._error(ERR_VERSION,
                                             f"wire version {version} unsupported")
            fills = list(struct.unpack_from(f">{partitions}I", body, 16))
            sizes = tuple((2 << l) for l in range(levels - 1)) + (top,)
            geometry = Geometry(partitions=partitions, levels=levels,
                                level_sizes=sizes, sealed_size=sealed,
                                sim=bool(flags & 1),
                                delete_on_read=bool(flags & 2))
            backend.setup(geometry, fills)
            return OP_SETUP | OP_REPLY, b""

        if geo is None:
            raise ProtocolError("SETUP required before any other operation")

        if opcode == OP_FETCH_BLOCKS:
            (count,) = struct.unpack_from(">I", body)
            requests = []
            for i in range(count):
                p, level, epoch, offset = _FETCH_ITEM.unpack_from(body, 4 + 14 * i)
                requests.append((LevelRef(p, level, epoch), offset))
            blobs = backend.fetch_blocks(requests)
            out = struct.pack(">I", len(blobs)) + b"".join(
                _encode_block(b, geo.sim, geo.sealed_size) for b in blobs)
            return OP_FETCH_BLOCKS | OP_REPLY, out

        if opcode == OP_STORE_LEVEL:
            p, level, epoch = _REF.unpack_from(body)
            mode, n_slots = struct.unpack_from(">BI", body, 10)
            cursor = 15
            if mode == UPLOAD_FIELD:
                k, width = struct.unpack_from(">II", body, cursor)
                cursor += 8
                vectors = []
                for _ in range(k):
                    vec = struct.unpack_from(f">{width}Q", body, cursor)
                    cursor += 8 * width
                    vectors.append(tuple(vec))
                blocks = vectors
            else:
                unit = _block_wire_size(geo.sim, geo.sealed_size)
                if geo.sim:
                    blocks = np.frombuffer(
                        body, dtype=">u8", count=n_slots, offset=cursor
                    ).astype(np.uint64)
                else:
                    blocks = [body[cursor + i * unit: cursor + (i + 1) * unit]
                              for i in range(n_slots)]
                cursor += n_slots * unit
            (meta_entries,) = struct.unpack_from(">I", body, cursor)
            cursor += 4
            meta, _ = _decode_meta(body[cursor:], geo.sim)
            backend.store_level(LevelRef(p, level, epoch),
                                LevelUpload(mode, blocks, n_slots, meta,
                                            meta_entries))
            return OP_STORE_LEVEL | OP_REPLY, b""

        if opcode == OP_FETCH_META:
            p, level, epoch = _REF.unpack_from(body)
            meta = backend.fetch_meta(LevelRef(p, level, epoch))
            return OP_FETCH_META | OP_REPLY, _encode_meta(meta, geo.sim)

        if opcode == OP_MARK_UNFILLED:
            p, level, epoch = _REF.unpack_from(body)
            backend.mark_unfilled(LevelRef(p, level, epoch))
            return OP_MARK_UNFILLED | OP_REPLY, b""

        if opcode == OP_STATS:
            return OP_STATS | OP_REPLY, backend.stats().pack()

        raise ProtocolError(f"unknown opcode 0x{opcode:02x}")


class BlockStoreServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address, backend: BlockStore):
        super().__init__(address, _Handler)
        self.backend = backend
        self.backend_lock = threading.Lock()


def serve(bind_address, backend: BlockStore):
    """Run a block-store server until interrupted (the CLI entry point)."""
    server = BlockStoreServer(bind_address, backend)
    try:
        server.serve_forever()
    finally:
        server.server_close()


def start_server(backend: BlockStore, host: str = "127.0.0.1", port: int = 0):
    """Start a server on a background thread; returns (server, address)."""
    server = BlockStoreServer((host, port), backend)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server, server.server_address


# ---------------------------------------------------------------------------
# client adapter
# ---------------------------------------------------------------------------

class RemoteBlockStore:
    """Client-side handle satisfying the block-store contract over a socket."""

    def __init__(self, address):
        self.sock = socket.create_connection(address)
        self.geometry = None
        self.frames_sent = 0
        self.last_frame_sizes = []
        self.last_frames = []      # (opcode, frame size) pairs

    def close(self):
        self.sock.close()

    def _call(self, opcode: int, body: bytes) -> bytes:
        try:
            write_frame(self.sock, opcode, body)
            self.frames_sent += 1
            self.last_frame_sizes.append(5 + len(body))
            self.last_frames.append((opcode, 5 + len(body)))
            reply_op, reply = read_frame(self.sock)
        except OSError as exc:
            raise TransportError(str(exc)) from exc
        if reply_op == OP_ERROR:
            code, msg_len = struct.unpack_from(">BH", reply)
            message = reply[3:3 + msg_len].decode(errors="replace")
            raise RemoteProtocolError(f"server error {code}: {message}")
        if reply_op != (opcode | OP_REPLY):
            raise TransportError(f"mismatched reply opcode 0x{reply_op:02x}")
        return reply

    # -- contract --------------------------------------------------------------

    def setup(self, geometry: Geometry, fills):
        flags = (1 if geometry.sim else 0) | (2 if geometry.delete_on_read else 0)
        body = struct.pack(">BBIHII", WIRE_VERSION, flags, geometry.partitions,
                           geometry.levels, geometry.sealed_size,
                           geometry.level_sizes[-1])
        body += struct.pack(f">{len(fills)}I", *fills)
        self._call(OP_SETUP, body)
        self.geometry = geometry

    def _decode_blocks(self, reply: bytes):
        (count,) = struct.unpack_from(">I", reply)
        if self.geometry.sim:
            arr = np.frombuffer(reply, dtype=">u8", count=count, offset=4)
            return arr.astype(np.uint64)
        unit = self.geometry.sealed_size
        return [reply[4 + i * unit: 4 + (i + 1) * unit] for i in range(count)]

    def fetch_blocks(self, requests):
        body = struct.pack(">I", len(requests)) + b"".join(
            _FETCH_ITEM.pack(ref.partition, ref.level, ref.epoch, off)
            for ref, off in requests)
        blobs = self._decode_blocks(self._call(OP_FETCH_BLOCKS, body))
        if self.geometry.sim:
            return [int(b) for b in blobs]
        return blobs

    def fetch_level(self, ref: LevelRef, offsets):
        body = struct.pack(">I", len(offsets)) + b"".join(
            _FETCH_ITEM.pack(ref.partition, ref.level, ref.epoch, int(off))
            for off in offsets)
        return self._decode_blocks(self._call(OP_FETCH_BLOCKS, body))

    def fetch_read(self, partition: int, levels, epochs, offsets):
        # same wire frame as fetch_blocks: one item per referenced level
        body = struct.pack(">I", len(levels)) + b"".join(
            _FETCH_ITEM.pack(partition, l, e, o)
            for l, e, o in zip(levels, epochs, offsets))
        blobs = self._decode_blocks(self._call(OP_FETCH_BLOCKS, body))
        if self.geometry.sim:
            return [int(b) for b in blobs]
        return blobs

    def store_level(self, ref: LevelRef, upload: LevelUpload):
        head = _REF.pack(ref.partition, ref.level, ref.epoch)
        head += struct.pack(">BI", upload.mode, upload.n_slots)
        if upload.mode == UPLOAD_FIELD:
            width = len(upload.blocks[0]) if upload.blocks else 0
            head += struct.pack(">II", len(upload.blocks), width)
            payload = b"".join(struct.pack(f">{width}Q", *vec)
                               for vec in upload.blocks)
        elif self.geometry.sim:
            payload = np.asarray(upload.blocks, dtype=np.uint64).astype(">u8").tobytes()
        else:
            payload = b"".join(_encode_block(b, False, self.geometry.sealed_size)
                               for b in upload.blocks)
        body = head + payload + struct.pack(">I", upload.meta_entries) \
            + _encode_meta(upload.meta, self.geometry.sim)
        self._call(OP_STORE_LEVEL, body)

    def fetch_meta(self, ref: LevelRef):
        reply = self._call(OP_FETCH_META, _REF.pack(ref.partition, ref.level,
                                                    ref.epoch))
        meta, _ = _decode_meta(reply, self.geometry.sim)
        return meta

    def mark_unfilled(self, ref: LevelRef):
        self._call(OP_MARK_UNFILLED, _REF.pack(ref.partition, ref.level,
                                               ref.epoch))

    def stats(self) -> TransferStats:
        return TransferStats.unpack(self._call(OP_STATS, b""))

    def note_step(self):
        pass  # per-step series are a local-backend feature
