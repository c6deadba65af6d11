"""Framing for the socket backend.

Every message is a little-endian header ``{opcode:u8, rank:u16, offset:u64,
len:u32}`` followed by a payload.  The payload is ``len`` bytes long except
for READ requests, where ``len`` is the number of bytes asked for and the
payload is empty.  Responses reuse the request opcode with bit 7 set:

=========== ================================ ==============================
opcode      request payload                  response payload
=========== ================================ ==============================
HELLO       none; offset = segment size      none; offset = segment size
READ        none                             ``len`` bytes
WRITE       bytes to store                   none
CASw        expected, desired (w bytes each) prior word
FAAw ...    operand (w bytes)                prior word
BARRIER_HINT none (no response)              n/a
GOODBYE     none (no response)               n/a
ERROR       n/a                              utf-8 message
=========== ================================ ==============================
"""

from __future__ import annotations

import struct

HEADER = struct.Struct("<BHQI")

HELLO = 0x01
GOODBYE = 0x02
BARRIER_HINT = 0x03
READ = 0x10
WRITE = 0x11
CAS32 = 0x20
CAS64 = 0x21
FAA32 = 0x22
FAA64 = 0x23
FOR32 = 0x24
FOR64 = 0x25
FAND32 = 0x26
FAND64 = 0x27
FXOR32 = 0x28
FXOR64 = 0x29
ERROR = 0x7F
RESPONSE = 0x80

ATOMIC_OPCODES = {
    ("cas", 4): CAS32, ("cas", 8): CAS64,
    ("faa", 4): FAA32, ("faa", 8): FAA64,
    ("or", 4): FOR32, ("or", 8): FOR64,
    ("and", 4): FAND32, ("and", 8): FAND64,
    ("xor", 4): FXOR32, ("xor", 8): FXOR64,
}
OPCODE_ATOMICS = {code: key for key, code in ATOMIC_OPCODES.items()}

# Bulk transfers are split so at most one chunk per direction is in flight.
CHUNK = 64 * 1024


def frame(opcode: int, rank: int, offset: int, length: int, payload=b"") -> bytes:
    return HEADER.pack(opcode, rank, offset, length) + bytes(payload)


def payload_size(opcode: int, length: int) -> int:
    return 0 if opcode == READ else length


class FrameReader:
    """Incremental parser: feed raw bytes, get back complete frames."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[tuple[int, int, int, int, bytes]]:
        self._buf += data
        out = []
        buf = self._buf
        pos = 0
        hsize = HEADER.size
        while len(buf) - pos >= hsize:
            op, rank, offset, length = HEADER.unpack_from(buf, pos)
            need = payload_size(op, length)
            if len(buf) - pos - hsize < need:
                break
            start = pos + hsize
            out.append((op, rank, offset, length, bytes(buf[start : start + need])))
            pos = start + need
        if pos:
            del buf[:pos]
        return out
