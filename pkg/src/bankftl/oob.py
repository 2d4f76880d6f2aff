"""Out-of-band (spare area) metadata layout.

Every programmed page carries [type:1][lpn:4][seq:8][crc:4] = 17 bytes in its
spare area: block-type flag, owning logical page number, global write sequence
number, and a CRC-32 of the page payload for torn-write detection.
"""

import struct
import zlib

TYPE_DATA = 0x0D
TYPE_CHECKPOINT = 0x0C

LPN_NONE = 0xFFFFFFFF

_SPARE = struct.Struct("<BIQI")
SPARE_BYTES = _SPARE.size  # 17


def encode_spare(block_type, lpn, seq, page_data):
    crc = zlib.crc32(page_data) & 0xFFFFFFFF
    return _SPARE.pack(block_type, lpn, seq, crc)


def decode_spare(spare, page_data=None):
    """Return (block_type, lpn, seq) or None if unparseable / CRC mismatch.

    An erased (all-ones) spare never parses: 0xFF is not a known type flag.
    """
    if len(spare) < SPARE_BYTES:
        return None
    block_type, lpn, seq, crc = _SPARE.unpack_from(spare)
    if block_type not in (TYPE_DATA, TYPE_CHECKPOINT):
        return None
    if page_data is not None and (zlib.crc32(page_data) & 0xFFFFFFFF) != crc:
        return None
    return block_type, lpn, seq
