"""COCO-style run-length mask codec.

Runs are counted over the mask in column-major (Fortran) order, starting
with a run of zeros that may be empty. Both the uncompressed form
(``counts`` is a list of ints) and the compressed string form used by
``pycocotools`` are understood.
"""

from __future__ import annotations

import numpy as np

from .geometry import BinaryMask


class MalformedAnnotation(ValueError):
    pass


def _runs_from_string(s: str) -> list[int]:
    # pycocotools rleFrString: 5-bit groups, continuation bit 0x20, sign bit 0x10,
    # counts after the second are stored as deltas against counts[i - 2]
    counts: list[int] = []
    p = 0
    while p < len(s):
        x, k, more = 0, 0, True
        while more:
            c = ord(s[p]) - 48
            x |= (c & 0x1F) << (5 * k)
            more = bool(c & 0x20)
            p += 1
            k += 1
            if not more and (c & 0x10):
                x |= -1 << (5 * k)
            if more and p >= len(s):
                raise MalformedAnnotation("truncated compressed RLE string")
        if len(counts) > 2:
            x += counts[-2]
        counts.append(x)
    return counts


def _runs_to_string(counts: list[int]) -> str:
    out = []
    for i, x in enumerate(counts):
        if i > 2:
            x -= counts[i - 2]
        more = True
        while more:
            c = x & 0x1F
            x >>= 5
            more = (x != -1) if (c & 0x10) else (x != 0)
            if more:
                c |= 0x20
            out.append(chr(c + 48))
    return "".join(out)


def decode_rle_mask(rle: dict, width: int, height: int) -> BinaryMask:
    """Decode a COCO RLE record into a mask of the declared size."""
    size = rle.get("size")
    if size is not None and [int(v) for v in size] != [height, width]:
        raise MalformedAnnotation(f"RLE size {size} does not match {height}x{width}")
    counts = rle.get("counts")
    if isinstance(counts, bytes):
        counts = counts.decode("ascii")
    if isinstance(counts, str):
        counts = _runs_from_string(counts)
    if counts is None:
        raise MalformedAnnotation("RLE record has no counts")
    counts = [int(c) for c in counts]
    if any(c < 0 for c in counts):
        raise MalformedAnnotation("negative run length")
    if sum(counts) != width * height:
        raise MalformedAnnotation(f"run lengths sum to {sum(counts)}, expected {width * height}")
    values = np.arange(len(counts)) % 2 == 1
    flat = np.repeat(values, counts)
    return BinaryMask(flat.reshape((height, width), order="F"))


def encode_rle_mask(mask: BinaryMask, compressed: bool = False) -> dict:
    flat = mask.bits.ravel(order="F").astype(np.int8)
    change = np.flatnonzero(np.diff(flat)) + 1
    edges = np.concatenate(([0], change, [flat.size]))
    counts = np.diff(edges).tolist()
    if flat.size and flat[0]:
        counts.insert(0, 0)
    if not flat.size:
        counts = [0]
    rle = {"size": [mask.height, mask.width], "counts": counts}
    if compressed:
        rle["counts"] = _runs_to_string(counts)
    return rle
