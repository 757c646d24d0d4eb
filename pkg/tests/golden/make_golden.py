"""Regenerate the golden files with plain ``struct`` (no package code involved).

Run from this directory: ``python3 make_golden.py``.
"""

import struct
from pathlib import Path

HERE = Path(__file__).parent

FC_DIMS = (2, 3)
FC_DATA = (0.5, -1.25, 3.0, 0.0, 0.125, -2.5)
CONV_DIMS = (2, 1, 2, 2)
CONV_DATA = (1.0, -0.5, 0.25, 0.75, -1.0, 0.5, -0.25, 2.0)

# K=2, N=2, M=10: per filter (mav, alphas, codes as +-1 per element and plane)
Q_FILTERS = (
    (0.5, (0.75, 0.25), ((1, -1, 1, 1, -1, -1, 1, -1, 1, 1), (-1, -1, 1, -1, 1, 1, -1, -1, -1, 1))),
    (2.0, (0.5, -0.125), ((-1,) * 10, (1, 1, 1, 1, 1, 1, 1, 1, 1, -1))),
)


def tensor_bytes(kind, dims, data):
    out = b"WNQT" + struct.pack("<BBB", 1, kind, len(dims))
    out += struct.pack(f"<{len(dims)}Q", *dims)
    return out + struct.pack(f"<{len(data)}f", *data)


def plane_bytes(signs):
    out = bytearray((len(signs) + 7) // 8)
    for i, s in enumerate(signs):
        if s > 0:
            out[i // 8] |= 1 << (i % 8)
    return bytes(out)


def quantized_bytes(kind, k, m, filters):
    out = b"WNQQ" + struct.pack("<BBBQQ", 1, kind, k, len(filters), m)
    for mav, alphas, planes in filters:
        out += struct.pack("<f", mav) + struct.pack(f"<{k}f", *alphas)
        out += b"".join(plane_bytes(p) for p in planes)
    return out


if __name__ == "__main__":
    (HERE / "fc.wnqt").write_bytes(tensor_bytes(0, FC_DIMS, FC_DATA))
    (HERE / "conv.wnqt").write_bytes(tensor_bytes(1, CONV_DIMS, CONV_DATA))
    (HERE / "fc_k2.wnqq").write_bytes(quantized_bytes(0, 2, 10, Q_FILTERS))
