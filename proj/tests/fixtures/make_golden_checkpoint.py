#!/usr/bin/env python3
# Writes golden_v1.cfck byte by byte with struct, independently of the C++
# writer. Rerun only when the on-disk layout deliberately changes.
import json
import struct
from pathlib import Path

TENSORS = [
    ("enc.w", [2, 3], [0.5, -1.25, 3.0, 0.0, 1e-3, -7.5]),
    ("q", [4], [1.0, 2.0, 3.0, 4.0]),
    ("s", [], [42.0]),
]
META = {"model": {"note": "golden"}, "train": {"epochs": 0}}


def main() -> None:
    out = bytearray(b"CFCK")
    out += struct.pack("<II", 1, len(TENSORS))
    for name, dims, values in TENSORS:
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", len(dims))
        out += struct.pack(f"<{len(dims)}I", *dims)
        out += struct.pack(f"<{len(values)}f", *values)
    meta = json.dumps(META, separators=(",", ":"), sort_keys=True).encode("utf-8")
    out += struct.pack("<I", len(meta)) + meta
    Path(__file__).with_name("golden_v1.cfck").write_bytes(bytes(out))


if __name__ == "__main__":
    main()
