"""Convert the per-class FashionMNIST JSON files into IDX files.

The JSON package ships one file per class (`0.json` .. `9.json`), each holding
`{"data": [[784 pixel values], ...]}`. Every image goes into the `train` pair;
an empty `t10k` pair is written so the loader sees the usual layout. The
loader merges both pairs and re-splits them, so nothing is lost. Empty rows
(the package has two in `0.json`) are dropped.

    python python/fashion_to_idx.py SRC_DIR OUT_DIR
"""

import argparse
import json
import struct
from pathlib import Path


def write_idx(path, dims, payload):
    header = struct.pack(">BBBB", 0, 0, 0x08, len(dims))
    header += b"".join(struct.pack(">I", d) for d in dims)
    path.write_bytes(header + bytes(payload))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("src", type=Path, help="directory containing 0.json .. 9.json")
    ap.add_argument("out", type=Path)
    args = ap.parse_args()

    pixels, labels = bytearray(), bytearray()
    skipped = 0
    for label in range(10):
        rows = json.loads((args.src / f"{label}.json").read_text())["data"]
        for row in rows:
            if not row:
                skipped += 1
                continue
            if len(row) != 784:
                raise SystemExit(f"{label}.json: expected 784 pixels, got {len(row)}")
            pixels.extend(row)
            labels.append(label)

    args.out.mkdir(parents=True, exist_ok=True)
    n = len(labels)
    write_idx(args.out / "train-images-idx3-ubyte", (n, 28, 28), pixels)
    write_idx(args.out / "train-labels-idx1-ubyte", (n,), labels)
    write_idx(args.out / "t10k-images-idx3-ubyte", (0, 28, 28), b"")
    write_idx(args.out / "t10k-labels-idx1-ubyte", (0,), b"")
    print(f"wrote {n} images to {args.out} (skipped {skipped} empty rows)")


if __name__ == "__main__":
    main()
