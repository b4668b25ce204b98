"""Convert the per-digit JSON arrays of the `mnist` npm package to IDX files.

Samples are interleaved round-robin across classes so the file order
resembles the original distribution (not grouped by label).
"""
import gzip
import json
import struct
import sys
from pathlib import Path

SIDE = 28


def main(src: Path, out: Path) -> None:
    per_class = []
    for digit in range(10):
        data = json.loads((src / f"{digit}.json").read_text())["data"]
        count = len(data) // (SIDE * SIDE)
        pixels = [min(255, max(0, round(v * 255))) for v in data]
        per_class.append([bytes(pixels[i * SIDE * SIDE:(i + 1) * SIDE * SIDE]) for i in range(count)])

    images, labels = [], []
    cursor = [0] * 10
    while any(cursor[d] < len(per_class[d]) for d in range(10)):
        for d in range(10):
            if cursor[d] < len(per_class[d]):
                images.append(per_class[d][cursor[d]])
                labels.append(d)
                cursor[d] += 1

    n = len(images)
    with gzip.GzipFile(out / "images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x803, n, SIDE, SIDE))
        f.write(b"".join(images))
    with gzip.GzipFile(out / "labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x801, n))
        f.write(bytes(labels))
    print(f"wrote {n} samples to {out}")


if __name__ == "__main__":
    main(Path(sys.argv[1]), Path(sys.argv[2]))
