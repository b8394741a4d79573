"""Convert the per-class JSON files of the npm `fashion-mnist` package to IDX.

Usage: python3 convert_fashion_npm.py <package>/src/clothes <out_dir>

The first 6000 rows of each class become training images and the next 1000
test images; empty rows in the source are skipped. Rows are interleaved class by class so both splits are balanced.
"""

import hashlib
import json
import pathlib
import struct
import sys

TRAIN_PER_CLASS = 6000
TEST_PER_CLASS = 1000


def main():
    src = pathlib.Path(sys.argv[1])
    out = pathlib.Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    rows = {}
    for k in range(10):
        data = [r for r in json.loads((src / f"{k}.json").read_text())["data"] if r]
        if len(data) < TRAIN_PER_CLASS + TEST_PER_CLASS:
            sys.exit(f"class {k}: only {len(data)} rows")
        rows[k] = data
    for split, lo, count, prefix in [
        ("train", 0, TRAIN_PER_CLASS, "train"),
        ("test", TRAIN_PER_CLASS, TEST_PER_CLASS, "t10k"),
    ]:
        images = bytearray()
        labels = bytearray()
        for i in range(count):
            for k in range(10):
                pixels = rows[k][lo + i]
                if len(pixels) != 784:
                    sys.exit(f"class {k} row {lo + i}: {len(pixels)} pixels")
                images.extend(bytes(pixels))
                labels.append(k)
        n = count * 10
        img_path = out / f"{prefix}-images-idx3-ubyte"
        lab_path = out / f"{prefix}-labels-idx1-ubyte"
        img_path.write_bytes(struct.pack(">IIII", 0x803, n, 28, 28) + bytes(images))
        lab_path.write_bytes(struct.pack(">II", 0x801, n) + bytes(labels))
        print(split, n)
    sums = []
    for p in sorted(out.glob("*-ubyte")):
        sums.append(f"{hashlib.sha256(p.read_bytes()).hexdigest()}  {p.name}")
    (out / "SHA256SUMS").write_text("\n".join(sums) + "\n")
    print("\n".join(sums))


if __name__ == "__main__":
    main()
