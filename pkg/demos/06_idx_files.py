"""
Reading and writing IDX files
=============================

MNIST ships as IDX: a big-endian magic number, big-endian dimension sizes,
then raw unsigned bytes.  The loader checks each part and raises a
distinct error for each kind of damage.
"""
import tempfile
from pathlib import Path

import numpy as np

from gpkan.data_io import (IMAGES_MAGIC, BadMagic, DimensionOverflow, TruncatedPayload, encode_idx, load_idx_images,
                           load_idx_labels, parse_idx, write_idx)

grids = np.array([[[0, 255], [128, 127]], [[1, 2], [3, 4]]], dtype=np.uint8)
raw = encode_idx(grids)
print("two 2x2 images as IDX bytes:", raw.hex(" ", 4))

with tempfile.TemporaryDirectory() as tmp:
    write_idx(Path(tmp) / "img.idx.gz", grids)  # a .gz suffix means gzip
    write_idx(Path(tmp) / "lab.idx", np.array([7, 3], dtype=np.uint8))
    print("images scaled to [0, 1]:\n", load_idx_images(Path(tmp) / "img.idx.gz"))
    print("labels:", load_idx_labels(Path(tmp) / "lab.idx"))

damaged = {
    "cut short": raw[:-1],
    "wrong magic": b"\x00\x00\x08\x01" + raw[4:],
    "absurd sizes": bytes.fromhex("00000803" "0000ffff" "0000ffff" "0000ffff"),
}
for what, blob in damaged.items():
    try:
        parse_idx(blob, IMAGES_MAGIC)
    except (TruncatedPayload, BadMagic, DimensionOverflow) as err:
        print(f"{what:12s} -> {type(err).__name__}: {err}")
