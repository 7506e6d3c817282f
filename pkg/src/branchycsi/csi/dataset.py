"""On-disk radio-image datasets.

A dataset is a directory holding ``manifest`` (JSON lines) and one ``.csir``
file per sample. The first manifest line is a header naming the format and
the label taxonomy; each further line describes one sample::

    {"file": "000000.csir", "rod_label": 1, "har_label": 2, "meta": {...}}

A ``.csir`` file is a 16-byte header (magic ``CSIR``, u32 version, u32 rows,
u32 cols, little-endian) followed by rows x cols little-endian float32
values in row-major order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Iterable

import numpy as np

from ..errors import FormatError, ParameterError
from ..labels import HAR_CLASSES, ROD_CLASSES, TAXONOMY_VERSION, check_labels
from .preprocess import RadioImage

MANIFEST = "manifest"
IMAGE_MAGIC = b"CSIR"
IMAGE_VERSION = 1
FORMAT_NAME = "radio-image-dataset"
_HEADER = struct.Struct("<4sIII")


class DatasetFormatError(FormatError):
    pass


def write_image(path, values: np.ndarray) -> None:
    values = np.ascontiguousarray(values, dtype="<f4")
    rows, cols = values.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(IMAGE_MAGIC, IMAGE_VERSION, rows, cols))
        f.write(values.tobytes())


def read_image(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise DatasetFormatError(f"{path}: shorter than the image header")
    magic, version, rows, cols = _HEADER.unpack_from(blob)
    if magic != IMAGE_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r}")
    if version != IMAGE_VERSION:
        raise DatasetFormatError(f"{path}: image version {version}, expected {IMAGE_VERSION}")
    if len(blob) != _HEADER.size + 4 * rows * cols:
        raise DatasetFormatError(f"{path}: payload size does not match {rows} x {cols}")
    return np.frombuffer(blob, dtype="<f4", offset=_HEADER.size).reshape(rows, cols).astype(np.float32)


def manifest_header() -> dict:
    return {
        "format": FORMAT_NAME,
        "taxonomy_version": TAXONOMY_VERSION,
        "rod_classes": list(ROD_CLASSES),
        "har_classes": list(HAR_CLASSES),
    }


def dataset_write(samples: Iterable[RadioImage], path) -> int:
    """Write samples to directory ``path`` (created if needed); returns the count."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps(manifest_header(), sort_keys=True)]
    n = 0
    for n, sample in enumerate(samples, start=1):
        name = f"{n - 1:06d}.csir"
        write_image(root / name, sample.values)
        record = {"file": name, "rod_label": sample.rod_label, "har_label": sample.har_label, "meta": sample.meta}
        lines.append(json.dumps(record, sort_keys=True))
    (root / MANIFEST).write_text("\n".join(lines) + "\n")
    return n


def dataset_read(path) -> list[RadioImage]:
    root = Path(path)
    manifest = root / MANIFEST
    if not manifest.is_file():
        raise FileNotFoundError(f"no manifest in {root}")
    lines = [ln for ln in manifest.read_text().splitlines() if ln.strip()]
    if not lines:
        raise DatasetFormatError(f"{manifest}: empty manifest")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{manifest}: bad header line: {exc}") from None
    if header.get("format") != FORMAT_NAME:
        raise DatasetFormatError(f"{manifest}: not a {FORMAT_NAME} manifest")
    if header.get("taxonomy_version") != TAXONOMY_VERSION:
        raise DatasetFormatError(
            f"{manifest}: taxonomy version {header.get('taxonomy_version')}, expected {TAXONOMY_VERSION}")
    samples = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
            rod, har = rec["rod_label"], rec["har_label"]
            check_labels(rod, har)
            values = read_image(root / rec["file"])
            samples.append(RadioImage(values, rod, har, rec.get("meta", {})))
        except DatasetFormatError:
            raise
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DatasetFormatError(f"{manifest}:{lineno}: {exc}") from None
    return samples


def split_dataset(samples, test_fraction: float = 0.2, seed: int = 0) -> tuple[list, list]:
    """Seeded split stratified by (rod_label, har_label); returns ``(train, test)`` in input order."""
    if not 0.0 < test_fraction < 1.0:
        raise ParameterError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    groups: dict = {}
    for i, s in enumerate(samples):
        groups.setdefault((s.rod_label, -1 if s.har_label is None else s.har_label), []).append(i)
    test = set()
    for key in sorted(groups, key=lambda k: (-1 if k[0] is None else k[0], k[1])):
        idx = groups[key]
        n_test = int(round(len(idx) * test_fraction))
        test.update(rng.permutation(idx)[:n_test].tolist())
    return ([s for i, s in enumerate(samples) if i not in test], [s for i, s in enumerate(samples) if i in test])
