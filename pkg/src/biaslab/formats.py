"""On-disk formats: 8-bit binary PGM images and the dataset manifest CSV."""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from .synthdata import ARTIFACTS, SPLITS, Dataset

__all__ = [
    "FormatError",
    "PgmError",
    "ManifestError",
    "write_pgm",
    "read_pgm",
    "write_dataset",
    "read_dataset",
    "MANIFEST_HEADER",
]

MANIFEST_HEADER = ("id", "filename", "label", "split", "frame", "ruler", "hair", "circle",
                   "object_cx", "object_cy", "object_r")


class FormatError(ValueError):
    pass


class PgmError(FormatError):
    pass


class ManifestError(FormatError):
    pass


def encode_pgm(image) -> bytes:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise PgmError(f"PGM images must be 2-D, got shape {img.shape}")
    h, w = img.shape
    pixels = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def write_pgm(path, image) -> None:
    Path(path).write_bytes(encode_pgm(image))


def decode_pgm(buf: bytes, name: str = "<bytes>") -> np.ndarray:
    """Parse a binary P5 PGM with maxval <= 255 into floats in [0, 1]."""
    pos = 0

    def token() -> tuple[str, int]:
        nonlocal pos
        while pos < len(buf):
            c = buf[pos : pos + 1]
            if c == b"#":
                while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            elif c.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PgmError(f"{name}: truncated header at byte {start}")
        return buf[start:pos].decode("ascii", "replace"), start

    magic, at = token()
    if magic != "P5":
        raise PgmError(f"{name}: bad magic {magic!r} at byte {at}")
    fields = []
    for label in ("width", "height", "maxval"):
        text, at = token()
        if not text.isdigit() or int(text) <= 0:
            raise PgmError(f"{name}: invalid {label} {text!r} at byte {at}")
        fields.append(int(text))
    w, h, maxval = fields
    if maxval > 255:
        raise PgmError(f"{name}: 16-bit maxval {maxval} at byte {at} is not supported")
    pos += 1  # single whitespace byte after maxval
    need = w * h
    if len(buf) - pos < need:
        raise PgmError(f"{name}: pixel data truncated at byte {len(buf)} (expected {need} bytes from {pos})")
    if len(buf) - pos > need:
        raise PgmError(f"{name}: trailing data at byte {pos + need}")
    pixels = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(h, w)
    if pixels.max(initial=0) > maxval:
        raise PgmError(f"{name}: pixel above maxval {maxval}")
    return pixels.astype(np.float64) / maxval


def read_pgm(path) -> np.ndarray:
    path = Path(path)
    return decode_pgm(path.read_bytes(), str(path))


def _fmt(x: float) -> str:
    return repr(float(x))


def write_dataset(dataset: Dataset, directory, image_dir: str = "images") -> Path:
    """Write one PGM per image plus ``manifest.csv``; returns the manifest path."""
    directory = Path(directory)
    (directory / image_dir).mkdir(parents=True, exist_ok=True)
    manifest = directory / "manifest.csv"
    with manifest.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for k, ident in enumerate(dataset.ids):
            rel = f"{image_dir}/{ident}.pgm"
            write_pgm(directory / rel, dataset.images[k])
            obj = dataset.objects[k]
            writer.writerow(
                [ident, rel, int(dataset.labels[k]), dataset.splits[k]]
                + [int(bool(dataset.annotations[a][k])) for a in ARTIFACTS]
                + [_fmt(obj[0]), _fmt(obj[1]), _fmt(obj[2])]
            )
    return manifest


def _flag(text, line, column):
    if text not in ("0", "1"):
        raise ManifestError(f"line {line}: column {column} must be 0 or 1, got {text!r}")
    return text == "1"


def read_dataset(manifest) -> Dataset:
    """Load a dataset from its manifest; filenames resolve relative to the manifest directory."""
    manifest = Path(manifest)
    if manifest.is_dir():
        manifest = manifest / "manifest.csv"
    if not manifest.exists():
        raise ManifestError(f"{manifest}: manifest not found")
    base = manifest.parent
    with manifest.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != MANIFEST_HEADER:
        raise ManifestError(f"{manifest}: line 1: header must be {','.join(MANIFEST_HEADER)}")
    images, labels, ids, splits, objects = [], [], [], [], []
    flags = {a: [] for a in ARTIFACTS}
    seen = set()
    for line, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(MANIFEST_HEADER):
            raise ManifestError(f"{manifest}: line {line}: expected {len(MANIFEST_HEADER)} fields, got {len(row)}")
        rec = dict(zip(MANIFEST_HEADER, row))
        if rec["id"] in seen:
            raise ManifestError(f"{manifest}: line {line}: duplicate id {rec['id']!r}")
        seen.add(rec["id"])
        if rec["split"] not in SPLITS:
            raise ManifestError(f"{manifest}: line {line}: unknown split {rec['split']!r}")
        try:
            label = int(rec["label"])
            obj = [float(rec[k]) for k in ("object_cx", "object_cy", "object_r")]
        except ValueError as exc:
            raise ManifestError(f"{manifest}: line {line}: {exc}") from None
        if label < 0 or not all(math.isfinite(v) for v in obj):
            raise ManifestError(f"{manifest}: line {line}: invalid label or object annotation")
        path = base / rec["filename"]
        if not path.exists():
            raise ManifestError(f"{manifest}: line {line}: missing image file {rec['filename']!r}")
        images.append(read_pgm(path))
        labels.append(label)
        ids.append(rec["id"])
        splits.append(rec["split"])
        objects.append(obj)
        for a in ARTIFACTS:
            flags[a].append(_flag(rec[a], line, a))
    if not ids:
        return Dataset.empty(32)
    shapes = {img.shape for img in images}
    if len(shapes) != 1:
        raise ManifestError(f"{manifest}: images differ in shape: {sorted(shapes)}")
    return Dataset(
        images=np.stack(images),
        labels=np.asarray(labels, dtype=int),
        ids=ids,
        splits=splits,
        annotations={a: np.asarray(v, dtype=bool) for a, v in flags.items()},
        objects=np.asarray(objects, dtype=np.float64),
    )
