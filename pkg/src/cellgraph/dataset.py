"""Dataset contract: on-disk formats and validated in-memory representations.

A dataset directory is described by a JSON manifest listing, per sample, the
antigen channel images, the cell label mask, the per-cell class labels, and
the case diagnosis. Formats are chosen to round-trip bit-exactly:

* channels: binary 16-bit grayscale PGM (``P5``, maxval 65535, big-endian
  samples per the PGM standard),
* masks: ``CGMK`` header (magic + u16 width + u16 height, little-endian)
  followed by row-major u32 little-endian labels (0 = background),
* labels: CSV ``cell_id,class_label`` with class_label in {0, 1, -1},
  -1 marking unlabeled cells for the semi-supervised setting.
"""

from __future__ import annotations

import csv
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

CLASS_HEALTHY = 0
CLASS_TUMOR = 1
CLASS_UNLABELED = -1

DIAGNOSES = ("melanoma", "healthy")

_MANIFEST_KEYS = {"pixel_spacing_um", "samples"}
_SAMPLE_KEYS = {"sample_id", "diagnosis", "channels", "mask_path", "labels_path"}
_CHANNEL_KEYS = {"antigen", "path"}


class DatasetError(Exception):
    """Raised when a dataset file is missing, malformed, or inconsistent."""


@dataclass(frozen=True)
class ChannelImage:
    """One grayscale antigen response image; ``values`` is (height, width) u16."""

    width: int
    height: int
    values: np.ndarray

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise DatasetError(f"image dimensions must be >= 1, got {self.width}x{self.height}")
        if self.values.shape != (self.height, self.width):
            raise DatasetError(
                f"value buffer shape {self.values.shape} does not match "
                f"{self.height}x{self.width}"
            )
        if self.values.dtype != np.uint16:
            raise DatasetError(f"channel values must be uint16, got {self.values.dtype}")


@dataclass(frozen=True)
class StainStack:
    """All antigen channels of one sample plus the pixel spacing in um/pixel."""

    sample_id: str
    channels: tuple  # of (antigen_name, ChannelImage)
    pixel_spacing_um: float

    def __post_init__(self):
        if len(self.channels) < 1:
            raise DatasetError(f"sample {self.sample_id}: at least one channel required")
        if self.pixel_spacing_um <= 0:
            raise DatasetError(f"sample {self.sample_id}: pixel_spacing_um must be > 0")
        names = [name for name, _ in self.channels]
        if len(set(names)) != len(names):
            raise DatasetError(f"sample {self.sample_id}: duplicate antigen names")
        w, h = self.width, self.height
        for name, img in self.channels:
            if (img.width, img.height) != (w, h):
                raise DatasetError(
                    f"sample {self.sample_id}: channel {name} is "
                    f"{img.width}x{img.height}, expected {w}x{h}"
                )

    @property
    def width(self) -> int:
        return self.channels[0][1].width

    @property
    def height(self) -> int:
        return self.channels[0][1].height

    @property
    def antigen_names(self) -> list:
        return [name for name, _ in self.channels]


@dataclass(frozen=True)
class LabelMask:
    """Cell instance mask; ``labels`` is (height, width) u32, 0 = background."""

    width: int
    height: int
    labels: np.ndarray

    def __post_init__(self):
        if self.labels.shape != (self.height, self.width):
            raise DatasetError(
                f"mask buffer shape {self.labels.shape} does not match "
                f"{self.height}x{self.width}"
            )
        if self.labels.dtype != np.uint32:
            raise DatasetError(f"mask labels must be uint32, got {self.labels.dtype}")

    def cell_ids(self) -> np.ndarray:
        ids = np.unique(self.labels)
        return ids[ids > 0]


@dataclass
class CellTable:
    """Per-cell records: ids, sample, centroid (x, y in pixels), label, features.

    Centroid x is the column coordinate and y the row coordinate. Feature
    vectors have uniform length equal to ``len(feature_names)``.
    """

    cell_ids: np.ndarray
    sample_ids: list
    centroids: np.ndarray  # (n, 2) float64, columns (cx, cy)
    labels: np.ndarray  # int64, {0, 1, -1}
    features: np.ndarray  # (n, p) float64
    feature_names: list = field(default_factory=list)

    def __post_init__(self):
        n = len(self.cell_ids)
        if not (len(self.sample_ids) == n and self.centroids.shape == (n, 2) and len(self.labels) == n):
            raise DatasetError("cell table columns have inconsistent lengths")
        if self.features.shape != (n, len(self.feature_names)):
            raise DatasetError(
                f"feature matrix shape {self.features.shape} does not match "
                f"{n} cells x {len(self.feature_names)} names"
            )
        keys = list(zip(self.sample_ids, self.cell_ids.tolist()))
        if len(set(keys)) != len(keys):
            raise DatasetError("(sample_id, cell_id) pairs must be unique")

    def __len__(self) -> int:
        return len(self.cell_ids)

    def to_csv(self, path: str) -> None:
        write_feature_csv(path, self)

    @classmethod
    def from_csv(cls, path: str) -> "CellTable":
        return read_feature_csv(path)


@dataclass
class Sample:
    """One loaded sample: image stack, instance mask, per-cell label stub."""

    stack: StainStack
    mask: LabelMask
    cells: CellTable
    diagnosis: str


@dataclass
class Dataset:
    samples: list
    pixel_spacing_um: float

    def sample_ids(self) -> list:
        return [s.stack.sample_id for s in self.samples]


@dataclass(frozen=True)
class Violation:
    """One invariant violation found by validate_dataset."""

    sample_id: str
    check_id: str
    message: str


# ---------------------------------------------------------------------------
# file formats


def write_pgm(path: str, image: ChannelImage) -> None:
    """Write a binary 16-bit PGM (P5, maxval 65535, big-endian samples)."""
    header = f"P5\n{image.width} {image.height}\n65535\n".encode("ascii")
    _atomic_write(path, header + image.values.astype(">u2").tobytes())


def read_pgm(path: str) -> ChannelImage:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise DatasetError(f"cannot read channel file {path}: {exc}") from exc
    magic, pos = _pgm_token(data, 0, path)
    if magic != b"P5":
        raise DatasetError(f"{path}: not a binary PGM (magic {magic!r})")
    fields = []
    for _ in range(3):
        tok, pos = _pgm_token(data, pos, path)
        fields.append(tok)
    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError as exc:
        raise DatasetError(f"{path}: malformed PGM header") from exc
    if maxval != 65535:
        raise DatasetError(f"{path}: expected maxval 65535, got {maxval}")
    expected = width * height * 2
    body = data[pos : pos + expected]
    if len(body) != expected:
        raise DatasetError(f"{path}: truncated pixel data ({len(body)} of {expected} bytes)")
    values = np.frombuffer(body, dtype=">u2").reshape(height, width).astype(np.uint16)
    return ChannelImage(width=width, height=height, values=values)


def _pgm_token(data: bytes, pos: int, path: str) -> tuple[bytes, int]:
    # Skips whitespace and '#' comment lines; a single whitespace byte ends
    # the maxval token and precedes the raster.
    n = len(data)
    while pos < n:
        byte = data[pos : pos + 1]
        if byte == b"#":
            while pos < n and data[pos : pos + 1] != b"\n":
                pos += 1
        elif byte.isspace():
            pos += 1
        else:
            break
    if pos >= n:
        raise DatasetError(f"{path}: malformed PGM header (unexpected end of file)")
    start = pos
    while pos < n and not data[pos : pos + 1].isspace():
        pos += 1
    return data[start:pos], pos + 1


_MASK_MAGIC = b"CGMK"


def write_mask(path: str, mask: LabelMask) -> None:
    header = _MASK_MAGIC + struct.pack("<HH", mask.width, mask.height)
    _atomic_write(path, header + mask.labels.astype("<u4").tobytes())


def read_mask(path: str) -> LabelMask:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise DatasetError(f"cannot read mask file {path}: {exc}") from exc
    if len(data) < 8 or data[:4] != _MASK_MAGIC:
        raise DatasetError(f"{path}: bad mask header (expected magic {_MASK_MAGIC!r})")
    width, height = struct.unpack("<HH", data[4:8])
    expected = width * height * 4
    body = data[8 : 8 + expected]
    if len(body) != expected:
        raise DatasetError(f"{path}: truncated mask data ({len(body)} of {expected} bytes)")
    labels = np.frombuffer(body, dtype="<u4").reshape(height, width).astype(np.uint32)
    return LabelMask(width=width, height=height, labels=labels)


def write_labels_csv(path: str, cell_ids, class_labels) -> None:
    lines = ["cell_id,class_label"]
    for cid, lab in zip(cell_ids, class_labels):
        lines.append(f"{int(cid)},{int(lab)}")
    _atomic_write(path, ("\n".join(lines) + "\n").encode("ascii"))


def read_labels_csv(path: str) -> dict:
    """Read ``cell_id,class_label`` rows into an ordered {cell_id: label} map."""
    try:
        with open(path, "r", newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DatasetError(f"cannot read labels file {path}: {exc}") from exc
    if not rows or rows[0] != ["cell_id", "class_label"]:
        raise DatasetError(f"{path}: expected header 'cell_id,class_label'")
    labels = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            cid, lab = int(row[0]), int(row[1])
        except (ValueError, IndexError) as exc:
            raise DatasetError(f"{path}:{lineno}: malformed label row {row!r}") from exc
        if lab not in (CLASS_HEALTHY, CLASS_TUMOR, CLASS_UNLABELED):
            raise DatasetError(f"{path}:{lineno}: class_label must be 0, 1 or -1, got {lab}")
        if cid in labels:
            raise DatasetError(f"{path}:{lineno}: duplicate cell_id {cid}")
        labels[cid] = lab
    return labels


# ---------------------------------------------------------------------------
# manifest / dataset


def load_manifest(manifest_path: str) -> dict:
    try:
        with open(manifest_path, "r") as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise DatasetError(f"cannot read manifest {manifest_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{manifest_path}: invalid JSON: {exc}") from exc
    _require_keys(manifest, _MANIFEST_KEYS, f"{manifest_path}: manifest")
    if not isinstance(manifest["samples"], list) or not manifest["samples"]:
        raise DatasetError(f"{manifest_path}: manifest must list at least one sample")
    if not (isinstance(manifest["pixel_spacing_um"], (int, float)) and manifest["pixel_spacing_um"] > 0):
        raise DatasetError(f"{manifest_path}: pixel_spacing_um must be a positive number")
    for entry in manifest["samples"]:
        _require_keys(entry, _SAMPLE_KEYS, f"{manifest_path}: sample entry")
        if entry["diagnosis"] not in DIAGNOSES:
            raise DatasetError(
                f"{manifest_path}: sample {entry['sample_id']}: diagnosis must be one of {DIAGNOSES}"
            )
        if not entry["channels"]:
            raise DatasetError(f"{manifest_path}: sample {entry['sample_id']}: no channels listed")
        for ch in entry["channels"]:
            _require_keys(ch, _CHANNEL_KEYS, f"{manifest_path}: channel entry")
    return manifest


def _require_keys(obj: dict, allowed: set, where: str) -> None:
    if not isinstance(obj, dict):
        raise DatasetError(f"{where}: expected a JSON object")
    unknown = set(obj) - allowed
    if unknown:
        raise DatasetError(f"{where}: unknown keys {sorted(unknown)}")
    missing = allowed - set(obj)
    if missing:
        raise DatasetError(f"{where}: missing keys {sorted(missing)}")


def load_dataset(manifest_path: str) -> Dataset:
    """Load every sample referenced by the manifest.

    Missing files, dimension mismatches, and malformed headers are reported
    with the offending sample_id and path.
    """
    manifest = load_manifest(manifest_path)
    base = os.path.dirname(os.path.abspath(manifest_path))
    spacing = float(manifest["pixel_spacing_um"])
    samples = []
    for entry in manifest["samples"]:
        sid = entry["sample_id"]
        channels = []
        for ch in entry["channels"]:
            path = os.path.join(base, ch["path"])
            if not os.path.isfile(path):
                raise DatasetError(f"sample {sid}: channel file missing: {path}")
            channels.append((ch["antigen"], read_pgm(path)))
        mask_path = os.path.join(base, entry["mask_path"])
        if not os.path.isfile(mask_path):
            raise DatasetError(f"sample {sid}: mask file missing: {mask_path}")
        mask = read_mask(mask_path)
        labels_path = os.path.join(base, entry["labels_path"])
        if not os.path.isfile(labels_path):
            raise DatasetError(f"sample {sid}: labels file missing: {labels_path}")
        label_map = read_labels_csv(labels_path)
        try:
            stack = StainStack(sample_id=sid, channels=tuple(channels), pixel_spacing_um=spacing)
        except DatasetError as exc:
            raise DatasetError(f"sample {sid}: {exc}") from exc
        if (mask.width, mask.height) != (stack.width, stack.height):
            raise DatasetError(
                f"sample {sid}: mask {mask_path} is {mask.width}x{mask.height}, "
                f"channels are {stack.width}x{stack.height}"
            )
        samples.append(
            Sample(
                stack=stack,
                mask=mask,
                cells=_cell_stub(sid, mask, label_map),
                diagnosis=entry["diagnosis"],
            )
        )
    return Dataset(samples=samples, pixel_spacing_um=spacing)


def _cell_stub(sample_id: str, mask: LabelMask, label_map: dict) -> CellTable:
    """Cell table with centroids and labels but no features yet.

    Mask cells absent from the CSV are kept as unlabeled; CSV entries absent
    from the mask are kept with NaN centroids so validate_dataset can flag
    them as orphans instead of silently dropping them.
    """
    mask_ids = mask.cell_ids()
    ids = sorted(set(int(c) for c in mask_ids) | set(label_map))
    rows, cols = np.nonzero(mask.labels)
    order = np.argsort(mask.labels[rows, cols], kind="stable")
    rows, cols = rows[order], cols[order]
    sorted_labels = mask.labels[rows, cols]
    centroids = np.full((len(ids), 2), np.nan)
    for i, cid in enumerate(ids):
        lo = np.searchsorted(sorted_labels, cid, side="left")
        hi = np.searchsorted(sorted_labels, cid, side="right")
        if hi > lo:
            centroids[i, 0] = cols[lo:hi].mean()
            centroids[i, 1] = rows[lo:hi].mean()
    labels = np.array([label_map.get(cid, CLASS_UNLABELED) for cid in ids], dtype=np.int64)
    return CellTable(
        cell_ids=np.array(ids, dtype=np.int64),
        sample_ids=[sample_id] * len(ids),
        centroids=centroids,
        labels=labels,
        features=np.zeros((len(ids), 0)),
        feature_names=[],
    )


def save_dataset(dataset: Dataset, out_dir: str) -> str:
    """Serialize a dataset to a fresh directory tree; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for sample in dataset.samples:
        sid = sample.stack.sample_id
        sample_dir = os.path.join(out_dir, sid)
        os.makedirs(sample_dir, exist_ok=True)
        channels = []
        for antigen, image in sample.stack.channels:
            rel = f"{sid}/{antigen}.pgm"
            write_pgm(os.path.join(out_dir, rel), image)
            channels.append({"antigen": antigen, "path": rel})
        mask_rel = f"{sid}/mask.cgmk"
        write_mask(os.path.join(out_dir, mask_rel), sample.mask)
        labels_rel = f"{sid}/labels.csv"
        write_labels_csv(os.path.join(out_dir, labels_rel), sample.cells.cell_ids, sample.cells.labels)
        entries.append(
            {
                "sample_id": sid,
                "diagnosis": sample.diagnosis,
                "channels": channels,
                "mask_path": mask_rel,
                "labels_path": labels_rel,
            }
        )
    manifest = {"pixel_spacing_um": dataset.pixel_spacing_um, "samples": entries}
    manifest_path = os.path.join(out_dir, "manifest.json")
    _atomic_write(manifest_path, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode("ascii"))
    return manifest_path


def validate_dataset(dataset: Dataset) -> list:
    """Collect every invariant violation; an empty list means the dataset is valid.

    Violations are data, not errors: ordering is deterministic by
    (sample position, check id, detail).
    """
    report = []
    for sample in dataset.samples:
        sid = sample.stack.sample_id
        checks = []
        stack, mask, cells = sample.stack, sample.mask, sample.cells
        if (mask.width, mask.height) != (stack.width, stack.height):
            checks.append(
                Violation(
                    sid,
                    "dimension-mismatch",
                    f"mask {mask.width}x{mask.height} vs channels {stack.width}x{stack.height}",
                )
            )
        if stack.pixel_spacing_um <= 0:
            checks.append(Violation(sid, "nonpositive-spacing", f"{stack.pixel_spacing_um}"))
        mask_ids = set(int(c) for c in mask.cell_ids())
        for cid in cells.cell_ids.tolist():
            if cid not in mask_ids:
                checks.append(Violation(sid, "orphan-label", f"cell {cid} recorded but absent from mask"))
        checks.sort(key=lambda v: (v.check_id, v.message))
        report.extend(checks)
    return report


# ---------------------------------------------------------------------------
# feature table CSV (shared by the expression and radiomics extractors)


def _fmt(x: float) -> str:
    # 17 significant digits: exact float64 round trip.
    return format(float(x), ".17g")


def write_feature_csv(path: str, table: CellTable) -> None:
    lines = ["cell_id,sample_id,cx,cy,label," + ",".join(table.feature_names)]
    if not table.feature_names:
        lines[0] = lines[0].rstrip(",")
    for i in range(len(table)):
        row = [
            str(int(table.cell_ids[i])),
            table.sample_ids[i],
            _fmt(table.centroids[i, 0]),
            _fmt(table.centroids[i, 1]),
            str(int(table.labels[i])),
        ] + [_fmt(v) for v in table.features[i]]
        lines.append(",".join(row))
    _atomic_write(path, ("\n".join(lines) + "\n").encode("ascii"))


def read_feature_csv(path: str) -> CellTable:
    try:
        with open(path, "r", newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DatasetError(f"cannot read feature table {path}: {exc}") from exc
    if not rows or rows[0][:5] != ["cell_id", "sample_id", "cx", "cy", "label"]:
        raise DatasetError(f"{path}: expected feature table header")
    names = rows[0][5:]
    body = [r for r in rows[1:] if r]
    n = len(body)
    cell_ids = np.zeros(n, dtype=np.int64)
    sample_ids = []
    centroids = np.zeros((n, 2))
    labels = np.zeros(n, dtype=np.int64)
    features = np.zeros((n, len(names)))
    for i, row in enumerate(body):
        if len(row) != 5 + len(names):
            raise DatasetError(f"{path}: row {i + 2} has {len(row)} fields, expected {5 + len(names)}")
        cell_ids[i] = int(row[0])
        sample_ids.append(row[1])
        centroids[i] = (float(row[2]), float(row[3]))
        labels[i] = int(row[4])
        features[i] = [float(v) for v in row[5:]]
    return CellTable(
        cell_ids=cell_ids,
        sample_ids=sample_ids,
        centroids=centroids,
        labels=labels,
        features=features,
        feature_names=names,
    )


def _atomic_write(path: str, data: bytes) -> None:
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
