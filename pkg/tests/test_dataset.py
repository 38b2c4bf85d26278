import json
import os

import numpy as np
import pytest

from cellgraph.dataset import (
    ChannelImage,
    DatasetError,
    Sample,
    Dataset,
    load_dataset,
    read_feature_csv,
    read_mask,
    read_pgm,
    save_dataset,
    validate_dataset,
    write_feature_csv,
    write_labels_csv,
    write_mask,
    write_pgm,
    CellTable,
)
from conftest import make_mask, make_stack


def write_minimal_dataset(root, mask_values=None, skip_mask=False):
    """One sample, two 4x4 channels, labels for both cells."""
    os.makedirs(root / "s01", exist_ok=True)
    rng = np.random.default_rng(3)
    for name in ("agA", "agB"):
        img = ChannelImage(width=4, height=4, values=rng.integers(0, 65536, (4, 4)).astype(np.uint16))
        write_pgm(str(root / "s01" / f"{name}.pgm"), img)
    if mask_values is None:
        mask_values = np.array(
            [[1, 1, 0, 0], [1, 1, 0, 0], [0, 0, 2, 2], [0, 0, 2, 2]], dtype=np.uint32
        )
    if not skip_mask:
        write_mask(str(root / "s01" / "mask.cgmk"), make_mask(mask_values))
    write_labels_csv(str(root / "s01" / "labels.csv"), [1, 2], [0, 1])
    manifest = {
        "pixel_spacing_um": 0.45,
        "samples": [
            {
                "sample_id": "s01",
                "diagnosis": "melanoma",
                "channels": [
                    {"antigen": "agA", "path": "s01/agA.pgm"},
                    {"antigen": "agB", "path": "s01/agB.pgm"},
                ],
                "mask_path": "s01/mask.cgmk",
                "labels_path": "s01/labels.csv",
            }
        ],
    }
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest))
    return str(path)


def test_pgm_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    img = ChannelImage(width=7, height=5, values=rng.integers(0, 65536, (5, 7)).astype(np.uint16))
    path = str(tmp_path / "x.pgm")
    write_pgm(path, img)
    back = read_pgm(path)
    assert back.width == 7 and back.height == 5
    np.testing.assert_array_equal(back.values, img.values)


def test_pgm_accepts_full_size(tmp_path):
    # production images are 2018x2018; the format must take them
    values = np.zeros((2018, 2018), dtype=np.uint16)
    values[0, 0] = 65535
    path = str(tmp_path / "big.pgm")
    write_pgm(path, ChannelImage(width=2018, height=2018, values=values))
    back = read_pgm(path)
    assert back.values.shape == (2018, 2018)
    assert back.values[0, 0] == 65535


def test_pgm_rejects_malformed_header(tmp_path):
    path = tmp_path / "bad.pgm"
    path.write_bytes(b"P2\n4 4\n65535\n" + b"\x00" * 32)
    with pytest.raises(DatasetError, match="not a binary PGM"):
        read_pgm(str(path))
    path.write_bytes(b"P5\n4 4\n255\n" + b"\x00" * 16)
    with pytest.raises(DatasetError, match="maxval"):
        read_pgm(str(path))


def test_mask_round_trip(tmp_path):
    mask = make_mask([[0, 1], [2, 2]])
    path = str(tmp_path / "m.cgmk")
    write_mask(path, mask)
    back = read_mask(path)
    np.testing.assert_array_equal(back.labels, mask.labels)


def test_mask_rejects_truncation(tmp_path):
    path = tmp_path / "m.cgmk"
    write_mask(str(path), make_mask([[0, 1], [2, 2]]))
    data = path.read_bytes()
    path.write_bytes(data[:-4])
    with pytest.raises(DatasetError, match="truncated"):
        read_mask(str(path))


def test_load_minimal_manifest(tmp_path):
    manifest = write_minimal_dataset(tmp_path)
    data = load_dataset(manifest)
    assert len(data.samples) == 1
    sample = data.samples[0]
    assert len(sample.stack.channels) == 2
    assert sample.stack.antigen_names == ["agA", "agB"]
    assert list(sample.cells.cell_ids) == [1, 2]
    assert list(sample.cells.labels) == [0, 1]


def test_load_missing_mask_names_path(tmp_path):
    manifest = write_minimal_dataset(tmp_path, skip_mask=True)
    with pytest.raises(DatasetError, match="mask.cgmk"):
        load_dataset(manifest)


def test_manifest_rejects_unknown_keys(tmp_path):
    manifest = write_minimal_dataset(tmp_path)
    raw = json.loads(open(manifest).read())
    raw["exttra"] = 1
    open(manifest, "w").write(json.dumps(raw))
    with pytest.raises(DatasetError, match="unknown keys"):
        load_dataset(manifest)


def test_synthetic_dataset_preserves_diagnosis_split(tmp_path):
    # production cohort statistics: 27 cases, 20 melanoma
    from cellgraph.synth import SynthConfig, generate_synthetic_dataset

    config = SynthConfig(
        n_samples=27, n_melanoma=20, cells_per_sample=12, image_size=48, n_channels=2, seed=1
    )
    out = str(tmp_path / "d")
    generate_synthetic_dataset(config, out)
    data = load_dataset(os.path.join(out, "manifest.json"))
    diagnoses = [s.diagnosis for s in data.samples]
    assert diagnoses.count("melanoma") == 20
    assert diagnoses.count("healthy") == 7


def test_validate_clean_dataset_is_empty(tiny_dataset_dir):
    data = load_dataset(os.path.join(tiny_dataset_dir, "manifest.json"))
    assert validate_dataset(data) == []


def test_validate_flags_dimension_mismatch():
    stack = make_stack([np.zeros((5, 5))])
    mask = make_mask(np.pad(np.ones((2, 2)), (0, 2)))  # 4x4
    cells = CellTable(
        cell_ids=np.array([1]),
        sample_ids=["s01"],
        centroids=np.array([[0.5, 0.5]]),
        labels=np.array([0]),
        features=np.zeros((1, 0)),
        feature_names=[],
    )
    data = Dataset(samples=[Sample(stack=stack, mask=mask, cells=cells, diagnosis="healthy")],
                   pixel_spacing_um=1.0)
    report = validate_dataset(data)
    assert len(report) == 1
    assert report[0].check_id == "dimension-mismatch"


def test_validate_flags_orphan_label(tmp_path):
    # delete a cell's pixels from the mask and revalidate
    manifest = write_minimal_dataset(tmp_path)
    data = load_dataset(manifest)
    sample = data.samples[0]
    labels = sample.mask.labels.copy()
    labels[labels == 2] = 0
    data.samples[0] = Sample(
        stack=sample.stack,
        mask=make_mask(labels),
        cells=sample.cells,
        diagnosis=sample.diagnosis,
    )
    report = validate_dataset(data)
    assert [v.check_id for v in report] == ["orphan-label"]
    assert "2" in report[0].message


def test_orphan_csv_entry_survives_load_and_is_flagged(tmp_path):
    manifest = write_minimal_dataset(tmp_path)
    write_labels_csv(str(tmp_path / "s01" / "labels.csv"), [1, 2, 9], [0, 1, 1])
    data = load_dataset(manifest)
    report = validate_dataset(data)
    assert [v.check_id for v in report] == ["orphan-label"]
    assert "9" in report[0].message


def test_save_load_round_trip_bit_exact(tiny_dataset_dir, tmp_path):
    data = load_dataset(os.path.join(tiny_dataset_dir, "manifest.json"))
    second = str(tmp_path / "copy")
    save_dataset(data, second)
    again = load_dataset(os.path.join(second, "manifest.json"))
    assert len(again.samples) == len(data.samples)
    for a, b in zip(data.samples, again.samples):
        assert a.diagnosis == b.diagnosis
        np.testing.assert_array_equal(a.mask.labels, b.mask.labels)
        np.testing.assert_array_equal(a.cells.labels, b.cells.labels)
        for (name_a, img_a), (name_b, img_b) in zip(a.stack.channels, b.stack.channels):
            assert name_a == name_b
            np.testing.assert_array_equal(img_a.values, img_b.values)


def test_feature_csv_round_trip_exact(tmp_path):
    rng = np.random.default_rng(8)
    table = CellTable(
        cell_ids=np.arange(1, 6, dtype=np.int64),
        sample_ids=["s01"] * 5,
        centroids=rng.normal(size=(5, 2)) * 1000,
        labels=np.array([0, 1, -1, 1, 0]),
        features=rng.normal(size=(5, 3)) * rng.uniform(1e-8, 1e8, (5, 3)),
        feature_names=["a", "b", "c"],
    )
    path = str(tmp_path / "t.csv")
    write_feature_csv(path, table)
    back = read_feature_csv(path)
    np.testing.assert_array_equal(back.cell_ids, table.cell_ids)
    np.testing.assert_array_equal(back.labels, table.labels)
    # 17 significant digits means exact float64 round trip
    np.testing.assert_array_equal(back.features, table.features)
    np.testing.assert_array_equal(back.centroids, table.centroids)


def test_labels_csv_rejects_bad_class(tmp_path):
    path = tmp_path / "l.csv"
    path.write_text("cell_id,class_label\n1,5\n")
    from cellgraph.dataset import read_labels_csv

    with pytest.raises(DatasetError, match="class_label"):
        read_labels_csv(str(path))
