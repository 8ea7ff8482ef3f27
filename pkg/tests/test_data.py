import hashlib
import struct

import numpy as np
import pytest

from tokenlearner.data import (
    DIRECTIONS,
    MAGIC,
    TaskSpec,
    generate_dataset,
    load_dataset,
    make_dataset,
    quadrant,
)
from tokenlearner.errors import CheckpointError, ConfigError


def scan_quadrant(img):
    """Quadrant with the largest mean pixel, by brute force."""
    h, w = img.shape
    means = []
    for q in range(4):
        rows = range(0, h // 2) if q < 2 else range(h // 2, h)
        cols = range(0, w // 2) if q % 2 == 0 else range(w // 2, w)
        total = sum(float(img[r, c]) for r in rows for c in cols)
        means.append(total / (len(rows) * len(cols)))
    return int(np.argmax(means))


def test_locate_label_matches_scan_oracle():
    data = make_dataset(TaskSpec("locate-patch", size=16, noise=0.0, blob=3, seed=5), 60)
    for img, label in zip(data.images, data.labels):
        assert scan_quadrant(img[0, :, :, 0]) == label


def test_locate_blob_lies_inside_labelled_quadrant():
    clean = make_dataset(TaskSpec(noise=0.0, seed=1), 50)
    for img, label in zip(clean.images, clean.labels):
        rows, cols = np.nonzero(img[0, :, :, 0])
        assert {quadrant(r, c, 32) for r, c in zip(rows, cols)} == {label}


def test_count_blobs_label_is_count_minus_one():
    spec = TaskSpec("count-blobs", size=24, classes=5, noise=0.0, blob=4, seed=2)
    data = make_dataset(spec, 40)
    for img, label in zip(data.images, data.labels):
        assert img.sum() == (label + 1) * spec.blob ** 2
        assert img.max() == 1.0


def test_moving_blob_moves_one_pixel_per_frame():
    spec = TaskSpec("moving-blob-direction", size=16, frames=8, noise=0.0, blob=3, seed=4)
    data = make_dataset(spec, 20)
    assert data.images.shape == (20, 8, 16, 16, 1)
    for video, label in zip(data.images, data.labels):
        corners = [np.argwhere(frame[:, :, 0] > 0).min(axis=0) for frame in video]
        steps = {tuple(b - a) for a, b in zip(corners, corners[1:])}
        assert steps == {DIRECTIONS[label]}


def test_zero_samples_rejected():
    with pytest.raises(ConfigError):
        make_dataset(TaskSpec(), 0)


@pytest.mark.parametrize("doc", [
    {"kind": "spirals"}, {"classes": 3}, {"blob": 20}, {"noise": -1.0}, {"colour": 1},
    {"kind": "moving-blob-direction", "frames": 1},
])
def test_invalid_specs(doc):
    with pytest.raises(ConfigError):
        TaskSpec.from_dict(doc)


def test_same_seed_gives_identical_bytes(tmp_path):
    spec = TaskSpec(seed=9)
    generate_dataset(spec, 30, tmp_path / "a.tlds")
    generate_dataset(spec, 30, tmp_path / "b.tlds")
    generate_dataset(TaskSpec(seed=10), 30, tmp_path / "c.tlds")
    digest = [hashlib.sha256((tmp_path / f"{n}.tlds").read_bytes()).hexdigest() for n in "abc"]
    assert digest[0] == digest[1] != digest[2]


def test_round_trip_and_layout(tmp_path):
    spec = TaskSpec("moving-blob-direction", size=8, frames=3, blob=2, seed=1)
    data = generate_dataset(spec, 5, tmp_path / "d.tlds")
    raw = (tmp_path / "d.tlds").read_bytes()
    assert raw[:5] == MAGIC
    assert struct.unpack_from("<6I", raw, 5) == (5, 3, 8, 8, 1, 4)
    record = 3 * 8 * 8 * 4 + 4
    assert len(raw) == 5 + 24 + 5 * record
    first = np.frombuffer(raw, "<f4", count=3 * 64, offset=29)
    np.testing.assert_array_equal(first, data.images[0].ravel())
    assert struct.unpack_from("<I", raw, 29 + record - 4)[0] == data.labels[0]

    back = load_dataset(tmp_path / "d.tlds")
    np.testing.assert_array_equal(back.images, data.images)
    np.testing.assert_array_equal(back.labels, data.labels)
    assert back.classes == 4


def test_corrupt_files(tmp_path):
    generate_dataset(TaskSpec(seed=0), 4, tmp_path / "d.tlds")
    raw = (tmp_path / "d.tlds").read_bytes()
    (tmp_path / "magic").write_bytes(b"XXXXX" + raw[5:])
    (tmp_path / "short").write_bytes(raw[:-3])
    bad_label = bytearray(raw)
    bad_label[-4:] = struct.pack("<I", 7)
    (tmp_path / "label").write_bytes(bytes(bad_label))
    for name, match in [("magic", "magic"), ("short", "records"), ("label", "outside")]:
        with pytest.raises(CheckpointError, match=match):
            load_dataset(tmp_path / name)


def test_unwritable_path(tmp_path):
    with pytest.raises(OSError):
        generate_dataset(TaskSpec(), 2, tmp_path / "missing" / "d.tlds")
