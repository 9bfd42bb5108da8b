import numpy as np
import pytest

from uhkd.data import DatasetError, augment, hflip, load_external, quantize, synth_dataset, write_packed


@pytest.fixture(scope="module")
def ds():
    return synth_dataset(num_classes=10, n_per_class=12, size=16, seed=3)


def test_deterministic(ds):
    again = synth_dataset(num_classes=10, n_per_class=12, size=16, seed=3)
    np.testing.assert_array_equal(again.images, ds.images)
    np.testing.assert_array_equal(again.val_idx, ds.val_idx)
    assert not np.array_equal(synth_dataset(10, 12, 16, seed=4).images, ds.images)


def test_invariants(ds):
    assert ds.images.shape == (120, 3, 16, 16)
    assert 0 <= ds.images.min() and ds.images.max() <= 1
    np.testing.assert_array_equal(np.bincount(ds.labels), np.full(10, 12))
    both = np.concatenate([ds.train_idx, ds.val_idx])
    assert len(np.unique(both)) == 120 == len(both)


def test_learnable_by_nearest_neighbour():
    d = synth_dataset(num_classes=10, n_per_class=30, size=32, seed=0)
    assert d.meta["nn_accuracy"] > 0.1


def test_rejects_single_class():
    with pytest.raises(DatasetError):
        synth_dataset(num_classes=1)


def test_packed_round_trip(tmp_path, ds):
    write_packed(ds, tmp_path)
    back = load_external(tmp_path)
    assert back.provenance == "external" and back.num_classes == 10
    np.testing.assert_array_equal(quantize(back.images), quantize(ds.images[np.concatenate([ds.train_idx, ds.val_idx])]))
    np.testing.assert_array_equal(back.labels[: len(ds.train_idx)], ds.labels[ds.train_idx])
    assert len(back.val_idx) == len(ds.val_idx)


def test_truncated_file_reports_offset(tmp_path, ds):
    write_packed(ds, tmp_path)
    raw = (tmp_path / "val.bin").read_bytes()
    (tmp_path / "val.bin").write_bytes(raw[:-5])
    rec = 1 + 3 * 16 * 16
    with pytest.raises(DatasetError, match=f"byte offset {(len(ds.val_idx) - 1) * rec}"):
        load_external(tmp_path)


def test_bad_label_and_empty_manifest(tmp_path, ds):
    write_packed(ds, tmp_path)
    raw = bytearray((tmp_path / "train.bin").read_bytes())
    raw[0] = 200
    (tmp_path / "train.bin").write_bytes(bytes(raw))
    with pytest.raises(DatasetError, match="out of range"):
        load_external(tmp_path)
    with pytest.raises(DatasetError, match="empty"):
        load_external(tmp_path, {"height": 16, "width": 16, "num_classes": 10, "files": []})


def test_augment_contracts(ds):
    x = ds.images[:6]
    np.testing.assert_array_equal(augment(x), x)
    np.testing.assert_array_equal(hflip(hflip(x)), x)
    forced = augment(x, flip=True, flip_prob=1.0)
    np.testing.assert_array_equal(forced, hflip(x))
    out = augment(x, flip=True, crop=True, jitter=True, seed=1, epoch=2, indices=range(6))
    assert out.shape == x.shape and 0 <= out.min() and out.max() <= 1
    again = augment(x, flip=True, crop=True, jitter=True, seed=1, epoch=2, indices=range(6))
    np.testing.assert_array_equal(out, again)
    other = augment(x, flip=True, crop=True, jitter=True, seed=1, epoch=3, indices=range(6))
    assert not np.array_equal(out, other)


def test_augment_is_keyed_per_sample(ds):
    x = ds.images[:4]
    full = augment(x, crop=True, seed=5, epoch=1, indices=[10, 11, 12, 13])
    part = augment(x[2:], crop=True, seed=5, epoch=1, indices=[12, 13])
    np.testing.assert_array_equal(full[2:], part)
