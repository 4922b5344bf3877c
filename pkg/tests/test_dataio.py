import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from sapbench.dataio import (Dataset, decode_tensor, encode_tensor, load_dataset, read_tensor, save_dataset,
                             synth_dataset, write_tensor)
from sapbench.errors import FormatError, InputError, ValidationError

dtypes = st.sampled_from([np.float32, np.float64, np.uint32])


def test_round_trip_f32():
    a = np.arange(6, dtype=np.float32).reshape(2, 3)
    assert encode_tensor(decode_tensor(encode_tensor(a))) == encode_tensor(a)
    assert decode_tensor(encode_tensor(a)).data.dtype == np.float32


def test_scalar_round_trip():
    out = decode_tensor(encode_tensor(np.array(3.5)))
    assert out.shape == () and out.item() == 3.5


def test_header_layout():
    buf = encode_tensor(np.zeros((2, 3), dtype=np.float64))
    assert buf[:4] == b"SAPT" and buf[4:7] == bytes([1, 1, 2])
    assert buf[7:15] == (2).to_bytes(4, "little") + (3).to_bytes(4, "little")
    assert len(buf) == 15 + 6 * 8


@pytest.mark.parametrize("mutate,offset", [
    (lambda b: b"XXXX" + b[4:], 0),
    (lambda b: b[:4] + b"\x02" + b[5:], 4),
    (lambda b: b[:5] + b"\x09" + b[6:], 5),
    (lambda b: b[:-1], None),
    (lambda b: b + b"\x00", None),
    (lambda b: b[:5], 5),
])
def test_malformed(mutate, offset):
    buf = encode_tensor(np.ones((2, 2), dtype=np.float32))
    with pytest.raises(FormatError) as info:
        decode_tensor(mutate(buf))
    if offset is not None:
        assert info.value.offset == offset


def test_unsupported_dtype():
    with pytest.raises(InputError):
        encode_tensor(np.zeros(2, dtype=np.int64))


@settings(max_examples=200, deadline=None)
@given(dtypes.flatmap(lambda d: hnp.arrays(d, hnp.array_shapes(min_dims=0, max_dims=4, min_side=0, max_side=5))))
def test_round_trip_fuzz(arr):
    out = decode_tensor(encode_tensor(arr))
    assert out.data.dtype == arr.dtype and out.shape == arr.shape
    assert out.data.tobytes() == arr.tobytes()


@settings(max_examples=200, deadline=None)
@given(st.binary(max_size=64))
def test_random_bytes_never_crash(buf):
    try:
        decode_tensor(buf)
    except FormatError:
        pass


def test_file_round_trip(tmp_path):
    a = np.random.default_rng(0).normal(size=(3, 4))
    write_tensor(tmp_path / "a.sapt", a)
    assert read_tensor(tmp_path / "a.sapt").data.tobytes() == a.tobytes()


def test_dataset_dir_round_trip(tmp_path):
    ds = synth_dataset(3, 4, 5, 10.0, 0)
    save_dataset(ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert len(back) == 12 and back.num_classes == 4
    assert np.array_equal(back.images, ds.images) and np.array_equal(back.labels, ds.labels)


def test_label_out_of_range():
    with pytest.raises(ValidationError) as info:
        Dataset(np.zeros((3, 1, 2, 2)), [0, 3, 1], 3)
    assert info.value.index == 1


def test_pixel_out_of_range():
    x = np.zeros((3, 1, 2, 2))
    x[2, 0, 1, 1] = 300
    with pytest.raises(ValidationError) as info:
        Dataset(x, [0, 0, 0], 1)
    assert info.value.index == 2


def test_load_rejects_bad_labels(tmp_path):
    d = tmp_path / "d"
    d.mkdir()
    write_tensor(d / "images.sapt", np.zeros((2, 1, 2, 2)))
    write_tensor(d / "labels.sapt", np.array([0.0, 1.0]))
    with pytest.raises(ValidationError):
        load_dataset(d)
    (d / "meta.json").write_text(json.dumps({"num_classes": 1}))
    write_tensor(d / "labels.sapt", np.array([0, 1], dtype=np.uint32))
    with pytest.raises(ValidationError):
        load_dataset(d)


def test_noise_free_classes_identical():
    ds = synth_dataset(4, 3, 6, 0.0, 0)
    for c in range(3):
        imgs = ds.images[ds.labels == c]
        assert np.all(imgs == imgs[0])


def test_synth_deterministic():
    a, b = synth_dataset(5, 3, 6, 20.0, 11), synth_dataset(5, 3, 6, 20.0, 11)
    assert a.images.tobytes() == b.images.tobytes() and a.labels.tobytes() == b.labels.tobytes()
    c = synth_dataset(5, 3, 6, 20.0, 11, split="val")
    assert a.images.tobytes() != c.images.tobytes()


def test_least_squares_separates_clean_classes():
    ds = synth_dataset(2, 10, 8, 0.0, 0, contrast=0.15)
    x = np.hstack([ds.images.reshape(len(ds), -1), np.ones((len(ds), 1))])
    onehot = np.eye(10)[ds.labels]
    w, *_ = np.linalg.lstsq(x, onehot, rcond=None)
    assert np.all((x @ w).argmax(axis=1) == ds.labels)


def test_synth_validation():
    with pytest.raises(InputError):
        synth_dataset(0, 3, 6, 1.0, 0)
    with pytest.raises(InputError):
        synth_dataset(1, 3, 6, -1.0, 0)
