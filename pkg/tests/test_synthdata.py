import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import binom

from promptdistill.errors import ConfigError, CorruptFileError, MagicError, StratificationError
from promptdistill.metrics import roc_auc
from promptdistill.model import EncoderConfig, TemplateModel, save_checkpoint
from promptdistill.synthdata import (
    DatasetSpec,
    Sample,
    dataset_digest,
    generate_dataset,
    lesion_intensity_scores,
    read_dataset,
    split,
    split_sizes,
    stack,
    write_dataset,
)

SMALL = DatasetSpec(n_samples=12, volume_extent=8, seed=3)


def fake(labels):
    z = np.zeros((1, 1, 1, 1))
    return [Sample(f"s{i}", np.zeros((3, 1, 1, 1)), z, int(y), np.zeros((1, 1, 1))) for i, y in enumerate(labels)]


@pytest.fixture(scope="module")
def default_data():
    return generate_dataset(DatasetSpec())


def test_shapes_and_labels():
    data = generate_dataset(SMALL)
    assert len(data) == 12
    for s in data:
        assert s.ne_volume.shape == (3, 8, 8, 8) and s.ce_volume.shape == (1, 8, 8, 8)
        assert s.lesion_mask.shape == (8, 8, 8) and s.lesion_mask.sum() > 0
    x, y = stack(data, "all")
    assert x.shape == (12, 4, 8, 8, 8) and set(y.tolist()) <= {0, 1}


def test_generation_is_deterministic(tmp_path):
    a, b = tmp_path / "a.pdd", tmp_path / "b.pdd"
    write_dataset(generate_dataset(SMALL), a, SMALL)
    write_dataset(generate_dataset(SMALL), b, SMALL)
    assert a.read_bytes() == b.read_bytes()
    assert dataset_digest(a) == dataset_digest(b)
    other = DatasetSpec(n_samples=12, volume_extent=8, seed=4)
    write_dataset(generate_dataset(other), b, other)
    assert a.read_bytes() != b.read_bytes()


def test_class_balance_within_binomial_bounds():
    n = 200
    data = generate_dataset(DatasetSpec(n_samples=n, volume_extent=8, class_balance=0.7, seed=11))
    positives = sum(s.label for s in data)
    lo, hi = binom.ppf(0.005, n, 0.7), binom.ppf(0.995, n, 0.7)
    assert lo <= positives <= hi


def test_ce_oracle_beats_ne(default_data):
    labels = [s.label for s in default_data]
    ce = roc_auc(lesion_intensity_scores(default_data, "ce"), labels)
    ne = roc_auc(lesion_intensity_scores(default_data, "ne"), labels)
    assert ce - ne >= 0.05


def test_ce_oracle_monotone_in_signal_strength():
    aucs = []
    for strength in (1.0, 2.0, 4.0):
        data = generate_dataset(DatasetSpec(ce_signal_strength=strength, seed=5))
        aucs.append(roc_auc(lesion_intensity_scores(data, "ce"), [s.label for s in data]))
    assert aucs[0] <= aucs[1] <= aucs[2]


def test_spec_validation():
    with pytest.raises(ConfigError, match="ce_signal_strength > ne_signal_strength"):
        DatasetSpec(ce_signal_strength=0.5, ne_signal_strength=0.5).validate()
    DatasetSpec(ce_signal_strength=0.5, ne_signal_strength=0.5, privileged=False).validate()
    with pytest.raises(ConfigError, match=">= 8"):
        DatasetSpec(volume_extent=7).validate()
    with pytest.raises(ConfigError):
        DatasetSpec(class_balance=1.0).validate()
    with pytest.raises(ConfigError, match="unknown"):
        DatasetSpec.from_dict({"n_samples": 3, "bogus": 1})


def test_channel_selection():
    s = generate_dataset(SMALL)[0]
    np.testing.assert_array_equal(s.volume("all")[0], s.ce_volume[0])
    np.testing.assert_array_equal(s.volume("all")[1:], s.ne_volume)
    with pytest.raises(ConfigError):
        s.volume("t2")


# -- split ----------------------------------------------------------------------


def test_split_369():
    labels = [i % 2 for i in range(369)]
    train, test = split(fake(labels), 0.8, seed=0)
    assert (len(train), len(test)) == (295, 74)
    ids = [s.subject_id for s in train] + [s.subject_id for s in test]
    assert len(set(ids)) == 369


def test_split_sizes_remainder():
    assert split_sizes({0: 185, 1: 184}, 0.8) == {0: 148, 1: 147}
    # equal fractional parts: the lower class index takes the spare slot
    assert split_sizes({0: 5, 1: 5}, 0.5) == {0: 3, 1: 2}


def test_split_seed_behavior():
    data = fake([i % 3 == 0 for i in range(60)])
    a = [s.subject_id for s in split(data, 0.8, seed=1)[0]]
    b = [s.subject_id for s in split(data, 0.8, seed=1)[0]]
    c = [s.subject_id for s in split(data, 0.8, seed=2)[0]]
    assert a == b and a != c


def test_split_refuses_empty_stratum():
    with pytest.raises(StratificationError):
        split(fake([0] * 10 + [1]), 0.8)
    with pytest.raises(ConfigError):
        split(fake([0, 1] * 5), 1.0)


@settings(max_examples=80, deadline=None)
@given(st.integers(2, 40), st.integers(2, 40), st.floats(0.2, 0.9), st.integers(0, 1000))
def test_split_properties(n0, n1, frac, seed):
    data = fake([0] * n0 + [1] * n1)
    try:
        train, test = split(data, frac, seed)
    except StratificationError:
        return
    ids_train = {s.subject_id for s in train}
    ids_test = {s.subject_id for s in test}
    assert not ids_train & ids_test and len(ids_train | ids_test) == n0 + n1
    assert len(train) == int(np.floor((n0 + n1) * frac + 1e-9))
    for c, n in ((0, n0), (1, n1)):
        k = sum(s.label == c for s in train)
        assert abs(k - n * frac) <= 1
        assert 0 < k < n


# -- file format ----------------------------------------------------------------


def test_round_trip(tmp_path):
    data = generate_dataset(SMALL)
    path = tmp_path / "d.pdd"
    write_dataset(data, path, SMALL)
    back, spec = read_dataset(path)
    assert spec == SMALL
    for a, b in zip(data, back):
        assert a.subject_id == b.subject_id and a.label == b.label
        assert a.ne_volume.tobytes() == b.ne_volume.tobytes()
        assert a.ce_volume.tobytes() == b.ce_volume.tobytes()
        assert a.lesion_mask.tobytes() == b.lesion_mask.tobytes()


def test_header_count_mismatch(tmp_path):
    path = tmp_path / "d.pdd"
    write_dataset(generate_dataset(SMALL), path, SMALL)
    raw = path.read_bytes()[:-4]
    assert b'"n_samples": 12' in raw
    body = raw.replace(b'"n_samples": 12', b'"n_samples": 13', 1)
    path.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    with pytest.raises(CorruptFileError, match="declares 13"):
        read_dataset(path)


def test_damaged_and_foreign_files(tmp_path):
    path = tmp_path / "d.pdd"
    write_dataset(generate_dataset(SMALL), path, SMALL)
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CorruptFileError, match="checksum"):
        read_dataset(path)
    ckpt = tmp_path / "m.ckpt"
    save_checkpoint(TemplateModel.init(EncoderConfig(in_channels=1), 0), ckpt)
    with pytest.raises(MagicError):
        read_dataset(ckpt)
