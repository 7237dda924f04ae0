import shutil

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fwibench.dataset import (CorruptionError, DatasetManifest, Normalization, build_dataset,
                              build_sample, default_acquisition, load_batch, load_manifest,
                              load_split, simulate_gather)
from fwibench.gan import GanHyper
from fwibench.velmodel import GenConfig, gen_model
from fwibench.wavesim import VelocityModel, simulate_shot

NORM = Normalization(1.0, 1.0, 1500.0, 4500.0)


def test_label_endpoints_and_midpoint():
    assert np.all(NORM.label(np.full((4, 4), 1500.0)) == -1.0)
    assert np.all(NORM.label(np.full((4, 4), 4500.0)) == 1.0)
    assert np.all(NORM.label(np.full((4, 4), 3000.0)) == 0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000))
def test_label_round_trip(index):
    v = gen_model(GenConfig.st(), index)[0].v
    assert np.abs(NORM.velocity(NORM.label(v)) - v).max() <= 1e-6
    # through float32 storage the error stays at f32 resolution of the label
    back = NORM.velocity(NORM.label(v).astype(np.float32))
    assert np.abs(back - v).max() <= 1500.0 * 2 ** -23 * 2


def test_manifest_counts_and_splits(tiny_dataset):
    m = tiny_dataset
    assert (m.n_train, m.n_val, m.n_test, m.n_total) == (6, 2, 2, 10)
    sets = [set(m.splits[k]) for k in ("train", "val", "test")]
    assert set().union(*sets) == set(range(10))
    assert sum(len(s) for s in sets) == 10
    assert len(m.shards) == 3


def test_manifest_text_round_trip(tiny_dataset):
    again = DatasetManifest.from_text(tiny_dataset.to_text(), root=tiny_dataset.root)
    assert again.to_text() == tiny_dataset.to_text()
    assert load_manifest(tiny_dataset.root).to_text() == tiny_dataset.to_text()


def test_same_seed_reproduces_shards(tiny_dataset, tmp_path):
    again = build_dataset(GenConfig.st(rng_seed=1), 10, (6, 2, 2), tmp_path, shard_size=4)
    assert again.to_text() == tiny_dataset.to_text()
    for sh in tiny_dataset.shards:
        assert (tmp_path / sh["path"]).read_bytes() == (tiny_dataset.root / sh["path"]).read_bytes()


def test_stored_samples_match_rebuilt_samples(tiny_dataset):
    m = tiny_dataset
    pos = 1
    stored = load_batch(m, "val", [pos])[0]
    model = gen_model(m.gen_config, stored.index)[0]
    fresh = build_sample(model, m.acquisition, m.wavelet(), m.normalization, m.family, stored.index)
    assert np.array_equal(stored.seismic, fresh.seismic)
    assert np.array_equal(stored.label, fresh.label)


def test_samples_in_unit_range(tiny_dataset):
    x, y = load_split(tiny_dataset, "train")
    assert x.shape == (6, 6, 1000, 32) and y.shape == (6, 1, 100, 100)
    assert np.abs(x).max() <= 1.0 and np.abs(y).max() <= 1.0


def test_channel_layout_is_shot_major(tiny_dataset):
    m = tiny_dataset
    s = load_batch(m, "train", [0])[0]
    model = gen_model(m.gen_config, s.index)[0]
    rec = simulate_shot(model, m.acquisition, 2, m.wavelet())
    p = np.clip(rec.pressure / m.normalization.p_scale, -1, 1).astype(np.float32)
    vz = np.clip(rec.vz / m.normalization.vz_scale, -1, 1).astype(np.float32)
    assert np.array_equal(s.seismic[:, :, 4], p)
    assert np.array_equal(s.seismic[:, :, 5], vz)


def test_out_of_range_position_fails_whole_batch(tiny_dataset):
    with pytest.raises(IndexError):
        load_batch(tiny_dataset, "test", [0, 2])


def test_checksum_mismatch_detected(tiny_dataset, tmp_path):
    root = tmp_path / "copy"
    shutil.copytree(tiny_dataset.root, root)
    path = root / tiny_dataset.shards[0]["path"]
    raw = bytearray(path.read_bytes())
    raw[1000] ^= 0xFF
    path.write_bytes(bytes(raw))
    m = load_manifest(root)
    positions = [m.splits["train"].index(i) for i in m.shards[0]["indices"] if i in m.splits["train"]]
    with pytest.raises(CorruptionError):
        load_batch(m, "train", positions[:1])


def test_constant_models_give_constant_labels():
    grid_model = VelocityModel.constant(100, 100, 1500.0)
    acq = default_acquisition(grid_model.grid)
    from fwibench.dataset import default_wavelet
    raw = simulate_gather(grid_model, acq, default_wavelet())
    norm = Normalization(float(np.abs(raw[..., 0::2]).max()), float(np.abs(raw[..., 1::2]).max()), 1500.0, 4500.0)
    s = build_sample(grid_model, acq, default_wavelet(), norm)
    assert np.all(s.label == -1.0)
    assert s.seismic.shape == (32, 1000, 6)
    assert np.abs(s.seismic).max() == pytest.approx(1.0)


def test_bad_splits_rejected(tmp_path):
    with pytest.raises(ValueError):
        build_dataset(GenConfig.st(), 5, (3, 1, 2), tmp_path)


def test_default_batch_is_fifty():
    assert GanHyper().batch == 50
