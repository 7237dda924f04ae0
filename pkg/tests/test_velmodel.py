import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fwibench.velmodel import (FaultSpec, GenConfig, GenerationError, LayerSpec, gen_model,
                               layer_index_map, vertical_profile)
from fwibench.wavesim import Grid2D, VelocityModel


def test_single_layer_without_fault_is_constant():
    cfg = GenConfig(n_layers_range=(1, 1), fault_probability=0.0)
    model, layers, fault = gen_model(cfg, 0)
    assert fault is None
    assert np.all(model.v == model.v[0, 0])
    assert len(layers.velocities) == 1


def test_same_index_same_model():
    for cfg in (GenConfig.st(rng_seed=4), GenConfig.curved(rng_seed=4)):
        a, b = gen_model(cfg, 17)[0], gen_model(cfg, 17)[0]
        assert np.array_equal(a.v, b.v)
        assert not np.array_equal(a.v, gen_model(cfg, 18)[0].v)


def test_flat_layers_give_identical_columns():
    cfg = GenConfig(n_layers_range=(3, 3), dip_range=(0.0, 0.0), fault_probability=0.0)
    v = gen_model(cfg, 2)[0].v
    assert np.all(v == v[:, :1])
    assert len(np.unique(v)) == 3


def test_family_shapes():
    assert gen_model(GenConfig.st(), 0)[0].v.shape == (100, 100)
    assert gen_model(GenConfig.curved(), 0)[0].v.shape == (150, 100)
    assert GenConfig.for_family("curved").family == "Curved"
    with pytest.raises(GenerationError):
        GenConfig(family="ST", nz=150, nx=100)


def test_impossible_configuration_rejected():
    cfg = GenConfig(n_layers_range=(4, 4), thickness_range=(30.0, 40.0))
    with pytest.raises(GenerationError):
        gen_model(cfg, 0)
    with pytest.raises(GenerationError):
        GenConfig(dip_range=(0.2, -0.2))


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(["st", "curved"]), st.integers(0, 10_000), st.integers(0, 3))
def test_values_in_range_and_layers_ordered(family, index, seed):
    cfg = GenConfig.for_family(family, rng_seed=seed)
    model, layers, _ = gen_model(cfg, index)
    assert model.v.min() >= cfg.v_min and model.v.max() <= cfg.v_max
    # velocities are sorted with depth, so ordered layers mean monotone columns
    assert np.all(np.diff(model.v, axis=0) >= 0)
    assert list(layers.velocities) == sorted(layers.velocities)
    rows = layers.interface_rows(cfg.nx)
    assert np.all(np.diff(rows, axis=0) > 0)


def test_fault_probability_extremes():
    never = GenConfig(fault_probability=0.0)
    always = GenConfig(fault_probability=1.0)
    assert all(gen_model(never, i)[2] is None for i in range(20))
    faults = [gen_model(always, i)[2] for i in range(20)]
    assert all(f is not None and 3 <= f.throw <= 10 for f in faults)


def test_vertical_profile_of_flat_two_layers():
    v = np.full((100, 100), 2000.0)
    v[50:] = 3000.0
    prof = vertical_profile(VelocityModel(Grid2D(100, 100), v), 10)
    assert np.all(prof[:50] == 2000.0) and np.all(prof[50:] == 3000.0)
    assert np.all(vertical_profile(VelocityModel.constant(20, 20, 1800.0), 3) == 1800.0)
    with pytest.raises(ValueError):
        vertical_profile(VelocityModel.constant(20, 20, 1800.0), 20)


def test_fault_shifts_profile_by_throw():
    layers = LayerSpec((30.0, 60.0), (0.0, 0.0), (1500.0, 2500.0, 3500.0))
    fault = FaultSpec(x_position=50, dip=0.0, throw=7, extent=(0, 100))
    ids = layer_index_map(layers, 100, 100, fault)
    v = np.asarray(layers.velocities)[ids]
    model = VelocityModel(Grid2D(100, 100), v)
    left, right = vertical_profile(model, 20), vertical_profile(model, 80)
    assert np.array_equal(right[7:], left[:-7])
    assert np.flatnonzero(np.diff(left)).tolist() == [29, 59]
    assert np.flatnonzero(np.diff(right)).tolist() == [36, 66]
