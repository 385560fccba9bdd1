import numpy as np
import pytest

from davsr.data import (
    EvalVolume,
    IntensityStats,
    PhantomSpec,
    generate_phantom,
    make_in_plane_pairs,
    make_refine_pairs,
    make_through_plane_pairs,
    sample_patches,
)
from davsr.errors import ContractViolation
from davsr.volume import DegradeSpec, Volume, audit_access, extract_slices, subsample_axis

import oracles
from conftest import random_volume


def ramp_volume(shape):
    x, y, z = np.meshgrid(*[np.arange(n) for n in shape], indexing="ij")
    return Volume(((x * 100 + y * 10 + z) / 1000).astype(np.float32))


# -- through-plane pairs -----------------------------------------------------------------

def test_through_plane_counts_and_shapes():
    pairs = make_through_plane_pairs(Volume(np.zeros((8, 8, 8))), DegradeSpec(4))
    assert len(pairs) == 16
    assert [p.meta["axis"] for p in pairs] == ["x"] * 8 + ["y"] * 8
    for p in pairs:
        assert p.lr_input.shape == (3, 8, 2)
        assert p.hr_target.shape == (8, 8)
        assert p.scale == 4 and p.task == "through_plane"


def test_through_plane_constant_targets():
    pairs = make_through_plane_pairs(Volume(np.full((6, 5, 8), 0.3)), DegradeSpec(2))
    assert len(pairs) == 6 + 5
    assert all(np.all(p.hr_target == np.float32(0.3)) for p in pairs)


def test_through_plane_ramp_oracle():
    v = ramp_volume((5, 6, 8))
    pairs = make_through_plane_pairs(v, DegradeSpec(4))
    for p in pairs:
        i = p.meta["index"]
        if p.meta["axis"] == "x":
            assert np.array_equal(p.hr_target, v.data[i, :, :])
            assert np.array_equal(p.lr_input[1], v.data[i, :, ::4])
        else:
            assert np.array_equal(p.hr_target, v.data[:, i, :])
            assert np.array_equal(p.lr_input[1], v.data[:, i, ::4])
    assert np.array_equal(pairs[0].hr_target, extract_slices(v, "x")[0])


def test_through_plane_too_thin():
    with pytest.raises(ContractViolation):
        make_through_plane_pairs(Volume(np.zeros((4, 4, 3))), DegradeSpec(4))


# -- in-plane pairs ----------------------------------------------------------------------

def test_in_plane_shapes():
    v_lr = ramp_volume((8, 8, 3))
    pairs = make_in_plane_pairs(v_lr, DegradeSpec(4, r_inplane=2))
    assert len(pairs) == 2 * 3
    y_branch = [p for p in pairs if p.meta["branch"] == "y"]
    x_branch = [p for p in pairs if p.meta["branch"] == "x"]
    for p in y_branch:
        assert p.lr_input.shape == (3, 8, 4) and p.hr_target.shape == (8, 8)
        k = p.meta["index"]
        assert np.array_equal(p.hr_target, v_lr.data[:, :, k])
        assert np.array_equal(p.lr_input[1], v_lr.data[:, ::2, k])
    for p in x_branch:
        assert p.lr_input.shape == (3, 8, 4) and p.hr_target.shape == (8, 8)
        k = p.meta["index"]
        assert np.array_equal(p.hr_target, v_lr.data[:, :, k].T)
        assert np.array_equal(p.lr_input[1], v_lr.data[::2, :, k].T)


def test_in_plane_constant_and_count(rng):
    pairs = make_in_plane_pairs(Volume(np.full((4, 4, 5), 0.7)), DegradeSpec(2))
    assert len(pairs) == 10
    assert all(np.all(p.lr_input == np.float32(0.7)) for p in pairs)
    v = random_volume(rng, (8, 12, 7))
    assert len(make_in_plane_pairs(v, DegradeSpec(4))) == 2 * 7


def test_in_plane_uses_only_sparse_volume():
    dense = ramp_volume((8, 8, 8))
    sparse = subsample_axis(dense, "z", 4)
    pairs = make_in_plane_pairs(sparse, DegradeSpec(4))
    targets = {p.hr_target.tobytes() for p in pairs if p.meta["branch"] == "y"}
    assert targets == {dense.data[:, :, z].tobytes() for z in (0, 4)}


# -- refine pairs -----------------------------------------------------------------------------

def test_refine_pairs(rng):
    v = random_volume(rng, (5, 6, 7))
    pairs = make_refine_pairs(v, v)
    assert len(pairs) == 7
    assert all(np.array_equal(p.lr_input[1], p.hr_target) for p in pairs)
    gt = random_volume(rng, (5, 6, 7))
    pairs = make_refine_pairs(v, gt)
    assert np.array_equal(pairs[3].hr_target, gt.data[:, :, 3])
    assert np.array_equal(pairs[3].lr_input, np.stack([v.data[:, :, k] for k in (2, 3, 4)]))
    assert pairs[3].scale == 1
    with pytest.raises(ContractViolation):
        make_refine_pairs(v, random_volume(rng, (5, 6, 8)))


# -- patches -------------------------------------------------------------------------------

def test_sample_patches(rng):
    pairs = make_through_plane_pairs(random_volume(rng, (10, 12, 16)), DegradeSpec(4))
    assert sample_patches(pairs, (4, 2), 0, seed=0) == []
    a = sample_patches(pairs, (4, 2), 20, seed=3)
    b = sample_patches(pairs, (4, 2), 20, seed=3)
    assert all(np.array_equal(p.lr_input, q.lr_input) and np.array_equal(p.hr_target, q.hr_target)
               for p, q in zip(a, b))
    for p in a:
        assert p.lr_input.shape == (3, 4, 2) and p.hr_target.shape == (4, 8)
        i, j = p.meta["crop"]
        src = next(q for q in pairs if q.meta["axis"] == p.meta["axis"] and q.meta["index"] == p.meta["index"])
        # every input column c maps to target column r * c inside the crop
        for c in range(2):
            col = j + c
            assert np.array_equal(p.lr_input[1][:, c], src.hr_target[i:i + 4, 4 * col])
            assert 4 * j <= 4 * col < 4 * j + 8
    with pytest.raises(ContractViolation):
        sample_patches(pairs, (20, 2), 1, seed=0)


# -- phantoms ------------------------------------------------------------------------------

def test_phantom_determinism_and_range():
    spec = PhantomSpec(shape=(16, 16, 16), structure_seed=5, shift_level=0.4)
    a, b = generate_phantom(spec), generate_phantom(spec)
    assert a.equals(b)
    assert a.data.min() >= 0 and a.data.max() <= 1
    assert not a.equals(generate_phantom(PhantomSpec(shape=(16, 16, 16), structure_seed=6, shift_level=0.4)))
    assert PhantomSpec.from_dict(spec.to_dict()) == spec


def test_phantom_shift_monotone_histogram_distance():
    shape = (32, 32, 32)
    ref = np.concatenate([generate_phantom(PhantomSpec(shape=shape, structure_seed=1000 + s)).data.ravel()
                          for s in range(5)])
    levels = (0.0, 0.5, 1.0)
    means = []
    for level in levels:
        d = [oracles.histogram_distance(generate_phantom(PhantomSpec(shape=shape, structure_seed=s,
                                                                     shift_level=level)).data, ref)
             for s in range(20)]
        means.append(np.mean(d))
    assert means[0] < means[1] < means[2]


def test_phantom_intensity_stats_respected():
    dark = generate_phantom(PhantomSpec(shape=(16, 16, 16), intensity_stats=IntensityStats(mean=0.2)))
    bright = generate_phantom(PhantomSpec(shape=(16, 16, 16), intensity_stats=IntensityStats(mean=0.6)))
    assert bright.data.mean() > dark.data.mean()


def test_eval_volume_audits_ground_truth():
    v = Volume(np.zeros((2, 2, 2)))
    case = EvalVolume("c0", v, lambda: v)
    with audit_access() as audit:
        _ = case.lr
        assert audit.hr_reads == 0
        _ = case.hr
    assert audit.hr_reads == 1
