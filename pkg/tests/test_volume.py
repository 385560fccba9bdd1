import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from davsr.errors import ContractViolation, DataError
from davsr.volume import (
    AXES,
    DegradeSpec,
    SliceStack,
    Volume,
    audit_access,
    bicubic_upsample_axis,
    combine_average,
    extract_slices,
    make_triplets,
    normalize,
    read_vol,
    reformat_volume,
    stack_from_slices,
    subsample_axis,
    write_vol,
)

import oracles
from conftest import random_volume

unit_floats = st.floats(0.0, 1.0, width=32, allow_nan=False)
volumes = st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6)).flatmap(
    lambda s: arrays(np.float32, s, elements=unit_floats)).map(Volume)


# -- slicing -----------------------------------------------------------------

def test_extract_constant_slabs():
    data = np.zeros((2, 2, 2), np.float32)
    data[1] = 1
    s = extract_slices(Volume(data), "x")
    assert len(s) == 2
    assert np.all(s[0] == 0) and np.all(s[1] == 1)


def test_slice_count_and_orientation(rng):
    v = random_volume(rng, (4, 5, 6))
    assert len(extract_slices(v, "z")) == 6
    assert extract_slices(v, "x")[2].shape == (5, 6)
    assert extract_slices(v, "y")[3].shape == (4, 6)
    assert extract_slices(v, "z")[1].shape == (4, 5)
    # direct index comparison
    for i in range(5):
        assert np.array_equal(extract_slices(v, "y")[i], v.data[:, i, :])


def test_unknown_axis():
    with pytest.raises(ContractViolation):
        extract_slices(Volume(np.zeros((2, 2, 2))), "w")


@pytest.mark.parametrize("axis", AXES)
def test_roundtrip_random_4x5x6(rng, axis):
    v = random_volume(rng, (4, 5, 6))
    assert reformat_volume(extract_slices(v, axis)).equals(v)


@settings(max_examples=100, deadline=None)
@given(volumes, st.sampled_from(AXES))
def test_roundtrip_property(v, axis):
    assert reformat_volume(extract_slices(v, axis)).equals(v)


def test_single_slice_stack():
    v = reformat_volume(stack_from_slices([np.ones((3, 4))], "z"))
    assert v.shape == (3, 4, 1)


def test_reformat_index_map_brute_force(rng):
    for axis in AXES:
        slices = rng.random((3, 3, 3), dtype=np.float32)
        v = reformat_volume(SliceStack(slices, axis))
        for i in range(3):
            for p in range(3):
                for q in range(3):
                    idx = {"x": (i, p, q), "y": (p, i, q), "z": (p, q, i)}[axis]
                    assert v.data[idx] == slices[i, p, q]


def test_ragged_stack_rejected():
    with pytest.raises(ContractViolation):
        stack_from_slices([np.zeros((2, 2)), np.zeros((2, 3))], "z")
    with pytest.raises(ContractViolation):
        reformat_volume(SliceStack([np.zeros((2, 2)), np.zeros((3, 2))], "x"))


# -- subsampling ---------------------------------------------------------------

def test_subsample_keeps_index0_multiples():
    data = np.zeros((1, 1, 8), np.float32)
    data[0, 0] = np.arange(8) / 8
    out = subsample_axis(Volume(data), "z", 4)
    assert out.shape == (1, 1, 2)
    assert np.array_equal(out.data[0, 0], data[0, 0, [0, 4]])


def test_subsample_ramp():
    data = np.broadcast_to((np.arange(9) / 8).astype(np.float32), (2, 2, 9)).copy()
    out = subsample_axis(Volume(data), "z", 2)
    assert np.array_equal(out.data[0, 0], np.array([0, 2 / 8, 4 / 8, 6 / 8, 1], np.float32))


def test_subsample_constant_and_extent(rng):
    v = Volume(np.full((3, 3, 10), 0.25, np.float32))
    out = subsample_axis(v, "z", 4)
    assert out.shape[2] == DegradeSpec(4).degraded_extent(10) == 3
    assert np.all(out.data == 0.25)
    assert subsample_axis(v, "z", 20).shape == (3, 3, 1)
    with pytest.raises(ContractViolation):
        subsample_axis(v, "z", 1)


@settings(max_examples=30, deadline=None)
@given(volumes, st.integers(2, 4), st.integers(2, 4))
def test_subsample_commutes_across_axes(v, r1, r2):
    a = subsample_axis(subsample_axis(v, "x", r1), "z", r2)
    b = subsample_axis(subsample_axis(v, "z", r2), "x", r1)
    assert a.equals(b)


def test_degrade_spec_defaults():
    spec = DegradeSpec(4)
    assert spec.r_inplane == 4
    with pytest.raises(ContractViolation):
        DegradeSpec(1)
    with pytest.raises(ContractViolation):
        DegradeSpec(4, convention="average")


# -- combination and triplets --------------------------------------------------------

def test_combine_average(rng):
    a, b = random_volume(rng, (3, 4, 5)), random_volume(rng, (3, 4, 5))
    assert combine_average(a, a).equals(a)
    ones = Volume(np.ones((2, 2, 2)))
    zeros = Volume(np.zeros((2, 2, 2)))
    assert np.all(combine_average(ones, zeros).data == 0.5)
    expected = np.array([[[(x + y) / 2 for x, y in zip(r1, r2)] for r1, r2 in zip(p1, p2)]
                         for p1, p2 in zip(a.data.astype(np.float64), b.data.astype(np.float64))])
    assert np.array_equal(combine_average(a, b).data, expected.astype(np.float32))
    assert combine_average(a, b).equals(combine_average(b, a))
    with pytest.raises(ContractViolation):
        combine_average(a, Volume(np.zeros((3, 4, 6))))


def test_triplets_boundaries(rng):
    one = make_triplets(np.ones((1, 2, 2)))
    assert one.shape == (1, 3, 2, 2) and np.all(one == 1)
    s = rng.random((5, 2, 3), dtype=np.float32)
    t = make_triplets(s)
    assert t.shape == (5, 3, 2, 3)
    assert np.array_equal(t[0], np.stack([s[0], s[0], s[1]]))
    assert np.array_equal(t[2], np.stack([s[1], s[2], s[3]]))
    assert np.array_equal(t[4], np.stack([s[3], s[4], s[4]]))
    assert np.array_equal(t[:, 1], s)
    three = make_triplets(s[:3])
    assert np.array_equal(three[1], s[:3])


# -- bicubic ---------------------------------------------------------------------

def test_bicubic_constant():
    v = Volume(np.full((3, 3, 5), 0.37, np.float32))
    out = bicubic_upsample_axis(v, "z", 4)
    assert out.shape == (3, 3, 20)
    assert np.max(np.abs(out.data - np.float32(0.37))) <= 1e-7


def test_bicubic_reproduces_ramp_at_samples():
    ramp = (np.arange(6) / 10 + 0.2).astype(np.float32)
    v = Volume(np.broadcast_to(ramp, (2, 2, 6)).copy())
    out = bicubic_upsample_axis(v, "z", 2)
    assert np.allclose(out.data[0, 0, ::2], ramp, atol=1e-7)
    # interior half-sample positions lie on the line as well
    assert np.allclose(out.data[0, 0, 3:9:2], (ramp[1:4] + ramp[2:5]) / 2, atol=1e-6)


def test_bicubic_matches_direct_convolution(rng):
    for _ in range(10):
        sig = 0.3 + 0.4 * rng.random(9)
        v = Volume(sig.reshape(1, 1, -1).astype(np.float32))
        out = bicubic_upsample_axis(v, "z", 4).data[0, 0]
        ref = oracles.cubic_upsample_1d(v.data[0, 0], 4)
        assert np.max(np.abs(out - ref)) < 1e-6


def test_bicubic_impulse_values():
    # values from the direct-convolution oracle, frozen: W(0.5)=0.5625, W(1.5)=-0.0625 (clipped)
    v = Volume(np.array([0, 1, 0, 0], np.float32).reshape(1, 1, 4))
    out = bicubic_upsample_axis(v, "z", 2).data[0, 0]
    assert np.allclose(out, [0, 0.5625, 1, 0.5625, 0, 0, 0, 0], atol=1e-7)
    assert np.allclose(oracles.cubic_upsample_1d([0, 1, 0, 0], 2), out, atol=1e-7)


def test_bicubic_along_other_axes(rng):
    v = random_volume(rng, (4, 3, 2))
    out = bicubic_upsample_axis(v, "x", 2)
    assert out.shape == (8, 3, 2)
    ref = oracles.cubic_upsample_1d(v.data[:, 1, 0], 2)
    assert np.allclose(out.data[:, 1, 0], ref, atol=1e-6)


def test_normalize_window():
    out = normalize(np.array([-1000.0, 0.0, 500.0, 2000.0]), (-1000, 1000))
    assert np.allclose(out, [0, 0.5, 0.75, 1.0])
    with pytest.raises(ContractViolation):
        normalize(np.zeros(3), (1, 1))


# -- .vol format and access audit -----------------------------------------------------

def test_vol_roundtrip(tmp_path, rng):
    v = Volume(rng.random((3, 4, 5), dtype=np.float32), spacing=(0.5, 0.5, 2.0), value_range=(-1000, 1000))
    write_vol(v, tmp_path / "a.vol")
    back = read_vol(tmp_path / "a.vol")
    assert back.equals(v) and back.spacing == v.spacing and back.value_range == v.value_range
    raw = (tmp_path / "a.vol").read_bytes()
    header, body = raw.split(b"\n", 1)
    assert json.loads(header) == {"shape": [3, 4, 5], "spacing": [0.5, 0.5, 2.0], "dtype": "f32le",
                                  "value_range": [-1000.0, 1000.0]}
    # x-major, then y, then z
    assert np.frombuffer(body, "<f4")[1] == v.data[0, 0, 1]
    assert np.frombuffer(body, "<f4")[5] == v.data[0, 1, 0]


def test_vol_corrupt(tmp_path, rng):
    write_vol(random_volume(rng, (2, 2, 2)), tmp_path / "a.vol")
    raw = (tmp_path / "a.vol").read_bytes()
    (tmp_path / "short.vol").write_bytes(raw[:-3])
    (tmp_path / "nohdr.vol").write_bytes(b"garbage")
    (tmp_path / "badjson.vol").write_bytes(b"{not json\n" + raw.split(b"\n", 1)[1])
    for name in ("short", "nohdr", "badjson", "missing"):
        with pytest.raises(DataError):
            read_vol(tmp_path / f"{name}.vol")


def test_access_audit_counts_roles(tmp_path, rng):
    write_vol(random_volume(rng, (2, 2, 2)), tmp_path / "a.vol")
    read_vol(tmp_path / "a.vol", role="hr")  # outside any audit: not recorded
    with audit_access() as audit:
        read_vol(tmp_path / "a.vol")
        read_vol(tmp_path / "a.vol", role="hr")
    assert audit.hr_reads == 1
    assert [r for r, _ in audit.records] == ["lr", "hr"]


def test_volume_invariants():
    with pytest.raises(ContractViolation):
        Volume(np.zeros((2, 2)))
    with pytest.raises(ContractViolation):
        Volume(np.zeros((2, 0, 2)))
    with pytest.raises(ContractViolation):
        Volume(np.full((2, 2, 2), 1.5))
    with pytest.raises(ContractViolation):
        Volume(np.full((2, 2, 2), np.nan))
