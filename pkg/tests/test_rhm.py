"""Matching kernel: similarity algebra, offset binning, voting, determinism."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hyperflow.feature_io import synth_stack
from hyperflow.hyperimage import LayerSet, assemble
from hyperflow.rhm import (
    ConfidenceTensor,
    RhmConfig,
    appearance_similarity,
    apply_hough_weighting,
    hough_histogram,
    match,
    match_nn_only,
    offset_bin,
)

from conftest import geom, layer, ramp, stack
from oracles import max_rel_err, rhm_reference


def hyper(seed, h, w, d, image_dims=(64, 64), g=None):
    g = g or geom(stride=4.0, offset=2.0, rf=16.0)
    s = synth_stack(seed, ((0, d, h, w, g),), image_dims)
    return assemble(s, LayerSet(base=0))


# ------------------------------------------------------------ configuration


def test_config_defaults():
    cfg = RhmConfig()
    assert cfg.exponent == 3
    assert (cfg.bins_y, cfg.bins_x) == (10, 10)
    assert cfg.fixed_range is None


@pytest.mark.parametrize(
    "kw",
    [
        {"exponent": 0},
        {"exponent": 2.5},
        {"bins_y": 0},
        {"bins_x": -1},
        {"fixed_range": 0.0},
        {"fixed_range": float("nan")},
    ],
)
def test_config_rejects_bad_values(kw):
    with pytest.raises(ValueError):
        RhmConfig(**kw)


# ------------------------------------------------------- scalar similarity


def test_similarity_identical_vectors():
    f = np.array([3.0, 4.0])
    assert appearance_similarity(f, f, 1) == pytest.approx(1.0, abs=1e-15)
    assert appearance_similarity(f, 2.0 * f, 3) == pytest.approx(1.0, abs=1e-15)


def test_similarity_orthogonal_and_opposed():
    a = np.array([1.0, 0.0])
    b = np.array([0.0, 1.0])
    assert appearance_similarity(a, b) == 0.0
    assert appearance_similarity(a, -a) == 0.0  # negative cosine clamps to 0


def test_similarity_zero_vector():
    assert appearance_similarity(np.zeros(4), np.ones(4)) == 0.0


def test_similarity_known_angle():
    a = np.array([1.0, 0.0])
    b = np.array([1.0, 1.0])  # cosine 1/sqrt(2)
    c = 1.0 / np.sqrt(2.0)
    assert appearance_similarity(a, b, 1) == pytest.approx(c, rel=1e-15)
    assert appearance_similarity(a, b, 3) == pytest.approx(c**3, rel=1e-15)


def test_similarity_length_mismatch():
    with pytest.raises(ValueError):
        appearance_similarity(np.ones(3), np.ones(4))


@settings(max_examples=200, deadline=None)
@given(
    data=st.lists(
        st.floats(min_value=-100.0, max_value=100.0), min_size=8, max_size=8
    ),
    data2=st.lists(
        st.floats(min_value=-100.0, max_value=100.0), min_size=8, max_size=8
    ),
    scale=st.floats(min_value=1e-3, max_value=1e3),
    d=st.integers(min_value=1, max_value=5),
)
def test_similarity_properties(data, data2, scale, d):
    f = np.array(data)
    g = np.array(data2)
    s = appearance_similarity(f, g, d)
    assert 0.0 <= s <= 1.0
    assert appearance_similarity(g, f, d) == s
    assert abs(appearance_similarity(scale * f, g, d) - s) <= 1e-12
    s1 = appearance_similarity(f, g, 1)
    assert abs(s - s1**d) <= 1e-12


# ------------------------------------------------------------ offset binning


def test_offset_bin_zero_offset_center():
    cfg = RhmConfig()
    assert offset_bin((50.0, 50.0), (50.0, 50.0), cfg, (100, 100)) == (5, 5)


def test_offset_bin_known_offsets():
    cfg = RhmConfig()
    # o_norm = (0.5, 0.25) -> floor(1.5/2*10), floor(1.25/2*10)
    assert offset_bin((0.0, 0.0), (50.0, 25.0), cfg, (100, 100)) == (7, 6)
    # negative offsets land below center
    assert offset_bin((50.0, 25.0), (0.0, 0.0), cfg, (100, 100)) == (2, 3)


def test_offset_bin_clamps_to_range():
    cfg = RhmConfig(fixed_range=10.0)
    assert offset_bin((0.0, 0.0), (500.0, -500.0), cfg, (100, 100)) == (9, 0)


def test_offset_bin_fixed_range_rescales():
    cfg_img = RhmConfig()
    cfg_fixed = RhmConfig(fixed_range=20.0)
    src, tgt = (0.0, 0.0), (10.0, 0.0)
    assert offset_bin(src, tgt, cfg_img, (100, 100)) == (5, 5)
    assert offset_bin(src, tgt, cfg_fixed, (100, 100)) == (7, 5)


# ------------------------------------------------------------------- kernel


def test_match_rejects_dim_mismatch():
    a = hyper(0, 3, 3, 8)
    b = hyper(1, 3, 3, 9)
    with pytest.raises(ValueError, match="dimension mismatch"):
        match(a, b)


def test_single_cell_confidence_is_similarity_squared():
    g = geom(stride=4.0, offset=2.0, rf=8.0)
    a = assemble(stack([layer(0, np.array([[[1.0]], [[0.0]]], np.float32), g)],
                       image_dims=(8, 8)), LayerSet(base=0))
    b = assemble(stack([layer(0, np.array([[[1.0]], [[1.0]]], np.float32), g)],
                       image_dims=(8, 8)), LayerSet(base=0))
    cfg = RhmConfig(exponent=1)
    s = 1.0 / np.sqrt(2.0)
    got = match(a, b, cfg).values[0, 0]
    assert got == pytest.approx(s * s, rel=1e-12)
    assert match_nn_only(a, b, cfg).values[0, 0] == pytest.approx(s, rel=1e-12)


def test_orthogonal_features_give_zero_everywhere():
    g = geom(stride=4.0, offset=2.0, rf=8.0)
    va = np.zeros((2, 1, 2), np.float32)
    va[0, 0, :] = 1.0  # both cells along channel 0
    vb = np.zeros((2, 1, 2), np.float32)
    vb[1, 0, :] = 1.0  # both cells along channel 1
    a = assemble(stack([layer(0, va, g)], image_dims=(8, 12)), LayerSet(base=0))
    b = assemble(stack([layer(0, vb, g)], image_dims=(8, 12)), LayerSet(base=0))
    assert np.all(match(a, b).values == 0.0)
    assert np.all(hough_histogram(a, b).votes == 0.0)


def test_match_agrees_with_reference():
    cfg = RhmConfig()
    for seed, (hs, ws, ht, wt, d) in enumerate(
        [(5, 6, 5, 6, 8), (4, 4, 6, 7, 16), (1, 7, 3, 1, 4), (8, 8, 8, 8, 32)]
    ):
        a = hyper(2 * seed, hs, ws, d, image_dims=(40, 40))
        b = hyper(2 * seed + 1, ht, wt, d, image_dims=(40, 40))
        got = match(a, b, cfg).values
        ref, _ = rhm_reference(a, b, cfg)
        assert max_rel_err(got, ref) <= 1e-6


def test_nn_only_in_unit_range():
    cfg = RhmConfig(exponent=2)
    a = hyper(10, 5, 5, 12, image_dims=(40, 40))
    b = hyper(11, 4, 6, 12, image_dims=(40, 40))
    ref_conf, _ = rhm_reference(a, b, cfg)
    nn = match_nn_only(a, b, cfg).values
    assert nn.shape == ref_conf.shape
    assert np.all(nn >= 0.0) and np.all(nn <= 1.0)
    assert max_rel_err(match(a, b, cfg).values, ref_conf) <= 1e-6


def test_exponent_cubes_confidences_elementwise():
    a = hyper(3, 4, 5, 16)
    b = hyper(4, 5, 4, 16)
    n1 = match_nn_only(a, b, RhmConfig(exponent=1)).values
    n3 = match_nn_only(a, b, RhmConfig(exponent=3)).values
    assert np.allclose(n3, n1**3, rtol=1e-12, atol=1e-300)


def test_match_scale_invariant_in_features():
    g = geom(stride=4.0, offset=2.0, rf=16.0)
    base = synth_stack(6, ((0, 8, 5, 5, g),), (40, 40))
    doubled = stack(
        [layer(0, 2.0 * base.layer(0).values, g)], image_dims=(40, 40)
    )
    a = assemble(base, LayerSet(base=0))
    a2 = assemble(doubled, LayerSet(base=0))
    b = hyper(7, 5, 5, 8, image_dims=(40, 40))
    assert np.array_equal(match(a, b).values, match(a2, b).values)


def test_vote_mass_equals_total_appearance():
    a = hyper(12, 6, 7, 8, image_dims=(48, 48))
    b = hyper(13, 7, 6, 8, image_dims=(48, 48))
    cfg = RhmConfig()
    votes = hough_histogram(a, b, cfg).votes
    assert votes.shape == (10, 10)
    total_sims = match_nn_only(a, b, cfg).values.sum()
    assert votes.sum() == pytest.approx(total_sims, rel=1e-12)


def test_match_equals_reference_weighting_core():
    # the production kernel and the three-line algebraic core must agree
    # exactly: same sims, same bins, same merge order
    cfg = RhmConfig()
    a = hyper(20, 6, 5, 8, image_dims=(40, 40))
    b = hyper(21, 5, 6, 8, image_dims=(40, 40))
    sims = match_nn_only(a, b, cfg).values
    ays, axs = a.cell_coords()
    bys, bxs = b.cell_coords()
    bins = np.empty(sims.shape, np.int64)
    for q in range(sims.shape[0]):
        i, j = divmod(q, a.grid_width)
        for t in range(sims.shape[1]):
            ip, jp = divmod(t, b.grid_width)
            by, bx = offset_bin((ays[i], axs[j]), (bys[ip], bxs[jp]), cfg, b.image_dims)
            bins[q, t] = by * cfg.bins_x + bx
    expected = apply_hough_weighting(sims, bins, cfg.bins_y * cfg.bins_x)
    assert np.array_equal(match(a, b, cfg).values, expected)


def test_increasing_one_similarity_never_lowers_its_confidence():
    rng = np.random.default_rng(0)
    for _ in range(50):
        sims = rng.uniform(0.0, 1.0, size=(12, 15))
        bins = rng.integers(0, 9, size=sims.shape)
        base = apply_hough_weighting(sims, bins, 9)
        q, t = int(rng.integers(12)), int(rng.integers(15))
        bumped = sims.copy()
        bumped[q, t] += rng.uniform(0.01, 0.5)
        after = apply_hough_weighting(bumped, bins, 9)
        assert after[q, t] > base[q, t]


def test_threads_do_not_change_results():
    a = hyper(30, 24, 25, 16, image_dims=(128, 128))
    b = hyper(31, 25, 24, 16, image_dims=(128, 128))
    cfg = RhmConfig()
    one = match(a, b, cfg, threads=1).values
    four = match(a, b, cfg, threads=4).values
    assert np.array_equal(one, four)
    h1 = hough_histogram(a, b, cfg, threads=1).votes
    h4 = hough_histogram(a, b, cfg, threads=4).votes
    assert np.array_equal(h1, h4)


def test_confidence_tensor_validation():
    with pytest.raises(ValueError):
        ConfidenceTensor(np.zeros((4, 4)), src_grid=(2, 3), tgt_grid=(2, 2))
    with pytest.raises(ValueError):
        ConfidenceTensor(np.zeros((4, 4), np.float32), src_grid=(2, 2), tgt_grid=(2, 2))
    ct = ConfidenceTensor(np.zeros((4, 6)), src_grid=(2, 2), tgt_grid=(2, 3))
    with pytest.raises(ValueError):
        ct.values[0, 0] = 1.0
