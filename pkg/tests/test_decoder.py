"""Gaussian decoder: bin expectation, constrained heads, file round trip."""

import numpy as np
import pytest

from mambasplat import autodiff as ad
from mambasplat.decoder import DecoderParams, bin_expectation, decode
from mambasplat.gaussians import (PARAMS_PER_SPLAT, GaussianSet, from_array,
                                  load_gaussians, save_gaussians)
from mambasplat.errors import DataError


def test_bin_expectation_uniform_logits_center():
    for k in (2, 7, 32):
        out = bin_expectation(ad.tensor(np.zeros(k)))
        assert abs(out.item()) < 1e-6


def test_bin_expectation_one_hot_hits_bin_center():
    logits = np.full(8, -40.0)
    logits[-1] = 40.0
    assert bin_expectation(ad.tensor(logits)).item() == pytest.approx(1.0, abs=1e-6)
    logits = np.full(8, 40.0) * 0 - 40.0
    logits[0] = 40.0
    assert bin_expectation(ad.tensor(logits)).item() == pytest.approx(-1.0, abs=1e-6)


def test_bin_expectation_two_bin_hand_values():
    # K=2, centers {-1, +1}: equal logits -> 0; logits (ln 3, 0) -> p=(0.75, 0.25) -> -0.5
    assert bin_expectation(ad.tensor([0.0, 0.0])).item() == pytest.approx(0.0, abs=1e-7)
    out = bin_expectation(ad.tensor([np.log(3.0), 0.0]))
    assert out.item() == pytest.approx(-0.5, abs=1e-6)


def test_bin_expectation_gradcheck():
    with ad.precision("double"):
        rng = np.random.default_rng(0)
        logits = ad.tensor(rng.normal(0, 2, 16), requires_grad=True)
        err = ad.gradcheck(lambda: bin_expectation(logits) * 1.0, [logits])
        assert err < 1e-5


def test_bin_expectation_monotone_in_high_bin_logit():
    rng = np.random.default_rng(1)
    for _ in range(50):
        logits = rng.normal(0, 1, 12)
        base = bin_expectation(ad.tensor(logits)).item()
        j = int(rng.integers(6, 12))  # bins in the upper half have centers > median
        logits2 = logits.copy()
        logits2[j] += rng.uniform(0.01, 2.0)
        bumped = bin_expectation(ad.tensor(logits2)).item()
        centers = np.linspace(-1, 1, 12)
        if centers[j] >= base:
            assert bumped >= base - 1e-9


def test_decode_respects_all_invariants():
    rng = np.random.default_rng(2)
    params = DecoderParams.init(rng, d_model=24, hidden=16, layers=4, n_bins=8)
    for seed in range(10):
        r = np.random.default_rng(seed)
        hidden = ad.tensor(r.normal(0, 2.0, (33, 24)).astype(np.float32))
        gs = decode(params, hidden)
        gs.validate()  # positions, opacity, scales, quaternion norms, 23 params


def test_decode_output_is_23_parameters_at_fixed_token_count():
    # the flattened record is always 23 wide; token count is whatever N is configured
    rng = np.random.default_rng(3)
    params = DecoderParams.init(rng, d_model=8, hidden=8, layers=2, n_bins=4)
    hidden = ad.tensor(rng.normal(0, 1, (16384, 8)).astype(np.float32))
    arr = decode(params, hidden).to_array()
    assert arr.shape == (16384, PARAMS_PER_SPLAT)


def test_decoder_default_depth_and_width():
    from mambasplat.config import Config
    cfg = Config()
    assert cfg.decoder_layers == 10
    assert cfg.decoder_hidden == 64
    rng = np.random.default_rng(4)
    params = DecoderParams.init(rng, d_model=32)
    assert len(params.trunk) == 10
    assert params.trunk[1][0].data.shape == (64, 64)
    assert params.trunk[0][0].data.shape == (32, 64)  # bottleneck at the first layer


def test_decode_permutation_equivariance():
    rng = np.random.default_rng(5)
    params = DecoderParams.init(rng, d_model=12, hidden=8, layers=3, n_bins=4)
    hidden = rng.normal(0, 1, (20, 12)).astype(np.float32)
    perm = rng.permutation(20)
    direct = decode(params, ad.tensor(hidden[perm])).to_array()
    permuted = decode(params, ad.tensor(hidden)).to_array()[perm]
    np.testing.assert_array_equal(direct, permuted)


def test_decode_gradients_flow_to_hidden():
    with ad.precision("double"):
        rng = np.random.default_rng(6)
        params = DecoderParams.init(rng, d_model=6, hidden=8, layers=2, n_bins=4)
        hidden = ad.tensor(rng.normal(0, 1, (5, 6)), requires_grad=True)

        def build():
            gs = decode(params, hidden)
            return (ad.tensor_sum(gs.position) + ad.tensor_sum(gs.opacity)
                    + ad.tensor_sum(gs.scale) + ad.tensor_sum(gs.sh * 0.1))

        err = ad.gradcheck(build, [hidden], samples=12, rng=rng)
        assert err < 1e-4


def test_quaternion_zero_row_falls_back_to_identity():
    rng = np.random.default_rng(7)
    params = DecoderParams.init(rng, d_model=6, hidden=8, layers=2, n_bins=4)
    # force the quaternion head to emit exactly zero
    params.head_quat[0].data[...] = 0.0
    params.head_quat[1].data[...] = 0.0
    gs = decode(params, ad.tensor(rng.normal(0, 1, (4, 6)).astype(np.float32)))
    np.testing.assert_allclose(gs.quat.data, np.tile([1.0, 0, 0, 0], (4, 1)), atol=1e-7)


def test_gaussian_file_roundtrip(tmp_path):
    rng = np.random.default_rng(8)
    params = DecoderParams.init(rng, d_model=8, hidden=8, layers=2, n_bins=4)
    gs = decode(params, ad.tensor(rng.normal(0, 1, (12, 8)).astype(np.float32)))
    path = tmp_path / "set.gs"
    save_gaussians(path, gs)
    back = load_gaussians(path)
    np.testing.assert_array_equal(back.to_array(), gs.to_array().astype(np.float32))


def test_gaussian_file_rejects_corruption(tmp_path):
    path = tmp_path / "bad.gs"
    path.write_bytes(b"XXXX" + b"\x00" * 20)
    with pytest.raises(DataError):
        load_gaussians(path)
    good = tmp_path / "trunc.gs"
    save_gaussians(good, from_array(np.zeros((2, 23))))
    blob = good.read_bytes()
    good.write_bytes(blob[:-8])
    with pytest.raises(DataError):
        load_gaussians(good)
