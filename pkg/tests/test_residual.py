import numpy as np
import pytest

import prnu_match as pm
from prnu_match.errors import ConfigError, DimensionError
from prnu_match.residual import _DB4_HI, _DB4_LO, _box_mean


def brute_wiener(subband, sigma0_sq, window_sizes=(3, 5, 7, 9)):
    """Independent scalar-by-scalar oracle: zero-padded window means, min over
    windows of max(0, mean(c^2) - sigma0^2), Wiener gain per coefficient."""
    h, w = subband.shape
    out = np.zeros_like(subband)
    for i in range(h):
        for j in range(w):
            best = None
            for size in window_sizes:
                r = size // 2
                total = 0.0
                for di in range(-r, r + 1):
                    for dj in range(-r, r + 1):
                        ii, jj = i + di, j + dj
                        if 0 <= ii < h and 0 <= jj < w:
                            total += subband[ii, jj] ** 2
                est = total / (size * size) - sigma0_sq
                best = est if best is None else min(best, est)
            s2 = max(0.0, best)
            out[i, j] = subband[i, j] * s2 / (s2 + sigma0_sq)
    return out


class TestFilterBank:
    def test_scaling_filter_orthonormal(self):
        assert abs(_DB4_LO.sum() - np.sqrt(2)) < 1e-12
        assert abs((_DB4_LO**2).sum() - 1.0) < 1e-12
        for lag in (2, 4, 6):
            assert abs(np.dot(_DB4_LO[:-lag], _DB4_LO[lag:])) < 1e-12

    def test_highpass_vanishing_moments(self):
        n = np.arange(8)
        for p in range(4):
            assert abs((_DB4_HI * n**p).sum()) < 1e-9


class TestDwt2:
    def test_perfect_reconstruction_many_sizes(self):
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(200):
            h, w = rng.integers(16, 49, size=2)
            x = rng.standard_normal((h, w)) * 50 + 120
            rec = pm.idwt2(pm.dwt2(x))
            worst = max(worst, np.abs(rec - x).max())
        assert worst < 1e-6

    def test_perfect_reconstruction_64x64(self):
        x = np.random.default_rng(20).standard_normal((64, 64)) * 80 + 128
        assert np.abs(pm.idwt2(pm.dwt2(x)) - x).max() < 1e-6

    def test_constant_image_details_vanish(self):
        pyr = pm.dwt2(np.full((32, 32), 117.0))
        for triple in pyr.details:
            for band in triple:
                assert np.abs(band).max() < 1e-9

    def test_impulse_reconstructs(self):
        x = np.zeros((32, 32))
        x[13, 21] = 1.0
        assert np.abs(pm.idwt2(pm.dwt2(x)) - x).max() < 1e-6

    def test_non_dyadic_padding_round_trip(self):
        rng = np.random.default_rng(1)
        x = rng.random((33, 47)) * 255
        assert np.abs(pm.idwt2(pm.dwt2(x)) - x).max() < 1e-6

    def test_too_small_raises(self):
        with pytest.raises(DimensionError):
            pm.dwt2(np.zeros((4, 4)))


class TestWienerShrink:
    def test_zero_subband(self):
        assert np.array_equal(pm.wiener_shrink(np.zeros((6, 6)), 9.0), np.zeros((6, 6)))

    def test_below_noise_floor_clamps_to_zero(self):
        sub = np.full((8, 8), 0.5)  # local mean of c^2 = 0.25 << 9
        assert np.abs(pm.wiener_shrink(sub, 9.0)).max() == 0.0

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(2)
        sub = rng.standard_normal((5, 5)) * 6
        got = pm.wiener_shrink(sub, 9.0)
        want = brute_wiener(sub, 9.0)
        assert np.abs(got - want).max() < 1e-12

    def test_matches_scalar_oracle_larger(self):
        rng = np.random.default_rng(3)
        sub = rng.standard_normal((11, 7)) * 4
        assert np.abs(pm.wiener_shrink(sub, 4.0) - brute_wiener(sub, 4.0)).max() < 1e-12

    def test_contraction(self):
        rng = np.random.default_rng(4)
        sub = rng.standard_normal((16, 16)) * 10
        out = pm.wiener_shrink(sub, 9.0)
        assert np.all(np.abs(out) <= np.abs(sub) + 1e-15)

    def test_bad_sigma_raises(self):
        with pytest.raises(ConfigError):
            pm.wiener_shrink(np.zeros((4, 4)), 0.0)

    def test_box_mean_matches_loops(self):
        rng = np.random.default_rng(5)
        x = rng.random((9, 6))
        for size in (3, 5):
            got = _box_mean(x, size)
            r = size // 2
            for i in range(9):
                for j in range(6):
                    total = sum(
                        x[ii, jj]
                        for ii in range(i - r, i + r + 1)
                        for jj in range(j - r, j + r + 1)
                        if 0 <= ii < 9 and 0 <= jj < 6
                    )
                    assert abs(got[i, j] - total / size**2) < 1e-12


class TestExtractResidual:
    def test_constant_image_residual_vanishes(self):
        img = pm.Image(np.full((32, 32), 100.0))
        res = pm.extract_residual(img)
        assert np.abs(res.values).max() < 1e-6

    def test_nonconstant_residual_nonzero(self):
        rng = np.random.default_rng(6)
        img = pm.Image(np.clip(rng.normal(128, 5, size=(64, 64)), 0, 255))
        assert np.linalg.norm(pm.extract_residual(img).values) > 0

    def test_residual_correlates_with_own_pattern(self):
        # Monte Carlo: I = I0 * (1 + K); residual should align with K, not K'
        rng = np.random.default_rng(7)
        own, other = [], []
        for _ in range(50):
            k = rng.normal(0, 0.02, size=(64, 64))
            k_prime = rng.normal(0, 0.02, size=(64, 64))
            img = np.clip(128.0 * (1.0 + k) + rng.normal(0, 2, size=(64, 64)), 0, 255)
            w = pm.extract_residual(pm.Image(img)).values
            own.append(pm.ncc(w, k))
            other.append(pm.ncc(w, k_prime))
        assert np.mean(own) > np.mean(other)
        assert np.mean(own) > 0.1

    def test_noise_scale_covariance(self):
        rng = np.random.default_rng(8)
        base = np.full((64, 64), 128.0)
        eta = rng.standard_normal((64, 64))
        small = pm.extract_residual(pm.Image(np.clip(base + 2 * eta, 0, 255)))
        large = pm.extract_residual(pm.Image(np.clip(base + 4 * eta, 0, 255)))
        assert np.linalg.norm(large.values) > np.linalg.norm(small.values)

    def test_metadata_carried(self):
        img = pm.Image(np.full((16, 16), 99.0), device_id="cam7", compression_history=(("jpeg", 80),))
        res = pm.extract_residual(img)
        assert res.device_id == "cam7"
        assert res.compression_history == (("jpeg", 80),)

    def test_concurrent_extraction_matches_serial(self):
        from concurrent.futures import ThreadPoolExecutor

        rng = np.random.default_rng(21)
        imgs = [pm.Image(np.clip(rng.normal(128, 10, size=(48, 48)), 0, 255)) for _ in range(6)]
        serial = [pm.extract_residual(img).values for img in imgs]
        with ThreadPoolExecutor(max_workers=4) as pool:
            parallel = list(pool.map(lambda im: pm.extract_residual(im).values, imgs))
        for a, b in zip(serial, parallel):
            assert np.array_equal(a, b)


class TestZeroMean:
    def test_idempotent(self):
        rng = np.random.default_rng(9)
        a = rng.standard_normal((17, 23))
        once = pm.zero_mean(a)
        assert np.abs(pm.zero_mean(once) - once).max() < 1e-12

    def test_rank1_row_plus_col_killed(self):
        r = np.arange(6.0)[:, None]
        c = np.linspace(-3, 11, 9)[None, :]
        assert np.abs(pm.zero_mean(r + c)).max() < 1e-12

    def test_row_and_col_means_vanish(self):
        rng = np.random.default_rng(10)
        out = pm.zero_mean(rng.random((32, 32)) * 1000)
        assert np.abs(out.mean(axis=0)).max() < 1e-9
        assert np.abs(out.mean(axis=1)).max() < 1e-9


class TestResidualPersistence:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(11)
        values = rng.standard_normal((24, 24)).astype(np.float32).astype(np.float64)
        res = pm.NoiseResidual(values=values, device_id="camA")
        p = tmp_path / "w.prnu"
        pm.save_residual(res, p)
        back = pm.load_residual(p)
        assert np.array_equal(back.values, values)
        assert back.device_id == "camA"
