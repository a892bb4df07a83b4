import math

import numpy as np
import pytest

from emsca.core import LabelKind, TraceSet
from emsca.preprocess import (
    FeatureTransform,
    Standardizer,
    TransformKind,
    average_traces,
    fft_features,
    fisher_ratio,
    fit_fft,
    fit_identity,
    fit_lda,
    fit_pca,
    fit_spectrogram,
    spectrogram_features,
    spectrogram_shape,
)
from emsca.simulate import GeneratorConfig, RandomPerDevice, gen_device_traces


def make_set(samples, pts=None, keys=None, devs=None, n_avg=None,
             label_kind=LabelKind.KEY_BYTE):
    samples = np.asarray(samples, dtype=np.float32)
    n = samples.shape[0]
    return TraceSet(
        samples=samples,
        plaintexts=np.zeros(n, np.uint8) if pts is None else np.asarray(pts, np.uint8),
        keys=np.zeros(n, np.uint8) if keys is None else np.asarray(keys, np.uint8),
        device_ids=np.zeros(n, np.uint16) if devs is None else np.asarray(devs, np.uint16),
        rows=np.zeros(n, np.uint8),
        cols=np.zeros(n, np.uint8),
        n_averaged=np.ones(n, np.uint16) if n_avg is None else np.asarray(n_avg, np.uint16),
        label_kind=label_kind,
    )


class TestAverageTraces:
    def test_identity_when_n_is_one(self):
        ts = make_set(np.random.default_rng(0).normal(size=(4, 6)))
        out, dropped = average_traces(ts, 1)
        assert out is ts and dropped == 0

    def test_two_trace_mean(self):
        ts = make_set([[1, 3], [3, 5]])
        out, dropped = average_traces(ts, 2)
        assert dropped == 0
        assert out.samples.tolist() == [[2.0, 4.0]]
        assert out.n_averaged.tolist() == [2]

    def test_groups_require_matching_metadata(self):
        ts = make_set([[1, 1], [3, 3]], keys=[1, 2])
        with pytest.raises(ValueError, match="no complete groups"):
            average_traces(ts, 2)

    def test_incomplete_groups_dropped_and_counted(self):
        ts = make_set([[1, 1], [1, 1], [1, 1], [2, 2]], keys=[5, 5, 5, 6])
        out, dropped = average_traces(ts, 2)
        assert len(out) == 1          # one complete pair from the key-5 group
        assert dropped == 2           # key-5 leftover + short key-6 group

    def test_rejects_bad_n(self):
        ts = make_set([[1, 1]])
        with pytest.raises(ValueError, match=">= 1"):
            average_traces(ts, 0)

    def test_noise_variance_reduction(self):
        # 10k groups of 20 pure-noise traces: group-mean variance ~ sigma^2/20
        rng = np.random.default_rng(8)
        sigma, n = 0.7, 20
        n_groups = 10000
        samples = rng.normal(0, sigma, size=(n_groups * n, 4)).astype(np.float32)
        pts = np.repeat(np.arange(n_groups) % 256, n).astype(np.uint8)
        keys = np.repeat(np.arange(n_groups) // 256, n).astype(np.uint8)
        devs = np.repeat(np.arange(n_groups) // (256 * 256), n).astype(np.uint16)
        ts = make_set(samples, pts=pts, keys=keys, devs=devs)
        out, dropped = average_traces(ts, n)
        assert len(out) == n_groups and dropped == 0
        residual = out.samples[:, 0].astype(np.float64).var()
        assert abs(residual - sigma ** 2 / n) / (sigma ** 2 / n) < 0.15


class TestPca:
    def test_rank_one_cloud(self):
        pts = np.array([[t, t] for t in np.linspace(-2, 2, 30)])
        ts = make_set(pts)
        t = fit_pca(ts, 2)
        first = t.components[:, 0]
        assert abs(first @ np.array([1, 1]) / np.sqrt(2)) == pytest.approx(1.0, abs=1e-9)
        assert t.components.shape[1] == 1  # zero-eigenvalue direction dropped
        assert t.eigenvalues[0] > 0

    def test_complete_basis_reconstruction(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(40, 6))
        ts = make_set(x)
        t = fit_pca(ts, 6)
        xc = x - t.proj_mean
        recon = (xc @ t.components) @ t.components.T
        rel = np.linalg.norm(recon - xc) / np.linalg.norm(xc)
        assert rel < 1e-6

    def test_four_point_toy_eigenvalues(self):
        # covariance of {(0,0),(1,1),(2,2),(3,5)} (ddof=1):
        # [[5/3, 8/3], [8/3, 14/3]]; eigenvalues from the characteristic
        # polynomial: (19 +- sqrt(337)) / 6
        ts = make_set([[0, 0], [1, 1], [2, 2], [3, 5]])
        t = fit_pca(ts, 2)
        expected_hi = (19 + math.sqrt(337)) / 6
        expected_lo = (19 - math.sqrt(337)) / 6
        assert t.eigenvalues[0] == pytest.approx(expected_hi, abs=1e-9)
        assert t.eigenvalues[1] == pytest.approx(expected_lo, abs=1e-9)

    def test_orthonormal_and_sorted(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(50, 12)) * np.linspace(3, 0.1, 12)
        t = fit_pca(make_set(x), 8)
        gram = t.components.T @ t.components
        assert np.allclose(gram, np.eye(t.components.shape[1]), atol=1e-8)
        assert np.all(np.diff(t.eigenvalues) <= 1e-12)

    def test_gram_and_covariance_routes_agree(self):
        rng = np.random.default_rng(3)
        tall = rng.normal(size=(30, 8))   # n > d: covariance route
        wide = tall[:6]                   # n < d: gram route
        t_tall = fit_pca(make_set(tall), 4)
        t_wide = fit_pca(make_set(wide), 4)
        for t in (t_tall, t_wide):
            gram = t.components.T @ t.components
            assert np.allclose(gram, np.eye(t.components.shape[1]), atol=1e-8)

    def test_rejects_too_many_components(self):
        ts = make_set(np.random.default_rng(0).normal(size=(5, 8)))
        with pytest.raises(ValueError, match="exceeds"):
            fit_pca(ts, 6)


class TestLda:
    def test_separable_toy_alignment(self):
        rng = np.random.default_rng(4)
        n = 200
        x = np.zeros((2 * n, 2))
        x[:n, 0] = rng.normal(0.0, 0.05, n)
        x[n:, 0] = rng.normal(10.0, 0.05, n)
        x[:, 1] = rng.normal(0, 1.0, 2 * n)  # pure noise axis
        ts = make_set(x, keys=[0] * n + [1] * n)
        t = fit_lda(ts, 1)
        cosine = abs(t.components[:, 0] @ np.array([1.0, 0.0]))
        assert cosine > 0.99

    def test_component_cap_at_classes_minus_one(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(512, 20))
        keys = np.arange(512) % 256
        ts = make_set(x, keys=keys)
        with pytest.raises(ValueError, match="classes-1"):
            fit_lda(ts, 256)

    def test_needs_two_classes(self):
        ts = make_set(np.random.default_rng(0).normal(size=(8, 4)))
        with pytest.raises(ValueError, match="two classes"):
            fit_lda(ts, 1)

    def test_fisher_ratio_beats_random_projection(self):
        cfg = GeneratorConfig(trace_length=120, n_pois=8, seed=21)
        raw = gen_device_traces(cfg, 0, 2048, RandomPerDevice(), 1,
                                LabelKind.SBOX_OUTPUT)
        t = fit_lda(raw, 10)
        x = raw.samples.astype(np.float64)
        y = raw.labels()
        lda_ratio = fisher_ratio(x, y, t.components)
        rng = np.random.default_rng(0)
        random_ratios = []
        for _ in range(20):
            w = rng.normal(size=(x.shape[1], 10))
            w, _ = np.linalg.qr(w)
            random_ratios.append(fisher_ratio(x, y, w))
        assert lda_ratio >= 5 * np.median(random_ratios)

    def test_eigenvalues_sorted(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(300, 10))
        x[:, 0] += (np.arange(300) % 4) * 3.0
        x[:, 1] += (np.arange(300) % 4) * 1.0
        ts = make_set(x, keys=np.arange(300) % 4)
        t = fit_lda(ts, 3)
        assert np.all(np.diff(t.eigenvalues) <= 1e-9)

    def test_dual_and_direct_routes_agree(self):
        rng = np.random.default_rng(7)
        x_small = rng.normal(size=(40, 50))        # n < d: dual route
        x_small[::2, :4] += 2.5
        keys = (np.arange(40) % 2).astype(np.uint8)
        sub = make_set(x_small, keys=keys)
        t_dual = fit_lda(sub, 1)
        big = make_set(np.tile(x_small, (2, 1)), keys=np.tile(keys, 2))
        t_direct = fit_lda(big, 1)                 # n > d: direct route
        cos = abs(t_dual.components[:, 0] @ t_direct.components[:, 0])
        assert cos > 0.95


class TestFft:
    def test_constant_trace_is_dc_only(self):
        c, length = 2.5, 64
        spec = fft_features(np.full((1, length), c))[0]
        assert spec[0] == pytest.approx(c * length, rel=1e-12)
        assert np.all(spec[1:] < 1e-9)

    def test_pure_tone_single_bin(self):
        length, k = 128, 7
        t = np.arange(length)
        spec = fft_features(np.sin(2 * np.pi * k * t / length)[None, :])[0]
        assert spec.argmax() == k
        others = np.delete(spec, k)
        assert others.max() < 1e-9

    def test_parseval(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=257)  # odd length exercises the bin bookkeeping
        time_energy = float((x ** 2).sum())
        full = np.fft.fft(x)
        freq_energy = float((np.abs(full) ** 2).sum()) / len(x)
        assert abs(time_energy - freq_energy) / time_energy < 1e-6
        one_sided = fft_features(x[None, :])[0]
        # reassemble two-sided energy from the one-sided magnitudes
        doubled = 2 * (one_sided[1:] ** 2).sum() + one_sided[0] ** 2
        assert abs(doubled / len(x) - time_energy) / time_energy < 1e-6

    def test_output_length(self):
        assert fft_features(np.zeros((1, 3000))).shape == (1, 1501)


class TestSpectrogram:
    def test_shape_formula(self):
        frames, bins = spectrogram_shape(3000, 256, 128)
        assert (frames, bins) == (22, 129)
        out = spectrogram_features(np.zeros((2, 3000)), 256, 128)
        assert out.shape == (2, 22 * 129)

    def test_constant_trace_energy_in_dc(self):
        out = spectrogram_features(np.full((1, 512), 3.0), 64, 32)[0]
        frames, bins = spectrogram_shape(512, 64, 32)
        mat = out.reshape(frames, bins)
        assert np.all(mat.argmax(axis=1) == 0)

    def test_burst_localized_in_late_frames(self):
        length = 512
        x = np.zeros((1, length))
        x[0, 400:420] = 5.0
        frames, bins = spectrogram_shape(length, 64, 32)
        mat = spectrogram_features(x, 64, 32)[0].reshape(frames, bins)
        frame_energy = (mat ** 2).sum(axis=1)
        early = frame_energy[: frames // 2].sum()
        late = frame_energy[frames // 2:].sum()
        assert late > 100 * early

    def test_rejects_window_longer_than_trace(self):
        with pytest.raises(ValueError, match="window"):
            spectrogram_features(np.zeros((1, 100)), 128, 32)


class TestStandardizer:
    def test_two_point_example(self):
        s = Standardizer.fit(np.array([[1.0], [3.0]]))
        out = s.apply(np.array([[1.0], [3.0]]))
        assert out.ravel().tolist() == [-1.0, 1.0]

    def test_train_set_becomes_zero_mean_unit_std(self):
        rng = np.random.default_rng(10)
        x = rng.normal(2.0, 3.0, size=(500, 7))
        s = Standardizer.fit(x)
        z = s.apply(x)
        assert np.all(np.abs(z.mean(axis=0)) < 1e-9)
        assert np.all(np.abs(z.std(axis=0) - 1) < 1e-6)

    def test_zero_variance_features_dropped(self):
        x = np.column_stack([np.ones(10), np.arange(10.0)])
        s = Standardizer.fit(x)
        assert s.dropped.tolist() == [0]
        assert s.apply(x).shape == (10, 1)

    def test_test_set_only_needs_finiteness(self):
        rng = np.random.default_rng(11)
        s = Standardizer.fit(rng.normal(size=(50, 3)))
        z = s.apply(rng.normal(5.0, 9.0, size=(20, 3)))
        assert np.all(np.isfinite(z))


class TestFeatureTransformPipeline:
    def _train_set(self, n=64, length=40):
        rng = np.random.default_rng(12)
        return make_set(rng.normal(size=(n, length)),
                        keys=np.arange(n) % 4, label_kind=LabelKind.KEY_BYTE)

    def test_read_only_after_fit(self):
        t = fit_identity(self._train_set())
        with pytest.raises(RuntimeError, match="read-only"):
            t.fit(self._train_set())

    def test_rejects_wrong_trace_length(self):
        t = fit_identity(self._train_set(length=40))
        with pytest.raises(ValueError, match="length"):
            t.apply(self._train_set(length=41))

    def test_rejects_wrong_averaging(self):
        t = fit_identity(self._train_set())
        other = make_set(np.zeros((4, 40)), n_avg=[2, 2, 2, 2])
        with pytest.raises(ValueError, match="averaged"):
            t.apply(other)

    def test_apply_is_deterministic(self):
        ts = self._train_set()
        t = fit_pca(ts, 5)
        assert np.array_equal(t.apply(ts), t.apply(ts))

    def test_fingerprint_changes_with_fit_data(self):
        t1 = fit_pca(self._train_set(), 5)
        rng = np.random.default_rng(99)
        other = make_set(rng.normal(size=(64, 40)), keys=np.arange(64) % 4)
        t2 = fit_pca(other, 5)
        assert t1.fingerprint() != t2.fingerprint()
        assert t1.fingerprint() == t1.fingerprint()

    def test_mean_commutes_with_linear_transforms(self):
        # transform of a group mean == mean of the transformed group
        rng = np.random.default_rng(13)
        group = rng.normal(size=(20, 40))
        mean = group.mean(axis=0, keepdims=True)
        fitted = {
            "pca": fit_pca(self._train_set(), 5),
            "lda": fit_lda(self._train_set(), 3),
            "identity": fit_identity(self._train_set()),
        }
        for name, t in fitted.items():
            a = t.standardizer.apply(t._project(group)).mean(axis=0)
            b = t.standardizer.apply(t._project(mean))[0]
            assert np.allclose(a, b, atol=1e-9), name
        # the DFT itself is linear (magnitude is taken after)
        assert np.allclose(np.fft.rfft(group, axis=1).mean(axis=0),
                           np.fft.rfft(mean, axis=1)[0], atol=1e-9)

    def test_fft_and_spectrogram_dims(self):
        ts = self._train_set(length=64)
        assert fit_fft(ts).output_dim <= 33
        t = fit_spectrogram(ts, window_len=16, hop=8)
        frames, bins = spectrogram_shape(64, 16, 8)
        assert t.output_dim <= frames * bins

    def test_pca_explained_variance_non_increasing(self):
        cfg = GeneratorConfig(trace_length=100, n_pois=8, seed=3)
        raw = gen_device_traces(cfg, 0, 512, RandomPerDevice(), 1,
                                LabelKind.SBOX_OUTPUT)
        t = fit_pca(raw, 30)
        assert np.all(np.diff(t.eigenvalues) <= 1e-12)
