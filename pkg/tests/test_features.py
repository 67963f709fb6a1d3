import colorsys
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stitch.features import (
    FEATURE_DIM,
    Embedding,
    EmbeddingFileError,
    baseline_featurize,
    cosine_distance,
    load_embeddings,
    normalize,
    save_embeddings,
)


def featurize_scalar_oracle(patch: np.ndarray) -> np.ndarray:
    """Straight-line reimplementation: per-pixel loops, colorsys, scalar math."""
    rgb = patch.astype(np.float64) / 255.0 if patch.dtype == np.uint8 else patch.astype(np.float64)
    h_orig, w_orig = rgb.shape[:2]
    size = 48
    rows = [math.floor((i + 0.5) * h_orig / size) for i in range(size)]
    cols = [math.floor((j + 0.5) * w_orig / size) for j in range(size)]
    up = np.zeros((size, size, 3))
    for i in range(size):
        for j in range(size):
            up[i, j] = rgb[rows[i], cols[j]]
    hsv = np.zeros((size, size, 3))
    for i in range(size):
        for j in range(size):
            hsv[i, j] = colorsys.rgb_to_hsv(*up[i, j])
    value = hsv[:, :, 2]
    gy = np.zeros((size, size))
    gx = np.zeros((size, size))
    for i in range(size):
        for j in range(size):
            gy[i, j] = (
                value[1, j] - value[0, j] if i == 0
                else value[-1, j] - value[-2, j] if i == size - 1
                else (value[i + 1, j] - value[i - 1, j]) / 2.0
            )
            gx[i, j] = (
                value[i, 1] - value[i, 0] if j == 0
                else value[i, -1] - value[i, -2] if j == size - 1
                else (value[i, j + 1] - value[i, j - 1]) / 2.0
            )
    out = np.zeros(FEATURE_DIM)
    pos = 0
    for cy in range(3):
        for cx in range(3):
            ys = range(cy * 16, (cy + 1) * 16)
            xs = range(cx * 16, (cx + 1) * 16)
            hue_hist = np.zeros(32)
            sat_hist = np.zeros(8)
            val_hist = np.zeros(8)
            grad_hist = np.zeros(8)
            for i in ys:
                for j in xs:
                    hue_hist[min(int(hsv[i, j, 0] * 32), 31)] += 1
                    sat_hist[min(int(hsv[i, j, 1] * 8), 7)] += 1
                    val_hist[min(int(hsv[i, j, 2] * 8), 7)] += 1
                    mag = math.hypot(gx[i, j], gy[i, j])
                    theta = (math.atan2(gy[i, j], gx[i, j]) % (2 * math.pi)) / (2 * math.pi)
                    grad_hist[min(int(theta * 8), 7)] += mag
            for hist in (hue_hist, sat_hist, val_hist, grad_hist):
                total = hist.sum()
                if total > 0:
                    hist /= total
            out[pos:pos + 32] = hue_hist
            out[pos + 32:pos + 40] = sat_hist
            out[pos + 40:pos + 48] = val_hist
            out[pos + 48:pos + 56] = grad_hist
            pos += 56
    flat = up.reshape(-1, 3)
    out[pos:pos + 3] = flat.mean(axis=0)
    out[pos + 3:pos + 6] = flat.std(axis=0)
    out[pos + 6] = w_orig / h_orig
    return out


class TestBaselineFeaturize:
    def test_white_patch(self):
        patch = np.full((10, 10, 3), 255, dtype=np.uint8)
        f = baseline_featurize(patch)
        for cell in range(9):
            base = cell * 56
            sat = f[base + 32:base + 40]
            val = f[base + 40:base + 48]
            grad = f[base + 48:base + 56]
            assert sat[0] == 1.0 and sat[1:].sum() == 0.0
            assert val[7] == 1.0 and val[:7].sum() == 0.0
            assert np.all(grad == 0.0)

    def test_deterministic(self, rng):
        patch = rng.integers(0, 256, size=(17, 13, 3), dtype=np.uint8)
        a = baseline_featurize(patch)
        b = baseline_featurize(patch)
        assert np.array_equal(a, b)

    def test_two_by_two_matches_scalar_oracle(self):
        patch = np.array(
            [[[250, 20, 20], [20, 250, 20]],
             [[20, 20, 250], [200, 200, 60]]], dtype=np.uint8
        )
        np.testing.assert_allclose(
            baseline_featurize(patch), featurize_scalar_oracle(patch), atol=1e-12
        )

    def test_random_patch_matches_scalar_oracle(self, rng):
        patch = rng.integers(0, 256, size=(9, 6, 3), dtype=np.uint8)
        np.testing.assert_allclose(
            baseline_featurize(patch), featurize_scalar_oracle(patch), atol=1e-12
        )

    def test_replication_invariance(self, rng):
        patch = rng.integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
        for k in (2, 3, 4):
            replicated = patch.repeat(k, axis=0).repeat(k, axis=1)
            np.testing.assert_allclose(
                baseline_featurize(patch), baseline_featurize(replicated), atol=1e-6
            )

    def test_single_pixel(self):
        f = baseline_featurize(np.full((1, 1, 3), 128, dtype=np.uint8))
        assert np.isfinite(f).all()

    def test_gray_input_accepted(self):
        f = baseline_featurize(np.full((4, 4), 100, dtype=np.uint8))
        assert f.shape == (FEATURE_DIM,)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            baseline_featurize(np.zeros((0, 0, 3), dtype=np.uint8))

    def test_non_finite_pixels_rejected(self):
        patch = np.full((4, 4, 3), 0.5)
        patch[1, 1, 0] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            baseline_featurize(patch)

    def test_layout_totals(self, rng):
        patch = rng.integers(0, 256, size=(32, 32, 3), dtype=np.uint8)
        f = baseline_featurize(patch)
        assert f.shape == (FEATURE_DIM,)
        assert f[511] == 0.0
        assert f[510] == pytest.approx(1.0)  # square patch aspect ratio
        for cell in range(9):
            base = cell * 56
            assert f[base:base + 32].sum() == pytest.approx(1.0)


class TestCosineDistance:
    def test_self_distance_zero(self, rng):
        v = rng.normal(size=16)
        v /= np.linalg.norm(v)
        assert cosine_distance(v, v) == pytest.approx(0.0, abs=1e-12)

    def test_orthogonal(self):
        a = np.zeros(8); a[0] = 1.0
        b = np.zeros(8); b[1] = 1.0
        assert cosine_distance(a, b) == 1.0

    def test_antipodal(self):
        a = np.zeros(8); a[0] = 1.0
        assert cosine_distance(a, -a) == 2.0

    def test_rejects_non_unit(self):
        a = np.zeros(8); a[0] = 2.0
        b = np.zeros(8); b[0] = 1.0
        with pytest.raises(ValueError, match="unit"):
            cosine_distance(a, b)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=50)
    def test_symmetric_bounded(self, seed):
        r = np.random.default_rng(seed)
        a = r.normal(size=32); a /= np.linalg.norm(a)
        b = r.normal(size=32); b /= np.linalg.norm(b)
        d = cosine_distance(a, b)
        assert d == cosine_distance(b, a)
        assert 0.0 <= d <= 2.0


class TestNormalize:
    def test_three_four_five(self):
        v = np.zeros(8)
        v[0], v[1] = 3.0, 4.0
        out = normalize(v)
        assert out[0] == pytest.approx(0.6, abs=1e-15)
        assert out[1] == pytest.approx(0.8, abs=1e-15)

    def test_unit_unchanged(self):
        v = np.zeros(8); v[3] = 1.0
        np.testing.assert_allclose(normalize(v), v, atol=1e-15)

    def test_zero_rejected(self):
        with pytest.raises(ValueError, match="zero"):
            normalize(np.zeros(8))

    @given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
    @settings(max_examples=50)
    def test_scale_invariant(self, seed, c):
        v = np.random.default_rng(seed).normal(size=16) + 0.1
        np.testing.assert_allclose(normalize(c * v), normalize(v), atol=1e-12)


class TestEmbeddingType:
    def test_unit_enforced(self):
        v = np.zeros(FEATURE_DIM)
        v[0] = 0.5
        with pytest.raises(ValueError, match="unit"):
            Embedding(base=v)

    def test_task_feature_dims_enforced(self):
        v = np.zeros(FEATURE_DIM)
        v[0] = 1.0
        with pytest.raises(ValueError, match="128"):
            Embedding(base=v, task_features={"color": np.zeros(4)})


class TestEmbeddingFile:
    def test_round_trip(self, tmp_path, rng):
        matrix = rng.normal(size=(5, FEATURE_DIM)).astype(np.float32)
        ids = [f"item-{i}" for i in range(5)]
        path = tmp_path / "emb.bin"
        save_embeddings(path, ids, matrix)
        got_ids, got = load_embeddings(path)
        assert got_ids == ids
        np.testing.assert_array_equal(got, matrix)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "emb.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 20)
        with pytest.raises(EmbeddingFileError, match="not an embedding"):
            load_embeddings(path)

    def test_truncated(self, tmp_path, rng):
        path = tmp_path / "emb.bin"
        save_embeddings(path, ["a", "b"], rng.normal(size=(2, 8)).astype(np.float32))
        raw = path.read_bytes()
        path.write_bytes(raw[:-7])
        with pytest.raises(EmbeddingFileError, match="bytes"):
            load_embeddings(path)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "emb.bin"
        path.write_bytes(b"STCH" + struct.pack("<HQH", 99, 0, 8))
        with pytest.raises(EmbeddingFileError, match="version"):
            load_embeddings(path)

    def test_id_count_mismatch(self, tmp_path, rng):
        path = tmp_path / "emb.bin"
        save_embeddings(path, ["a", "b"], rng.normal(size=(2, 8)).astype(np.float32))
        (tmp_path / "emb.bin.ids").write_text("a\n", encoding="utf-8")
        with pytest.raises(EmbeddingFileError, match="ids"):
            load_embeddings(path)
