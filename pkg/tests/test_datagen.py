import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sniclust.datagen import (
    PixelGraph,
    SynthConfig,
    build_pixel_graph,
    sparsify,
    synth_dataset,
)
from sniclust.io import read_snt, write_snt


class TestSynthDataset:
    def test_masked_pixel_count_exact(self):
        cfg = SynthConfig(n_images=6, height=10, width=10, sparsity=0.9, seed=1)
        images, _ = synth_dataset(cfg)
        for img in images:
            zero_sites = np.sum(np.all(img == 0.0, axis=0))
            assert zero_sites >= round(0.9 * 100)  # selected sites, maybe more by chance

    def test_sparsify_exact_site_count(self):
        rng = np.random.default_rng(0)
        imgs = rng.uniform(0.5, 1.0, size=(4, 2, 10, 10))  # strictly positive
        out = sparsify(imgs, 0.9, seed=3)
        for img in out:
            assert np.sum(np.all(img == 0.0, axis=0)) == 90

    def test_same_seed_bit_identical(self):
        cfg = SynthConfig(n_images=5, seed=7)
        a, la = synth_dataset(cfg)
        b, lb = synth_dataset(cfg)
        assert a.tobytes() == b.tobytes()
        assert la.tobytes() == lb.tobytes()

    def test_no_noise_no_masking_identical_within_label(self):
        cfg = SynthConfig(n_images=12, n_patterns=2, sparsity=0.0, noise_std=0.0, seed=2)
        images, labels = synth_dataset(cfg)
        for lab in np.unique(labels):
            members = images[labels == lab]
            assert np.all(members == members[0])

    def test_values_nonnegative_finite(self):
        images, _ = synth_dataset(SynthConfig(n_images=20, seed=5))
        assert np.all(np.isfinite(images))
        assert np.all(images >= 0)

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError):
            SynthConfig(sparsity=1.0).validate()
        with pytest.raises(ValueError):
            SynthConfig(n_patterns=0).validate()


class TestSparsify:
    def test_zero_fraction_identity(self):
        rng = np.random.default_rng(1)
        imgs = rng.uniform(size=(3, 1, 8, 8))
        out = sparsify(imgs, 0.0, seed=0)
        np.testing.assert_array_equal(out, imgs)

    def test_unmasked_values_preserved_exactly(self):
        rng = np.random.default_rng(2)
        imgs = rng.uniform(0.1, 1.0, size=(3, 1, 8, 8))
        out = sparsify(imgs, 0.5, seed=0)
        kept = out != 0.0
        np.testing.assert_array_equal(out[kept], imgs[kept])

    def test_idempotent_with_same_seed(self):
        rng = np.random.default_rng(3)
        imgs = rng.uniform(0.1, 1.0, size=(2, 1, 6, 6))
        once = sparsify(imgs, 0.4, seed=9)
        twice = sparsify(once, 0.4, seed=9)
        np.testing.assert_array_equal(once, twice)

    def test_masked_sites_zero_across_channels(self):
        rng = np.random.default_rng(4)
        imgs = rng.uniform(0.1, 1.0, size=(2, 3, 6, 6))
        out = sparsify(imgs, 0.5, seed=1)
        site_zero = np.all(out == 0.0, axis=1)  # (N, H, W)
        any_zero = np.any(out == 0.0, axis=1)
        np.testing.assert_array_equal(site_zero, any_zero)


class TestPixelGraph:
    def test_center_pixel_r1_has_five_neighbors(self):
        # enumerating grid distances <= 1 around the center of a 3x3 grid:
        # itself plus the 4-neighborhood
        g = build_pixel_graph(3, 3, 1)
        center = 4
        np.testing.assert_array_equal(g.neighbors(center), [1, 3, 4, 5, 7])

    def test_large_radius_complete_graph(self):
        g = build_pixel_graph(3, 4, radius=10)
        for pix in range(12):
            assert len(g.neighbors(pix)) == 12

    @given(st.integers(2, 6), st.integers(2, 6), st.integers(1, 4))
    @settings(max_examples=25, deadline=None)
    def test_adjacency_symmetric(self, h, w, r):
        g = build_pixel_graph(h, w, r)
        pairs = set(zip(g.receiver.tolist(), g.sender.tolist()))
        for i, j in pairs:
            assert (j, i) in pairs

    def test_self_loops_present(self):
        g = build_pixel_graph(4, 4, 1)
        for pix in range(16):
            assert pix in g.neighbors(pix)

    def test_interior_degree_translation_invariant(self):
        g = build_pixel_graph(8, 8, 2)
        deg = g.degrees().reshape(8, 8)
        interior = deg[2:-2, 2:-2]
        assert np.all(interior == interior[0, 0])

    def test_radius_below_one_rejected(self):
        with pytest.raises(ValueError):
            build_pixel_graph(4, 4, 0.5)


class TestSntRoundTrip:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        imgs = rng.uniform(size=(3, 2, 5, 7)).astype(np.float32).astype(np.float64)
        path = tmp_path / "x.snt"
        write_snt(path, imgs)
        back = read_snt(path)
        np.testing.assert_array_equal(back, imgs)
        write_snt(tmp_path / "y.snt", back)
        assert (tmp_path / "x.snt").read_bytes() == (tmp_path / "y.snt").read_bytes()

    def test_bad_header_raises(self, tmp_path):
        p = tmp_path / "bad.snt"
        p.write_bytes(b"NOPE 1 1 1 1\n")
        from sniclust.io import FormatError
        with pytest.raises(FormatError):
            read_snt(p)
