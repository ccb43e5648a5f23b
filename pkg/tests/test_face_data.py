import numpy as np
import pytest

from meer import face_data as fd
from meer.mask_patterns import enumerate_patterns


class TestSynthIdentityFace:
    def test_determinism_bit_identical(self):
        a = fd.synth_identity_face(7, 3, 112)
        b = fd.synth_identity_face(7, 3, 112)
        assert np.array_equal(a.pixels, b.pixels)

    def test_different_identities_differ(self):
        a = fd.synth_identity_face(7, 1, 112)
        b = fd.synth_identity_face(8, 1, 112)
        frac = (np.abs(a.pixels - b.pixels) > 1e-6).any(axis=0).mean()
        assert frac > 0.01

    def test_different_variations_differ(self):
        a = fd.synth_identity_face(7, 1, 112)
        b = fd.synth_identity_face(7, 2, 112)
        assert not np.array_equal(a.pixels, b.pixels)

    def test_pixel_range_over_many_images(self):
        # exhaustive scan of generated pixels
        for k in range(100):
            face = fd.synth_identity_face(k % 10, k // 10, 32)
            assert face.pixels.min() >= -1.0
            assert face.pixels.max() <= 1.0
            assert face.mask_flag == fd.REAL_UNMASKED
            assert face.pattern_class == 0

    def test_size_validation(self):
        with pytest.raises(ValueError):
            fd.synth_identity_face(0, 0, 15)


class TestOverlayMask:
    def make_face(self, size=112):
        return fd.synth_identity_face(3, 0, size)

    def test_zero_coverage_is_identity(self):
        face = self.make_face()
        # tiny polygon between pixel centers covers no pixel center
        spec = fd.MaskSpec.create([(10.1, 10.1), (10.2, 10.1), (10.2, 10.2)], 112, 112)
        assert spec.coverage_region.sum() == 0
        out, region = fd.overlay_mask(face, spec)
        assert np.array_equal(out.pixels, face.pixels)
        assert out.pattern_class == 0
        assert region.sum() == 0

    def test_lower_half_changes_exactly_lower_rows(self):
        face = self.make_face()
        color = (0.123, -0.5, 0.9)
        spec = fd.MaskSpec.create([(0, 56), (112, 56), (112, 112), (0, 112)], 112, 112,
                                  color=color)
        out, region = fd.overlay_mask(face, spec)
        # pixel-diff oracle against the rasterizer
        expected = np.zeros((112, 112), dtype=bool)
        expected[56:, :] = True
        assert np.array_equal(region, expected)
        diff = (out.pixels != face.pixels).any(axis=0)
        assert not diff[:56, :].any()
        tex = np.array(color, dtype=np.float32)[:, None, None]
        assert np.array_equal(out.pixels[:, 56:, :], np.broadcast_to(tex, (3, 56, 112)))

    def test_solid_fill_is_idempotent(self):
        face = self.make_face()
        spec = fd.MaskSpec.create([(0, 56), (112, 56), (112, 112), (0, 112)], 112, 112)
        once, _ = fd.overlay_mask(face, spec)
        relabeled = fd.AlignedFace(once.pixels, once.identity_label)
        twice, _ = fd.overlay_mask(relabeled, spec)
        assert np.array_equal(once.pixels, twice.pixels)

    def test_outside_region_bit_identical_random_specs(self):
        rng = np.random.default_rng(11)
        face = self.make_face(48)
        for _ in range(10):
            spec = fd.sample_mask_spec(48, 48, rng)
            out, region = fd.overlay_mask(face, spec)
            outside = ~region
            assert np.array_equal(out.pixels[:, outside], face.pixels[:, outside])
            assert out.mask_flag == fd.SIMULATED_MASKED

    def test_pattern_class_matches_region(self):
        vocab = enumerate_patterns(4)
        face = self.make_face()
        rng = np.random.default_rng(5)
        spec = fd.sample_mask_spec(112, 112, rng)
        out, region = fd.overlay_mask(face, spec, vocab)
        from meer.mask_patterns import pattern_class_of_region
        assert out.pattern_class == pattern_class_of_region(region, vocab)
        assert out.pattern_class > 0

    def test_empty_polygon_rejected(self):
        face = self.make_face()
        with pytest.raises(ValueError):
            fd.MaskSpec.create([], 112, 112)
        with pytest.raises(ValueError):
            fd.rasterize_polygon([(0, 0), (5, 5)], 112, 112)

    def test_out_of_bounds_polygon_rejected(self):
        with pytest.raises(ValueError):
            fd.MaskSpec.create([(0, 0), (200, 0), (0, 200)], 112, 112)

    def test_masked_face_cannot_be_remasked(self):
        face = self.make_face()
        spec = fd.MaskSpec.create([(0, 56), (112, 56), (112, 112), (0, 112)], 112, 112)
        out, _ = fd.overlay_mask(face, spec)
        with pytest.raises(ValueError):
            fd.overlay_mask(out, spec)

    def test_noise_fill_deterministic(self):
        face = self.make_face(48)
        poly = [(0, 24), (48, 24), (48, 48), (0, 48)]
        spec = fd.MaskSpec.create(poly, 48, 48, fill_texture="noise", noise_seed=9)
        a, _ = fd.overlay_mask(face, spec)
        b, _ = fd.overlay_mask(face, spec)
        assert np.array_equal(a.pixels, b.pixels)


class TestImageIO:
    def test_uint8_round_trip(self, tmp_path):
        face = fd.synth_identity_face(1, 1, 32)
        p = tmp_path / "f.png"
        fd.save_image(face.pixels, p)
        loaded = fd.load_image(p)
        # 8-bit quantization: worst case half a step of 2/255
        assert np.abs(loaded - face.pixels).max() <= (1.0 / 127.5)
        assert loaded.dtype == np.float32
        assert loaded.shape == (3, 32, 32)

    def test_conversion_formula(self):
        arr = np.zeros((2, 2, 3), dtype=np.uint8)
        arr[0, 0] = (0, 127, 255)
        out = fd.from_uint8(arr)
        assert out[0, 0, 0] == -1.0
        assert abs(out[1, 0, 0] - (127 / 127.5 - 1.0)) < 1e-7
        assert abs(out[2, 0, 0] - (255 / 127.5 - 1.0)) < 1e-7

    def test_unreadable_file(self, tmp_path):
        p = tmp_path / "junk.png"
        p.write_bytes(b"not a png")
        with pytest.raises(OSError):
            fd.load_image(p)


class TestManifests:
    def test_empty_root(self, tmp_path):
        m = fd.build_manifest(tmp_path)
        assert m.records == []
        assert m.num_identities == 0

    def test_counting_and_labels(self, tmp_path):
        for name in ("bob", "alice"):
            d = tmp_path / name
            d.mkdir()
            for v in range(3):
                face = fd.synth_identity_face(hash(name) % 100, v, 32)
                fd.save_image(face.pixels, d / f"img{v:03d}.png")
        m = fd.build_manifest(tmp_path)
        assert len(m.records) == 6
        assert sorted({r.identity_label for r in m.records}) == [0, 1]
        assert m.num_identities == 2
        # sorted directory order: alice -> 0, bob -> 1
        assert all(r.identity_label == 0 for r in m.records if "alice" in r.path)

    def test_empty_identity_dir_skipped_with_warning(self, tmp_path):
        (tmp_path / "empty_id").mkdir()
        d = tmp_path / "real_id"
        d.mkdir()
        fd.save_image(fd.synth_identity_face(0, 0, 32).pixels, d / "img000.png")
        m = fd.build_manifest(tmp_path)
        assert len(m.warnings) == 1
        assert m.num_identities == 1

    def test_unreadable_file_error_lists_path(self, tmp_path):
        d = tmp_path / "id0"
        d.mkdir()
        bad = d / "broken.png"
        bad.write_bytes(b"nope")
        with pytest.raises(OSError, match="broken.png"):
            fd.build_manifest(tmp_path)

    def test_pairing_by_provenance(self, tmp_path):
        manifest = fd.synthesize_dataset(tmp_path, n_ids=4, imgs_per_id=8,
                                         masked_ratio=0.25, size=32, seed=3)
        rebuilt = fd.build_manifest(tmp_path, pairing="masked_unmasked")
        masked = [r for r in rebuilt.records if r.mask_flag == fd.SIMULATED_MASKED]
        assert len(masked) == len(manifest.masked_records()) == 4 * 2
        by_path = {r.path: r for r in rebuilt.records}
        for r in masked:
            assert r.paired_unmasked_path in by_path
            assert by_path[r.paired_unmasked_path].identity_label == r.identity_label
            assert by_path[r.paired_unmasked_path].mask_flag == fd.REAL_UNMASKED

    def test_round_trip(self, tmp_path):
        manifest = fd.synthesize_dataset(tmp_path / "d", n_ids=2, imgs_per_id=4,
                                         masked_ratio=0.25, size=32, seed=1)
        path = tmp_path / "m.tsv"
        fd.write_manifest(manifest, path)
        again = fd.read_manifest(path)
        assert again.records == manifest.records
        assert again.num_identities == manifest.num_identities

    def test_read_checks_referenced_files(self, tmp_path):
        path = tmp_path / "m.tsv"
        path.write_text("ghost.png\t0\treal_unmasked\t0\t-\n")
        with pytest.raises(FileNotFoundError, match="ghost.png"):
            fd.read_manifest(path)

    def test_non_contiguous_labels_rejected(self, tmp_path):
        img = tmp_path / "a.png"
        fd.save_image(fd.synth_identity_face(0, 0, 32).pixels, img)
        path = tmp_path / "m.tsv"
        path.write_text(f"{img}\t0\treal_unmasked\t0\t-\n{img}\t2\treal_unmasked\t0\t-\n")
        with pytest.raises(ValueError, match="contiguous"):
            fd.read_manifest(path)


class TestSynthesizeDataset:
    def test_counts_and_pairing(self, tmp_path):
        m = fd.synthesize_dataset(tmp_path, n_ids=4, imgs_per_id=2, masked_ratio=0.5,
                                  size=32, seed=0)
        assert len(m.records) == 8
        masked = m.masked_records()
        assert len(masked) == 4
        for r in masked:
            assert r.paired_unmasked_path is not None
            assert r.pattern_class > 0
        labels = sorted({r.identity_label for r in m.records})
        assert labels == [0, 1, 2, 3]

    def test_deterministic(self, tmp_path):
        m1 = fd.synthesize_dataset(tmp_path / "a", 2, 4, 0.25, size=32, seed=7)
        m2 = fd.synthesize_dataset(tmp_path / "b", 2, 4, 0.25, size=32, seed=7)
        imgs1 = [fd.load_image(r.path) for r in m1.records]
        imgs2 = [fd.load_image(r.path) for r in m2.records]
        for a, b in zip(imgs1, imgs2):
            assert np.array_equal(a, b)

    def test_ratio_too_high_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            fd.synthesize_dataset(tmp_path, 2, 2, 1.0, size=32)
