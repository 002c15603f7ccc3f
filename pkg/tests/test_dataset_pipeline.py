import hashlib
import json
import shutil

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fluoroforge import dataset_pipeline as dp
from fluoroforge import phantoms
from fluoroforge.anatomy_io import load_catalog
from fluoroforge.carm_geometry import load_view_catalog, project_point
from fluoroforge.errors import FluoroforgeError


@pytest.fixture(scope="module")
def pipeline_ctx(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    config_path = phantoms.write_phantom_dataset(root, seed=7, random_views_per_ct=3)
    config = dp.GenerationConfig.from_json(config_path)
    catalog = load_catalog(config.catalog_path)
    inventory = dp.build_inventory(config, catalog)
    views = load_view_catalog(config.view_catalog_path)
    return config, catalog, inventory, views


class TestRle:
    def test_all_zero(self):
        assert dp.rle_encode(np.zeros((4, 4), bool)) == [16]

    def test_all_one(self):
        assert dp.rle_encode(np.ones((4, 4), bool)) == [0, 16]

    def test_known_pattern_column_major(self):
        m = np.zeros((2, 3), bool)  # H=2, W=3
        m[0, 0] = True  # column-major position 0
        m[1, 2] = True  # column-major position 5
        assert dp.rle_encode(m) == [0, 1, 4, 1]

    def test_round_trip_random(self, rng):
        for _ in range(200):
            h = int(rng.integers(1, 20))
            w = int(rng.integers(1, 20))
            m = rng.random((h, w)) > rng.random()
            runs = dp.rle_encode(m)
            back = dp.rle_decode(runs, (w, h))
            assert np.array_equal(back, m)

    def test_run_sum_mismatch(self):
        with pytest.raises(ValueError, match="run sum"):
            dp.rle_decode([3, 2], (4, 4))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_round_trip_property(self, seed):
        rng = np.random.default_rng(seed)
        m = rng.random((int(rng.integers(1, 12)), int(rng.integers(1, 12)))) > 0.5
        h, w = m.shape
        assert np.array_equal(dp.rle_decode(dp.rle_encode(m), (w, h)), m)


class TestDerivedSeeds:
    def test_stable_across_calls(self):
        assert dp.derive_seed(7, "ct_a", 3) == dp.derive_seed(7, "ct_a", 3)

    def test_sensitive_to_all_inputs(self):
        base = dp.derive_seed(7, "ct_a", 3)
        assert dp.derive_seed(8, "ct_a", 3) != base
        assert dp.derive_seed(7, "ct_b", 3) != base
        assert dp.derive_seed(7, "ct_a", 4) != base

    def test_known_value_frozen(self):
        # freeze the derivation so configs stay replayable across versions
        digest = hashlib.sha256(b"7/ct_a/3").digest()
        assert dp.derive_seed(7, "ct_a", 3) == int.from_bytes(digest[:8], "little")


class TestPlanSamples:
    def test_standard_plus_random_counts(self, pipeline_ctx):
        config, catalog, inventory, views = pipeline_ctx
        specs = dp.plan_samples(config, inventory, catalog, views)
        # thorax phantom: chest ap + chest lateral apply, plus 3 random
        per_ct = {}
        for s in specs:
            per_ct.setdefault(s.ct_id, []).append(s)
        for ct_specs in per_ct.values():
            kinds = [s.kind for s in ct_specs]
            assert kinds.count("standard") == 2
            assert kinds.count("random") == 3

    def test_applicable_series_names(self, pipeline_ctx):
        config, catalog, inventory, views = pipeline_ctx
        names = {v.name for v in dp.applicable_views(views, catalog,
                                                     inventory[0].present_class_ids)}
        assert names == {"chest ap", "chest lateral"}
        assert "hand pa left" not in names

    def test_zero_standard_config(self, pipeline_ctx):
        config, catalog, inventory, views = pipeline_ctx
        import dataclasses

        cfg = dataclasses.replace(config, include_standard_views=False,
                                  random_views_per_ct=5)
        specs = dp.plan_samples(cfg, inventory, catalog, views)
        assert len(specs) == 5 * len(inventory)
        assert all(s.kind == "random" for s in specs)

    def test_replay_identical(self, pipeline_ctx):
        config, catalog, inventory, views = pipeline_ctx
        a = dp.plan_samples(config, inventory, catalog, views)
        b = dp.plan_samples(config, inventory, catalog, views)
        assert a == b

    def test_empty_inventory(self, pipeline_ctx):
        config, catalog, _, views = pipeline_ctx
        with pytest.raises(FluoroforgeError, match="empty"):
            dp.plan_samples(config, [], catalog, views)


class TestPlaceTools:
    @pytest.fixture
    def scene(self, pipeline_ctx):
        config, catalog, inventory, views = pipeline_ctx
        assets = dp.load_assets(config, inventory[0], catalog)
        from fluoroforge.carm_geometry import ViewBounds, sample_random_view

        bounds = ViewBounds(pixel_size=2.0, image_dims=(96, 96))
        cam = sample_random_view(np.random.default_rng(0),
                                 next(iter(assets.organ_meshes.values())), bounds)
        return assets, cam

    def test_zero_range_empty(self, scene):
        assets, cam = scene
        out = dp.place_tools(np.random.default_rng(0), assets.catalog, cam,
                             (0, 0), assets.tool_meshes, 700.0)
        assert out == []

    def test_centroids_project_inside_image(self, scene):
        assets, cam = scene
        rng = np.random.default_rng(1)
        for _ in range(20):
            tools = dp.place_tools(rng, assets.catalog, cam, (1, 2),
                                   assets.tool_meshes, 700.0)
            for t in tools:
                u, v = project_point(cam, t.vertices.mean(axis=0))
                assert 0 <= u < 96 and 0 <= v < 96

    def test_seed_replay(self, scene):
        assets, cam = scene
        a = dp.place_tools(np.random.default_rng(5), assets.catalog, cam, (1, 2),
                           assets.tool_meshes, 700.0)
        b = dp.place_tools(np.random.default_rng(5), assets.catalog, cam, (1, 2),
                           assets.tool_meshes, 700.0)
        assert len(a) == len(b)
        for ta, tb in zip(a, b):
            assert np.array_equal(ta.vertices, tb.vertices)


class TestGenerateSample:
    def test_minimal_scene_manifest(self, pipeline_ctx, tmp_path):
        config, catalog, inventory, views = pipeline_ctx
        assets = dp.load_assets(config, inventory[0], catalog)
        specs = dp.plan_samples(config, inventory, catalog, views)
        manifest = dp.generate_sample(specs[0], assets, config, tmp_path)
        assert len(manifest["masks"]) >= 1
        assert len(manifest["prompts"]) >= 1
        dp.validate_manifest(manifest)
        assert (tmp_path / manifest["image"]).exists()
        assert (tmp_path / "manifests" / f"{specs[0].sample_id}.json").exists()

    def test_crash_between_image_and_manifest(self, pipeline_ctx, tmp_path,
                                              monkeypatch):
        config, catalog, inventory, views = pipeline_ctx
        assets = dp.load_assets(config, inventory[0], catalog)
        specs = dp.plan_samples(config, inventory, catalog, views)
        spec = specs[0]
        monkeypatch.setenv("_FLUOROFORGE_CRASH_BEFORE_MANIFEST", spec.sample_id)
        with pytest.raises(RuntimeError, match="injected"):
            dp.generate_sample(spec, assets, config, tmp_path)
        assert not (tmp_path / "manifests" / f"{spec.sample_id}.json").exists()
        monkeypatch.delenv("_FLUOROFORGE_CRASH_BEFORE_MANIFEST")
        manifest = dp.generate_sample(spec, assets, config, tmp_path)
        dp.validate_manifest(manifest)

    def test_regeneration_bit_identical(self, pipeline_ctx, tmp_path):
        config, catalog, inventory, views = pipeline_ctx
        assets = dp.load_assets(config, inventory[0], catalog)
        spec = dp.plan_samples(config, inventory, catalog, views)[1]
        dp.generate_sample(spec, assets, config, tmp_path / "a")
        dp.generate_sample(spec, assets, config, tmp_path / "b")
        img = f"images/{spec.sample_id}.png"
        man = f"manifests/{spec.sample_id}.json"
        assert (tmp_path / "a" / img).read_bytes() == (tmp_path / "b" / img).read_bytes()
        assert (tmp_path / "a" / man).read_bytes() == (tmp_path / "b" / man).read_bytes()

    def test_prompt_targets_have_masks(self, pipeline_ctx, tmp_path):
        config, catalog, inventory, views = pipeline_ctx
        assets = dp.load_assets(config, inventory[0], catalog)
        spec = dp.plan_samples(config, inventory, catalog, views)[2]
        manifest = dp.generate_sample(spec, assets, config, tmp_path)
        keys = {m["key"] for m in manifest["masks"]}
        for p in manifest["prompts"]:
            if p["kind"] != "negative":
                assert p["target"] in keys
                assert 1 <= len(p["variants"]) <= config.max_prompt_variants
            else:
                assert p["target"] is None

    def test_rle_masks_decode_to_dims(self, pipeline_ctx, tmp_path):
        config, catalog, inventory, views = pipeline_ctx
        assets = dp.load_assets(config, inventory[0], catalog)
        spec = dp.plan_samples(config, inventory, catalog, views)[3]
        manifest = dp.generate_sample(spec, assets, config, tmp_path)
        for m in manifest["masks"]:
            mask = dp.rle_decode(m["rle"], tuple(m["dims"]))
            assert mask.shape == (config.resolution, config.resolution)


class TestSplitDataset:
    def manifests(self, n_cts, per_ct=3):
        out = []
        for c in range(n_cts):
            for i in range(per_ct):
                out.append({"ct_id": f"ct{c}", "sample_id": f"ct{c}_{i}"})
        return out

    def test_ninety_ten(self):
        train, val = dp.split_dataset(self.manifests(10), 0.9, seed=0)
        train_cts = {s.rsplit("_", 1)[0] for s in train}
        val_cts = {s.rsplit("_", 1)[0] for s in val}
        assert len(train_cts) == 9 and len(val_cts) == 1
        assert not (train_cts & val_cts)

    def test_ct_disjointness_random_fracs(self, rng):
        for frac in (0.5, 0.7, 0.9):
            train, val = dp.split_dataset(self.manifests(7), frac, seed=3)
            train_cts = {s.rsplit("_", 1)[0] for s in train}
            val_cts = {s.rsplit("_", 1)[0] for s in val}
            assert not (train_cts & val_cts)
            assert len(val_cts) >= 1

    def test_seed_replay(self):
        a = dp.split_dataset(self.manifests(10), 0.9, seed=5)
        b = dp.split_dataset(self.manifests(10), 0.9, seed=5)
        assert a == b

    def test_too_few_cts(self):
        with pytest.raises(ValueError, match="2 CTs"):
            dp.split_dataset(self.manifests(1), 0.9, seed=0)

    def test_bad_frac(self):
        with pytest.raises(ValueError):
            dp.split_dataset(self.manifests(4), 1.0, seed=0)


def dataset_digest(root):
    """Hash of all dataset content files (excludes the timing report)."""
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != "report.json":
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


class TestRunGeneration:
    def test_full_resume_is_noop(self, pipeline_ctx, tmp_path):
        import dataclasses

        config, *_ = pipeline_ctx
        cfg = dataclasses.replace(config, output_root=str(tmp_path / "out"))
        r1 = dp.run_generation(cfg)
        assert r1["generated"] == r1["total_samples"] and not r1["failures"]
        r2 = dp.run_generation(cfg)
        assert r2["generated"] == 0
        assert r2["skipped_existing"] == r1["total_samples"]
        assert r2["resumed_complete"] is True

    def test_worker_counts_agree(self, pipeline_ctx, tmp_path):
        import dataclasses

        config, *_ = pipeline_ctx
        a = dataclasses.replace(config, output_root=str(tmp_path / "w1"), workers=1)
        b = dataclasses.replace(config, output_root=str(tmp_path / "w4"), workers=4)
        dp.run_generation(a)
        dp.run_generation(b)
        assert dataset_digest(tmp_path / "w1") == dataset_digest(tmp_path / "w4")

    def test_interrupted_resume_byte_identical(self, pipeline_ctx, tmp_path):
        import dataclasses

        config, *_ = pipeline_ctx
        ref = dataclasses.replace(config, output_root=str(tmp_path / "ref"))
        dp.run_generation(ref)

        part = tmp_path / "part"
        (part / "images").mkdir(parents=True)
        (part / "manifests").mkdir(parents=True)
        manifests = sorted((tmp_path / "ref" / "manifests").glob("*.json"))
        for m in manifests[:4]:  # simulate a crash after 4 samples
            shutil.copy(m, part / "manifests" / m.name)
            img = json.loads(m.read_text())["image"]
            shutil.copy(tmp_path / "ref" / img, part / img)
        # leave a stale temp file behind, as a crash would
        (part / "images" / "junk.png.tmp.123.456").write_bytes(b"partial")

        resumed = dataclasses.replace(config, output_root=str(part))
        rep = dp.run_generation(resumed)
        assert rep["skipped_existing"] == 4
        assert dataset_digest(part) == dataset_digest(tmp_path / "ref")

    def test_splits_are_ct_disjoint(self, pipeline_ctx, tmp_path):
        import dataclasses

        config, *_ = pipeline_ctx
        cfg = dataclasses.replace(config, output_root=str(tmp_path / "out"))
        dp.run_generation(cfg)
        splits = json.loads((tmp_path / "out" / "splits.json").read_text())
        assert set(splits["train_cts"]).isdisjoint(splits["val_cts"])
        assert len(splits["val_cts"]) == 1  # 2 CTs at 90/10: one each side
        assert splits["train"] and splits["val"]

    def test_throughput_report_shape(self, pipeline_ctx, tmp_path):
        import dataclasses
        import re

        config, *_ = pipeline_ctx
        cfg = dataclasses.replace(config, output_root=str(tmp_path / "out"))
        rep = dp.run_generation(cfg)
        for kind in ("standard", "random", "all"):
            t = rep["throughput"][kind]
            assert re.fullmatch(r"\d+\.\d ± \d+\.\d images per second",
                                t["display"])
            assert t["n"] > 0

    def test_stats_cross_check(self, pipeline_ctx, tmp_path):
        import dataclasses

        config, *_ = pipeline_ctx
        cfg = dataclasses.replace(config, output_root=str(tmp_path / "out"))
        rep = dp.run_generation(cfg)
        stats = dp.dataset_stats(tmp_path / "out")
        assert stats["n_samples"] == rep["generated"] + rep["skipped_existing"]
        assert stats["per_kind"]["standard"] == rep["throughput"]["standard"]["n"]

    def test_unwritable_root_rejected(self, pipeline_ctx, tmp_path):
        import dataclasses

        config, *_ = pipeline_ctx
        # a regular file where a directory must go defeats even root
        blocker = tmp_path / "blocker"
        blocker.write_text("")
        cfg = dataclasses.replace(config, output_root=str(blocker / "out"))
        with pytest.raises(FluoroforgeError, match="writable"):
            dp.run_generation(cfg)


class TestManifestSchema:
    def test_validation_catches_bad_prompt_target(self, pipeline_ctx, tmp_path):
        config, catalog, inventory, views = pipeline_ctx
        assets = dp.load_assets(config, inventory[0], catalog)
        spec = dp.plan_samples(config, inventory, catalog, views)[0]
        manifest = dp.generate_sample(spec, assets, config, tmp_path)
        manifest["prompts"][0]["target"] = "organ:9999"
        with pytest.raises(ValueError, match="9999"):
            dp.validate_manifest(manifest)

    def test_validation_catches_bad_rle(self, pipeline_ctx, tmp_path):
        config, catalog, inventory, views = pipeline_ctx
        assets = dp.load_assets(config, inventory[0], catalog)
        spec = dp.plan_samples(config, inventory, catalog, views)[0]
        manifest = dp.generate_sample(spec, assets, config, tmp_path)
        manifest["masks"][0]["rle"] = [1, 2, 3]
        with pytest.raises(ValueError, match="run sum"):
            dp.validate_manifest(manifest)

    def test_schema_version_pinned(self, pipeline_ctx, tmp_path):
        import jsonschema

        config, catalog, inventory, views = pipeline_ctx
        assets = dp.load_assets(config, inventory[0], catalog)
        spec = dp.plan_samples(config, inventory, catalog, views)[0]
        manifest = dp.generate_sample(spec, assets, config, tmp_path)
        manifest["schema"] = 2
        with pytest.raises(jsonschema.ValidationError):
            dp.validate_manifest(manifest)


class TestConfig:
    def test_resolution_floor(self, pipeline_ctx):
        config, *_ = pipeline_ctx
        import dataclasses

        with pytest.raises(ValueError, match="resolution"):
            dataclasses.replace(config, resolution=32)

    def test_config_json_round_trip(self, pipeline_ctx, tmp_path):
        config, *_ = pipeline_ctx
        config.to_json(tmp_path / "c.json")
        back = dp.GenerationConfig.from_json(tmp_path / "c.json")
        assert back.resolution == config.resolution
        assert back.tool_count_range == config.tool_count_range
        assert back.ct_paths == config.ct_paths
