import numpy as np
import pytest

from fluoroforge import prompt_factory as pf
from fluoroforge.anatomy_io import load_default_catalog
from fluoroforge.errors import CatalogError
from fluoroforge.mask_projector import MaskEntry, MaskSet


@pytest.fixture(scope="module")
def catalog():
    return load_default_catalog()


@pytest.fixture(scope="module")
def bank():
    return pf.load_template_bank(pf.default_template_bank_path())


def mask_set(entries, dims=(32, 32)):
    return MaskSet(entries=entries, image_dims=dims)


def organ_entry(class_id, mask, name="organ"):
    return MaskEntry(key=f"organ:{class_id}", class_id=class_id, name=name,
                     kind="organ", mask=mask)


class TestGroupMask:
    def test_single_member(self, catalog):
        m = np.zeros((32, 32), bool)
        m[4:9, 4:9] = True
        ms = mask_set([organ_entry(44, m)])
        out = pf.group_mask(ms, "heart", catalog)
        assert np.array_equal(out, m)

    def test_disjoint_members_area_adds(self, catalog):
        a = np.zeros((32, 32), bool)
        b = np.zeros((32, 32), bool)
        a[0:4, 0:4] = True
        b[10:14, 10:14] = True
        ms = mask_set([organ_entry(44, a), organ_entry(45, b)])
        out = pf.group_mask(ms, "heart", catalog)
        assert out.sum() == a.sum() + b.sum()

    def test_or_oracle_random_overlaps(self, catalog, rng):
        for _ in range(20):
            a = rng.random((16, 16)) > 0.5
            b = rng.random((16, 16)) > 0.5
            c = rng.random((16, 16)) > 0.5
            ms = mask_set([organ_entry(44, a), organ_entry(45, b),
                           organ_entry(46, c)], dims=(16, 16))
            out = pf.group_mask(ms, "heart", catalog)
            oracle = np.zeros((16, 16), bool)
            for y in range(16):
                for x in range(16):
                    oracle[y, x] = bool(a[y, x] or b[y, x] or c[y, x])
            assert np.array_equal(out, oracle)

    def test_unknown_group(self, catalog):
        with pytest.raises(CatalogError, match="unknown group"):
            pf.group_mask(mask_set([]), "no such group", catalog)

    def test_no_members_present_empty(self, catalog):
        ms = mask_set([organ_entry(1, np.ones((32, 32), bool))])
        out = pf.group_mask(ms, "heart", catalog)
        assert not out.any()

    def test_monotone_adding_member(self, catalog, rng):
        a = rng.random((16, 16)) > 0.5
        b = rng.random((16, 16)) > 0.5
        ms1 = mask_set([organ_entry(44, a)], dims=(16, 16))
        ms2 = mask_set([organ_entry(44, a), organ_entry(45, b)], dims=(16, 16))
        m1 = pf.group_mask(ms1, "heart", catalog)
        m2 = pf.group_mask(ms2, "heart", catalog)
        assert np.all(m2[m1])  # no pixel cleared by adding a member


class TestAugmentDescription:
    def test_empty_bank_yields_canonical_only(self):
        out = pf.augment_description("the liver", {}, np.random.default_rng(0), 30)
        assert out == ["the liver"]

    def test_cap_at_30(self, bank):
        out = pf.augment_description("the fifth left rib", bank,
                                     np.random.default_rng(0), 30)
        assert 1 <= len(out) <= 30
        assert out[0] == "the fifth left rib"
        assert len(set(out)) == len(out)

    def test_seed_replay(self, bank):
        a = pf.augment_description("the left femur", bank, np.random.default_rng(3), 30)
        b = pf.augment_description("the left femur", bank, np.random.default_rng(3), 30)
        assert a == b

    def test_max_variants_respected(self, bank):
        for cap in (1, 2, 5):
            out = pf.augment_description("the skull", bank,
                                         np.random.default_rng(0), cap)
            assert len(out) <= cap

    def test_invalid_cap(self, bank):
        with pytest.raises(ValueError):
            pf.augment_description("x", bank, np.random.default_rng(0), 0)


class TestLlmClient:
    def test_unreachable_endpoint_falls_back(self, bank):
        cfg = pf.EndpointConfig(url="http://127.0.0.1:1", timeout_s=0.05)
        out = pf.fetch_llm_variants("the liver", cfg, 5)
        assert out == []
        # and templates still work
        assert pf.augment_description("the liver", bank,
                                      np.random.default_rng(0), 5)

    def test_mock_endpoint_deduplicates(self):
        class Resp:
            def json(self):
                return {"variants": ["a", "a", " b ", "", "c", "d"]}

        cfg = pf.EndpointConfig(url="http://example.test")
        out = pf.fetch_llm_variants("x", cfg, 3, post=lambda *a, **k: Resp())
        assert out == ["a", "b", "c"]

    def test_offline_never_calls(self):
        calls = []
        cfg = pf.EndpointConfig(url="http://example.test", offline=True)
        out = pf.fetch_llm_variants("x", cfg, 3, post=lambda *a, **k: calls.append(1))
        assert out == [] and calls == []

    def test_offline_env_var(self, monkeypatch):
        calls = []
        monkeypatch.setenv(pf.OFFLINE_ENV, "1")
        cfg = pf.EndpointConfig(url="http://example.test", offline=False)
        out = pf.fetch_llm_variants("x", cfg, 3, post=lambda *a, **k: calls.append(1))
        assert out == [] and calls == []

    def test_no_url_no_call(self):
        calls = []
        out = pf.fetch_llm_variants("x", pf.EndpointConfig(), 3,
                                    post=lambda *a, **k: calls.append(1))
        assert out == [] and calls == []

    def test_malformed_payload_degrades(self):
        class Resp:
            def json(self):
                raise ValueError("not json")

        cfg = pf.EndpointConfig(url="http://example.test")
        assert pf.fetch_llm_variants("x", cfg, 3, post=lambda *a, **k: Resp()) == []


class TestNegativePrompt:
    def test_p_zero_always_none(self, catalog):
        rng = np.random.default_rng(0)
        assert all(pf.sample_negative_prompt({1}, catalog, rng, 0.0) is None
                   for _ in range(100))

    def test_p_one_single_absent(self, catalog):
        present = set(catalog.organs) - {88}
        rec = pf.sample_negative_prompt(present, catalog, np.random.default_rng(0), 1.0)
        assert rec.kind == "negative"
        assert rec.target is None
        assert rec.text == catalog.organ_description(88)

    def test_everything_present_none(self, catalog):
        rec = pf.sample_negative_prompt(set(catalog.organs), catalog,
                                        np.random.default_rng(0), 1.0)
        assert rec is None

    def test_empirical_rate(self, catalog):
        rng = np.random.default_rng(17)
        n = 100_000
        hits = sum(
            pf.sample_negative_prompt({1, 2}, catalog, rng, 0.05) is not None
            for _ in range(n))
        assert abs(hits / n - 0.05) <= 0.003

    def test_invalid_p(self, catalog):
        with pytest.raises(ValueError):
            pf.sample_negative_prompt({1}, catalog, np.random.default_rng(0), 1.5)


class TestPointPrompts:
    def gt(self):
        m = np.zeros((48, 48), bool)
        m[10:30, 12:36] = True
        return m

    def test_n_zero_empty(self):
        out = pf.sample_point_prompts(self.gt(), None, 0, np.random.default_rng(0))
        assert out.points == ()

    def test_pred_equals_gt_single_point(self):
        gt = self.gt()
        out = pf.sample_point_prompts(gt, gt, 8, np.random.default_rng(0))
        assert len(out.points) == 1
        p = out.points[0]
        assert p.positive and gt[p.v, p.u]

    def test_membership_oracle(self, rng):
        gt = self.gt()
        pred = np.zeros_like(gt)
        pred[20:40, 20:44] = True
        out = pf.sample_point_prompts(gt, pred, 8, rng)
        first = out.points[0]
        assert gt[first.v, first.u]
        error = gt ^ pred
        for p in out.points[1:]:
            assert error[p.v, p.u]
            if p.positive:
                assert gt[p.v, p.u] and not pred[p.v, p.u]
            else:
                assert pred[p.v, p.u] and not gt[p.v, p.u]

    def test_first_point_weighted_away_from_boundary(self):
        # squared distance-transform weighting concentrates the first click
        # near the region center
        gt = self.gt()
        rng = np.random.default_rng(5)
        centers = [pf.sample_point_prompts(gt, None, 1, rng).points[0]
                   for _ in range(200)]
        us = np.array([p.u for p in centers])
        vs = np.array([p.v for p in centers])
        assert abs(us.mean() - 23.5) < 2.0
        assert abs(vs.mean() - 19.5) < 2.0

    def test_empty_gt_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            pf.sample_point_prompts(np.zeros((8, 8), bool), None, 1,
                                    np.random.default_rng(0))

    def test_count_bounds(self):
        with pytest.raises(ValueError):
            pf.sample_point_prompts(self.gt(), None, 9, np.random.default_rng(0))

    def test_distinct_followups(self, rng):
        gt = self.gt()
        out = pf.sample_point_prompts(gt, None, 8, rng)
        coords = [(p.u, p.v) for p in out.points[1:]]
        assert len(set(coords)) == len(coords)


class TestPromptRecordInvariants:
    def test_negative_requires_none_target(self):
        with pytest.raises(ValueError):
            pf.PromptRecord(target="organ:3", text="x", variants=("x",),
                            kind="negative")

    def test_non_negative_requires_variants(self):
        with pytest.raises(ValueError):
            pf.PromptRecord(target="organ:3", text="x", variants=(),
                            kind="comprehensive")

    def test_variant_cap(self):
        with pytest.raises(ValueError):
            pf.PromptRecord(target="organ:3", text="x",
                            variants=tuple(str(i) for i in range(31)),
                            kind="comprehensive")
