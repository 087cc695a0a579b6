import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from roughctl.builder import (BuildStats, SweepRequest, auto_filter, background_change, build_dataset,
                              load_dataset, save_dataset, sweep_alpha_map, sweep_generate, sweep_generate_batch)
from roughctl.config import SweepConfig
from roughctl.model import sample, to_unit
from roughctl.shapes import BACKGROUND_COLOR, dilate

SIZE = 16
BG = np.asarray(BACKGROUND_COLOR)[:, None, None] * np.ones((3, SIZE, SIZE))


class StubOracle:
    """Confidence looked up per alpha, keyed by how many pixels of the image are red."""

    def __init__(self, conf=0.95):
        self.conf = conf
        self.calls = 0

    def confidence(self, images, cls):
        self.calls += 1
        images = np.asarray(images)
        if callable(self.conf):
            return np.array([self.conf(img) for img in images])
        return np.full(len(images), self.conf)


def square_mask(lo=5, hi=11):
    m = np.zeros((SIZE, SIZE), bool)
    m[lo:hi, lo:hi] = True
    return m


def painted(mask, colour=(0.9, 0.1, 0.1)):
    img = BG.copy()
    img[:, mask] = np.asarray(colour)[:, None]
    return img


# -- sweep maps -----------------------------------------------------------------


@settings(max_examples=100)
@given(arrays(bool, (12, 12)), st.sampled_from([0.0, 0.2, 0.6, 1.0]), st.integers(0, 3))
def test_sweep_map_is_alpha_near_object_and_one_elsewhere(m, alpha, r):
    a = sweep_alpha_map(m, alpha, r)
    region = dilate(m, r)
    assert (a[region] == alpha).all()
    assert (a[~region] == 1.0).all()


def test_sweep_map_examples():
    m = np.zeros((5, 5), bool)
    m[2, 2] = True
    a = sweep_alpha_map(m, 0.0, 1)
    assert a.sum() == 25 - 5          # radius-1 disk is the centre plus four neighbours
    np.testing.assert_array_equal(sweep_alpha_map(m, 0.4, 0), np.where(m, 0.4, 1.0))


# -- filter ---------------------------------------------------------------------


def test_background_change_examples():
    src = np.zeros((3, 4, 4))
    img = src.copy()
    img[:, 0, 0] = 1.0
    region = np.zeros((4, 4), bool)
    assert background_change(img, src, region) == pytest.approx(1 / 16)
    region[0, 0] = True
    assert background_change(img, src, region) == 0.0
    assert background_change(img, src, np.ones((4, 4), bool)) == 0.0


def test_filter_prefers_the_highest_passing_alpha():
    m = square_mask()
    clean = painted(m)
    conf = {1.0: 0.5, 0.8: 0.95, 0.6: 0.99, 0.4: 0.99}
    cands = [(a, clean + a * 1e-3) for a in conf]
    oracle = StubOracle(lambda img: conf[round(float(img[0, 0, 0] - clean[0, 0, 0]) * 1e3, 1)])
    res = auto_filter(cands, 1, m, clean, oracle, SweepConfig())
    assert res.alpha == 0.8
    assert [s["pass"] for s in res.candidate_scores] == [False, True, True, True]
    np.testing.assert_array_equal(res.masks.m_init, m)


def test_filter_rejects_background_drift():
    m = square_mask()
    src = painted(m)
    drifted = src.copy()
    drifted[:, ~m] += 0.15        # a global tint: too faint to segment, too strong to keep
    cfg = SweepConfig()
    assert background_change(drifted, src, dilate(m, cfg.dilation_radius)) > cfg.tau_bg
    res = auto_filter([(1.0, drifted), (0.0, src)], 0, m, src, StubOracle(0.95), cfg)
    assert res.alpha == 0.0


def test_filter_rejects_low_confidence_and_empty_candidates():
    m = square_mask()
    src = painted(m)
    assert auto_filter([(1.0, src)], 0, m, src, StubOracle(0.89), SweepConfig()) is None
    assert auto_filter([], 0, m, src, StubOracle(), SweepConfig()) is None


def test_filter_derives_m_alt_from_the_generated_image():
    m = square_mask(5, 11)
    grown = square_mask(3, 13)
    res = auto_filter([(0.0, painted(grown))], 0, m, painted(grown), StubOracle(), SweepConfig())
    np.testing.assert_array_equal(res.masks.m_alt, grown)
    np.testing.assert_array_equal(res.masks.m_conflict, grown & ~m)


# -- sweep generation -----------------------------------------------------------


@pytest.fixture
def cond():
    yy, xx = np.mgrid[:SIZE, :SIZE]
    m = (xx - 8) ** 2 + (yy - 8) ** 2 <= 25
    return m, m * 0.5


def test_sweep_returns_one_image_per_grid_value(tiny_model, cond):
    m, c = cond
    cfg = SweepConfig(alpha_grid=(1.0, 0.5, 0.0), sample_steps=4)
    out = sweep_generate(tiny_model, c, 2, m, cfg, seed=5)
    assert [a for a, _ in out] == [1.0, 0.5, 0.0]
    assert all(img.shape == (3, SIZE, SIZE) and 0 <= img.min() and img.max() <= 1 for _, img in out)
    assert not np.array_equal(out[0][1], out[2][1])


def test_alpha_one_entry_equals_plain_conditioned_sampling(tiny_model, cond):
    m, c = cond
    cfg = SweepConfig(alpha_grid=(1.0, 1.0), sample_steps=4)
    swept = sweep_generate(tiny_model, c, 2, m, cfg, seed=5)
    cond_t = torch.as_tensor(np.stack([c, c])[:, None], dtype=torch.float32)
    plain = to_unit(sample(tiny_model, [2, 2], [5, 5], cond=cond_t, scale=1.0, steps=4))
    np.testing.assert_array_equal(swept[0][1], plain[0])


def test_sweep_batches_match_request_order(tiny_model, cond):
    m, c = cond
    cfg = SweepConfig(alpha_grid=(1.0, 0.0), sample_steps=3)
    reqs = [SweepRequest(c, 1, m, 3), SweepRequest(c, 4, m, 8)]
    out = sweep_generate_batch(tiny_model, reqs, cfg)
    assert len(out) == 2 and all(len(o) == 2 for o in out)
    assert sweep_generate_batch(tiny_model, [], cfg) == []
    with pytest.raises(ValueError):
        sweep_generate_batch(tiny_model, reqs, SweepConfig(alpha_grid=()))


# -- dataset build --------------------------------------------------------------

FAST = SweepConfig(alpha_grid=(1.0, 0.0), sample_steps=2, tau_bg=1.0)


def test_build_accounting_and_partial_status(tiny_model):
    flip = iter(np.tile([0.95, 0.1, 0.1, 0.95], 20))
    oracle = StubOracle(lambda img: next(flip))
    ds = build_dataset(tiny_model, oracle, 50, "depthlike", FAST, seed=0, max_attempts=6, chunk=4)
    s = ds.stats
    assert s.attempts == 6 and s.accepted + s.rejected == s.attempts
    assert ds.status == "partial" and len(ds) == s.accepted
    assert sum(s.alpha_histogram.values()) == s.accepted


def test_build_stops_at_target(tiny_model):
    ds = build_dataset(tiny_model, StubOracle(), 3, "edge", FAST, seed=1, chunk=2)
    assert len(ds) == 3 and ds.status == "complete"
    assert ds.stats.attempts == 3
    assert [s.sample_id for s in ds.samples] == [0, 1, 2]
    assert all(s.cls_alt != s.source_cls for s in ds.samples)
    assert all(s.chosen_alpha == 1.0 for s in ds.samples)


def test_zero_target_builds_nothing(tiny_model):
    oracle = StubOracle()
    ds = build_dataset(tiny_model, oracle, 0, "depthlike", FAST, seed=0)
    assert len(ds) == 0 and ds.stats.attempts == 0 and oracle.calls == 0
    assert ds.status == "complete"


def test_build_is_deterministic(tiny_model):
    a = build_dataset(tiny_model, StubOracle(), 2, "depthlike", FAST, seed=4)
    b = build_dataset(tiny_model, StubOracle(), 2, "depthlike", FAST, seed=4)
    assert all(x.same_as(y) for x, y in zip(a.samples, b.samples))


def test_save_load_round_trip(tiny_model, tmp_path):
    ds = build_dataset(tiny_model, StubOracle(), 3, "depthlike", FAST, seed=2)
    save_dataset(ds, tmp_path / "ds")
    back = load_dataset(tmp_path / "ds")
    assert len(back) == 3
    assert all(x.same_as(y) for x, y in zip(ds.samples, back.samples))
    assert back.stats.to_dict() == ds.stats.to_dict()
    assert back.sweep == ds.sweep and back.status == ds.status
    manifest = json.loads((tmp_path / "ds" / "manifest.json").read_text())
    assert set(manifest["samples"][0]["files"]) == {"condition", "target", "m_init", "m_alt", "m_conflict", "m_bg"}


def test_loading_a_foreign_manifest_fails(tmp_path):
    (tmp_path / "manifest.json").write_text(json.dumps({"schema": "other"}))
    with pytest.raises(ValueError):
        load_dataset(tmp_path)


def test_subset_keeps_prefix(tiny_model):
    ds = build_dataset(tiny_model, StubOracle(), 3, "depthlike", FAST, seed=2)
    assert [s.sample_id for s in ds.subset(2).samples] == [0, 1]


def test_pass_rate_of_empty_stats():
    assert BuildStats().pass_rate == 0.0
    assert BuildStats(4, 1, 3).pass_rate == 0.25


def test_sweep_config_validation():
    with pytest.raises(ValueError):
        SweepConfig(alpha_grid=(0.0, 1.0))
    with pytest.raises(ValueError):
        SweepConfig(dilation_radius=-1)
