import os

import numpy as np
import pandas as pd
import pytest

from stylecraft.config import GuidanceConfig
from stylecraft.datagen import held_out_pairs
from stylecraft.errors import ArgumentError, ProbeGateError, ShapeError
from stylecraft.explore import Explore, prompt_length_correlation
from stylecraft.probe import ProbeModel
from stylecraft.validate import (REPORT_COLUMNS, Validate, content_score, copy_reference_baseline,
                                 gram_style_score, guidance_sweep, ordering_table, run_eval_suite,
                                 style_score, temp_consistency, warping_error)


def brute_force_warping_error(frames, flow, occluded):
    t_count, h, w, _ = frames.shape
    errors = []
    for t in range(t_count - 1):
        total, count = 0.0, 0
        for y in range(h):
            for x in range(w):
                if occluded[t, y, x]:
                    continue
                sx = min(max(x + flow[t, y, x, 0], 0), w - 1)
                sy = min(max(y + flow[t, y, x, 1], 0), h - 1)
                x0, y0 = int(np.floor(sx)), int(np.floor(sy))
                x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
                ax, ay = sx - x0, sy - y0
                nxt = frames[t + 1]
                value = ((nxt[y0, x0] * (1 - ax) + nxt[y0, x1] * ax) * (1 - ay)
                         + (nxt[y1, x0] * (1 - ax) + nxt[y1, x1] * ax) * ay)
                total += np.abs(frames[t, y, x] - value).mean()
                count += 1
        if count:
            errors.append(total / count)
    return 1000.0 * np.mean(errors) if errors else 0.0


@pytest.fixture
def gated_probe():
    probe = ProbeModel(2, 2, seed=0)
    probe.style_prototypes = np.random.default_rng(0).standard_normal(probe.style_prototypes.shape)
    probe.content_prototypes = np.random.default_rng(1).standard_normal(probe.content_prototypes.shape)
    probe.style_acc = probe.content_acc = 1.0
    return probe


def test_warping_error_matches_pixel_loop():
    rng = np.random.default_rng(0)
    for _ in range(200):
        t, h, w = rng.integers(2, 4), rng.integers(3, 6), rng.integers(3, 6)
        frames = rng.uniform(0.0, 1.0, size=(t, h, w, 3))
        flow = rng.uniform(-2.0, 2.0, size=(t - 1, h, w, 2))
        occluded = rng.random((t - 1, h, w)) < 0.3
        assert abs(warping_error(frames, flow, occluded) - brute_force_warping_error(frames, flow, occluded)) < 1e-6


def test_warping_error_of_static_video_is_zero():
    frames = np.repeat(np.random.default_rng(1).uniform(size=(1, 6, 6, 3)), 3, axis=0)
    assert warping_error(frames, np.zeros((2, 6, 6, 2))) == 0.0
    with pytest.raises(ShapeError):
        warping_error(frames, np.zeros((3, 6, 6, 2)))


def test_warping_error_of_integer_shift_is_zero():
    first = np.random.default_rng(6).uniform(size=(5, 5, 3))
    second = np.roll(first, 1, axis=1)
    flow = np.zeros((1, 5, 5, 2))
    flow[..., 0] = 1.0
    occluded = np.zeros((1, 5, 5), dtype=bool)
    occluded[:, :, -1] = True
    assert warping_error(np.stack([first, second]), flow, occluded) < 1e-9
    assert warping_error(np.stack([first, second]), flow) > 0.0


def test_temporal_consistency(gated_probe):
    rng = np.random.default_rng(2)
    image = rng.uniform(size=(32, 32, 3))
    assert temp_consistency(np.repeat(image[None], 4, axis=0), gated_probe) == pytest.approx(1.0, abs=1e-6)
    other = rng.uniform(size=(32, 32, 3))
    frames = np.stack([image, other, image])
    emb = gated_probe.embeddings(frames)
    expected = np.mean([emb[0] @ emb[1] / np.linalg.norm(emb[0]) / np.linalg.norm(emb[1])] * 2)
    assert temp_consistency(frames, gated_probe) == pytest.approx(expected, abs=1e-5)
    with pytest.raises(ArgumentError):
        temp_consistency(image[None], gated_probe)


def test_temporal_consistency_falls_with_frame_noise(gated_probe):
    rng = np.random.default_rng(7)
    scores = []
    for amplitude in (0.0, 0.05, 0.2, 0.6):
        trials = []
        for _ in range(100):
            image = rng.uniform(size=(1, 32, 32, 3))
            trials.append(temp_consistency(image + amplitude * rng.standard_normal((4, 32, 32, 3)), gated_probe))
        scores.append(np.mean(trials))
    assert scores[0] == pytest.approx(1.0, abs=1e-6)
    assert all(a > b for a, b in zip(scores, scores[1:]))


def test_self_style_score_is_one(gated_probe):
    image = np.random.default_rng(3).uniform(size=(32, 32, 3))
    score, acc = style_score(np.repeat(image[None], 3, axis=0), image, gated_probe, style_id=1)
    assert score == pytest.approx(1.0, abs=1e-6)
    assert acc in (0.0, 1.0)
    assert gram_style_score(image[None], image) == pytest.approx(1.0, abs=1e-9)


def test_content_score_checks_id(gated_probe):
    frames = np.random.default_rng(4).uniform(size=(2, 32, 32, 3))
    score, acc = content_score(frames, 1, gated_probe)
    assert -1.0 <= score <= 1.0 and 0.0 <= acc <= 1.0
    with pytest.raises(ArgumentError):
        content_score(frames, 5, gated_probe)


def test_probe_gate(tiny_model):
    probe = ProbeModel(2, 2)
    probe.style_acc, probe.content_acc = 0.99, 0.90
    with pytest.raises(ProbeGateError):
        Validate(tiny_model, probe)


def test_probe_save_and_load(gated_probe, tmp_path):
    gated_probe.save(str(tmp_path))
    loaded = ProbeModel.load(str(tmp_path))
    assert loaded.style_acc == 1.0
    assert np.array_equal(loaded.content_prototypes, gated_probe.content_prototypes)
    images = np.random.default_rng(5).uniform(size=(2, 32, 32, 3))
    assert np.allclose(loaded.embeddings(images), gated_probe.embeddings(images))


def test_eval_suite_is_reproducible(tiny_model, gated_probe, tmp_path):
    grid = dict(styles=2, contents=2, refs_per_style=1, steps=2, seed=0)
    first = run_eval_suite(tiny_model, gated_probe, str(tmp_path / 'a'), GuidanceConfig(7.5, 5.0), **grid)
    run_eval_suite(tiny_model, gated_probe, str(tmp_path / 'b'), GuidanceConfig(7.5, 5.0), **grid)
    for name in ('report.csv', 'scales.svg', 'sheet.png'):
        assert os.path.exists(str(tmp_path / 'a' / name))
    with open(str(tmp_path / 'a' / 'report.csv'), 'rb') as a, open(str(tmp_path / 'b' / 'report.csv'), 'rb') as b:
        assert a.read() == b.read()
    report = pd.read_csv(str(tmp_path / 'a' / 'report.csv'))
    assert list(report.columns) == REPORT_COLUMNS
    assert report.temp_consistency.isna().all() and report.warping_error.isna().all()
    assert report.content_score.notna().all() and report.style_score.notna().all()
    assert len(report) == len(held_out_pairs(2, 2)) + 1
    assert report.row.iloc[-1] == 'summary'
    assert report.probe_style_acc.iloc[-1] == 1.0
    assert first.summary['style_score'] == pytest.approx(report.style_score.iloc[:-1].mean(), abs=1e-5)
    with open(str(tmp_path / 'a' / 'scales.svg')) as f:
        svg = f.read()
    assert 'scale_p1_s1_l%d' % (tiny_model.config.layers - 1) in svg
    assert svg.count('id="scale_p') == 2 * 2 * tiny_model.config.layers


def test_video_eval_reports_temporal_metrics(tiny_model, gated_probe):
    report = run_eval_suite(tiny_model, gated_probe, None, GuidanceConfig(15.0, 7.5), video=True,
                            styles=1, contents=2, refs_per_style=1, steps=2, references=2)
    assert report.rows.warping_error.notna().all()
    assert np.isfinite(report.summary['temp_consistency']) and np.isfinite(report.summary['warping_error'])
    assert report.rows.temp_consistency.between(-1.0, 1.0).all()
    assert (report.rows.reference_count == 2).all()


def test_guidance_sweep_and_copy_baseline(tiny_model, gated_probe):
    sweep = guidance_sweep(tiny_model, gated_probe, lambda_s_values=(0.0, 5.0), styles=1, contents=2,
                           refs_per_style=1, steps=2)
    assert list(sweep.lambda_s) == [0.0, 5.0]
    baseline = copy_reference_baseline(gated_probe, styles=2, contents=2, refs_per_style=1)
    assert baseline.summary['style_score'] == pytest.approx(1.0, abs=1e-6)


def test_scale_factor_table(tiny_model):
    explore = Explore(tiny_model, styles=2, contents=4)
    table = explore.scale_factor_table()
    assert len(table) == 2 * 4 * tiny_model.config.layers
    rho, p = prompt_length_correlation(table)
    assert np.isnan(rho) or -1.0 <= rho <= 1.0


def test_ordering_table(tmp_path):
    full = {'content_probe_acc': 0.9, 'style_score': 0.6, 'warping_error': 10.0}
    images = {'full': full,
              'attach_to_text': {'content_probe_acc': 0.2, 'style_score': 0.8},
              'no_augmentation': {'style_score': 0.5},
              'extractor_transformer': {'style_score': 0.55},
              'extractor_mlp': {'style_score': 0.56}}
    videos = {'full': full, 'adapter_only': {'warping_error': 30.0}, 'joint': {'style_score': 0.4}}
    table = ordering_table(images, videos, str(tmp_path / 'ablation.csv'))
    passed = dict(zip(table.check, table.passed))
    assert passed['copies content without dual attention']
    assert passed['style kept without dual attention']
    assert passed['augmentation helps style']
    assert passed['temporal adaptation lowers warping error']
    assert passed['joint training loses style']
    assert passed['query transformer beats transformer']
    assert not passed['transformer beats mlp']
    assert 'more references keep style' not in passed
    assert os.path.exists(str(tmp_path / 'ablation.csv'))


def test_grid_only_scores_held_out_pairs(tiny_model, gated_probe, tiny_dataset):
    validator = Validate(tiny_model, gated_probe, styles=2, contents=2, refs_per_style=1, steps=2,
                         held_out=tiny_dataset.held_out)
    images = tiny_dataset.table[tiny_dataset.table.kind == 'image']
    seen = set(zip(images.style_id, images.content_id))
    graded = set((c['style_id'], c['content_id']) for c in validator.cells)
    assert graded == set(tiny_dataset.held_out)
    assert not graded & seen
    with pytest.raises(ArgumentError):
        Validate(tiny_model, gated_probe, styles=2, contents=2, held_out=[])
