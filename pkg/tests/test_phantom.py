import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from toothseg.core import NUM_TEETH, load_manifest, load_volume
from toothseg.phantom import (
    PhantomConfig,
    generate_case,
    generate_dataset,
    load_phantom_config,
    localization_phantom_config,
)

SMALL = PhantomConfig(volume_shape=(96, 96, 96), arch_center=(48.0, 76.0), arch_half_width=30.0, arch_depth=44.0,
                      occlusal_z=48.0, teeth_per_jaw=12, lesion_prevalence=0.3)


def test_config_validation():
    with pytest.raises(ValueError):
        PhantomConfig(lesion_prevalence=1.5)
    with pytest.raises(ValueError):
        PhantomConfig(volume_shape=(0, 10, 10))
    with pytest.raises(ValueError):
        PhantomConfig(teeth_per_jaw=17)
    with pytest.raises(ValueError):
        PhantomConfig(background_intensity=1.2)


def test_same_seed_identical():
    a, b = generate_case(SMALL, 3), generate_case(SMALL, 3)
    assert np.array_equal(a.image.data, b.image.data)
    assert np.array_equal(a.landmarks.coords, b.landmarks.coords)
    assert np.array_equal(a.lesion.data, b.lesion.data)
    assert a.record == b.record
    c = generate_case(SMALL, 4)
    assert not np.array_equal(a.landmarks.coords, c.landmarks.coords)


def test_all_missing():
    case = generate_case(SMALL.with_(missing_probability=1.0), 0)
    assert np.all(case.landmarks.coords == -1)
    assert case.lesion.count == 0
    assert case.cuboids == {}


def test_no_lesions():
    case = generate_case(SMALL.with_(lesion_prevalence=0.0), 0)
    assert case.lesion.count == 0
    assert not any(case.record.has_lesion)


def test_slots_follow_jaws():
    case = generate_case(SMALL.with_(missing_probability=0.0), 1)
    present = case.landmarks.valid
    assert present[:12].all() and not present[12:16].any()
    assert present[16:28].all() and not present[28:].any()
    assert case.record.jaw_label[:16] == ("upper",) * 16
    # upper teeth sit above (smaller z than) lower teeth
    assert case.landmarks.coords[:12, 2].max() < case.landmarks.coords[16:28, 2].min()


def _noise_free(cfg):
    return cfg.with_(noise_std=0.0, blur_sigma=0.0)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_construction_invariants(case_seed):
    cfg = SMALL.with_(lesion_prevalence=0.5)
    case = generate_case(cfg, case_seed)
    lm = case.landmarks
    present = lm.valid
    p = lm.coords[present]
    d = np.linalg.norm(p[:, None] - p[None], axis=-1)
    np.fill_diagonal(d, np.inf)
    assert d.min() > cfg.min_tooth_spacing
    # every lesion voxel lies within r_max of a lesion-bearing root tip
    vox = np.argwhere(case.lesion.as_bool())
    tips = case.root_tips[[k for k in range(NUM_TEETH) if case.record.has_lesion[k]]]
    if len(vox):
        dist = np.linalg.norm(vox[:, None] - tips[None], axis=-1).min(axis=1)
        assert dist.max() <= cfg.lesion_radius_range[1] + 1e-9
    # and inside the generating tooth's bounding box dilated by the lesion radius
    r = cfg.lesion_radius_range[1]
    inside = np.zeros(len(vox), bool)
    for k in np.flatnonzero(case.record.has_lesion):
        lo = lm.coords[k] - case.semi_axes[k] - r
        hi = lm.coords[k] + case.semi_axes[k] + r
        inside |= np.all((vox >= lo) & (vox <= hi), axis=1)
    assert inside.all()
    # lesion flags only on present teeth
    assert all(present[k] for k in range(NUM_TEETH) if case.record.has_lesion[k])


def test_intensity_contract():
    cfg = _noise_free(SMALL.with_(lesion_prevalence=1.0))
    case = generate_case(cfg, 2)
    img = case.image.data
    lesion = case.lesion.as_bool()
    centres = np.round(case.landmarks.coords[case.landmarks.valid]).astype(int)
    tooth_vals = img[tuple(centres.T)]
    assert np.all(tooth_vals == cfg.tooth_intensity)
    assert np.all(img[lesion] == cfg.lesion_intensity)
    assert img[0, 0, 0] == cfg.background_intensity
    assert cfg.tooth_intensity > cfg.background_intensity > cfg.lesion_intensity


def test_lesion_touches_root_tip():
    cfg = _noise_free(SMALL.with_(lesion_prevalence=1.0, missing_probability=0.0))
    case = generate_case(cfg, 5)
    mask = case.lesion.as_bool()
    for k in np.flatnonzero(case.record.has_lesion):
        tip = case.root_tips[k]
        beyond = tip + np.sign(tip[2] - case.landmarks.coords[k][2]) * np.array([0, 0, 1.0])
        assert mask[tuple(np.round(beyond).astype(int))], k


def test_infeasible_spacing():
    with pytest.raises(ValueError, match="infeasible"):
        generate_case(SMALL.with_(min_tooth_spacing=50.0), 0)
    with pytest.raises(ValueError, match="infeasible"):
        generate_case(SMALL.with_(volume_shape=(40, 40, 40)), 0)


def test_lesion_count_binomial_bound():
    # 8 cases x 24 teeth at prevalence 0.1, counted over the teeth actually present
    cfg = SMALL.with_(lesion_prevalence=0.1)
    present = lesions = 0
    for i in range(8):
        case = generate_case(cfg, i)
        present += int(case.landmarks.valid.sum())
        lesions += sum(case.record.has_lesion)
    mean = 0.1 * present
    sd = math.sqrt(present * 0.1 * 0.9)
    assert 150 <= present <= 192
    assert mean - 3 * sd <= lesions <= mean + 3 * sd


def test_localization_preset_fits_volume():
    cfg = localization_phantom_config(0)
    for i in range(20):
        case = generate_case(cfg, i)
        assert not case.landmarks.valid[16:].any()


def test_dataset_on_disk(tmp_path):
    cfg = SMALL.with_(lesion_prevalence=0.2)
    m = generate_dataset(cfg, 3, tmp_path)
    assert len(m) == 3
    back = load_manifest(tmp_path / "manifest.jsonl")
    assert [r.case_id for r in back] == ["case_0000", "case_0001", "case_0002"]
    case = generate_case(cfg, 1)
    rec = back.by_id()["case_0001"]
    vol = load_volume(back.resolve(rec.image_path))
    assert np.array_equal(vol.data, case.image.data)
    assert vol.spacing == cfg.spacing
    cub = json.loads((tmp_path / rec.cuboids_path).read_text())
    assert len(cub) == int(case.landmarks.valid.sum())
    assert load_phantom_config(tmp_path / "phantom_config.json") == cfg
    with pytest.raises(ValueError):
        generate_dataset(cfg, 0)
