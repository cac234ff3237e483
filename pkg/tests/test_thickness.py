import json
from types import SimpleNamespace

import numpy as np
import pytest

from svfthick.thickness import (extract_gwi, gm_from_wmgm, regional_thickness, thickness_map,
                                thickness_report)
from svfthick.volume import GridMeta


def test_gwi_is_wm_touching_gm_face_neighbours():
    wm = np.zeros((5, 3, 3))
    gm = np.zeros((5, 3, 3))
    wm[:2] = 1.0
    gm[2:4] = 1.0
    mask = extract_gwi(wm, gm)
    assert mask[1].all() and not mask[0].any() and not mask[2:].any()


def test_gwi_ignores_diagonal_contact_and_respects_thresholds():
    wm = np.zeros((3, 3, 3))
    gm = np.zeros((3, 3, 3))
    wm[0, 0, 0] = 1.0
    gm[1, 1, 0] = 1.0
    assert not extract_gwi(wm, gm).any()
    gm[1, 0, 0] = 0.4
    assert not extract_gwi(wm, gm).any()
    assert extract_gwi(wm, gm, gm_threshold=0.3)[0, 0, 0]
    with pytest.raises(ValueError, match="wm_threshold"):
        extract_gwi(wm, gm, wm_threshold=1.0)
    with pytest.raises(ValueError, match="mismatch"):
        extract_gwi(wm, np.zeros((3, 3, 2)))


def test_gm_from_wmgm_clips():
    np.testing.assert_allclose(gm_from_wmgm(np.array([0.5, 0.9, 0.0]), np.array([1.0, 0.8, 0.3])),
                               [0.5, 0.0, 0.3])


def test_thickness_map_uses_spacing():
    u = np.zeros((2, 2, 2, 3))
    u[0, 0, 0] = (3.0, 4.0, 0.0)
    u[1, 1, 1] = (1.0, 1.0, 1.0)
    mask = np.zeros((2, 2, 2), bool)
    mask[0, 0, 0] = mask[1, 1, 1] = True
    t = thickness_map(u, mask, GridMeta((2, 2, 2), (1.0, 2.0, 0.5)))
    assert t[0, 0, 0] == pytest.approx(np.hypot(3, 8))
    assert t[1, 1, 1] == pytest.approx(np.sqrt(1 + 4 + 0.25))
    assert np.count_nonzero(t) == 2
    with pytest.raises(ValueError):
        thickness_map(u, mask, GridMeta((2, 2, 3)))


def test_regional_statistics_and_exports():
    thick = np.array([1.0, 2.0, 3.0, 4.0, 9.0]).reshape(5, 1, 1)
    mask = np.array([1, 1, 1, 1, 0], bool).reshape(5, 1, 1)
    labels = np.array([2, 2, 5, 0, 5]).reshape(5, 1, 1)
    rep = regional_thickness(thick, mask, labels)
    assert rep.count == 4
    assert rep.global_mean_mm == pytest.approx(2.5)
    assert rep.global_std_mm == pytest.approx(np.std([1, 2, 3, 4]))
    assert [(r.label, r.mean_mm, r.count) for r in rep.regions] == [(2, 1.5, 2), (5, 3.0, 1)]
    lines = rep.to_csv().splitlines()
    assert lines[0] == "label,mean_mm,std_mm,count" and lines[1].startswith("2,1.5,0.5,2")
    d = json.loads(rep.to_json())
    assert d["global"] == {"mean_mm": 2.5, "std_mm": pytest.approx(np.std([1, 2, 3, 4])), "count": 4}
    assert len(d["regions"]) == 2


def test_empty_interface_gives_nan_statistics():
    rep = regional_thickness(np.zeros((2, 2, 2)), np.zeros((2, 2, 2), bool))
    assert rep.count == 0 and np.isnan(rep.global_mean_mm) and rep.regions == []


def test_report_from_registration_result():
    wm = np.zeros((6, 2, 2))
    wmgm = np.zeros((6, 2, 2))
    wm[:2] = 1
    wmgm[:5] = 1
    phi = np.zeros((6, 2, 2, 3))
    phi[..., 0] = 3.0
    rep = thickness_report(SimpleNamespace(phi_reverse=phi), wm, wmgm, GridMeta((6, 2, 2), (0.5, 1, 1)))
    assert rep.count == 4 and rep.global_mean_mm == pytest.approx(1.5)


def test_gwi_examples():
    assert not extract_gwi(np.ones((3, 3, 3)), np.zeros((3, 3, 3))).any()
    wm = np.zeros((3, 3, 3))
    wm[1, 1, 1] = 1.0
    mask = extract_gwi(wm, 1.0 - wm)
    assert mask[1, 1, 1] and mask.sum() == 1


def test_slab_gwi_is_last_wm_layer():
    from svfthick.phantom import PhantomSpec, make_phantom
    ph = make_phantom(PhantomSpec(dims=(20, 4, 4), wm_extent=7.0, gm_thickness_mm=3.0))
    mask = extract_gwi(ph.wm, ph.gm)
    assert mask[6].all() and mask.sum() == 16


def test_thickness_map_examples():
    meta = GridMeta((3, 3, 3))
    mask = np.ones((3, 3, 3), bool)
    assert not thickness_map(np.zeros((3, 3, 3, 3)), mask, meta).any()
    u = np.broadcast_to([3.0, 0.0, 0.0], (3, 3, 3, 3))
    assert np.all(thickness_map(u, mask, meta) == 3.0)
    u = np.broadcast_to([3.0, 4.0, 0.0], (3, 3, 3, 3))
    assert np.all(thickness_map(u, mask, meta) == 5.0)


def test_region_examples():
    thick = np.array([2.0, 2.0, 4.0, 4.0]).reshape(4, 1, 1)
    mask = np.ones((4, 1, 1), bool)
    rep = regional_thickness(thick, mask, np.array([1, 1, 2, 2]).reshape(4, 1, 1))
    assert [(r.label, r.mean_mm) for r in rep.regions] == [(1, 2.0), (2, 4.0)] and rep.global_mean_mm == 3.0
    single = regional_thickness(thick, mask, np.full((4, 1, 1), 3))
    assert single.regions[0].mean_mm == single.global_mean_mm
    mask[2:] = False
    rep = regional_thickness(thick, mask, np.array([1, 1, 2, 2]).reshape(4, 1, 1))
    assert [r.label for r in rep.regions] == [1]
