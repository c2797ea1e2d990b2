import numpy as np
import pytest

from oracles import constant_tracker
from vesseltrack import cnn, tree
from vesseltrack.centerline import Centerline
from vesseltrack.errors import ValidationError
from vesseltrack.proximity import SEED_PROXIMITY, proximity_target
from vesseltrack.sphere import DirectionCodebook
from vesseltrack.tree import (
    TreeConfig,
    TreeExtractionError,
    covered,
    extract_tree,
    local_maxima,
    read_manifest,
    reaches_ostium,
    seed_min_value,
    write_tree,
)
from vesseltrack.volume import Volume

# axis directions first so a straight track along x stays on the voxel grid
AXES = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], float)
DIAG = np.array([[a, b, c] for a in (1, -1) for b in (1, -1) for c in (1, -1)], float) / np.sqrt(3)
CB = DirectionCodebook(np.vstack([AXES, DIAG]))


def map_with_peaks(peaks, dims=(41, 41, 41)):
    data = np.zeros(dims, np.float32)
    for (i, j, k), v in peaks:
        data[i, j, k] = v
    return Volume(data, (1.0, 1.0, 1.0))


def test_local_maxima_constant_map_is_empty():
    pts, vals = local_maxima(map_with_peaks([]), 5)
    assert pts.shape == (0, 3) and vals.shape == (0,)


def test_local_maxima_single_and_two_peaks():
    pts, vals = local_maxima(map_with_peaks([((3, 4, 5), 2.0)]), 5)
    np.testing.assert_array_equal(pts, [[3, 4, 5]])
    pts, vals = local_maxima(map_with_peaks([((3, 4, 5), 2.0), ((20, 20, 20), 7.0)]), 1)
    np.testing.assert_array_equal(pts, [[20, 20, 20]])
    assert vals.tolist() == [7.0]


def test_local_maxima_order_threshold_and_ties():
    m = map_with_peaks([((10, 1, 1), 5.0), ((2, 30, 2), 5.0), ((20, 20, 20), 9.0), ((30, 30, 30), 0.5)])
    pts, vals = local_maxima(m, 10, min_value=1.0)
    np.testing.assert_array_equal(pts, [[20, 20, 20], [2, 30, 2], [10, 1, 1]])
    # a plateau of two equal voxels is not a strict maximum
    flat = map_with_peaks([((5, 5, 5), 3.0), ((5, 5, 6), 3.0)])
    assert len(local_maxima(flat, 3)[0]) == 0
    with pytest.raises(ValidationError):
        local_maxima(flat, 0)


def test_local_maxima_world_coordinates():
    data = np.zeros((10, 10, 10), np.float32)
    data[2, 3, 4] = 1.0
    pts, _ = local_maxima(Volume(data, (2.0, 2.0, 2.0), (1.0, 0.0, -1.0)), 1)
    np.testing.assert_allclose(pts, [[5.0, 6.0, 7.0]])


def test_seed_min_value_is_two_mm_target():
    assert seed_min_value(TreeConfig()) == pytest.approx(proximity_target(2.0, SEED_PROXIMITY))
    assert seed_min_value(TreeConfig()) == pytest.approx(np.expm1(3.0))


def test_reach_and_cover_rules():
    pts = np.stack([np.arange(10.0), np.zeros(10), np.zeros(10)], axis=1)
    cl = Centerline(pts, np.full(10, 0.5), np.zeros(10))
    assert reaches_ostium(cl, [[12.0, 0, 0]], 5.0)
    assert not reaches_ostium(cl, [[15.0, 0, 0]], 5.0)
    hit = covered([[3.0, 0.4, 0], [3.0, 0.8, 0], [3.0, 1.2, 0]], cl, min_radius=1.0)
    assert hit.tolist() == [True, True, False]


def fake_maps(monkeypatch, seed_map, ostia_map):
    def predict(vol, params, cfg):
        return seed_map if params.meta["targets"] == "centerlines" else ostia_map
    monkeypatch.setattr(tree, "predict_proximity_map", predict)


def proximity_stub(targets):
    spec = cnn.table1_spec(0, channels=(2, 2, 2, 2, 2, 2), head="proximity", output_scale=np.expm1(6.0))
    p = cnn.init_params(spec, np.random.default_rng(0))
    p.meta.update(targets=targets, a="6.0", d_max="4.0" if targets == "centerlines" else "16.0", spacing="1.0")
    return p


def run_tree(monkeypatch, seeds, ostia, cfg=None):
    fake_maps(monkeypatch, map_with_peaks(seeds), map_with_peaks(ostia))
    vol = Volume(np.zeros((81, 81, 81), np.float32), (0.5, 0.5, 0.5))
    logits = np.zeros(CB.n)
    logits[[0, 1]] = 12.0
    tracker = constant_tracker(CB, logits, radius=1.0)
    return extract_tree(vol, tracker, proximity_stub("centerlines"), proximity_stub("ostia"), CB, cfg)


def test_queue_rules(monkeypatch):
    seeds = [((20, 20, 20), 100.0), ((26, 20, 20), 90.0), ((20, 10, 30), 80.0), ((5, 5, 35), 10.0)]
    ostia = [((38, 20, 20), 50.0), ((5, 35, 5), 40.0)]
    res = run_tree(monkeypatch, seeds, ostia)
    np.testing.assert_array_equal(res.ostia, [[38, 20, 20], [5, 35, 5]])
    # the low seed falls below the 2 mm threshold
    assert len(res.seeds) == 3
    # the seed on the first (accepted) line is consumed without tracking
    assert res.tracker_runs == 2 and res.consumed == 1
    assert [ln.accepted for ln in res.lines] == [True, False]
    assert len(res.accepted) == 1
    for ln in res.lines:
        assert ln.accepted == reaches_ostium(ln.centerline, res.ostia, 5.0)
    assert res.tracker_runs <= TreeConfig().num_seeds


def test_no_seeds_gives_empty_tree(monkeypatch):
    res = run_tree(monkeypatch, [], [((38, 20, 20), 50.0), ((5, 35, 5), 40.0)])
    assert res.accepted == [] and res.tracker_runs == 0


def test_missing_ostia_fail(monkeypatch):
    with pytest.raises(TreeExtractionError):
        run_tree(monkeypatch, [((20, 20, 20), 100.0)], [((38, 20, 20), 50.0)])


def test_max_lines_and_seed_budget(monkeypatch):
    seeds = [((20, 20, 20), 100.0), ((20, 10, 30), 80.0)]
    ostia = [((38, 20, 20), 50.0), ((38, 10, 30), 40.0)]
    assert len(run_tree(monkeypatch, seeds, ostia).accepted) == 2
    assert len(run_tree(monkeypatch, seeds, ostia, TreeConfig(max_lines=1)).accepted) == 1
    assert run_tree(monkeypatch, seeds, ostia, TreeConfig(num_seeds=1)).tracker_runs == 1


def test_write_tree_manifest(monkeypatch, tmp_path):
    seeds = [((20, 20, 20), 100.0), ((20, 10, 30), 80.0)]
    res = run_tree(monkeypatch, seeds, [((38, 20, 20), 50.0), ((5, 35, 5), 40.0)])
    write_tree(res, tmp_path)
    ostia, lines = read_manifest(tmp_path / "manifest.txt")
    np.testing.assert_array_equal(ostia, res.ostia)
    assert lines == [("line_000.vte", True), ("line_001.vte", False)]
    assert (tmp_path / "line_001.vte").exists()
