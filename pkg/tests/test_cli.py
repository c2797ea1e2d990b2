import os
import shutil

import numpy as np
import pytest

from vesseltrack import cli, cnn, phantom
from vesseltrack.centerline import read_centerline
from vesseltrack.phantom import BranchSpec, PhantomSpec
from vesseltrack.volume import PatchSpec

TINY = ["--channels", "2,2,2,2,2,2", "--ndirs", "8", "--batch", "4", "--lr-interval", "1"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = PhantomSpec("tube", dims=(61, 41, 41), noise=0.05, seed=3,
                       branches=[BranchSpec([[4, 10, 10], [26, 10, 11]], [1.5, 1.2])])
    spec_path = root / "tube.spec"
    phantom.write_spec(spec, spec_path)
    data = root / "data"
    assert cli.main(["phantom", str(spec_path), "--out", str(data)]) == 0
    return root, data


def test_phantom_writes_case_and_echo(dataset):
    root, data = dataset
    for ext in (".vtv", ".vtc", ".spec", ".ostia"):
        assert (data / f"tube{ext}").exists()
    assert (data / "manifest.txt").exists()
    assert "argv = phantom" in (data / "run.cfg").read_text()


def test_unknown_source_is_validation_error(tmp_path):
    assert cli.main(["phantom", "no-such-suite", "--out", str(tmp_path)]) == cli.EXIT_VALIDATION


def test_train_zero_iterations_gives_initialization(dataset, tmp_path):
    _, data = dataset
    out = tmp_path / "w.vtw"
    assert cli.main(["train", str(data), "--out", str(out), "--iters", "0", "--seed", "7"] + TINY) == 0
    params = cnn.load_weights(out)
    spec = cnn.table1_spec(8, channels=(2, 2, 2, 2, 2, 2))
    init = cnn.init_params(spec, np.random.default_rng(7), PatchSpec(19, 0.5, 0.0))
    for a, b in zip(params.layers, init.layers):
        for key in a:
            assert np.array_equal(a[key], b[key])
    assert (tmp_path / "w.vtw.run.cfg").exists()


@pytest.fixture(scope="module")
def weights(dataset):
    root, data = dataset
    out = root / "tracker.vtw"
    assert cli.main(["train", str(data), "--out", str(out), "--iters", "3"] + TINY) == 0
    return out


def test_track_requires_seed(dataset, weights, tmp_path):
    _, data = dataset
    code = cli.main(["track", str(data / "tube.vtv"), str(weights), "--out", str(tmp_path / "x.vte")])
    assert code == cli.EXIT_VALIDATION


def test_track_single_and_from_refs(dataset, weights, tmp_path):
    _, data = dataset
    out = tmp_path / "one.vte"
    assert cli.main(["track", str(data / "tube.vtv"), str(weights), "--seed-point", "15,10,10.5",
                     "--out", str(out)]) == 0
    cl = read_centerline(out)
    assert len(cl) >= 1 and np.allclose(cl.seed, [15, 10, 10.5])
    many = tmp_path / "many"
    assert cli.main(["track", str(data / "tube.vtv"), str(weights), "--seeds-from", str(data / "tube.vtc"),
                     "--out", str(many)]) == 0
    assert (many / "tube.0.vte").exists() and (many / "run.cfg").exists()


def test_exit_codes(dataset, weights, tmp_path):
    _, data = dataset
    vol = str(data / "tube.vtv")
    # missing file: i/o
    assert cli.main(["track", str(tmp_path / "none.vtv"), str(weights), "--seed-point", "1,1,1",
                     "--out", str(tmp_path / "a.vte")]) == cli.EXIT_IO
    # malformed weights: format error
    bad = tmp_path / "bad.vtw"
    bad.write_text("not weights\n")
    assert cli.main(["track", vol, str(bad), "--seed-point", "1,1,1", "--out", str(tmp_path / "b.vte")]) == cli.EXIT_IO
    # seed outside the volume and out-of-range threshold: validation
    assert cli.main(["track", vol, str(weights), "--seed-point", "-50,0,0",
                     "--out", str(tmp_path / "c.vte")]) == cli.EXIT_VALIDATION
    assert cli.main(["track", vol, str(weights), "--seed-point", "5,5,5", "--entropy-threshold", "2",
                     "--out", str(tmp_path / "d.vte")]) == cli.EXIT_VALIDATION
    assert cli.main(["track", vol, str(weights), "--seed-point", "5,5", "--out", "x"]) == cli.EXIT_VALIDATION
    assert cli.main(["--bogus-flag"]) == cli.EXIT_VALIDATION


def test_eval_and_radius_eval(dataset, weights, tmp_path):
    _, data = dataset
    ext = tmp_path / "ext"
    assert cli.main(["track", str(data / "tube.vtv"), str(weights), "--seeds-from", str(data / "tube.vtc"),
                     "--out", str(ext)]) == 0
    report = tmp_path / "report.txt"
    assert cli.main(["eval", str(data), str(ext), "--out", str(report)]) == 0
    text = report.read_text()
    assert "vessels=1" in text and "OV=" in text
    code = cli.main(["radius-eval", str(data), str(ext), "--out", str(tmp_path / "ba.txt")])
    # a barely trained model may produce fewer than two true-positive points
    assert code in (cli.EXIT_OK, cli.EXIT_VALIDATION)


def test_rerun_reproduces_outputs(dataset, tmp_path):
    _, data = dataset
    out = tmp_path / "w.vtw"
    argv = ["--threads", "1", "train", str(data), "--out", str(out), "--iters", "2"] + TINY
    assert cli.main(argv) == 0
    first = out.read_bytes()
    shutil.copy(out.with_suffix(".vtw.loss"), tmp_path / "loss0")
    os.remove(out)
    assert cli.main(["rerun", str(tmp_path / "w.vtw.run.cfg")]) == 0
    assert out.read_bytes() == first
    assert out.with_suffix(".vtw.loss").read_bytes() == (tmp_path / "loss0").read_bytes()
    assert cli.main(["rerun", str(tmp_path / "missing.cfg")]) == cli.EXIT_IO
