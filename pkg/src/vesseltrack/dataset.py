"""Phantom datasets on disk: one volume, centerline and ostia file per case."""

from __future__ import annotations

import glob
import os

import numpy as np

from . import phantom
from .centerline import read_refs, write_refs
from .errors import FormatError
from .training import TrainingData
from .volume import read_volume, write_volume


def write_case(spec: phantom.PhantomSpec, out_dir) -> str:
    vol, refs, ostia = phantom.rasterize(spec)
    base = os.path.join(out_dir, spec.name)
    write_volume(vol, base + ".vtv")
    write_refs(refs, base + ".vtc")
    phantom.write_spec(spec, base + ".spec")
    np.savetxt(base + ".ostia", np.asarray(ostia).reshape(-1, 3), fmt="%.17g")
    return base


def read_ostia(path) -> np.ndarray:
    if not os.path.exists(path):
        return np.zeros((0, 3))
    try:
        return np.loadtxt(path, ndmin=2).reshape(-1, 3)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def case_names(data_dir) -> list[str]:
    names = sorted(os.path.basename(p)[:-4] for p in glob.glob(os.path.join(data_dir, "*.vtv")))
    if not names:
        raise FileNotFoundError(f"no .vtv volumes in {data_dir}")
    return names


def read_case(data_dir, name: str) -> TrainingData:
    base = os.path.join(data_dir, name)
    refs = read_refs(base + ".vtc") if os.path.exists(base + ".vtc") else []
    return TrainingData(read_volume(base + ".vtv"), refs, read_ostia(base + ".ostia"), name)


def read_dataset(data_dir) -> list[TrainingData]:
    return [read_case(data_dir, n) for n in case_names(data_dir)]
