"""In-memory training instances: GT cloud, partial view, and their shared frame."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .geometry import (
    NormTransform,
    PointCloud,
    fit_transform,
    partial_view,
    random_shape_spec,
    random_view_dir,
    sample_shape,
    FAMILIES,
)
from .kdtree import NnIndex, build_index
from .net import select_condition


@dataclass
class Instance:
    gt: PointCloud
    partial: PointCloud
    family: str = ""
    view_dir: tuple = (0.0, 0.0, -1.0)
    seed: int = 0


@dataclass
class Prepared:
    """An instance mapped into the frame of its partial view.

    Both clouds are normalized with the partial view's statistics because only
    the partial view is available at inference time.
    """

    transform: NormTransform
    gt: np.ndarray
    partial: np.ndarray
    cond: np.ndarray
    index: NnIndex


def prepare(inst: Instance, n_cond_tokens: int) -> Prepared:
    tf = fit_transform(inst.partial.points)
    gt = tf.apply(inst.gt).points
    partial = tf.apply(inst.partial).points
    return Prepared(tf, gt, partial, select_condition(partial, n_cond_tokens), build_index(gt))


def make_instance(family: str, n_points: int, seed: int) -> Instance:
    """Random shape of ``family`` seen from a random direction, reproducible from ``seed``."""
    if family not in FAMILIES:
        raise ParameterError(f"unknown shape family {family!r}")
    rng = np.random.default_rng(seed)
    spec = random_shape_spec(family, rng)
    gt = sample_shape(spec, n_points, int(rng.integers(2**31)))
    view = random_view_dir(rng)
    return Instance(gt, partial_view(gt, view), family, tuple(view), seed)


def unit_sphere_instance(n_points: int = 8192, seed: int = 0) -> Instance:
    """Unit sphere seen along -z; the single-shape overfit dataset."""
    from .geometry import ShapeSpec

    gt = sample_shape(ShapeSpec("sphere", {"radius": 1.0}), n_points, seed)
    view = (0.0, 0.0, -1.0)
    return Instance(gt, partial_view(gt, view), "sphere", view, seed)


def toy_suite(n_points: int = 8192, seed: int = 0) -> list:
    """One instance per shape family."""
    return [make_instance(f, n_points, seed * 1000 + i) for i, f in enumerate(FAMILIES)]
