import csv

import numpy as np
import pytest
from helpers import SMALL

from udfdiff.data import unit_sphere_instance
from udfdiff.diffusion import make_schedule
from udfdiff.errors import ContractError, EmptyExtractionError, ParameterError
from udfdiff.net import PLACEHOLDER, init_params
from udfdiff.sample import (
    SamplerConfig,
    Trajectory,
    check_mask,
    export_trajectory,
    extract_points,
    sample,
    stage_masks,
)
from udfdiff.store import read_cloud

SCHED = make_schedule(40, 1e-3, 0.2)


@pytest.fixture(scope="module")
def setup():
    return init_params(SMALL, 0), unit_sphere_instance(256, 0).partial


def run(setup, **kw):
    params, P = setup
    log = []
    cfg = SamplerConfig(n_points=32, **kw)
    out = sample(params, P, SCHED, cfg, on_step=lambda *a: log.append([np.copy(v) for v in a[1:]] + [a[0]]))
    return out, log


def test_first_step_placeholder_and_threading(setup):
    (_, _, _), log = run(setup)
    assert np.all(log[0][1] == PLACEHOLDER)
    for prev, cur in zip(log, log[1:]):
        np.testing.assert_array_equal(cur[1], prev[3])
    assert [r[-1] for r in log] == list(range(40, 0, -1))


def test_mask_forces_placeholder_inside_interval(setup):
    (_, _, _), log = run(setup, selfcond_mask=((10, 20),))
    for x, sc, eps, nu, t in log:
        if 10 <= t <= 20 or t == 40:
            assert np.all(sc == PLACEHOLDER)
        else:
            assert not np.all(sc == PLACEHOLDER)


def test_full_mask_equals_no_selfcond(setup):
    (a, na, _), _ = run(setup, selfcond_mask=((1, 40),), seed=3)
    params, P = setup
    b, nb, _ = sample(params, P, SCHED, SamplerConfig(n_points=32, seed=3), selfcond=False)
    np.testing.assert_array_equal(a.points, b.points)
    np.testing.assert_array_equal(na, nb)


def test_deterministic(setup):
    (a, na, _), _ = run(setup, seed=5)
    (b, nb, _), _ = run(setup, seed=5)
    np.testing.assert_array_equal(a.points, b.points)
    np.testing.assert_array_equal(na, nb)
    (c, _, _), _ = run(setup, seed=6)
    assert not np.array_equal(a.points, c.points)


def test_capture_schedule(setup):
    # every capture_every steps counted from T, plus the last step
    params, P = setup
    _, _, traj = sample(params, P, make_schedule(20), SamplerConfig(n_points=4, capture_every=5))
    assert [t for t, _, _ in traj.snapshots] == [20, 15, 10, 5, 1]


@pytest.mark.parametrize("mask", [((5, 3),), ((0, 3),), ((1, 41),), ((1, 10), (10, 12))])
def test_bad_masks(mask):
    with pytest.raises(ParameterError):
        check_mask(mask, 40)


def test_config_validation():
    for bad in (dict(n_points=0), dict(extract_tau=0.0), dict(extract_tau=0.6), dict(capture_every=0)):
        with pytest.raises(ParameterError):
            SamplerConfig(**bad).validate(1000)


def test_stage_masks_quarters():
    assert stage_masks(1000) == [(751, 1000), (501, 750), (251, 500), (1, 250)]


def test_extract_filter_semantics():
    pts = np.arange(12.0).reshape(4, 3)
    assert len(extract_points(pts, np.zeros(4), 0.05)) == 4
    out = extract_points(pts, np.array([0.01, 0.3, 0.04, 0.05]), 0.05)
    np.testing.assert_array_equal(out.points, pts[[0, 2]])
    with pytest.raises(EmptyExtractionError):
        extract_points(pts, np.full(4, 0.5), 0.05)
    with pytest.raises(ContractError):
        extract_points(pts, np.zeros(3), 0.05)


def test_export_trajectory_round_trip(setup, tmp_path):
    params, P = setup
    _, _, traj = sample(params, P, make_schedule(20), SamplerConfig(n_points=8, capture_every=5))
    files = export_trajectory(traj, tmp_path)
    assert len(files) == 6
    for (t, cloud, _), f in zip(traj.snapshots, files):
        assert f.name == f"snapshot_t{t:04d}.ipc"
        np.testing.assert_array_equal(read_cloud(f).points, cloud.points.astype(np.float32))
    rows = list(csv.reader(open(files[-1])))
    assert rows[0] == ["t", "point_index", "nu_hat"] and len(rows) == 1 + 5 * 8
    with pytest.raises(ContractError):
        export_trajectory(Trajectory(), tmp_path / "x")


def test_empty_condition_rejected(setup):
    params, _ = setup
    with pytest.raises(ParameterError):
        sample(params, np.zeros((0, 3)), SCHED, SamplerConfig(n_points=4))
