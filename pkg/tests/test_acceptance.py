"""End-to-end acceptance criteria.

Each test records one PASS/FAIL verdict line (printed immediately and
repeated in the terminal summary) and then asserts it. Thresholds are the
stated ones; nothing here is tuned to force a pass.
"""

import csv
import time
from pathlib import Path

import numpy as np
import pytest
from conftest import VERDICTS
from helpers import corrupted_files, gradcheck, small_problem

from udfdiff import autograd as ag
from udfdiff.cli import main
from udfdiff.data import prepare, unit_sphere_instance
from udfdiff.diffusion import make_schedule, posterior_step, q_sample
from udfdiff.errors import FormatError, IncompatibleCheckpointError
from udfdiff.geometry import PointCloud, ShapeSpec, sample_shape
from udfdiff.kdtree import brute_force_nn, build_index
from udfdiff.metrics import evaluate, evaluate_bruteforce, evaluate_in_gt_frame
from udfdiff.net import GROUPS, NetConfig, init_params
from udfdiff.sample import SamplerConfig, extract_points, sample
from udfdiff.store import (
    checkpoint_bytes,
    cloud_bytes,
    load_checkpoint,
    read_cloud,
    save_checkpoint,
    write_cloud,
)
from udfdiff.train import TrainConfig, train


def verdict(number, name, ok, detail):
    line = f"criterion {number:>2} {name:<28} {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    VERDICTS.append(line)
    return ok


def test_c01_metric_identity_anchor():
    # 1-D layouts with chosen one-sided means: gt = {0}, pred = {d1, -d2}
    # gives acc = (d1 + d2) / 2 and comp = min(d1, d2)
    def layout(acc, comp):
        d1 = 2 * acc - comp
        gt = np.zeros((1, 3))
        pred = np.array([[d1, 0, 0], [-comp, 0, 0]])
        return evaluate(pred, gt)

    a = layout(0.104, 0.087)
    b = layout(0.342, 0.214)
    checks = [
        abs(a.acc - 0.104) < 1e-12 and abs(a.comp - 0.087) < 1e-12,
        a.cd == a.acc + a.comp and abs(a.cd - 0.190) <= 0.002,
        b.cd == b.acc + b.comp and abs(b.cd - 0.556) < 1e-12,
    ]
    ok = verdict(1, "metric identity anchor", all(checks),
                 f"cd={a.cd:.6f} (vs 0.190) and cd={b.cd:.6f} (vs 0.556)")
    assert ok


def test_c02_oracle_equivalence():
    t0 = time.time()
    rng = np.random.default_rng(2)
    mismatched = 0
    for _ in range(100):
        pred = rng.standard_normal((int(rng.integers(1, 501)), 3))
        gt = rng.standard_normal((int(rng.integers(1, 501)), 3))
        rho = float(rng.uniform(0.05, 0.5))
        fast, slow = evaluate(pred, gt, rho).as_dict(), evaluate_bruteforce(pred, gt, rho).as_dict()
        if any(np.float64(fast[k]).tobytes() != np.float64(slow[k]).tobytes() for k in fast):
            mismatched += 1
    ref = rng.standard_normal((2000, 3))
    queries = rng.standard_normal((1000, 3))
    d_tree, i_tree = build_index(ref).query(queries)
    d_bf, i_bf = brute_force_nn(queries, ref)
    nn_ok = np.array_equal(i_tree, i_bf) and d_tree.tobytes() == d_bf.tobytes()
    elapsed = time.time() - t0
    ok = verdict(2, "oracle equivalence", mismatched == 0 and nn_ok and elapsed <= 60,
                 f"{mismatched}/100 metric mismatches, NN exact={nn_ok}, {elapsed:.1f}s")
    assert ok


def test_c03_gradient_correctness():
    t0 = time.time()
    rng = np.random.default_rng(3)
    heads = int(rng.choice([1, 2, 4]))
    cfg = NetConfig(
        d_model=heads * int(rng.integers(2, 5)),
        n_heads=heads,
        n_cond_tokens=int(rng.integers(4, 9)),
        time_embed_dim=2 * int(rng.integers(1, 4)),
        depth=int(rng.integers(1, 3)),
        mlp_ratio=int(rng.integers(1, 3)),
    )
    params, inp = small_problem(seed=3, cfg=cfg)
    worst, records = gradcheck(params, inp, n_coords=240, h=1e-5, seed=3)
    groups = {name.split(".")[0] for name, *_ in records}
    elapsed = time.time() - t0
    ok = verdict(3, "gradient correctness",
                 worst <= 1e-4 and len(records) >= 200 and groups == set(GROUPS) and elapsed <= 120,
                 f"max rel err {worst:.2e} over {len(records)} coords, {len(groups)} groups, {elapsed:.1f}s")
    assert ok


def test_c04_schedule_sanity():
    s = make_schedule()
    ab = s.alpha_bar[1:]
    rng = np.random.default_rng(4)
    x0 = np.ones((100_000, 3))
    xt = q_sample(x0, s.T, rng.standard_normal(x0.shape), s).points
    mu, var = xt.mean(0), xt.var(0)
    ok = verdict(4, "schedule sanity",
                 bool(np.all(np.diff(ab) < 0)) and ab[-1] <= 1e-4
                 and np.all(np.abs(mu) <= 0.05) and np.all((var >= 0.9) & (var <= 1.1)),
                 f"ab_T={ab[-1]:.3e} mean={np.round(mu, 4).tolist()} var={np.round(var, 4).tolist()}")
    assert ok


def test_c05_oracle_noise_inversion():
    s = make_schedule()
    x0 = sample_shape(ShapeSpec("torus", {"major": 1.0, "minor": 0.3}), 512, 5).points
    rng = np.random.default_rng(5)
    x = q_sample(x0, s.T, rng.standard_normal(x0.shape), s).points
    for t in range(s.T, 0, -1):
        e = (x - np.sqrt(s.alpha_bar[t]) * x0) / np.sqrt(1 - s.alpha_bar[t])
        z = rng.standard_normal(x.shape) if t > 1 else None
        x = posterior_step(x, e, t, s, z).points
    cd = evaluate(x, x0).cd
    ok = verdict(5, "perfect-noise inversion", cd <= 1e-2, f"chamfer {cd:.3e}")
    assert ok


# desk config for the overfit run: 2048 queries per step, split over 8
# independently drawn timesteps; see README for the choices
OVERFIT_NET = NetConfig(d_model=64)
OVERFIT_TRAIN = TrainConfig(lr=1e-3, steps=2000, batch=8, n_query=256)
OVERFIT_SAMPLER = SamplerConfig(n_points=6144, extract_tau=0.05, seed=0)


def test_c06_overfit_convergence():
    t0 = time.time()
    inst = unit_sphere_instance(8192, 0)
    params = init_params(OVERFIT_NET, 0)
    sched = make_schedule()
    history = train(params, [prepare(inst, OVERFIT_NET.n_cond_tokens)], sched, OVERFIT_TRAIN)
    losses = np.array([r["loss"] for r in history])
    drop = losses[:50].mean() / losses[-50:].mean()
    with ag.no_grad():
        x0, nu, _ = sample(params, inst.partial, sched, OVERFIT_SAMPLER)
    try:
        cloud = extract_points(x0, nu, OVERFIT_SAMPLER.extract_tau)
    except Exception:
        cloud = PointCloud(np.zeros((0, 3)))
    rep = evaluate_in_gt_frame(cloud, inst.gt) if len(cloud) else None
    elapsed = time.time() - t0
    loss_ok = drop >= 10
    f1_ok = rep is not None and rep.f1 >= 90 and rep.cd <= 0.1
    time_ok = elapsed <= 15 * 60
    verdict("6a", "overfit: loss drop >= 10x", loss_ok, f"first/last 50-step mean ratio {drop:.2f}")
    verdict("6b", "overfit: F1>=90, CD<=0.1", f1_ok,
            f"{len(cloud)} extracted points, "
            + (f"F1={rep.f1:.2f} CD={rep.cd:.4f}" if rep else "nothing extracted"))
    verdict("6c", "overfit: runtime <= 15 min", time_ok, f"{elapsed:.0f}s")
    assert loss_ok and f1_ok and time_ok


TOY_CONFIG = """\
d_model = 32
n_heads = 4
n_cond_tokens = 128
batch = 8
n_query = 128
steps = 3000
lr = 1e-3
n_points = 2048
"""


@pytest.fixture(scope="module")
def toy_suite_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    (root / "toy.cfg").write_text(TOY_CONFIG)
    assert main(["gen-data", "--out", str(root / "data"), "--n-shapes", "5", "--points", "4096",
                 "--seed", "7"]) == 0
    return root


def _summary(path):
    return {r["variant"]: float(r["mean_f1"]) for r in csv.DictReader(open(path))}


@pytest.mark.slow
def test_c07_selfcond_direction(toy_suite_dir):
    t0 = time.time()
    out = toy_suite_dir / "c07"
    assert main(["ablate", "--data", str(toy_suite_dir / "data"), "--config",
                 str(toy_suite_dir / "toy.cfg"), "--out", str(out), "--variants", "on,off",
                 "--seeds", "5"]) == 0
    s = _summary(out / "summary.csv")
    elapsed = time.time() - t0
    ok = verdict(7, "self-conditioning direction",
                 s["on"] >= s["off"] - 1.0 and elapsed <= 2 * 3600,
                 f"mean F1 on={s['on']:.2f} off={s['off']:.2f} over 5 seeds, {elapsed:.0f}s")
    assert ok


def test_c08_stage_mask_report(toy_suite_dir):
    out = toy_suite_dir / "c08"
    assert main(["ablate", "--data", str(toy_suite_dir / "data"), "--config",
                 str(toy_suite_dir / "toy.cfg"), "--out", str(out), "--variants", "stages",
                 "--seeds", "1"]) == 0
    rows = list(csv.DictReader(open(out / "ablation.csv")))
    s = _summary(out / "summary.csv")
    masked = {k: v for k, v in s.items() if k.startswith("mask_")}
    ok = verdict(8, "stage-mask report",
                 len(s) == 5 and len(masked) == 4
                 and all(s["stage_unmasked"] >= v - 1.0 for v in masked.values()),
                 f"{len(rows)} rows; unmasked F1={s['stage_unmasked']:.2f}; "
                 + ", ".join(f"{k}={v:.2f}" for k, v in masked.items()))
    assert ok


DET_CONFIG = """\
d_model = 16
n_heads = 2
n_cond_tokens = 32
n_query = 256
steps = 40
lr = 1e-3
n_points = 256
T = 200
"""


def _tree_bytes(root):
    out = {}
    for f in sorted(Path(root).rglob("*")):
        if not f.is_file():
            continue
        data = f.read_bytes()
        if f.name == "log.csv":
            # wall_ms is elapsed wall-clock time, the one nondeterministic column
            rows = list(csv.reader(data.decode().splitlines()))
            data = repr([r[:-1] for r in rows]).encode()
        out[str(f.relative_to(root))] = data
    return out


def test_c09_determinism(tmp_path):
    t0 = time.time()
    (tmp_path / "det.cfg").write_text(DET_CONFIG)
    trees = []
    for k in range(2):
        run = tmp_path / f"run{k}"
        assert main(["gen-data", "--out", str(run / "data"), "--n-shapes", "3", "--points", "2048",
                     "--seed", "9"]) == 0
        assert main(["train", "--data", str(run / "data"), "--config", str(tmp_path / "det.cfg"),
                     "--out", str(run / "train"), "--save-every", "20"]) == 0
        assert main(["sample", "--ckpt", str(run / "train" / "model.ipk"),
                     "--input", str(run / "data" / "partial_0001.ipc"), "--out", str(run / "sample"),
                     "--seed", "3", "--capture-every", "50"]) == 0
        trees.append(_tree_bytes(run))
    same = trees[0].keys() == trees[1].keys() and all(trees[0][k] == trees[1][k] for k in trees[0])
    differing = [k for k in trees[0] if trees[0][k] != trees[1].get(k)]
    elapsed = time.time() - t0
    ok = verdict(9, "determinism", same and elapsed <= 300,
                 f"{len(trees[0])} files compared, {len(differing)} differ, {elapsed:.1f}s")
    assert ok, differing


def test_c10_persistence(tmp_path):
    t0 = time.time()
    rng = np.random.default_rng(10)
    clouds_ok = True
    for n in (1, 7, 1000):
        # storage is 32-bit: values must come back as their float32 rounding, bit for bit
        pts = rng.standard_normal((n, 3)) * 10.0 ** rng.integers(-30, 30, size=(n, 3))
        pts.flat[0] = -0.0
        c = PointCloud(pts, normals=rng.standard_normal((n, 3)) if n > 1 else None)
        write_cloud(tmp_path / f"c{n}.ipc", c)
        back = read_cloud(tmp_path / f"c{n}.ipc")
        f32 = c.points.astype(np.float32).astype(np.float64)
        clouds_ok &= back.points.tobytes() == f32.tobytes()
        clouds_ok &= (back.normals is None) == (c.normals is None)
        if c.normals is not None:
            clouds_ok &= back.normals.tobytes() == c.normals.astype(np.float32).astype(np.float64).tobytes()
        clouds_ok &= cloud_bytes(back) == cloud_bytes(c)
    params = init_params(NetConfig(d_model=16, n_heads=2, n_cond_tokens=8, eps_ref=0.1), 10)
    save_checkpoint(tmp_path / "m.ipk", params)
    loaded = load_checkpoint(tmp_path / "m.ipk")
    ckpt_ok = loaded.cfg == params.cfg and checkpoint_bytes(loaded) == checkpoint_bytes(params)
    ckpt_ok &= all(loaded[n].data.tobytes() == t.data.tobytes() for n, t in params.items())
    cases = corrupted_files(tmp_path / "corpus")
    rejected = 0
    for _, path, kind in cases:
        reader = read_cloud if kind == "cloud" else load_checkpoint
        try:
            reader(path)
        except (FormatError, IncompatibleCheckpointError):
            rejected += 1
    elapsed = time.time() - t0
    ok = verdict(10, "persistence", clouds_ok and ckpt_ok and len(cases) >= 10
                 and rejected == len(cases) and elapsed <= 60,
                 f"round trips cloud={clouds_ok} ckpt={ckpt_ok}; "
                 f"{rejected}/{len(cases)} corrupted fixtures rejected, {elapsed:.1f}s")
    assert ok
