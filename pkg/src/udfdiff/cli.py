"""Command line entry point: gen-data, train, sample, eval, ablate, traj."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import Instance, make_instance, prepare
from .errors import EmptyExtractionError, NumericError, UdfDiffError
from .geometry import FAMILIES, PointCloud
from .metrics import COLUMNS, EvalReport, evaluate, evaluate_in_gt_frame, mean_report
from .net import init_params
from .sample import SamplerConfig, export_trajectory, extract_points, sample, stage_masks
from .store import (
    RunConfig,
    atomic_write_bytes,
    file_digest,
    load_checkpoint,
    parse_mask,
    read_cloud,
    read_config,
    save_checkpoint,
    validate_run_config,
    write_cloud,
    write_csv,
)
from .train import AdamState, train

MANIFEST = "manifest.csv"
MANIFEST_FIELDS = ("instance_id", "family", "view_x", "view_y", "view_z", "seed", "gt", "partial")
REPORT_FIELDS = ("name", "n_pred", "n_gt", "rho") + COLUMNS


def _warn(msg: str) -> None:
    print(f"warning: {msg}", file=sys.stderr)


def write_provenance(out: Path, command: str, args: dict, cfg: RunConfig | None, inputs: list) -> None:
    """Config dump plus content hashes of the inputs; no timestamps, so reruns match."""
    block = {
        "command": command,
        "version": __version__,
        "args": {k: v for k, v in sorted(args.items())},
        "config": cfg.dump() if cfg is not None else None,
        "inputs": {Path(p).name: file_digest(p) for p in sorted(inputs, key=str)},
    }
    text = json.dumps(block, indent=2, sort_keys=True) + "\n"
    atomic_write_bytes(out / "provenance.json", text.encode("utf-8"))


def _load_config(path) -> RunConfig:
    if path is None:
        cfg = RunConfig()
        validate_run_config(cfg)
        return cfg
    return read_config(path)


# dataset ---------------------------------------------------------------------


def generate_dataset(out, n_shapes: int, families, n_points: int, seed: int) -> list:
    """Write GT and partial clouds plus the manifest; returns the manifest rows."""
    families = list(families)
    for f in families:
        if f not in FAMILIES:
            from .errors import ConfigError

            raise ConfigError(f"unknown family {f!r}; choose from {', '.join(FAMILIES)}")
    if n_shapes < 1 or n_points < 1:
        from .errors import ConfigError

        raise ConfigError("n-shapes and points must be >= 1")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(n_shapes):
        family = families[i % len(families)]
        inst_seed = int(np.random.default_rng([seed, i]).integers(2**31))
        inst = make_instance(family, n_points, inst_seed)
        iid = f"{i:04d}"
        write_cloud(out / f"gt_{iid}.ipc", inst.gt)
        write_cloud(out / f"partial_{iid}.ipc", inst.partial)
        v = inst.view_dir
        rows.append([iid, family, repr(float(v[0])), repr(float(v[1])), repr(float(v[2])),
                     inst_seed, f"gt_{iid}.ipc", f"partial_{iid}.ipc"])
    write_csv(out / MANIFEST, MANIFEST_FIELDS, rows)
    return rows


def read_manifest(data) -> list:
    path = Path(data) / MANIFEST
    if not path.is_file():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        from .errors import FormatError

        raise FormatError(f"{path}: manifest has no rows")
    return rows


def load_dataset(data) -> list:
    """Instances listed in a dataset directory's manifest, in manifest order."""
    root = Path(data)
    out = []
    for row in read_manifest(root):
        view = (float(row["view_x"]), float(row["view_y"]), float(row["view_z"]))
        out.append(Instance(
            read_cloud(root / row["gt"]), read_cloud(root / row["partial"]),
            row["family"], view, int(row["seed"]),
        ))
    return out


def dataset_files(data) -> list:
    root = Path(data)
    files = [root / MANIFEST]
    for row in read_manifest(root):
        files += [root / row["gt"], root / row["partial"]]
    return files


# training --------------------------------------------------------------------


def run_training(instances: list, cfg: RunConfig, out=None, save_every: int = 0):
    """Initialize from ``cfg.train.seed`` and train; returns ``(params, history)``.

    With ``out`` set, writes ``log.csv``, ``model.ipk``, ``config.txt`` and a
    snapshot every ``save_every`` steps. On a numeric failure the parameters
    from before the failing step are written to ``last_good.ipk`` and the
    error propagates.
    """
    params = init_params(cfg.net, cfg.train.seed)
    dataset = [prepare(inst, cfg.net.n_cond_tokens) for inst in instances]
    sched = cfg.schedule.build()
    out = Path(out) if out is not None else None
    callback = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        atomic_write_bytes(out / "config.txt", cfg.dump().encode("utf-8"))
        if save_every > 0:
            def callback(step, rec, p, state):
                if (step + 1) % save_every == 0:
                    save_checkpoint(out / f"ckpt_{step + 1:06d}.ipk", p)
    try:
        history = train(
            params, dataset, sched, cfg.train,
            log_path=None if out is None else out / "log.csv",
            opt_state=AdamState(), callback=callback,
        )
    except NumericError:
        if out is not None and all(np.all(np.isfinite(a)) for a in params.arrays().values()):
            save_checkpoint(out / "last_good.ipk", params)
        raise
    if out is not None:
        save_checkpoint(out / "model.ipk", params)
    return params, history


# sampling --------------------------------------------------------------------


def reconstruct(params, partial: PointCloud, cfg: RunConfig, sampler: SamplerConfig | None = None,
                selfcond: bool = True):
    """Sample and extract; returns ``(raw, nu_hat, extracted_or_None, trajectory)``."""
    sampler = sampler or cfg.sampler
    raw, nu_hat, traj = sample(params, partial, cfg.schedule.build(), sampler, selfcond=selfcond)
    try:
        extracted = extract_points(raw, nu_hat, sampler.extract_tau)
    except EmptyExtractionError:
        extracted = None
    return raw, nu_hat, extracted, traj


def _sample_config(cfg: RunConfig, args) -> SamplerConfig:
    sc = cfg.sampler
    updates = {}
    if getattr(args, "tau", None) is not None:
        updates["extract_tau"] = args.tau
    if getattr(args, "mask", None):
        updates["selfcond_mask"] = parse_mask(",".join(args.mask))
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if getattr(args, "n_points", None) is not None:
        updates["n_points"] = args.n_points
    if getattr(args, "stride", None) is not None:
        updates["stride"] = args.stride
    if getattr(args, "capture_every", None) is not None:
        updates["capture_every"] = args.capture_every
    sc = replace(sc, **updates)
    sc.validate(cfg.schedule.T, cfg.train.clamp)
    return sc


def _ckpt_config(ckpt: Path, explicit) -> RunConfig:
    if explicit is not None:
        return read_config(explicit)
    sibling = ckpt.parent / "config.txt"
    return read_config(sibling) if sibling.is_file() else _load_config(None)


# evaluation ------------------------------------------------------------------


def report_row(name: str, rep: EvalReport, n_pred, n_gt) -> list:
    return [name, n_pred, n_gt, repr(rep.rho)] + [repr(getattr(rep, k)) for k in COLUMNS]


def format_console(name: str, rep: EvalReport) -> str:
    return (f"{name:<24} {rep.acc:8.3f} {rep.comp:8.3f} {rep.cd:8.3f} "
            f"{rep.prec:7.1f} {rep.recall:7.1f} {rep.f1:7.1f}")


CONSOLE_HEADER = f"{'name':<24} {'Acc':>8} {'Comp':>8} {'CD':>8} {'Prec':>7} {'Recall':>7} {'F1':>7}"


def eval_pairs(pairs: list, rho: float, frame: str = "gt") -> list:
    """``pairs`` of ``(name, pred_path, gt_path)`` -> list of ``(name, report, n_pred, n_gt)``."""
    fn = evaluate_in_gt_frame if frame == "gt" else evaluate
    out = []
    for name, pred_path, gt_path in pairs:
        pred, gt = read_cloud(pred_path), read_cloud(gt_path)
        out.append((name, fn(pred, gt, rho), len(pred), len(gt)))
    return out


# ablation --------------------------------------------------------------------


def _score(params, instances, cfg: RunConfig, sampler: SamplerConfig, selfcond: bool) -> EvalReport:
    reports = []
    for inst in instances:
        raw, _, extracted, _ = reconstruct(params, inst.partial, cfg, sampler, selfcond)
        if extracted is None:
            _warn(f"empty extraction at tau={sampler.extract_tau}; scoring the raw cloud")
            extracted = raw
        reports.append(evaluate_in_gt_frame(extracted, inst.gt, cfg.eval.rho))
    return mean_report(reports)


def run_ablation(instances: list, cfg: RunConfig, variants, seeds, log=None) -> list:
    """Paired variant grid; returns rows ``(variant, seed, EvalReport)``.

    Variants: ``on`` (training self-condition probability from the config,
    0.5 when it is 0), ``off`` (probability 0, placeholder at inference) and
    ``stages`` (the ``on`` model sampled unmasked and with each quarter of
    the timesteps masked). Every variant with the same seed shares network
    initialization, training batches and sampling noise.
    """
    variants = list(variants)
    unknown = set(variants) - {"on", "off", "stages"}
    if unknown:
        from .errors import ConfigError

        raise ConfigError(f"unknown ablation variant(s): {', '.join(sorted(unknown))}")
    p_on = cfg.train.selfcond_prob or 0.5
    rows = []
    for seed in seeds:
        base = replace(cfg, train=replace(cfg.train, seed=seed),
                       sampler=replace(cfg.sampler, seed=seed, selfcond_mask=()))
        models = {}
        if "on" in variants or "stages" in variants:
            on_cfg = replace(base, train=replace(base.train, selfcond_prob=p_on))
            models["on"], _ = run_training(instances, on_cfg)
        if "off" in variants:
            off_cfg = replace(base, train=replace(base.train, selfcond_prob=0.0))
            models["off"], _ = run_training(instances, off_cfg)
        for variant in variants:
            if variant == "stages":
                grid = [("stage_unmasked", ())] + [
                    (f"mask_{lo}-{hi}", ((lo, hi),)) for lo, hi in stage_masks(cfg.schedule.T)
                ]
                for name, mask in grid:
                    sc = replace(base.sampler, selfcond_mask=mask)
                    rows.append((name, seed, _score(models["on"], instances, base, sc, True)))
                    if log:
                        log(rows[-1])
            else:
                on = variant == "on"
                rows.append((variant, seed, _score(models[variant], instances, base, base.sampler, on)))
                if log:
                    log(rows[-1])
    return rows


def summarize(rows: list) -> list:
    """Mean F1 per variant in first-seen order: ``(variant, mean_f1, n)``."""
    order, acc = [], {}
    for variant, _, rep in rows:
        if variant not in acc:
            order.append(variant)
            acc[variant] = []
        acc[variant].append(rep.f1)
    return [(v, float(np.mean(acc[v])), len(acc[v])) for v in order]


# commands --------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    families = [f.strip() for f in args.families.split(",") if f.strip()]
    rows = generate_dataset(args.out, args.n_shapes, families, args.points, args.seed)
    out = Path(args.out)
    write_provenance(out, "gen-data", {
        "n_shapes": args.n_shapes, "families": families, "points": args.points, "seed": args.seed,
    }, None, [])
    print(f"wrote {len(rows)} instances to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    if args.steps is not None:
        cfg = replace(cfg, train=replace(cfg.train, steps=args.steps))
        validate_run_config(cfg)
    instances = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    inputs = dataset_files(args.data) + ([Path(args.config)] if args.config else [])
    write_provenance(out, "train", {"steps": cfg.train.steps, "save_every": args.save_every},
                     cfg, inputs)
    _, history = run_training(instances, cfg, out, args.save_every)
    if history:
        k = min(50, len(history))
        first = np.mean([h["loss"] for h in history[:k]])
        last = np.mean([h["loss"] for h in history[-k:]])
        print(f"trained {len(history)} steps; mean loss first {k}: {first:.4f}, last {k}: {last:.4f}")
    else:
        print("no steps requested; wrote the initial checkpoint")
    return 0


def cmd_sample(args) -> int:
    ckpt = Path(args.ckpt)
    cfg = _ckpt_config(ckpt, args.config)
    sampler = _sample_config(cfg, args)
    params = load_checkpoint(ckpt, cfg.net)
    partial = read_cloud(args.input)
    raw, nu_hat, extracted, traj = reconstruct(params, partial, cfg, sampler)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_cloud(out / "raw.ipc", raw)
    write_csv(out / "nu_hat.csv", ("point_index", "nu_hat"),
              [[i, repr(float(v))] for i, v in enumerate(nu_hat)])
    if extracted is None:
        _warn(f"no point has predicted UDF below {sampler.extract_tau}; only the raw cloud was written")
    else:
        write_cloud(out / "extracted.ipc", extracted)
    if traj.snapshots:
        export_trajectory(traj, out / "trajectory")
    write_provenance(out, "sample", {
        "tau": sampler.extract_tau, "mask": [list(m) for m in sampler.selfcond_mask],
        "seed": sampler.seed, "n_points": sampler.n_points, "stride": sampler.stride,
        "capture_every": sampler.capture_every,
    }, replace(cfg, sampler=sampler), [ckpt, Path(args.input)])
    n_ext = 0 if extracted is None else len(extracted)
    print(f"sampled {len(raw)} points, {n_ext} extracted at tau={sampler.extract_tau}")
    return 0


def cmd_traj(args) -> int:
    args.tau = None
    args.mask = None
    args.n_points = getattr(args, "n_points", None)
    ckpt = Path(args.ckpt)
    cfg = _ckpt_config(ckpt, args.config)
    sampler = _sample_config(cfg, args)
    params = load_checkpoint(ckpt, cfg.net)
    _, _, traj = sample(params, read_cloud(args.input), cfg.schedule.build(), sampler)
    out = Path(args.out)
    written = export_trajectory(traj, out)
    write_provenance(out, "traj", {"seed": sampler.seed, "capture_every": sampler.capture_every},
                     replace(cfg, sampler=sampler), [ckpt, Path(args.input)])
    print(f"wrote {len(written) - 1} snapshots to {out}")
    return 0


def cmd_eval(args) -> int:
    from .errors import ConfigError

    if not args.rho > 0:
        raise ConfigError("--rho must be > 0")
    if args.data is not None:
        pred_dir = Path(args.pred[0])
        root = Path(args.data)
        pairs = [(r["instance_id"], pred_dir / f"{r['instance_id']}.ipc", root / r["gt"])
                 for r in read_manifest(root)]
    else:
        if args.gt is None or len(args.pred) != len(args.gt):
            raise ConfigError("--pred and --gt need the same number of files")
        pairs = [(Path(p).stem, p, g) for p, g in zip(args.pred, args.gt)]
    results = eval_pairs(pairs, args.rho, args.frame)
    mean = mean_report([r for _, r, _, _ in results])
    print(CONSOLE_HEADER)
    for name, rep, _, _ in results:
        print(format_console(name, rep))
    print(format_console("mean", mean))
    if args.out is not None:
        rows = [report_row(n, r, a, b) for n, r, a, b in results]
        rows.append(report_row("mean", mean, "", ""))
        write_csv(args.out, REPORT_FIELDS, rows)
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args.config)
    if args.steps is not None:
        cfg = replace(cfg, train=replace(cfg.train, steps=args.steps))
    validate_run_config(cfg)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    seeds = list(range(args.seed0, args.seed0 + args.seeds))
    instances = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_provenance(out, "ablate", {"variants": variants, "seeds": seeds}, cfg,
                     dataset_files(args.data) + ([Path(args.config)] if args.config else []))
    print(CONSOLE_HEADER)
    rows = run_ablation(instances, cfg, variants, seeds,
                        log=lambda r: print(format_console(f"{r[0]}/s{r[1]}", r[2]), flush=True))
    write_csv(out / "ablation.csv", ("variant", "seed") + COLUMNS,
              [[v, s] + [repr(getattr(r, k)) for k in COLUMNS] for v, s, r in rows])
    summary = summarize(rows)
    write_csv(out / "summary.csv", ("variant", "mean_f1", "n_seeds"),
              [[v, repr(f), n] for v, f, n in summary])
    for v, f, n in summary:
        print(f"{v:<24} mean F1 {f:6.2f} over {n} seeds")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="udfdiff", description=__doc__)
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic shape-completion dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-shapes", type=int, default=10)
    p.add_argument("--families", default=",".join(FAMILIES))
    p.add_argument("--points", type=int, default=8192)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--save-every", type=int, default=500)
    p.set_defaults(func=cmd_train)

    def sampling_flags(p):
        p.add_argument("--ckpt", required=True)
        p.add_argument("--input", required=True, help="partial point cloud (.ipc)")
        p.add_argument("--out", required=True)
        p.add_argument("--config", help="defaults to config.txt beside the checkpoint")
        p.add_argument("--seed", type=int)
        p.add_argument("--n-points", type=int)
        p.add_argument("--stride", type=int)
        p.add_argument("--capture-every", type=int)

    p = sub.add_parser("sample", help="complete a partial cloud with a trained model")
    sampling_flags(p)
    p.add_argument("--tau", type=float)
    p.add_argument("--mask", action="append", help="lo:hi timesteps with self-conditioning off")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("traj", help="export intermediate denoising snapshots")
    sampling_flags(p)
    p.set_defaults(func=cmd_traj, capture_every=100)

    p = sub.add_parser("eval", help="score predicted clouds against ground truth")
    p.add_argument("--pred", nargs="+", required=True,
                   help="prediction files, or one directory of <instance_id>.ipc with --data")
    p.add_argument("--gt", nargs="+")
    p.add_argument("--data", help="dataset directory; evaluates every manifest row")
    p.add_argument("--rho", type=float, default=0.1)
    p.add_argument("--frame", choices=("gt", "world"), default="gt")
    p.add_argument("--out", help="CSV report path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="paired self-conditioning ablation")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--variants", default="on,off,stages")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--seed0", type=int, default=0)
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 2
    except (UdfDiffError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
