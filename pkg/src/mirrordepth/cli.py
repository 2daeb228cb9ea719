"""Command-line entry point: ``mirrordepth <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import kernels
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigKeyError, RunConfig, parse_assignments
from .consistency import continuity_pairs, sequence_consistency, write_continuity_csv, write_sequence_csv
from .data import Frame
from .encoders import randomize_mirror
from .gradcheck import model_loss_check, run_primitive_suite
from .io import read_dataset, read_ppm, write_dataset, write_pfm
from .metrics import CROPS, MetricsRecord, aggregate, compute_metrics
from .model import DepthModel
from .synth import dolly_scene, forward_scene, make_sequence, training_frames
from .training import LossConfig, TrainState, encode_dataset, evaluate, prepare_state, train

log = logging.getLogger("mirrordepth")

METRIC_COLUMNS = ("frame_id", "abs_rel", "sq_rel", "rmse", "log10", "d1", "d2", "d3", "t")
ABLATION_COLUMNS = ("row", "init") + METRIC_COLUMNS[1:]


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- helpers


def _config(args) -> RunConfig:
    overrides = parse_assignments(args.set or [])
    if getattr(args, "config", None):
        base = RunConfig.load(args.config)
        return base.with_overrides(overrides)
    return RunConfig.from_preset(args.preset, overrides)


def _run_dir(args, command: str) -> Path:
    if args.run_dir:
        d = Path(args.run_dir)
        if d.exists() and any(d.iterdir()):
            raise UsageError(f"run directory {d} already exists and is not empty")
    else:
        root = Path(args.runs_root)
        root.mkdir(parents=True, exist_ok=True)
        i = 1
        while (root / f"{command}-{i:04d}").exists():
            i += 1
        d = root / f"{command}-{i:04d}"
    d.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(d / "run.log", mode="a", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    logging.getLogger("mirrordepth").addHandler(handler)
    return d


def _frames(cfg: RunConfig, data: str | None) -> list[Frame]:
    if data:
        return read_dataset(data)
    return training_frames(cfg.data.frames, cfg.data.seed, cfg.data.size)


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _metric_row(label, rec: MetricsRecord) -> list:
    return [label, *rec.as_tuple()]


def _load_model(path) -> tuple[TrainState, RunConfig]:
    state, cfg = load_checkpoint(path)
    return state, cfg


def _train_run(cfg: RunConfig, frames, model: DepthModel, mode: str, run_dir: Path, tag: str = "",
               state: TrainState | None = None, until: int | None = None, features=None) -> TrainState:
    loss_rows: list[tuple] = []
    ckpt_every = cfg.train.checkpoint_every
    if state is None:
        state = prepare_state(model, mode, cfg.optim.seed)

    def on_step(step, lr, loss):
        loss_rows.append((step, lr, loss))
        if ckpt_every and (step + 1) % ckpt_every == 0:
            save_checkpoint(state, cfg, run_dir / f"{tag}ckpt_{step + 1:06d}.mdc")

    state, tlog = train(frames, loss_cfg=cfg.loss, optim_cfg=cfg.optim, state=state, until=until,
                        eval_every=cfg.train.eval_every, features=features, on_step=on_step)
    _write_csv(run_dir / f"{tag}loss.csv", ("step", "lr", "loss"), loss_rows)
    rows = []
    for epoch, mean_loss, rec in tlog.epochs:
        vals = rec.as_tuple() if rec is not None else ("",) * len(MetricsRecord.names())
        rows.append((epoch, mean_loss, *vals))
    _write_csv(run_dir / f"{tag}epochs.csv", ("epoch", "mean_loss", *METRIC_COLUMNS[1:]), rows)
    save_checkpoint(state, cfg, run_dir / f"{tag}checkpoint.mdc")
    return state


# ---------------------------------------------------------------- subcommands


def cmd_synth(args) -> int:
    out = Path(args.out)
    if args.kind == "train":
        frames = training_frames(args.frames, args.seed, args.size)
    elif args.kind == "dolly":
        frames = make_sequence(dolly_scene(args.seed, args.size, args.frames))
    else:
        frames = make_sequence(forward_scene(args.seed, args.size, args.frames))
    write_dataset(frames, out)
    print(f"wrote {len(frames)} frames to {out}")
    return 0


def cmd_train(args) -> int:
    if args.resume:
        state, cfg = _load_model(args.resume)
        if args.set:
            raise UsageError("--set cannot be combined with --resume; the checkpoint fixes the config")
    else:
        cfg = _config(args)
        if args.mirror_mode:
            cfg = cfg.with_overrides({"train.mirror_mode": args.mirror_mode})
        state = None
    run_dir = _run_dir(args, "train")
    cfg.write_resolved(run_dir / "config.resolved")
    frames = _frames(cfg, args.data)
    model = state.model if state is not None else DepthModel(cfg.model)
    t0 = time.perf_counter()
    state = _train_run(cfg, frames, model, cfg.train.mirror_mode, run_dir, state=state, until=args.until)
    log.info("trained to step %d in %.1fs", state.step, time.perf_counter() - t0)
    print(f"step {state.step}; run directory {run_dir}")
    return 0


def cmd_infer(args) -> int:
    state, cfg = _load_model(args.checkpoint)
    run_dir = _run_dir(args, "infer")
    src = Path(args.input)
    if src.is_dir():
        items = [(f"frame_{f.frame_id:05d}", f.rgb) for f in read_dataset(src)]
    else:
        items = [(src.stem, read_ppm(src))]
    for name, rgb in items:
        write_pfm(state.model.infer(rgb), run_dir / f"{name}.pfm")
    print(f"wrote {len(items)} depth maps to {run_dir}")
    return 0


def cmd_eval(args) -> int:
    state, cfg = _load_model(args.checkpoint)
    run_dir = _run_dir(args, "eval")
    frames = _frames(cfg, args.data)
    crop = CROPS[args.crop or cfg.eval.crop]
    overrides = {"eval.cap": args.cap} if args.cap else {}
    ecfg = cfg.with_overrides(overrides).eval
    pairs, rows = [], []
    for f in frames:
        pred = state.model.infer(f.rgb)
        pairs.append((pred, f.depth))
        rows.append(_metric_row(f.frame_id, compute_metrics(pred, f.depth, crop, ecfg.min_depth, ecfg.max_depth)))
    agg = aggregate(pairs, crop, ecfg.min_depth, ecfg.max_depth)
    rows.append(_metric_row("aggregate", agg))
    _write_csv(run_dir / "metrics.csv", METRIC_COLUMNS, rows)
    print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}"
                   for k, v in zip(MetricsRecord.names(), agg.as_tuple())))
    return 0


def cmd_consistency(args) -> int:
    state, cfg = _load_model(args.checkpoint)
    run_dir = _run_dir(args, "consistency")
    if args.data:
        frames = read_dataset(args.data)
    else:
        frames = make_sequence(dolly_scene(cfg.data.seed, cfg.data.size))
    model = state.model
    baseline = model.fresh(cfg.model.decoder_seed + args.random_seed, cfg.model.mirror_seed + args.random_seed)
    rows = sequence_consistency(model, frames, args.window, baseline)
    write_sequence_csv(rows, run_dir / "consistency.csv")
    groups, skipped = continuity_pairs(model, frames)
    write_continuity_csv(groups, run_dir / "continuity.csv")
    if rows:
        print(f"mean incons_model={np.nanmean([r.incons_model for r in rows]):.5f} "
              f"incons_gt={np.nanmean([r.incons_gt for r in rows]):.5f} "
              f"incons_random={np.nanmean([r.incons_random for r in rows]):.5f}")
    print(f"{sum(len(v) for v in groups.values())} box medians, {skipped} empty boxes skipped")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    run_dir = _run_dir(args, "ablate")
    cfg.write_resolved(run_dir / "config.resolved")
    frames = _frames(cfg, args.data)
    base = DepthModel(cfg.model)
    if args.init == "checkpoint":
        if not args.checkpoint:
            raise UsageError("--init checkpoint needs --checkpoint PATH")
        src, _ = _load_model(args.checkpoint)
        shapes = {p.name: p.shape for p in base.trainable()}
        for name in shapes:
            if name not in src.model.params or src.model.params[name].shape != shapes[name]:
                raise ValueError(f"checkpoint lacks a compatible {name!r}")
            base.params[name].tensor.data = src.model.params[name].tensor.data.copy()
    feats = encode_dataset(base, frames)
    ev = lambda m: evaluate(m, frames, feats, cfg.eval.min_depth, cfg.eval.max_depth)

    converged = _train_run(cfg, frames, base.clone(), "converged", run_dir, "converged_", features=feats).model
    disrupted = _train_run(cfg, frames, base.clone(), "disrupted", run_dir, "disrupted_", features=feats).model
    randomized = converged.clone()
    randomized.set_mirror(randomize_mirror(converged.mirror, args.randomize_seed))
    rerandom = disrupted.clone()
    rerandom.set_mirror(randomize_mirror(disrupted.mirror, args.randomize_seed))

    rows = []
    for label, m in (("converged", converged), ("randomized", randomized), ("disrupted", disrupted),
                     ("disrupted_rerandomized", rerandom)):
        rec = ev(m)
        rows.append((label, args.init, *rec.as_tuple()))
        print(f"{label:<24s} abs_rel={rec.abs_rel:.4f} d1={rec.delta1:.4f}")
    _write_csv(run_dir / "ablation.csv", ABLATION_COLUMNS, rows)
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _config(args)
    ok = True
    for name, rep in run_primitive_suite(args.seed, args.tolerance).items():
        print(f"{'PASS' if rep.passed else 'FAIL'}  primitive {name:<20s} rel_err={rep.max_rel_error:.3e}")
        ok &= rep.passed
    if not args.primitives_only:
        model = DepthModel(cfg.model)
        size = cfg.model.vision.image_size
        frames = training_frames(2, cfg.data.seed, min(cfg.data.size, size))
        rep = model_loss_check(model, frames, cfg.loss, max_entries=args.entries, tolerance=args.tolerance,
                               seed=args.seed)
        print(rep)
        ok &= rep.passed
    print("gradcheck", "PASS" if ok else "FAIL")
    return 0 if ok else 1


def cmd_params(args) -> int:
    cfg = _config(args)
    model = DepthModel(cfg.model)
    n = model.count_learnable()
    print(f"{n:,}")
    return 0


# ---------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mirrordepth", description="Prompt-conditioned monocular depth at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def with_config(sp, run=True):
        sp.add_argument("--preset", choices=("toy", "paper"), default="toy")
        sp.add_argument("--config", help="config.resolved file to replay")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a configuration key")
        if run:
            with_run(sp)

    def with_run(sp):
        sp.add_argument("--run-dir", help="output directory (must be new or empty)")
        sp.add_argument("--runs-root", default="runs", help="parent for auto-numbered run directories")

    s = sub.add_parser("synth", help="render a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--kind", choices=("train", "dolly", "forward"), default="train")
    s.add_argument("--frames", type=int, default=16)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train mirror and decoder")
    with_config(s)
    s.add_argument("--data", help="dataset directory (default: synthetic frames from the config)")
    s.add_argument("--mirror-mode", choices=("converged", "disrupted"))
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--until", type=int, help="stop at this global step")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="predict depth maps")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True, help="PPM image or dataset directory")
    with_run(s)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="metrics against ground truth")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data")
    s.add_argument("--crop", choices=sorted(CROPS))
    s.add_argument("--cap", help="indoor, outdoor or a depth in metres")
    with_run(s)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("consistency", help="temporal and spatial consistency")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", help="sequence directory (default: synthetic dolly sequence)")
    s.add_argument("--window", type=int, default=1)
    s.add_argument("--random-seed", type=int, default=1000, help="seed offset for the untrained baseline")
    with_run(s)
    s.set_defaults(func=cmd_consistency)

    s = sub.add_parser("ablate", help="converged / randomized / disrupted mirror comparison")
    with_config(s)
    s.add_argument("--data")
    s.add_argument("--init", choices=("random", "checkpoint"), default="random")
    s.add_argument("--checkpoint", help="initial mirror and decoder for --init checkpoint")
    s.add_argument("--randomize-seed", type=int, default=1000)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    with_config(s, run=False)
    s.add_argument("--tolerance", type=float, default=1e-3)
    s.add_argument("--entries", type=int, default=4, help="probed entries per model parameter")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--primitives-only", action="store_true")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("params", help="count learnable parameters")
    with_config(s, run=False)
    s.set_defaults(func=cmd_params)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"mirrordepth: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    log.debug("kernel backend: %s", kernels.BACKEND)
    try:
        return args.func(args)
    except (UsageError, ConfigKeyError) as exc:
        print(f"mirrordepth: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"mirrordepth: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    finally:
        for h in list(logging.getLogger("mirrordepth").handlers):
            if isinstance(h, logging.FileHandler):
                h.close()
                logging.getLogger("mirrordepth").removeHandler(h)


if __name__ == "__main__":
    sys.exit(main())
