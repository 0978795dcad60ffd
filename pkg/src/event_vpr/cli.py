"""Command-line entry point: ``event-vpr <command> [options]``.

Commands: simulate, split, make-toy, train, eval, ablate. Failures print one
JSON line on stderr and exit 2 (config/parameters), 3 (data) or 4 (numerical
abort).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config, write_resolved
from .errors import ConfigError, DataError, EventVPRError, ParameterError, TrainingAborted
from .events import CameraModel, FixedCount, FixedDuration, read_events, simulate_events, split_stream, write_events
from .mining import GeoTaggedDatabase

log = logging.getLogger("event_vpr")

EXIT_CONFIG, EXIT_DATA, EXIT_ABORT = 2, 3, 4


# ---------------------------------------------------------------------------
# helpers


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.with_overrides(training={"seed": args.seed})
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _database(cfg: RunConfig) -> GeoTaggedDatabase:
    if not cfg.data.manifest:
        raise ConfigError("data.manifest is not set")
    if not Path(cfg.data.manifest).is_file():
        raise DataError(f"manifest {cfg.data.manifest} does not exist")
    return GeoTaggedDatabase.from_manifest(cfg.data.manifest)


def _split(db: GeoTaggedDatabase, cfg: RunConfig):
    from .training import geographic_split

    train_idx, test_idx = geographic_split(db, cfg.data.test_fraction, cfg.training.seed)
    return db.subset(train_idx), db.subset(test_idx)


def load_frames(frames_dir) -> tuple[list[np.ndarray], list[int]]:
    """Frames named ``<timestamp_us>.npy`` or ``<timestamp_us>.png``, sorted by time.

    8-bit PNG values v map to intensity (v + 1) / 256 so that black stays
    inside the log domain.
    """
    frames_dir = Path(frames_dir)
    if not frames_dir.is_dir():
        raise DataError(f"frames directory {frames_dir} does not exist")
    files = [p for p in frames_dir.iterdir() if p.suffix.lower() in (".npy", ".png")]
    items = []
    for p in files:
        try:
            items.append((int(p.stem), p))
        except ValueError:
            raise DataError(f"frame file {p.name} is not named by its timestamp in microseconds") from None
    items.sort()
    frames = []
    for _, p in items:
        if p.suffix.lower() == ".npy":
            frames.append(np.load(p).astype(np.float64))
        else:
            from PIL import Image

            with Image.open(p) as im:
                frames.append((np.asarray(im.convert("L"), dtype=np.float64) + 1.0) / 256.0)
    return frames, [t for t, _ in items]


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    frames, ts = load_frames(args.frames)
    cam = CameraModel(args.threshold, threshold_jitter=args.jitter, seed=args.seed or 0)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    stream = simulate_events(frames, ts, cam, id=out.stem)
    write_events(stream, out)
    print(json.dumps({"events": len(stream), "frames": len(frames), "path": str(out)}))
    return 0


def cmd_split(args) -> int:
    if (args.count is None) == (args.duration is None):
        raise ParameterError("give exactly one of --count or --duration")
    policy = FixedCount(args.count) if args.count is not None else FixedDuration(args.duration)
    stream = read_events(args.events)
    out = _out_dir(args)
    bins = split_stream(stream, policy)
    for b in bins:
        write_events(b, out / f"{b.id}.txt")
    print(json.dumps({"bins": len(bins), "out": str(out)}))
    return 0


def cmd_make_toy(args) -> int:
    from .toyworld import ToyWorldConfig, generate, write_world

    kw = {"seed": args.seed or 0}
    if args.places is not None:
        kw["n_places"] = args.places
    if args.bins is not None:
        kw["bins_per_place"] = args.bins
    manifest = write_world(generate(ToyWorldConfig(**kw)), _out_dir(args))
    print(json.dumps({"manifest": str(manifest)}))
    return 0


def cmd_train(args) -> int:
    from .evaluation import evaluate_model, write_report
    from .training import train

    cfg = _config(args)
    out = _out_dir(args)
    write_resolved(cfg, out)
    train_db, test_db = _split(_database(cfg), cfg)
    res = train(train_db, cfg, out, val_db=test_db, resume=args.checkpoint, deterministic=args.deterministic)
    rep = evaluate_model(res.model, test_db, cfg.eval.recall_ns, cfg.eval.phi, cfg.data.query_fraction,
                         cfg.training.seed, res.step, cfg.eval.batch_size)
    write_report(rep, out)
    print(rep.format_table(), end="")
    return 0


def cmd_eval(args) -> int:
    from .evaluation import evaluate_model, write_report
    from .training import load_checkpoint, set_deterministic

    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint")
    if args.deterministic:
        set_deterministic(True)
    cfg = _config(args) if args.config else None
    model, state = load_checkpoint(args.checkpoint)
    # data and eval settings come from --config when given, otherwise from the checkpoint
    cfg = cfg or state["config"]
    out = _out_dir(args)
    write_resolved(cfg, out)
    _, test_db = _split(_database(cfg), cfg)
    rep = evaluate_model(model, test_db, cfg.eval.recall_ns, cfg.eval.phi, cfg.data.query_fraction,
                         cfg.training.seed, state["step"], cfg.eval.batch_size)
    rep.extra["db_size"] = len(test_db)
    write_report(rep, out)
    print(rep.format_table(), end="")
    return 0


def cmd_ablate(args) -> int:
    from .ablation import ablate

    cfg = _config(args)
    out = _out_dir(args)
    write_resolved(cfg, out)
    train_db, test_db = _split(_database(cfg), cfg)
    table = ablate(train_db, test_db, cfg, out, deterministic=args.deterministic)
    ns = table["ns"]
    print("variant         backbone    " + "".join(f"{'R@' + str(n):>8}" for n in ns))
    for row in table["rows"]:
        vals = "".join(f"{row[f'recall@{n}']:8.3f}" if row["status"] == "ok" else f"{'-':>8}" for n in ns)
        print(f"{row['variant']:<16}{row['backbone']:<12}{vals}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON run configuration")
    common.add_argument("--seed", type=int, help="overrides training.seed")
    common.add_argument("--out", default="runs/latest", help="output directory or file")
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded, deterministic kernels, no wall-clock fields in logs")
    common.add_argument("--checkpoint", help="checkpoint to evaluate or resume from")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="event-vpr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="frames directory -> event file")
    p.add_argument("--frames", required=True)
    p.add_argument("--threshold", type=float, default=0.2, help="contrast threshold on log intensity")
    p.add_argument("--jitter", type=float, default=0.0, help="per-pixel threshold std")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("split", parents=[common], help="event file -> bins")
    p.add_argument("--events", required=True)
    p.add_argument("--count", type=int)
    p.add_argument("--duration", type=int, help="window length in microseconds")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("make-toy", parents=[common], help="write the synthetic loop world")
    p.add_argument("--places", type=int)
    p.add_argument("--bins", type=int, help="bins per place")
    p.set_defaults(func=cmd_make_toy)

    for name, func, text in (("train", cmd_train, "train on the manifest's training places"),
                             ("eval", cmd_eval, "Recall@N of a checkpoint on the test places"),
                             ("ablate", cmd_ablate, "representation sweep")):
        sub.add_parser(name, parents=[common], help=text).set_defaults(func=func)
    return parser


def _fail(exc: Exception, code: int) -> int:
    print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    try:
        return args.func(args)
    except ParameterError as exc:
        return _fail(exc, EXIT_CONFIG)
    except TrainingAborted as exc:
        return _fail(exc, EXIT_ABORT)
    except DataError as exc:
        return _fail(exc, EXIT_DATA)
    except FileNotFoundError as exc:
        return _fail(exc, EXIT_DATA)
    except EventVPRError as exc:
        return _fail(exc, 1)
    finally:
        log.removeHandler(handler)


if __name__ == "__main__":
    sys.exit(main())
