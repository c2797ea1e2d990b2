"""Command-line entry points.

Every command echoes its resolved arguments to a ``run.cfg`` file beside
its output; ``vesseltrack rerun <run.cfg>`` replays it.
"""

from __future__ import annotations

import argparse
import glob
import logging
import os
import shlex
import sys

import numpy as np

from . import cnn, desk, phantom
from .centerline import read_centerline, read_refs, write_centerline
from .dataset import case_names, read_case, read_dataset, write_case
from .errors import FormatError, NumericalError, ValidationError, VesselTrackError
from .metrics import ScoreReport, ai_accuracy, bland_altman, correspond, marker_hits, overlap_scores, radius_pairs
from .proximity import OSTIA_PROXIMITY, SEED_PROXIMITY
from .sphere import fibonacci_codebook
from .tracker import TrackerConfig, track
from .training import TrainConfig, train, train_proximity
from .tree import TreeConfig, extract_tree, write_tree
from .volume import PatchSpec, read_volume

log = logging.getLogger("vesseltrack")

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_NUMERIC, EXIT_PIPELINE = 0, 2, 3, 4, 5

# paper-scale defaults; --desk swaps in the desk preset for flags left unset
PAPER_TRAIN = dict(iters=50_000, batch=64, lr=0.01, lr_decay=0.1, lr_interval=10_000, ndirs=500, width=19,
                   voxel=0.5, background=0.0, end_background=0.0,
                   channels="32,32,32,32,64,64")
DESK_TRAIN = dict(iters=desk.DESK_TRAIN.iterations, batch=desk.DESK_TRAIN.batch_size, lr=desk.DESK_TRAIN.lr,
                  lr_decay=desk.DESK_TRAIN.lr_decay, lr_interval=desk.DESK_TRAIN.lr_interval,
                  ndirs=desk.DESK_NDIRS, width=desk.DESK_PATCH.width, voxel=desk.DESK_PATCH.voxel_mm,
                  background=desk.DESK_TRAIN.background_fraction, end_background=desk.DESK_TRAIN.end_fraction,
                  channels=",".join(str(c) for c in desk.DESK_CHANNELS))


def _point(text: str) -> np.ndarray:
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected x,y,z, got {text!r}")
    if len(vals) != 3 or not np.all(np.isfinite(vals)):
        raise argparse.ArgumentTypeError(f"expected three finite numbers x,y,z, got {text!r}")
    return np.array(vals)


def _tracker_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("tracking")
    g.add_argument("--entropy-threshold", type=float, default=0.9)
    g.add_argument("--entropy-window", type=int, default=3)
    g.add_argument("--cone-angle", type=float, default=60.0)
    g.add_argument("--max-length", type=float, default=275.0)
    g.add_argument("--min-step", type=float, default=0.25)
    g.add_argument("--max-steps", type=int, default=2000)


def _tracker_config(args) -> TrackerConfig:
    return TrackerConfig(entropy_threshold=args.entropy_threshold, entropy_window=args.entropy_window,
                         cone_angle=args.cone_angle, max_length_mm=args.max_length, min_step_mm=args.min_step,
                         max_steps=args.max_steps)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vesseltrack", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=1, help="BLAS worker threads (default 1)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="render phantoms to a dataset directory")
    p.add_argument("source", help="spec file, suite name, 'desk-train' or 'desk-heldout'")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train", help="train a tracker or proximity network")
    p.add_argument("data_dir")
    p.add_argument("--head", choices=("tracker", "proximity-seeds", "proximity-ostia"), default="tracker")
    p.add_argument("--out", required=True, help="weights file (VTW1)")
    p.add_argument("--desk", action="store_true", help="desk-scale preset for flags left unset")
    for name, typ in (("iters", int), ("batch", int), ("lr", float), ("lr-decay", float), ("lr-interval", int),
                      ("ndirs", int), ("width", int), ("voxel", float), ("background", float),
                      ("end-background", float), ("channels", str)):
        p.add_argument(f"--{name}", type=typ, default=None)
    p.add_argument("--no-rot-aug", action="store_true")
    p.add_argument("--no-trans-aug", action="store_true")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("track", help="track from seed points")
    p.add_argument("volume")
    p.add_argument("weights")
    seeds = p.add_mutually_exclusive_group(required=True)
    seeds.add_argument("--seed-point", type=_point, action="append", help="x,y,z in mm (repeatable)")
    seeds.add_argument("--seeds-from", help="VTC1 file; one seed at the middle of each branch")
    p.add_argument("--out", required=True, help="VTE1 file for one seed, else a directory")
    _tracker_flags(p)

    p = sub.add_parser("autotrack", help="automatic tree extraction")
    p.add_argument("volume")
    p.add_argument("tracker_weights")
    p.add_argument("seed_weights")
    p.add_argument("ostia_weights")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--num-seeds", type=int, default=200)
    p.add_argument("--reach", type=float, default=5.0)
    _tracker_flags(p)

    p = sub.add_parser("eval", help="score extracted centerlines against references")
    p.add_argument("ref_dir")
    p.add_argument("extracted_dir")
    p.add_argument("--out", required=True, help="report file")

    p = sub.add_parser("radius-eval", help="Bland-Altman agreement of radii")
    p.add_argument("ref_dir")
    p.add_argument("extracted_dir")
    p.add_argument("--out", default=None, help="optional report file")

    p = sub.add_parser("rerun", help="replay a run.cfg echo")
    p.add_argument("config")
    return parser


# --------------------------------------------------------------------------
# run.cfg echo


def write_run_config(path, argv, args) -> None:
    rows = [f"argv = {shlex.join(argv)}"]
    for key in sorted(vars(args)):
        value = getattr(args, key)
        if isinstance(value, list):
            value = " ".join(",".join(repr(float(v)) for v in x) if isinstance(x, np.ndarray) else str(x)
                             for x in value)
        rows.append(f"{key} = {value}")
    with open(path, "w") as fh:
        fh.write("\n".join(rows) + "\n")


def read_run_config(path) -> list[str]:
    with open(path) as fh:
        for line in fh:
            key, _, value = line.partition("=")
            if key.strip() == "argv":
                return shlex.split(value.strip())
    raise FormatError(f"{path}: no argv line")


def _echo_path(out: str, is_dir: bool) -> str:
    return os.path.join(out, "run.cfg") if is_dir else out + ".run.cfg"


# --------------------------------------------------------------------------
# commands


def cmd_phantom(args, argv) -> int:
    if os.path.isfile(args.source):
        specs = [phantom.read_spec(args.source)]
    elif args.source in ("desk-train", "desk-heldout"):
        train_specs, held = phantom.desk_split()
        specs = train_specs if args.source == "desk-train" else held
    elif args.source in phantom.SUITE_SIZES:
        specs = phantom.standard_suites()[args.source]
    else:
        raise ValidationError(f"{args.source!r} is neither a spec file nor a suite name")
    os.makedirs(args.out, exist_ok=True)
    for spec in specs:
        write_case(spec, args.out)
    with open(os.path.join(args.out, "manifest.txt"), "w") as fh:
        fh.write(phantom.suite_manifest(specs))
    write_run_config(_echo_path(args.out, True), argv, args)
    print(f"wrote {len(specs)} phantoms to {args.out}")
    return EXIT_OK


def _resolve_train(args) -> dict:
    base = DESK_TRAIN if args.desk else PAPER_TRAIN
    out = {}
    for key, default in base.items():
        value = getattr(args, key)
        out[key] = default if value is None else value
    try:
        out["channels"] = tuple(int(c) for c in str(out["channels"]).split(","))
    except ValueError:
        raise ValidationError(f"--channels expects six comma-separated integers, got {out['channels']!r}")
    if len(out["channels"]) != 6:
        raise ValidationError("--channels expects six hidden widths")
    return out


def cmd_train(args, argv) -> int:
    r = _resolve_train(args)
    cfg = TrainConfig(batch_size=r["batch"], iterations=r["iters"], lr=r["lr"], lr_decay=r["lr_decay"],
                      lr_interval=r["lr_interval"], translation_augment=not args.no_trans_aug,
                      rotation_augment=not args.no_rot_aug,
                      background_fraction=r["background"] if args.head == "tracker" else 0.0,
                      end_fraction=r["end_background"] if args.head == "tracker" else 0.0)
    data = read_dataset(args.data_dir)
    progress = _progress_logger(cfg.iterations)
    if args.head == "tracker":
        cb = fibonacci_codebook(r["ndirs"])
        spec = cnn.table1_spec(r["ndirs"], channels=r["channels"])
        patch = PatchSpec(r["width"], r["voxel"], 0.0)
        params, losses = train(data, cfg, spec, cb, patch, seed=args.seed, progress=progress)
    else:
        pcfg = SEED_PROXIMITY if args.head == "proximity-seeds" else OSTIA_PROXIMITY
        spec = cnn.table1_spec(0, channels=r["channels"], head="proximity", output_scale=pcfg.peak)
        targets = "centerlines" if args.head == "proximity-seeds" else "ostia"
        params, losses = train_proximity(data, cfg, spec, pcfg, targets, seed=args.seed, progress=progress)
    params.meta["kind"] = args.head
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    cnn.save_weights(params, args.out)
    np.savetxt(args.out + ".loss", losses, fmt="%.17g")
    write_run_config(_echo_path(args.out, False), argv, args)
    if len(losses):
        print(f"loss {losses[0]:.4f} -> {losses[-1]:.4f} over {len(losses)} iterations")
    print(f"wrote {args.out}")
    return EXIT_OK


def _progress_logger(total: int):
    every = max(total // 20, 1)

    def progress(it, loss):
        if it % every == 0 or it == total - 1:
            log.info("iteration %d/%d loss %.5f", it + 1, total, loss)
    return progress


def _load_tracker(path):
    params = cnn.load_weights(path, expect_head="tracker")
    return params, fibonacci_codebook(params.spec.num_directions)


def cmd_track(args, argv) -> int:
    vol = read_volume(args.volume)
    params, cb = _load_tracker(args.weights)
    tcfg = _tracker_config(args)
    if args.seeds_from:
        refs = read_refs(args.seeds_from)
        stem = os.path.splitext(os.path.basename(args.seeds_from))[0]
        jobs = [(f"{stem}.{k}.vte", ref.point_at(ref.length / 2.0)) for k, ref in enumerate(refs)]
    else:
        jobs = [(None, p) for p in args.seed_point]
    single = len(jobs) == 1 and jobs[0][0] is None
    if not single:
        os.makedirs(args.out, exist_ok=True)
    for k, (name, seed) in enumerate(jobs):
        cl = track(vol, params, cb, tcfg, seed)
        path = args.out if single else os.path.join(args.out, name or f"seed_{k:03d}.vte")
        write_centerline(cl, path)
        print(f"{path}: {len(cl)} points, {cl.length:.1f} mm, stops {cl.stop_fwd}/{cl.stop_bwd}")
    write_run_config(_echo_path(args.out, not single), argv, args)
    return EXIT_OK


def cmd_autotrack(args, argv) -> int:
    vol = read_volume(args.volume)
    tparams, cb = _load_tracker(args.tracker_weights)
    sparams = cnn.load_weights(args.seed_weights, expect_head="proximity")
    oparams = cnn.load_weights(args.ostia_weights, expect_head="proximity")
    cfg = TreeConfig(num_seeds=args.num_seeds, reach_radius_mm=args.reach)
    result = extract_tree(vol, tparams, sparams, oparams, cb, cfg, _tracker_config(args))
    write_tree(result, args.out_dir)
    write_run_config(_echo_path(args.out_dir, True), argv, args)
    print(f"{len(result.accepted)} accepted of {result.tracker_runs} tracked lines; "
          f"ostia {np.round(result.ostia, 2).tolist()}")
    return EXIT_OK


def _candidates(extracted_dir, name):
    paths = sorted(glob.glob(os.path.join(extracted_dir, f"{name}.*vte")))
    paths += sorted(glob.glob(os.path.join(extracted_dir, name, "*.vte")))
    return [read_centerline(p) for p in paths]


def match_vessels(ref_dir, extracted_dir):
    """Pair every reference branch with the extracted line scoring the best OV.

    Extracted lines for case NAME are the files ``NAME.*.vte`` or
    ``NAME/*.vte`` in ``extracted_dir``.
    """
    out = []
    for name in case_names(ref_dir):
        case = read_case(ref_dir, name)
        lines = _candidates(extracted_dir, name)
        for k, ref in enumerate(case.refs):
            best = None
            for cl in lines:
                if len(cl) == 0:
                    continue
                corr = correspond(ref, cl)
                scores = overlap_scores(corr)
                if best is None or scores[0] > best[1][0]:
                    best = (cl, scores, corr)
            out.append((name, k, ref, case.ostia, best))
    return out


def cmd_eval(args, argv) -> int:
    rows = ["# case branch OV OF OT AI hits markers ostium"]
    reports = []
    for name, k, ref, ostia, best in match_vessels(args.ref_dir, args.extracted_dir):
        s = np.arange(0.0, ref.length + 1e-9, 10.0)
        markers, radii = ref.point_at(s), ref.radius_at(s)
        if best is None:
            rep, hits, reached = ScoreReport(0.0, 0.0, 0.0, None), 0, False
        else:
            cl, scores, corr = best
            rep = ScoreReport(*scores, ai_accuracy(corr))
            hits, reached = marker_hits(markers, radii, cl, ostia if len(ostia) else None)
        reports.append(rep)
        rows.append(f"{name} {k} {rep.row()} {hits:5d} {len(markers):5d} {int(reached)}")
    if not reports:
        raise ValidationError("no reference vessels found")
    ai = [r.ai for r in reports if r.ai is not None]
    summary = {
        "vessels": len(reports),
        "OV": np.mean([r.ov for r in reports]),
        "OF": np.mean([r.of for r in reports]),
        "OT": np.nanmean([r.ot for r in reports]),
        "AI": np.mean(ai) if ai else float("nan"),
        "AI_undefined": len(reports) - len(ai),
    }
    rows.append("")
    rows += [f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in summary.items()]
    text = "\n".join(rows) + "\n"
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    with open(args.out, "w") as fh:
        fh.write(text)
    write_run_config(_echo_path(args.out, False), argv, args)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_radius_eval(args, argv) -> int:
    pairs = [radius_pairs(best[2]) for *_, best in match_vessels(args.ref_dir, args.extracted_dir)
             if best is not None]
    pairs = np.concatenate(pairs) if pairs else np.zeros((0, 2))
    mean, lo, hi = bland_altman(pairs)
    text = f"pairs={len(pairs)}\nmean_difference={mean:.5f}\nloa_lower={lo:.5f}\nloa_upper={hi:.5f}\n"
    sys.stdout.write(text)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
        write_run_config(_echo_path(args.out, False), argv, args)
    return EXIT_OK


COMMANDS = {"phantom": cmd_phantom, "train": cmd_train, "track": cmd_track, "autotrack": cmd_autotrack,
            "eval": cmd_eval, "radius-eval": cmd_radius_eval}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_VALIDATION
    if args.command == "rerun":
        try:
            return main(read_run_config(args.config))
        except (OSError, FormatError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_IO
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_VALIDATION
    from threadpoolctl import threadpool_limits

    try:
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](args, argv)
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except VesselTrackError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
