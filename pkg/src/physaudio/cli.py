"""Command-line entry point.

Subcommands: velocity, adapter-check, toy-train, toy-eval, apcc, report.
Exit codes: 0 success, 1 domain error (JSON payload on stderr), 2 usage.
Flag values take precedence over --config file entries, which take
precedence over built-in defaults. All outputs are written atomically.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import apcc as apcc_mod
from . import reporting, toycfm
from .errors import PhysAudioError, ValidationError
from .trace import parse_trace
from .velocity import estimate_tracks, track_from_payload, tracks_to_payload

log = logging.getLogger("physaudio")


def _setup_logging():
    level = os.environ.get("PHYSAUDIO_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _merge_config(args: argparse.Namespace, defaults: dict) -> dict:
    """flags > config file > defaults; unknown config keys are rejected."""
    merged = dict(defaults)
    if getattr(args, "config", None):
        cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        unknown = set(cfg) - set(defaults)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        merged.update(cfg)
    for key in defaults:
        flag = getattr(args, key, None)
        if flag is not None:
            merged[key] = flag
    return merged


class UsageError(Exception):
    pass


def cmd_velocity(args) -> int:
    cfg = _merge_config(args, {"median": False})
    trace = parse_trace(args.trace)
    tracks = estimate_tracks(trace, use_median=cfg["median"])
    reporting.write_json_atomic(args.out, tracks_to_payload(trace, tracks))
    log.info("wrote %s (%d tracks)", args.out, len(tracks))
    return 0


def cmd_adapter_check(args) -> int:
    cfg = _merge_config(args, {"seed": 0, "runs": 3, "inputs": 100, "tolerance": 1e-4})
    seed, runs = int(cfg["seed"]), int(cfg["runs"])
    ok = True

    # Zero-init transparency: conditioned vs unconditioned forward passes
    # must agree bit for bit before any training.
    dataset = toycfm.make_dataset(n=32, seed=seed)
    cond = toycfm.init_toy_model(dataset, seed=seed, conditioned=True)
    uncond = toycfm.init_toy_model(dataset, seed=seed, conditioned=False)
    rng = np.random.default_rng([seed, 7])
    mismatches = 0
    for _ in range(int(cfg["inputs"])):
        idx = rng.integers(0, dataset.size, size=4)
        t = rng.uniform(0.0, 1.0, size=4)
        out_c, _ = toycfm._backbone_forward(
            cond, toycfm.interpolate(dataset.x0[idx], dataset.x1[idx], t), t,
            mass=dataset.mass[idx], vel=dataset.vel[idx],
        )
        out_u, _ = toycfm._backbone_forward(
            uncond, toycfm.interpolate(dataset.x0[idx], dataset.x1[idx], t), t,
        )
        if not np.array_equal(out_c, out_u):
            mismatches += 1
    if mismatches:
        print(f"transparency: FAIL ({mismatches} mismatching inputs)")
        ok = False
    else:
        print(f"transparency: ok ({int(cfg['inputs'])} inputs bit-identical)")

    worst = 0.0
    for i in range(runs):
        err = toycfm.full_gradcheck(seed + i)
        worst = max(worst, err)
        print(f"gradcheck seed={seed + i}: max relative error {err:.3e}")
    print(f"max relative error: {worst:.3e}")
    if worst >= float(cfg["tolerance"]):
        ok = False
    return 0 if ok else 1


def cmd_toy_train(args) -> int:
    cfg = _merge_config(args, {
        "seed": 0, "steps": 2000, "samples": 256, "lr": 1e-3,
        "dropout": 0.1, "batch": 64, "data_seed": None,
    })
    data_seed = cfg["data_seed"] if cfg["data_seed"] is not None else cfg["seed"]
    dataset = toycfm.make_dataset(n=int(cfg["samples"]), seed=int(data_seed))
    model = toycfm.init_toy_model(dataset, seed=int(cfg["seed"]),
                                  conditioned=args.conditioned == "on")
    losses = toycfm.train(model, dataset, steps=int(cfg["steps"]),
                          lr=float(cfg["lr"]), dropout_p=float(cfg["dropout"]),
                          batch_size=int(cfg["batch"]))
    reporting.write_text_atomic(
        args.out, json.dumps(toycfm.model_to_payload(model)) + "\n"
    )
    if args.losses:
        reporting.emit_loss_curve(losses, json_path=args.losses)
    if args.losses_csv:
        reporting.emit_loss_curve(losses, csv_path=args.losses_csv)
    print(f"trained {len(losses)} steps: loss {losses[0]:.4f} -> {losses[-1]:.4f}")
    return 0


def cmd_toy_eval(args) -> int:
    cfg = _merge_config(args, {"grid_seed": 0, "grid_size": 8, "euler_steps": None})
    payload = json.loads(Path(args.model).read_text(encoding="utf-8"))
    model = toycfm.model_from_payload(payload)
    result = toycfm.evaluate_grid(
        model, grid_size=int(cfg["grid_size"]), seed=int(cfg["grid_seed"]),
        euler_steps=cfg["euler_steps"] and int(cfg["euler_steps"]),
    )
    rows = [
        [i, float(result.mass[i]), float(result.v_peak[i]), float(result.ke[i]),
         f"class_{result.class_ids[i]}", float(result.amp_gt[i]), float(result.amp_gen[i])]
        for i in range(result.mass.size)
    ]
    reporting.write_csv_atomic(
        args.out, ["event", "mass", "v_peak", "kinetic_energy", "class", "amp_gt", "amp_gen"],
        rows,
    )
    if args.report:
        payload = reporting.report_to_payload(result.report)
        payload["spearman_energy_amplitude"] = result.spearman
        reporting.write_json_atomic(args.report, payload)
    delta = "n/a" if result.apcc_delta is None else f"{result.apcc_delta:.4f}"
    print(f"grid: spearman={result.spearman:.4f} apcc_delta={delta}")
    return 0


def _load_tracks_file(path: str) -> dict:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    entries = payload if isinstance(payload, list) else [payload]
    tracks = {}
    for entry in entries:
        if "video_id" not in entry or "fps" not in entry or "tracks" not in entry:
            raise ValidationError("tracks: each entry needs video_id, fps and tracks")
        tracks[entry["video_id"]] = {
            "fps": float(entry["fps"]),
            "tracks": {t["object_id"]: track_from_payload(t) for t in entry["tracks"]},
        }
    return tracks


def cmd_apcc(args) -> int:
    cfg = _merge_config(args, {
        "window": apcc_mod.DEFAULT_WINDOW, "hop": apcc_mod.DEFAULT_HOP,
        "half_window": apcc_mod.DEFAULT_HALF_WINDOW_S,
        "max_filter": apcc_mod.DEFAULT_MAX_FILTER,
        "k_frames": apcc_mod.DEFAULT_K_FRAMES,
        "correlation": "pearson", "aggregation": "unweighted",
    })
    impacts = json.loads(Path(args.impacts).read_text(encoding="utf-8"))
    if not isinstance(impacts, list):
        raise ValidationError("impacts: top level must be a JSON array")
    settings = apcc_mod.ApccSettings(
        window=int(cfg["window"]), hop=int(cfg["hop"]),
        half_window_s=float(cfg["half_window"]),
        max_filter_width=int(cfg["max_filter"]), k_frames=int(cfg["k_frames"]),
        flavor=cfg["correlation"], aggregation=cfg["aggregation"],
    )
    report = apcc_mod.evaluate_impacts(
        impacts, _load_tracks_file(args.tracks), args.gt_dir, args.gen_dir, settings
    )
    reporting.emit_report(report, json_path=args.out, csv_path=args.csv)
    delta = "n/a" if report.apcc_delta is None else f"{report.apcc_delta:.4f}"
    print(
        f"apcc_delta={delta} over {len(report.classes)} classes "
        f"({len(report.events)} events, {len(report.excluded_events)} excluded)"
    )
    return 0


def cmd_report(args) -> int:
    kind, parsed = reporting.parse_report(getattr(args, "in"))
    if kind == "apcc_report":
        if args.out_json:
            reporting.emit_report(parsed, json_path=args.out_json)
        if args.out_csv:
            reporting.emit_report(parsed, csv_path=args.out_csv)
        delta = "n/a" if parsed.apcc_delta is None else f"{parsed.apcc_delta:.4f}"
        print(f"apcc report: {len(parsed.classes)} classes, apcc_delta={delta}")
    else:
        if args.out_json:
            reporting.emit_loss_curve(parsed, json_path=args.out_json)
        if args.out_csv:
            reporting.emit_loss_curve(parsed, csv_path=args.out_csv)
        print(f"loss curve: {len(parsed)} steps, final={parsed[-1]:.6f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="physaudio",
        description="Object velocity estimation, physics conditioning math, "
                    "toy flow-matching and audio-physics correlation metrics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("velocity", help="estimate metric velocities from a trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--median", action="store_const", const=True, default=None,
                   help="per-coordinate median centroids instead of the mean")
    p.add_argument("--config")
    p.set_defaults(func=cmd_velocity)

    p = sub.add_parser("adapter-check", help="zero-init transparency + gradcheck")
    p.add_argument("--seed", type=int)
    p.add_argument("--runs", type=int, help="number of gradcheck seeds")
    p.add_argument("--inputs", type=int, help="transparency probe inputs")
    p.add_argument("--tolerance", type=float)
    p.add_argument("--config")
    p.set_defaults(func=cmd_adapter_check)

    p = sub.add_parser("toy-train", help="train the toy conditional generator")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--conditioned", choices=["on", "off"], default="on")
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--dropout", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--data-seed", dest="data_seed", type=int)
    p.add_argument("--losses", help="loss curve JSON output")
    p.add_argument("--losses-csv", dest="losses_csv", help="loss curve CSV output")
    p.add_argument("--config")
    p.set_defaults(func=cmd_toy_train)

    p = sub.add_parser("toy-eval", help="sample a held-out grid from a model")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="per-event grid CSV")
    p.add_argument("--report", help="toy correlation report JSON")
    p.add_argument("--grid-seed", dest="grid_seed", type=int)
    p.add_argument("--grid-size", dest="grid_size", type=int)
    p.add_argument("--euler-steps", dest="euler_steps", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_toy_eval)

    p = sub.add_parser("apcc", help="audio-physics correlation over impacts")
    p.add_argument("--impacts", required=True)
    p.add_argument("--tracks", required=True)
    p.add_argument("--gt-dir", dest="gt_dir", required=True)
    p.add_argument("--gen-dir", dest="gen_dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--csv", help="flat per-event CSV table")
    p.add_argument("--window", type=int)
    p.add_argument("--hop", type=int)
    p.add_argument("--half-window", dest="half_window", type=float)
    p.add_argument("--max-filter", dest="max_filter", type=int)
    p.add_argument("--k-frames", dest="k_frames", type=int)
    p.add_argument("--correlation", choices=["pearson", "spearman"])
    p.add_argument("--aggregation", choices=["unweighted", "event_weighted"])
    p.add_argument("--config")
    p.set_defaults(func=cmd_apcc)

    p = sub.add_parser("report", help="re-emit a stored report as JSON/CSV")
    p.add_argument("--in", required=True)
    p.add_argument("--out-csv", dest="out_csv")
    p.add_argument("--out-json", dest="out_json")
    p.set_defaults(func=cmd_report)

    return parser


def run(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.exit(2, f"{parser.prog}: error: {exc}\n")
    except PhysAudioError as exc:
        payload = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(payload), file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        payload = {"error": "FileNotFound", "message": str(exc)}
        print(json.dumps(payload), file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
