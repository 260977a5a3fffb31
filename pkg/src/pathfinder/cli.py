"""``pathfinder`` command line.

Successful commands print one JSON object on stdout, including the fully
resolved configuration.  Logs go to stderr.  Exit codes: 2 bad flags,
3 backend failure, 4 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import diagnosis, navigator, slide_io, trajectory, triage
from .backends import build_backends, load_config, mock_backends
from .errors import BackendError, DataError

log = logging.getLogger("pathfinder")

EXIT_USAGE = 2
EXIT_BACKEND = 3
EXIT_DATA = 4

CLASS_NAMES = ("I", "II", "III", "IV")


# ---------------------------------------------------------------------------
# Commands: each returns the JSON-serialisable result.


def cmd_synth(count, classes=CLASS_NAMES, seed=0, out_dir=".", width=1024, height=1024) -> list:
    """Write ``count`` synthetic slides, classes assigned round-robin, plus ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = []
    for i in range(count):
        label = classes[i % len(classes)]
        slide_id = f"synth-{seed}-{i:04d}"
        slide, _ = slide_io.synth_case(label, diagnosis.slide_seed(seed, i), width, height, slide_id)
        slide_io.write_slide(slide, out / slide_id)
        manifest.append({"slide_dir": slide_id, "label": label})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def read_manifest(path) -> list:
    path = Path(path)
    try:
        entries = json.loads(path.read_text())
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from None
    except ValueError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(entries, list):
        raise DataError(f"{path}: manifest must be a JSON list")
    dataset = []
    for k, e in enumerate(entries):
        try:
            slide_dir = Path(e["slide_dir"])
            label = diagnosis.DiagnosisClass.parse(e["label"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}: entry {k} is invalid ({exc})") from None
        if not slide_dir.is_absolute():
            slide_dir = path.parent / slide_dir
        dataset.append((slide_dir, label))
    return dataset


def cmd_triage(slide_dir, backends, threshold=triage.DECISION_THRESHOLD, seed=0) -> dict:
    slide = slide_io.load_slide(slide_dir)
    cfg = diagnosis.PipelineConfig(seed=seed, threshold=threshold)
    verdict = diagnosis.run_triage_stage(slide, backends, cfg)
    return {"risky": verdict.risky, "score": verdict.score}


def cmd_trajectories(slide_dir, backends, n, length, seed, out, sampler="text_conditioned",
                     workers=1, viewports=None) -> dict:
    slide = slide_io.load_slide(slide_dir)
    records = navigator.read_viewport_log(viewports) if viewports else None
    tset = trajectory.generate_set(slide, n, length, backends, seed, sampler=sampler,
                                   records=records, workers=workers)
    trajectory.write_trajectories(tset, out)
    return {"out": str(out), "slide_id": tset.slide_id, "trajectories": len(tset.trajectories),
            "steps": sum(len(t.steps) for t in tset.trajectories)}


def cmd_diagnose(slide_dir, backends, n, length, seed, trajectory_out=None,
                 sampler="text_conditioned", viewports=None) -> dict:
    slide = slide_io.load_slide(slide_dir)
    records = navigator.read_viewport_log(viewports) if viewports else None
    cfg = diagnosis.PipelineConfig(n=n, length=length, seed=seed, sampler=sampler)
    label, prov = diagnosis.run_pipeline(slide, backends, cfg, records=records)
    traj_file = None
    if prov.trajectories is not None:
        traj_file = Path(trajectory_out or f"trajectories_{slide.slide_id}_{seed}.jsonl")
        trajectory.write_trajectories(prov.trajectories, traj_file)
        traj_file = str(traj_file)
    vote = prov.vote.to_dict() if prov.vote else {"tally": {}, "tie_broken": False}
    return {"label": label.name, "tally": vote["tally"], "tie_broken": vote["tie_broken"],
            "trajectory_file": traj_file, "triage": {"risky": prov.triage.risky,
                                                     "score": prov.triage.score}}


def cmd_evaluate(manifest, backends, runs, subset, pool, seed, out=None, workers=1,
                 length=trajectory.DEFAULT_LENGTH, sampler="text_conditioned", viewports=None) -> dict:
    dataset = read_manifest(manifest)
    records = navigator.read_viewport_log(viewports) if viewports else None
    cfg = diagnosis.PipelineConfig(length=length, sampler=sampler)
    report = diagnosis.evaluate(dataset, backends, runs, subset, pool, seed, config=cfg,
                                workers=workers, records=records).to_dict()
    if out:
        Path(out).write_text(json.dumps(report, indent=2) + "\n")
    return report


def cmd_heatmap(slide_dir, backends, out, grid_side=navigator.GRID_SIDE) -> dict:
    """First-iteration (unconditioned) importance map as a PGM scaled to 0-255."""
    slide = slide_io.load_slide(slide_dir)
    mask = np.zeros((grid_side, grid_side), dtype=bool)
    imap = navigator.request_map(backends.navigator, slide, mask,
                                 navigator.init_embedding(backends.embedding_dim), grid_side)
    slide_io.write_pgm(out, navigator.heatmap_to_pgm_values(imap))
    return {"out": str(out), "grid_side": grid_side, "max_score": float(imap.scores.max())}


def cmd_serve_mock(host, port, delay=0.0, embedding_dim=768):
    from .backends.server import StubServer

    server = StubServer(mock_backends(embedding_dim), host, port, delay)
    print(json.dumps({"url": server.url, "delay_s": delay, "embedding_dim": embedding_dim}), flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return None


# ---------------------------------------------------------------------------
# Argument parsing


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _seed(text):
    v = int(text, 0)
    if not 0 <= v < 1 << 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=_seed, default=0, help="64-bit seed (default 0, echoed)")
    common.add_argument("--backends", "--backend", dest="backends", default=None,
                        help="'mock', a base URL, or a JSON backend config "
                             "(default: $PATHFINDER_BACKENDS or 'mock')")
    common.add_argument("--workers", type=_positive_int, default=os.cpu_count() or 1)
    common.add_argument("--log-level", default="WARNING",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = argparse.ArgumentParser(prog="pathfinder", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic slide dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--classes", default=",".join(CLASS_NAMES),
                   help="comma-separated class mix, assigned round-robin (default: balanced I-IV)")
    p.add_argument("--size", type=int, default=1024, help="slide side length in pixels")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("triage", parents=[common], help="benign/risky verdict for one slide")
    p.add_argument("--slide", required=True)
    p.add_argument("--threshold", type=float, default=triage.DECISION_THRESHOLD)

    samplers = [k.value for k in navigator.SamplerKind]
    p = sub.add_parser("trajectories", parents=[common], help="generate a trajectory set")
    p.add_argument("--slide", required=True)
    p.add_argument("--n", type=_positive_int, default=5)
    p.add_argument("--length", type=_positive_int, default=trajectory.DEFAULT_LENGTH)
    p.add_argument("--sampler", choices=samplers, default="text_conditioned")
    p.add_argument("--viewports", help="viewport log (JSONL) for the imitated sampler")
    p.add_argument("--out", required=True)

    p = sub.add_parser("diagnose", parents=[common], help="full triage-gated diagnosis of one slide")
    p.add_argument("--slide", required=True)
    p.add_argument("--n", type=_positive_int, default=5)
    p.add_argument("--length", type=_positive_int, default=trajectory.DEFAULT_LENGTH)
    p.add_argument("--sampler", choices=samplers, default="text_conditioned")
    p.add_argument("--viewports")
    p.add_argument("--trajectory-out")

    p = sub.add_parser("evaluate", parents=[common], help="repeated majority-vote evaluation")
    p.add_argument("--dataset", required=True, help="manifest JSON: [{slide_dir, label}]")
    p.add_argument("--runs", type=_positive_int, default=10)
    p.add_argument("--subset", type=_positive_int, default=5)
    p.add_argument("--pool", type=_positive_int, default=20)
    p.add_argument("--length", type=_positive_int, default=trajectory.DEFAULT_LENGTH)
    p.add_argument("--sampler", choices=samplers, default="text_conditioned")
    p.add_argument("--viewports")
    p.add_argument("--out")

    p = sub.add_parser("heatmap", parents=[common], help="first-iteration importance map as PGM")
    p.add_argument("--slide", required=True)
    p.add_argument("--grid-side", type=_positive_int, default=navigator.GRID_SIDE)
    p.add_argument("--out", required=True)

    p = sub.add_parser("serve-mock", parents=[common], help="serve the mock backends over HTTP")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8500)
    p.add_argument("--delay", type=float, default=0.0, help="seconds to stall every response")
    p.add_argument("--embedding-dim", type=_positive_int, default=768)
    return parser


def _run(args, parser):
    cmd = args.command
    if cmd == "synth":
        classes = [c.strip().upper() for c in args.classes.split(",") if c.strip()]
        bad = [c for c in classes if c not in CLASS_NAMES]
        if bad or not classes:
            parser.error(f"--classes must list classes from {CLASS_NAMES}, got {args.classes!r}")
        if args.count < 0:
            parser.error("--count must be non-negative")
        manifest = cmd_synth(args.count, classes, args.seed, args.out_dir, args.size, args.size)
        return {"manifest": str(Path(args.out_dir) / "manifest.json"), "slides": manifest}
    if cmd == "serve-mock":
        return cmd_serve_mock(args.host, args.port, args.delay, args.embedding_dim)

    config = load_config(args.backends)
    backends = build_backends(config)
    if cmd == "triage":
        return cmd_triage(args.slide, backends, args.threshold, args.seed)
    if cmd == "trajectories":
        return cmd_trajectories(args.slide, backends, args.n, args.length, args.seed, args.out,
                                args.sampler, args.workers, args.viewports)
    if cmd == "diagnose":
        return cmd_diagnose(args.slide, backends, args.n, args.length, args.seed,
                            args.trajectory_out, args.sampler, args.viewports)
    if cmd == "evaluate":
        if args.subset > args.pool:
            parser.error("--subset must not exceed --pool")
        return cmd_evaluate(args.dataset, backends, args.runs, args.subset, args.pool, args.seed,
                            args.out, args.workers, args.length, args.sampler, args.viewports)
    if cmd == "heatmap":
        return cmd_heatmap(args.slide, backends, args.out, args.grid_side)
    raise AssertionError(cmd)


def _resolved_config(args) -> dict:
    cfg = {k: v for k, v in vars(args).items()}
    if args.command not in ("synth", "serve-mock"):
        cfg["backends"] = load_config(args.backends).to_dict()
    return cfg


def _fail(code, category, exc):
    print(json.dumps({"error": category, "type": type(exc).__name__, "message": str(exc)}),
          file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        result = _run(args, parser)
        if result is None:
            return 0
        payload = {"command": args.command, "config": _resolved_config(args), "result": result}
    except BackendError as exc:
        return _fail(EXIT_BACKEND, "backend", exc)
    except (DataError, OSError) as exc:
        return _fail(EXIT_DATA, "data", exc)
    except ValueError as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    print(json.dumps(payload, indent=2, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
