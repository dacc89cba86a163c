"""Command line interface.

Subcommands either talk to remote segmentation/detection endpoints or run
fully offline against seeded synthetic scenes (--mock).  Machine-readable
output goes to stdout when --json is given; human status lines then move to
stderr so the two never share a stream.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from irsis import dataset, evaluation, trainmath
from irsis.agent import AgentConfig, AgentFault, run_to_completion
from irsis.backends import (
    DEFAULT_TIMEOUT_SECS,
    CorruptionModel,
    JitteredDetector,
    NoisySegmenter,
    OracleBackend,
    RemoteBackend,
)
from irsis.images import decode_png, encode_png
from irsis.mask import StructuringElement
from irsis.quality import QualityThresholds
from irsis.scene import GENERIC_LABEL, random_scene
from irsis.viz import mask_to_image, render_session_overlay

log = logging.getLogger(__name__)

TIMEOUT_ENV = "IRSIS_BACKEND_TIMEOUT_SECS"


def _dump_json(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


class _Printer:
    """Routes output: machine JSON on stdout, human lines on the other stream."""

    def __init__(self, json_mode: bool):
        self.json_mode = json_mode

    def human(self, line: str) -> None:
        print(line, file=sys.stderr if self.json_mode else sys.stdout)

    def payload(self, obj: dict) -> None:
        if self.json_mode:
            sys.stdout.write(_dump_json(obj))


def _client_timeout(parser: argparse.ArgumentParser) -> float:
    raw = os.environ.get(TIMEOUT_ENV)
    if raw is None or not raw.strip():
        return DEFAULT_TIMEOUT_SECS
    try:
        value = float(raw)
    except ValueError:
        parser.error(f"{TIMEOUT_ENV} must be a number, got {raw!r}")
    if value <= 0:
        parser.error(f"{TIMEOUT_ENV} must be positive, got {raw!r}")
    return value


# ---------------------------------------------------------------------------
# shared flag groups


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tau-c", type=float, default=0.85,
                   help="coverage threshold for the quality gate")
    p.add_argument("--tau-o", type=float, default=0.50,
                   help="per-box overlap threshold")
    p.add_argument("--max-iters", type=int, default=3,
                   help="refinement round budget")
    p.add_argument("--kernel-side", type=int, default=5,
                   help="square structuring element side (odd)")


def _add_mock_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mock", action="store_true",
                   help="run against a seeded synthetic scene, no network")
    p.add_argument("--seed", type=int, default=None,
                   help="scene/noise seed, required with --mock")
    p.add_argument("--instruments", type=int, default=None,
                   help="instrument count for the synthetic scene")
    p.add_argument("--p-drop", type=float, default=0.0,
                   help="mock segmenter: per-component drop probability")
    p.add_argument("--morph-steps", type=int, nargs=2, default=(0, 0),
                   metavar=("LO", "HI"),
                   help="mock segmenter: dilate/erode step range")
    p.add_argument("--salt-blobs", type=int, nargs=2, default=(0, 0),
                   metavar=("LO", "HI"),
                   help="mock segmenter: spurious blob count range")
    p.add_argument("--fidelity-gain", type=float, default=4.0,
                   help="corruption reduction for box-prompted calls")
    p.add_argument("--jitter-px", type=int, default=0,
                   help="mock detector: outward box jitter in pixels")
    p.add_argument("--detector-miss", type=float, default=0.0,
                   help="mock detector: per-instrument miss probability")


def _add_remote_flags(p: argparse.ArgumentParser, with_image: bool) -> None:
    p.add_argument("--segmenter-url", default=None,
                   help="base URL of the segmentation endpoint")
    p.add_argument("--detector-url", default=None,
                   help="base URL of the detection endpoint "
                        "(defaults to the segmenter URL)")
    if with_image:
        p.add_argument("--image", default=None, help="input PNG path (remote mode)")


def _check_mode(parser: argparse.ArgumentParser, args: argparse.Namespace,
                require_image: bool) -> None:
    if args.mock:
        if args.segmenter_url or args.detector_url:
            parser.error("--mock and remote backend URLs are mutually exclusive")
        if require_image and getattr(args, "image", None):
            parser.error("--mock renders its own scene; drop --image")
        if args.seed is None:
            parser.error("--seed is required with --mock")
    else:
        if not args.segmenter_url:
            parser.error("provide --segmenter-url or use --mock")
        if require_image and not getattr(args, "image", None):
            parser.error("--image is required with remote backends")


def _mock_backends(args: argparse.Namespace, seed: int):
    """Build (image, segmenter, detector, oracle) for one synthetic scene."""
    spec = random_scene(seed, n_instruments=args.instruments)
    oracle = OracleBackend(spec)
    segmenter = oracle
    if args.p_drop > 0 or any(args.morph_steps) or any(args.salt_blobs):
        model = CorruptionModel(
            seed=seed,
            p_drop_component=args.p_drop,
            dilate_or_erode_steps=tuple(args.morph_steps),
            salt_blob_count=tuple(args.salt_blobs),
            box_prompt_fidelity_gain=args.fidelity_gain,
        )
        segmenter = NoisySegmenter(oracle, model)
    detector = oracle
    if args.jitter_px > 0 or args.detector_miss > 0:
        detector = JitteredDetector(oracle, seed, jitter_px=args.jitter_px,
                                    drop_probability=args.detector_miss)
    return oracle.image, segmenter, detector, oracle


def _remote_backends(parser: argparse.ArgumentParser, args: argparse.Namespace):
    timeout = _client_timeout(parser)
    segmenter = RemoteBackend(args.segmenter_url, timeout=timeout)
    det_url = args.detector_url or args.segmenter_url
    detector = segmenter if det_url == args.segmenter_url else RemoteBackend(det_url, timeout=timeout)
    return segmenter, detector


def _agent_config(args: argparse.Namespace) -> AgentConfig:
    return AgentConfig(
        thresholds=QualityThresholds(tau_c=args.tau_c, tau_o=args.tau_o),
        max_iterations=args.max_iters,
        kernel=StructuringElement(args.kernel_side),
    )


def _record_summary(rec) -> dict:
    return {
        "t": rec.t,
        "strategy": rec.strategy.value if rec.strategy else None,
        "refined_boxes": list(rec.refined_boxes),
        "feedback_applied": list(rec.feedback_applied),
        "faults": list(rec.faults),
        "report": rec.report.to_dict() if rec.report else None,
        "report_after": rec.report_after.to_dict() if rec.report_after else None,
    }


def _write_session_artifacts(out: Path, session, image: np.ndarray) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    final = session.final_mask if session.final_mask is not None else session.current_mask
    (out / "final_mask.irle").write_bytes(final.rle_encode())
    (out / "final_mask.png").write_bytes(encode_png(mask_to_image(final)))

    last = session.history[-1] if session.history else None
    last_report = None
    if last is not None:
        last_report = last.report_after if last.report_after else last.report
    low = last_report.low_boxes if last_report else ()
    overlay = render_session_overlay(image, final, list(session.detections), tuple(low))
    (out / "overlay.png").write_bytes(encode_png(overlay))

    reports_dir = out / "reports"
    reports_dir.mkdir(exist_ok=True)
    for rec in session.history:
        (reports_dir / f"t{rec.t:03d}.json").write_text(_dump_json(_record_summary(rec)))

    summary = {
        "session_id": session.session_id,
        "state": session.state.value,
        "query": session.query,
        "original_query": session.original_query,
        "iterations": len(session.history),
        "rounds": session.rounds,
        "final_area": final.area,
        "gate_passed": bool(last_report.gate) if last_report else None,
        "config": session.config.to_dict(),
        "detections": [d.to_dict() for d in session.detections],
        "fault": session.fault,
        "files": {
            "final_mask": "final_mask.irle",
            "final_mask_png": "final_mask.png",
            "overlay": "overlay.png",
            "reports": sorted(p.name for p in reports_dir.iterdir()),
        },
    }
    (out / "summary.json").write_text(_dump_json(summary))
    return summary


# ---------------------------------------------------------------------------
# subcommands


def cmd_run(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    pr = _Printer(args.json)
    _check_mode(parser, args, require_image=True)
    config = _agent_config(args)

    if args.mock:
        image, segmenter, detector, _ = _mock_backends(args, args.seed)
        target = f"mock scene seed={args.seed}"
    else:
        image_path = Path(args.image)
        if not image_path.is_file():
            pr.human(f"error: image not found: {image_path}")
            return 1
        try:
            image = decode_png(image_path.read_bytes())
        except ValueError as exc:
            pr.human(f"error: cannot decode {image_path}: {exc}")
            return 1
        segmenter, detector = _remote_backends(parser, args)
        target = args.segmenter_url

    try:
        session = run_to_completion(image, args.query, segmenter, detector,
                                    config, session_id=args.session_id)
    except AgentFault as exc:
        pr.human(f"error: session failed against {target}: {exc}")
        return 1

    summary = _write_session_artifacts(Path(args.out), session, image)
    pr.human(f"state={summary['state']} iterations={summary['iterations']} "
             f"final_area={summary['final_area']} out={args.out}")
    pr.payload(summary)
    return 0


def cmd_batch(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    pr = _Printer(args.json)
    if args.seed is None:
        parser.error("--seed is required for batch runs")
    if args.images < 1:
        parser.error("--images must be >= 1")

    out = Path(args.out)
    pred_dir = out / "pred"
    gt_dir = out / "gt"
    pred_dir.mkdir(parents=True, exist_ok=True)
    gt_dir.mkdir(parents=True, exist_ok=True)
    config = _agent_config(args)

    initial_ious = []
    final_ious = []
    per_scene = []
    for i in range(args.images):
        seed = args.seed + i
        image, segmenter, detector, oracle = _mock_backends(args, seed)
        truth = oracle.ground_truth_union(args.query)
        try:
            session = run_to_completion(image, args.query, segmenter, detector,
                                        config, session_id=f"b{i:04d}")
        except AgentFault as exc:
            pr.human(f"error: scene {i} (seed {seed}) failed: {exc}")
            return 1
        final = session.final_mask if session.final_mask is not None else session.current_mask
        name = f"scene_{i:05d}"
        (pred_dir / f"{name}.irle").write_bytes(final.rle_encode())
        (gt_dir / f"{name}.irle").write_bytes(truth.rle_encode())
        first_in = session.history[0].mask_in if session.history else final
        iou0 = evaluation.iou(first_in, truth)
        iou1 = evaluation.iou(final, truth)
        initial_ious.append(iou0)
        final_ious.append(iou1)
        per_scene.append({
            "scene": name,
            "seed": seed,
            "state": session.state.value,
            "iterations": len(session.history),
            "iou_initial": iou0,
            "iou_final": iou1,
        })

    report = evaluation.batch_eval(pred_dir, gt_dir)
    combined = {
        "n_images": args.images,
        "query": args.query,
        "mean_iou_initial": float(np.mean(initial_ious)),
        "mean_iou_final": float(np.mean(final_ious)),
        "improved": sum(1 for a, b in zip(initial_ious, final_ious) if b > a),
        "eval": report,
        "scenes": per_scene,
    }
    (out / "report.json").write_text(_dump_json(combined))
    pr.human(f"{args.images} scenes: mean IoU {combined['mean_iou_initial']:.4f} "
             f"-> {combined['mean_iou_final']:.4f} ({combined['improved']} improved)")
    pr.payload(combined)
    return 0


def cmd_eval(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    pr = _Printer(args.json)
    labels = None
    if args.labels:
        try:
            labels = json.loads(Path(args.labels).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            pr.human(f"error: cannot read labels file {args.labels}: {exc}")
            return 1
        if not isinstance(labels, dict):
            pr.human("error: labels file must hold a JSON object (filename -> label)")
            return 1
    try:
        report = evaluation.batch_eval(args.pred, args.gt, labels=labels)
    except (OSError, ValueError) as exc:
        pr.human(f"error: {exc}")
        return 1
    text = evaluation.format_report(report)
    if args.out:
        Path(args.out).write_text(text)
    if args.json:
        sys.stdout.write(text)
        pr.human(f"{report['n_images']} images, mean IoU {report['mean_iou']:.4f}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_expand_prompts(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    pr = _Printer(args.json)
    annotations, errors = dataset.load_corpus(args.corpus)
    if errors:
        for e in errors:
            pr.human(f"corpus error: {e}")
        return 1
    result = dataset.expand(annotations)
    dataset.write_expanded(result.samples, args.out)
    for s in result.skipped:
        pr.human(f"skipped: {s}")
    pr.human(f"wrote {len(result.samples)} prompt samples "
             f"({len(result.skipped)} skipped) to {args.out}")
    pr.payload({
        "annotations": len(annotations),
        "samples": len(result.samples),
        "skipped": list(result.skipped),
        "out": str(args.out),
    })
    return 0


def cmd_validate_corpus(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    pr = _Printer(args.json)
    result = dataset.validate_corpus(args.corpus, check_masks=args.check_masks,
                                     expanded_path=args.expanded)
    verdict = "OK" if result.ok else "FAILED"
    pr.human(f"{verdict}: {result.images} images, {result.annotations} annotations, "
             f"{result.expanded} prompt samples")
    for e in result.errors:
        pr.human(f"  {e}")
    pr.payload(result.to_dict())
    return 0 if result.ok else 1


def _build_service_app(args: argparse.Namespace, parser: argparse.ArgumentParser):
    from irsis.service import SessionStore, build_app

    _check_mode(parser, args, require_image=False)
    if args.mock:
        _, segmenter, detector, _ = _mock_backends(args, args.seed)
        kind = f"mock:{args.seed}"
    else:
        segmenter, detector = _remote_backends(parser, args)
        kind = "remote"
    store = SessionStore(args.store)
    return build_app(store, segmenter, detector,
                     default_config=_agent_config(args), backend_kind=kind)


def cmd_serve(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    import uvicorn

    app = _build_service_app(args, parser)
    logging.getLogger().setLevel(logging.INFO)
    log.info("serving sessions from %s on %s:%d", args.store, args.host, args.port)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


def _build_mock_backend_app(args: argparse.Namespace):
    from irsis.mockserver import build_backend_app

    _, segmenter, detector, _ = _mock_backends(args, args.seed)
    return build_backend_app(segmenter, detector, backend_kind=f"mock:{args.seed}")


def cmd_mock_backend(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    import uvicorn

    if args.seed is None:
        parser.error("--seed is required for the mock backend")
    app = _build_mock_backend_app(args)
    logging.getLogger().setLevel(logging.INFO)
    log.info("mock backend (seed %d) on %s:%d", args.seed, args.host, args.port)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


def cmd_emit_train_config(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    pr = _Printer(args.json)
    weights = trainmath.LossWeights()
    if args.preset == "tenth":
        weights = trainmath.LossWeights.tenth_scale()
    config = trainmath.train_config(weights=weights)

    if args.out:
        Path(args.out).write_text(_dump_json(config))
    if args.schedule_out:
        groups = [trainmath.ParamGroup("decoder", "decoder")]
        for d in range(args.backbone_depth):
            groups.append(trainmath.ParamGroup(f"backbone.{d}", "backbone", depth_from_top=d))
        groups.append(trainmath.ParamGroup("text_encoder", "text"))
        rows = trainmath.emit_schedule(trainmath.LrSchedule(), groups)
        Path(args.schedule_out).write_text(trainmath.format_schedule(rows))

    lw = config["loss_weights"]
    pr.human(f"loss weights: mask={lw['w_mask']} dice={lw['w_dice']} "
             f"ce={lw['w_ce']} presence={lw['w_presence']}; "
             f"decoder lr {config['lr_schedule']['decoder_lr']}")
    pr.payload(config)
    return 0


# ---------------------------------------------------------------------------
# parser assembly


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="irsis",
        description="Iterative refinement for language-prompted surgical "
                    "instrument segmentation.",
    )
    parser.add_argument("-v", "--verbose", action="count", default=0,
                        help="-v for info, -vv for debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, json_flag=True):
        p.add_argument("--config", default=None,
                       help="JSON file of defaults; explicit flags win")
        if json_flag:
            p.add_argument("--json", action="store_true",
                           help="machine-readable JSON on stdout")

    p = sub.add_parser("run", help="segment one image and refine to termination")
    common(p)
    p.add_argument("--query", required=True, help="language query naming the target")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--session-id", default="run")
    _add_mock_flags(p)
    _add_remote_flags(p, with_image=True)
    _add_config_flags(p)

    p = sub.add_parser("batch", help="run many seeded synthetic scenes and score them")
    common(p)
    p.add_argument("--images", type=int, default=8, help="number of scenes")
    p.add_argument("--query", default=GENERIC_LABEL)
    p.add_argument("--out", required=True, help="output directory")
    _add_mock_flags(p)
    _add_config_flags(p)

    p = sub.add_parser("eval", help="score predicted masks against ground truth")
    common(p)
    p.add_argument("--pred", required=True, help="directory of predicted .irle masks")
    p.add_argument("--gt", required=True, help="directory of ground-truth .irle masks")
    p.add_argument("--labels", default=None,
                   help="JSON file mapping mask filename to class label")
    p.add_argument("--out", default=None, help="also write the report here")

    p = sub.add_parser("expand-prompts",
                       help="expand corpus annotations into per-level prompt samples")
    common(p)
    p.add_argument("--corpus", required=True, help="corpus JSONL path")
    p.add_argument("--out", required=True, help="expanded samples JSONL path")

    p = sub.add_parser("validate-corpus", help="check corpus structure and mask files")
    common(p)
    p.add_argument("--corpus", required=True, help="corpus JSONL path")
    p.add_argument("--check-masks", action="store_true",
                   help="open every image and mask file")
    p.add_argument("--expanded", default=None,
                   help="cross-check a previously expanded samples file")

    p = sub.add_parser("serve", help="run the session HTTP service")
    common(p, json_flag=False)
    p.add_argument("--store", required=True, help="session store directory")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8710)
    _add_mock_flags(p)
    _add_remote_flags(p, with_image=False)
    _add_config_flags(p)

    p = sub.add_parser("mock-backend",
                       help="serve a seeded oracle as segment/detect endpoints")
    common(p, json_flag=False)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8711)
    _add_mock_flags(p)

    p = sub.add_parser("emit-train-config", help="print training hyperparameters")
    common(p)
    p.add_argument("--preset", choices=("default", "tenth"), default="default",
                   help="tenth = all loss weights scaled by 0.1")
    p.add_argument("--out", default=None, help="write the config JSON here")
    p.add_argument("--schedule-out", default=None,
                   help="write the per-epoch learning-rate table here")
    p.add_argument("--backbone-depth", type=int, default=12,
                   help="backbone block count for the schedule table")

    return parser, sub


_DISPATCH = {
    "run": cmd_run,
    "batch": cmd_batch,
    "eval": cmd_eval,
    "expand-prompts": cmd_expand_prompts,
    "validate-corpus": cmd_validate_corpus,
    "serve": cmd_serve,
    "mock-backend": cmd_mock_backend,
    "emit-train-config": cmd_emit_train_config,
}


def main(argv: list[str] | None = None) -> int:
    parser, sub = _build_parser()
    args = parser.parse_args(argv)

    if getattr(args, "config", None):
        try:
            overrides = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read config file {args.config}: {exc}")
        if not isinstance(overrides, dict):
            parser.error("config file must hold a JSON object")
        subparser = sub.choices[args.command]
        valid = {a.dest for a in subparser._actions}
        unknown = sorted(set(overrides) - valid)
        if unknown:
            parser.error("unknown config keys: " + ", ".join(unknown))
        subparser.set_defaults(**overrides)
        args = parser.parse_args(argv)

    level = logging.WARNING
    if args.verbose == 1:
        level = logging.INFO
    elif args.verbose >= 2:
        level = logging.DEBUG
    logging.basicConfig(level=level, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")

    return _DISPATCH[args.command](args, parser)


if __name__ == "__main__":
    sys.exit(main())
