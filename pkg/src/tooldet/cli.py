"""Command-line entry point: generate, flow, train, detect, eval, crossval."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, load_config_file
from .data import AnnotationError, load_split, parse_voc_xml, render_flow_cache, write_dataset
from .detector import Detection
from .evaluate import evaluate
from .experiment import cross_validate, detect_all, summarize
from .model import TwoStreamDetector
from .trainer import CheckpointError, load_checkpoint, train

log = logging.getLogger("tooldet")


class CommandError(Exception):
    """A failure worth a one-line message and a nonzero exit."""


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise CommandError(f"{what} {path} not found")
    return path


def cmd_generate(cfg: RunConfig) -> None:
    root = Path(cfg.paths.data_root)
    counts = write_dataset(root, cfg.data.n_sequences, cfg.scene, cfg.seed, cfg.data.n_test)
    cfg.write(root)
    log.info("wrote %d train and %d test frames under %s", counts["train"], counts["test"], root)


def cmd_flow(cfg: RunConfig) -> None:
    root = Path(cfg.paths.data_root)
    _require(root / "frames", "frame directory")
    n = render_flow_cache(root, cfg.data.flow_source, cfg.data.flow_alpha, cfg.data.flow_iterations)
    log.info("rendered %d flow images (%s) into %s", n, cfg.data.flow_source, root / "flow")


def cmd_train(cfg: RunConfig) -> None:
    root = Path(cfg.paths.data_root)
    _require(root / "splits" / "train.txt", "training split")
    samples = load_split(root, "train", with_flow=cfg.model.two_stream)
    out = Path(cfg.paths.output_dir)
    cfg.write(out)
    ckpt = Path(cfg.paths.checkpoint)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    model = TwoStreamDetector(cfg.model, seed=cfg.seed)
    history = train(model, samples, cfg.train_config(), log_path=out / "train.log", checkpoint_path=ckpt,
                    extra_config={"run": cfg.to_text()})
    log.info("trained %d iterations, final loss %.4f, checkpoint %s", len(history),
             history[-1].total if history else float("nan"), ckpt)


def cmd_detect(cfg: RunConfig) -> None:
    ckpt = _require(Path(cfg.paths.checkpoint), "checkpoint")
    model = load_checkpoint(ckpt).to_model()
    root = Path(cfg.paths.data_root)
    _require(root / "splits" / "test.txt", "test split")
    samples = sorted(load_split(root, "test", with_flow=model.config.two_stream), key=lambda s: s.frame_id)
    dets, seconds = detect_all(model, samples, cfg)
    out = Path(cfg.paths.output_dir)
    cfg.write(out)
    with open(out / "detections.txt", "w") as f:
        for s in samples:
            for d in dets[s.frame_id]:
                f.write(d.to_line() + "\n")
    with open(out / "timings.txt", "w") as f:
        for s in samples:
            f.write(f"{s.frame_id} {seconds[s.frame_id]:.6f}\n")
    log.info("%d detections over %d frames written to %s", sum(map(len, dets.values())), len(samples), out)


def read_detections(path: Path) -> dict[str, list[Detection]]:
    out: dict[str, list[Detection]] = {}
    for line in path.read_text().splitlines():
        if line.strip():
            d = Detection.from_line(line)
            out.setdefault(d.frame_id, []).append(d)
    return out


def cmd_eval(cfg: RunConfig, detections: Path | None = None) -> None:
    out = Path(cfg.paths.output_dir)
    det_path = _require(detections or out / "detections.txt", "detections file")
    root = Path(cfg.paths.data_root)
    listing = _require(root / "splits" / "test.txt", "test split")
    frame_ids = listing.read_text().split()
    annotations = {fid: parse_voc_xml((root / "annotations" / f"{fid}.xml").read_bytes()) for fid in frame_ids}
    dets = read_detections(det_path)
    timings = {}
    timing_path = det_path.parent / "timings.txt"
    if timing_path.exists():
        for line in timing_path.read_text().splitlines():
            fid, sec = line.split()
            timings[fid] = float(sec)
    # frames listed in timings were processed, even when they produced no detections
    for fid in timings:
        dets.setdefault(fid, [])
    report = evaluate(annotations, dets, timings, cfg.eval.iou_thresh, cfg.eval.eleven_point)
    report.write(out)
    cfg.write(out)
    print(report.to_text(), end="")


def cmd_crossval(cfg: RunConfig, folds: int | None = None) -> None:
    aps = cross_validate(cfg, folds)
    out = Path(cfg.paths.output_dir)
    cfg.write(out)
    lines = [f"fold {i} ap {ap:.6f}" for i, ap in enumerate(aps)] + [summarize(aps)]
    (out / "crossval.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="tooldet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="render a synthetic dataset to disk")
    sub.add_parser("flow", parents=[common], help="render flow images for every frame")
    sub.add_parser("train", parents=[common], help="train a model and write a checkpoint")
    sub.add_parser("detect", parents=[common], help="run a checkpoint over the test split")
    p = sub.add_parser("eval", parents=[common], help="score a detections file")
    p.add_argument("--detections", type=Path)
    p = sub.add_parser("crossval", parents=[common], help="k-fold train/test over sequences, in memory")
    p.add_argument("--folds", type=int)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    try:
        cfg = load_config_file(args.config, overrides)
        if args.command == "generate":
            cmd_generate(cfg)
        elif args.command == "flow":
            cmd_flow(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "detect":
            cmd_detect(cfg)
        elif args.command == "eval":
            cmd_eval(cfg, args.detections)
        else:
            cmd_crossval(cfg, args.folds)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2
    except (CommandError, CheckpointError, AnnotationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
