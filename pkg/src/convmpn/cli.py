"""Command line: gen-data, train, infer, eval.

Exit codes: 0 success, 1 usage or validation error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from threadpoolctl import threadpool_limits

from .checkpoint import CheckpointError
from .config import RunConfig
from .geometry import PlanarGraph
from .inference import DEFAULT_THRESHOLD, graph_from_prediction, load_model, predict, read_corners
from .metrics import MatchConfig, evaluate_corpus, sweep_corpus, sweep_csv
from .model import build_model
from .overlay import render_svg
from .synth import SynthSpec, corner_histogram, load_corpus, load_image, split_records, write_corpus
from .tensor import NumericError
from .trainer import load_examples, load_run, save_run, train_loop

log = logging.getLogger("convmpn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _echo(args, text: str) -> None:
    if not args.quiet:
        print(text)


# -- gen-data ----------------------------------------------------------------
def cmd_gen_data(args) -> int:
    spec = SynthSpec()
    if args.spec:
        d = json.loads(Path(args.spec).read_text())
        spec = RunConfig.from_dict(d).synth if "synth" in d else SynthSpec.from_dict(d)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    if args.count is not None:
        spec = replace(spec, count=args.count)
    manifest = write_corpus(spec, args.out, jobs=args.jobs)
    hist = corner_histogram(manifest)
    _echo(args, f"{len(manifest['records'])} records written to {args.out}")
    _echo(args, "corners  count")
    for n, c in hist.items():
        _echo(args, f"{n:>7}  {c}")
    return EXIT_OK


# -- train -------------------------------------------------------------------
def cmd_train(args) -> int:
    out = Path(args.out)
    saved = out / "config.json"
    if args.resume:
        if not saved.is_file():
            raise DataError(f"--resume: no run found in {out}")
        run = RunConfig.load(saved)
        if args.config and RunConfig.load(args.config).to_dict() != {**run.to_dict(), "paths": run.paths}:
            raise UsageError("--resume: --config differs from the run's saved config.json")
    else:
        run = RunConfig.load(args.config) if args.config else RunConfig()
        model_cfg = run.model
        if args.variant:
            model_cfg = replace(model_cfg, variant=args.variant)
        if args.t is not None:
            model_cfg = replace(model_cfg, t=args.t)
        train_cfg = run.train
        if args.seed is not None:
            model_cfg = replace(model_cfg, seed=args.seed)
            train_cfg = replace(train_cfg, seed=args.seed)
        if args.max_epochs is not None:
            train_cfg = replace(train_cfg, max_epochs=args.max_epochs)
        run = replace(run, model=model_cfg, train=train_cfg, paths={**run.paths, "data": str(args.data)})

    spec, records = load_corpus(args.data)
    if spec.image_size != run.model.image_size:
        raise DataError(f"corpus image size {spec.image_size} does not match model image_size {run.model.image_size}")
    train_recs, val_recs = split_records(records, run.train.val_fraction, run.train.seed)
    if not train_recs or not val_recs:
        raise DataError(f"corpus {args.data} is too small for a train/validation split ({len(records)} records)")

    out.mkdir(parents=True, exist_ok=True)
    model = build_model(run.model)
    digest = run.model.digest()
    state = load_run(out, model, run.train, digest) if args.resume else None
    if not args.resume:
        run.save(saved)

    def on_epoch(st, m):
        save_run(out, st, m, digest)
        row = st.history[-1]
        if row["epoch"] > 0:
            _echo(args, f"epoch {row['epoch']:3d}  train {row['train_loss']:.4f}  val {row['val_loss']:.4f}  "
                        f"lr {row['lr']:.3g}")

    state = train_loop(model, load_examples(train_recs), load_examples(val_recs), run.train,
                       state=state, on_epoch=on_epoch)
    _echo(args, f"best epoch {state.best_epoch}; checkpoint {out / 'model.cmpn'}")
    return EXIT_OK


# -- infer -------------------------------------------------------------------
def cmd_infer(args) -> int:
    model, run = load_model(args.model)
    size = run["model"]["image_size"]
    if args.data:
        return _infer_corpus(args, model, size)
    if not (args.image and args.corners):
        raise UsageError("infer needs --image and --corners, or --data")
    image = load_image(args.image)
    if image.shape[-1] != size:
        raise DataError(f"image size {image.shape[-1]} does not match model image_size {size}")
    corners = read_corners(args.corners)
    if len(corners) < 2:
        log.warning("fewer than 2 corners in %s; emitting an empty graph", args.corners)
    pred = predict(model, image, corners, args.threshold)
    text = pred.to_json()
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    if args.svg:
        gt = PlanarGraph.from_json(Path(args.gt).read_text()) if args.gt else None
        Path(args.svg).write_text(render_svg(image, pred.kept(), gt))
    return EXIT_OK


def _infer_corpus(args, model, size: int) -> int:
    spec, records = load_corpus(args.data)
    if spec.image_size != size:
        raise DataError(f"corpus image size {spec.image_size} does not match model image_size {size}")
    if not args.out:
        raise UsageError("--data needs --out DIR")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.svg:
        Path(args.svg).mkdir(parents=True, exist_ok=True)
    corner_source = args.corner_source
    for rec in records:
        image = rec.load_image()
        corners = rec.detections if corner_source == "detections" else rec.gt.corners
        pred = predict(model, image, corners, args.threshold)
        (out / f"{rec.id}.json").write_text(pred.to_json())
        if args.svg:
            (Path(args.svg) / f"{rec.id}.svg").write_text(render_svg(image, pred.kept(), rec.gt))
    _echo(args, f"{len(records)} predictions written to {out}")
    return EXIT_OK


# -- eval --------------------------------------------------------------------
def _gt_graphs(gt_dir) -> dict[str, PlanarGraph]:
    root = Path(gt_dir)
    if (root / "manifest.json").is_file():
        _, records = load_corpus(root)
        return {r.id: r.gt for r in records}
    return {p.stem: PlanarGraph.from_json(p.read_text()) for p in sorted(root.glob("*.json"))}


def cmd_eval(args) -> int:
    gts = _gt_graphs(args.gt)
    preds = {p.stem: graph_from_prediction(json.loads(p.read_text())) for p in sorted(Path(args.pred).glob("*.json"))}
    common = sorted(set(gts) & set(preds))
    missing = sorted(set(gts) ^ set(preds))
    if missing:
        log.warning("excluding %d unmatched record ids: %s", len(missing), ", ".join(missing[:10]))
    if not common:
        raise DataError("no record ids in common between predictions and ground truth")
    cfg = MatchConfig(args.radius, args.iou, args.threshold, args.image_size)
    pred_list = [preds[k] for k in common]
    gt_list = [gts[k] for k in common]
    report = evaluate_corpus(pred_list, gt_list, cfg)
    _echo(args, f"{len(common)} records, micro-averaged; corner radius {cfg.corner_radius:g} px, "
                f"region IoU {cfg.region_iou:g}")
    _echo(args, report.table())
    if args.json:
        Path(args.json).write_text(report.to_json(cfg))
    if args.sweep:
        Path(args.sweep).write_text(sweep_csv(sweep_corpus(pred_list, gt_list, cfg)))
    return EXIT_OK


# -- entry point -------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="convmpn", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, help="override every seed in the run")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for gen-data")
    p.add_argument("--quiet", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic corpus")
    g.add_argument("--spec", help="SynthSpec JSON or run config with a 'synth' section")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on a corpus")
    t.add_argument("--config", help="run config JSON")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--variant", choices=["conv_mpn", "vanilla_gnn", "per_edge", "zero_message"])
    t.add_argument("--t", type=int, help="message-passing iterations")
    t.add_argument("--max-epochs", type=int)
    t.add_argument("--resume", action="store_true")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="predict edges for one image or a whole corpus")
    i.add_argument("--model", required=True, help="training output directory")
    i.add_argument("--image")
    i.add_argument("--corners", help="JSON with a 'corners' list")
    i.add_argument("--data", help="corpus directory (batch mode)")
    i.add_argument("--corner-source", choices=["detections", "gt"], default="detections")
    i.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    i.add_argument("--out")
    i.add_argument("--svg", help="overlay path (a directory in batch mode)")
    i.add_argument("--gt", help="GT graph JSON drawn in the overlay")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="corner/edge/region metrics of predictions")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True, help="corpus directory or directory of graph JSON")
    e.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    e.add_argument("--radius", type=float, default=MatchConfig.corner_radius)
    e.add_argument("--iou", type=float, default=MatchConfig.region_iou)
    e.add_argument("--image-size", type=int, default=MatchConfig.image_size)
    e.add_argument("--json", help="write the report as JSON")
    e.add_argument("--sweep", help="write the 15-threshold PR sweep CSV")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(message)s")
    threads = os.environ.get("CONVMPN_THREADS")
    try:
        with threadpool_limits(limits=int(threads) if threads else None):
            return args.func(args)
    except (UsageError, ValueError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, KeyError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
