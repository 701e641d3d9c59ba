"""Command-line entry point: ``brickforge <subcommand> ...``."""

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import BrickForgeError

log = logging.getLogger("brickforge")

_LEVELS = {"error": logging.ERROR, "warning": logging.WARNING, "info": logging.INFO,
           "debug": logging.DEBUG}


def build_id():
    h = hashlib.sha256()
    root = Path(__file__).parent
    for path in sorted(root.rglob("*.py")):
        h.update(path.relative_to(root).as_posix().encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:12]


def _setup_logging():
    level = _LEVELS.get(os.environ.get("BRICKFORGE_LOG", "error").strip().lower(), logging.ERROR)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")


def _emit(obj):
    sys.stdout.write(json.dumps(obj) + "\n")


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_rad(args):
    from .bricks import Geometry
    from .datagen import generate_rad_set, records_from_trees, write_dataset

    geom = Geometry(args.grid)
    trees = generate_rad_set(args.count, args.bricks, geom, args.seed, not args.no_down,
                             1 if args.deterministic else args.jobs)
    records = records_from_trees(trees)
    for r in records:
        r.meta = {"seed": args.seed, "bricks": args.bricks, "down": not args.no_down}
    manifest = write_dataset(records, args.out)
    _emit({"manifest": str(manifest), "records": len(records)})


def cmd_ingest_image(args):
    from .bricks import Geometry
    from .datagen import ObjectRecord, extrude_image, write_dataset
    from .fileio import read_image

    geom = Geometry(args.grid)
    img = read_image(args.input)
    grid = extrude_image(img, args.threshold, args.depth, geom)
    rec = ObjectRecord(id=args.id or Path(args.input).stem, cls=args.cls, grid=geom.size,
                       voxels=grid, meta={"depth": args.depth, "threshold": args.threshold,
                                          "source": Path(args.input).name})
    manifest = write_dataset([rec], args.out)
    _emit({"manifest": str(manifest), "voxels": int(grid.sum())})


def cmd_render(args):
    from .datagen import render_silhouettes
    from .fileio import read_voxels, write_pgm

    views = render_silhouettes(read_voxels(args.voxels))
    names = []
    for v, img in enumerate(views):
        name = f"{args.out_prefix}_{v}.pgm"
        Path(name).parent.mkdir(parents=True, exist_ok=True)
        write_pgm(name, img)
        names.append(name)
    _emit({"silhouettes": names})


def _train_values(args):
    from .train import load_config

    values = load_config(args.config) if args.config else {}
    for key in ("epochs", "lr", "batch_size", "seed", "alpha", "weight_decay", "max_bricks",
                "projection", "tau", "eval_every"):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    if getattr(args, "no_augment", False):
        values["reorder_augment"] = "false"
    return values


def cmd_pretrain(args):
    from .datagen import read_dataset
    from .train import build_configs, load_checkpoint, pretrain, save_checkpoint

    model_cfg, cfg = build_configs(_train_values(args))
    records = read_dataset(args.data, load_images=False)
    val = read_dataset(args.val, load_images=False) if args.val else ()
    if model_cfg.grid != cfg.grid:
        model_cfg.grid = cfg.grid
    state = load_checkpoint(args.resume) if args.resume else None
    state, rows = pretrain(records, cfg, model_cfg, state=state, val_records=val,
                           metrics_path=args.metrics, checkpoint_path=args.out)
    save_checkpoint(args.out, state)
    _emit({"checkpoint": args.out, "epochs": state.epoch, "final": rows[-1] if rows else None})


def cmd_selftrain(args):
    from .datagen import read_dataset
    from .train import build_configs, load_checkpoint, save_checkpoint, selftrain

    values = {"lr": "1e-4", "epochs": "40"}
    values.update(_train_values(args))
    _, cfg = build_configs(values)
    state = load_checkpoint(args.ckpt)
    records = read_dataset(args.data, load_images=True)
    for r in records:
        r.tree = None  # silhouettes only
    val = read_dataset(args.val) if args.val else ()
    state, rows = selftrain(records, cfg, state, val_records=val, metrics_path=args.metrics,
                            checkpoint_path=args.out, reset_optimizer=not args.keep_optimizer)
    save_checkpoint(args.out, state)
    _emit({"checkpoint": args.out, "epochs": state.epoch, "final": rows[-1] if rows else None})


def _actions_json(tree, records):
    from .model import predicted_actions

    acts = predicted_actions(records, tree.geom.n_types)
    return {
        "grid": tree.geom.size,
        "actions": [a.to_json() for a in acts],
        "tree": tree.to_record("assembly"),
        "probs": [np.round(r.probs, 6).tolist() for r in records],
    }


def cmd_assemble(args):
    from .datagen import ObjectRecord, read_dataset, write_dataset
    from .fileio import read_image, write_voxels
    from .model import assemble_batch, autoregressive_assemble
    from .train import load_checkpoint

    model = load_checkpoint(args.ckpt).model
    if args.images:
        if len(args.images) != 3:
            raise BrickForgeError("--images needs exactly three view files")
        views = np.stack([read_image(p) for p in args.images])
        tree, records = autoregressive_assemble(views, model, args.tau, args.max_bricks)
        if args.out_voxels:
            write_voxels(args.out_voxels, tree.voxels())
        if args.out_actions:
            Path(args.out_actions).write_text(json.dumps(_actions_json(tree, records)) + "\n")
        _emit({"bricks": len(tree), "voxels": int(tree.voxels().sum())})
        return
    if not (args.data and args.out):
        raise BrickForgeError("assemble needs --images, or --data with --out")
    src = read_dataset(args.data)
    out = []
    for s in range(0, len(src), 32):
        batch = src[s:s + 32]
        images = np.stack([r.views() for r in batch])
        for r, (tree, _, _) in zip(batch, assemble_batch(images, model, args.tau, args.max_bricks)):
            out.append(ObjectRecord(id=r.id, cls=r.cls, grid=tree.geom.size, tree=tree,
                                    silhouettes=r.silhouettes))
    write_dataset(out, args.out)
    _emit({"manifest": str(Path(args.out) / "manifest.jsonl"), "records": len(out)})


def cmd_eval(args):
    from .datagen import read_dataset
    from .metrics import iou, legality_rate, miou

    pred = {r.id: r for r in read_dataset(args.pred, load_images=False)}
    gt = read_dataset(args.gt, load_images=False)
    per_class, values = {}, []
    missing = [r.id for r in gt if r.id not in pred]
    if missing:
        raise BrickForgeError(f"{len(missing)} ground-truth ids missing from predictions, e.g. {missing[0]}")
    for r in gt:
        v = iou(pred[r.id].target_voxels(), r.target_voxels())
        values.append(v)
        per_class.setdefault(r.cls, []).append(v)
    report = {"iou_mean": float(np.mean(values)) if values else None}
    if args.per_class and per_class:
        table, mean = miou(per_class)
        report["per_class"] = table
        report["miou"] = mean
    report["acc"] = None
    if args.ckpt:
        from .bricks import Geometry
        from .train import SampleCache, load_checkpoint, teacher_forced_eval

        state = load_checkpoint(args.ckpt)
        cache = SampleCache(gt, Geometry(state.model.cfg.grid))
        idx = [i for i in range(len(gt)) if cache.valid(i)]
        if idx:
            counters = {}
            _, report["acc"] = teacher_forced_eval(state.model, cache, idx, extra=counters)
            report.update(counters)
    trees = [p.tree for p in pred.values() if p.tree is not None]
    report["legality"] = legality_rate(trees)
    report["acc_definition"] = "teacher-forced exact up/down set match per step"
    text = json.dumps(report)
    if args.out:
        Path(args.out).write_text(text + "\n")
    sys.stdout.write(text + "\n")


def cmd_inspect(args):
    from .bricks import Geometry
    from .tree import ActionRecord, decode_actions

    doc = json.loads(Path(args.actions).read_text())
    if isinstance(doc, list):
        doc = {"actions": doc}
    geom = Geometry(int(doc.get("grid", args.grid)))
    actions = [ActionRecord.from_json(a) for a in doc["actions"]]
    tree, report = decode_actions(actions, geom, max_bricks=args.max_bricks)
    lines = []
    for i in range(len(tree)):
        p = tree.bricks[i]
        e = tree.edge[i]
        edge = "root" if e is None else (
            f"{'up' if e.direction == 0 else 'down'} t{e.ctype.index} "
            f"(dx={e.ctype.dx}, dy={e.ctype.dy}, rot={e.ctype.rot}) from {tree.parent[i]}")
        lines.append(f"{'  ' * tree.depth[i]}[{i}] pose=({p.x},{p.y},{p.z},r{p.r}) "
                     f"depth={tree.depth[i]} {edge}")
    sys.stdout.write("\n".join(lines) + "\n")
    if report.dropped:
        log.warning("%d illegal children dropped while decoding", report.dropped)


# --------------------------------------------------------------------------
# parser


def _train_flags(p, lr_help):
    p.add_argument("--config", help="key = value config file (e.g. desk.cfg, full.cfg)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float, help=lr_help)
    p.add_argument("--batch-size", dest="batch_size", type=int, help="default 32")
    p.add_argument("--weight-decay", dest="weight_decay", type=float, help="default 5e-4")
    p.add_argument("--alpha", type=float, help="voxel masking threshold, default 0.4")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-bricks", dest="max_bricks", type=int)
    p.add_argument("--tau", type=float, help="decode threshold, default 0.5")
    p.add_argument("--projection", choices=["nonzero_mean", "max"])
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--metrics", help="JSON-lines metrics log (appended)")
    p.add_argument("--val", help="held-out dataset directory")
    p.add_argument("--deterministic", action="store_true", help="serial execution")


def build_parser():
    parser = argparse.ArgumentParser(prog="brickforge", description=__doc__)
    parser.add_argument("--version", action="version", version=f"brickforge {__version__} ({build_id()})")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-rad", help="generate random brick assemblies")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--bricks", type=int, default=15)
    p.add_argument("--grid", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--no-down", action="store_true", help="only stack children on top")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--deterministic", action="store_true")
    p.set_defaults(func=cmd_gen_rad)

    p = sub.add_parser("ingest-image", help="extrude a 2D image into a voxel target")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--grid", type=int, default=32)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--id")
    p.add_argument("--class", dest="cls", default="")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest_image)

    p = sub.add_parser("render", help="render the three silhouettes of a VOXL grid")
    p.add_argument("--voxels", required=True)
    p.add_argument("--out-prefix", dest="out_prefix", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("pretrain", help="supervised pre-training on labelled assemblies")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--no-augment", dest="no_augment", action="store_true")
    _train_flags(p, "default 1e-3")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("selftrain", help="self-training from silhouettes only")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--keep-optimizer", dest="keep_optimizer", action="store_true",
                   help="keep the checkpoint's Adam moments (resuming a self-training run)")
    _train_flags(p, "default 1e-4")
    p.set_defaults(func=cmd_selftrain)

    p = sub.add_parser("assemble", help="predict an assembly from silhouettes")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--images", nargs="+")
    p.add_argument("--out-voxels", dest="out_voxels")
    p.add_argument("--out-actions", dest="out_actions")
    p.add_argument("--data", help="dataset directory (batch mode)")
    p.add_argument("--out", help="output dataset directory (batch mode)")
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--max-bricks", dest="max_bricks", type=int)
    p.set_defaults(func=cmd_assemble)

    p = sub.add_parser("eval", help="IoU / accuracy / legality report")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--per-class", dest="per_class", action="store_true")
    p.add_argument("--ckpt", help="also report teacher-forced step accuracy on --gt")
    p.add_argument("--out", help="also write the JSON report here")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="print a decoded action file as a BFS tree")
    p.add_argument("--actions", required=True)
    p.add_argument("--grid", type=int, default=32)
    p.add_argument("--max-bricks", dest="max_bricks", type=int, default=64)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None):
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (BrickForgeError, OSError, ValueError, KeyError) as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
