"""Command-line entry point (``medovd``)."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from collections import Counter
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .curation import SplitManifest, curate, read_records, write_records
from .presence import PresenceMatrix, matrix_from_samples, validate

log = logging.getLogger("medovd")


def _encoder(backend: str, dim: int, seed: int = 0):
    from .encoders import build_encoder
    from .synthetic import aligned_encoder

    if backend == "aligned-mock":
        return aligned_encoder(dim=dim, seed=seed)
    return build_encoder(backend, dim=dim, seed=seed)


def _records(paths) -> list:
    out = []
    for p in paths:
        out.extend(read_records(p))
    return out


def _classes(args, samples) -> tuple[list[str], list[str]]:
    if args.manifest:
        from .pipeline import partition_from_manifest

        names = args.classes or sorted({a.class_name for s in samples for a in s.annotations})
        manifest = SplitManifest.load(args.manifest)
        names = list(dict.fromkeys(list(names) + sorted(manifest.holdout_classes)))
        return partition_from_manifest(manifest, names)
    base = args.classes or sorted({a.class_name for s in samples for a in s.annotations})
    return list(base), list(args.novel or [])


# --------------------------------------------------------------------------
# subcommands


def cmd_curate(args) -> int:
    manifest = curate(args.descriptor, args.out, args.val_fraction, args.holdout or (), args.seed)
    print(f"train volumes: {len(manifest.train_volume_ids)}  val volumes: {len(manifest.val_volume_ids)}  "
          f"holdout volumes: {len(manifest.holdout_volume_ids)}")
    return 0


def cmd_matrix_validate(args) -> int:
    matrix = PresenceMatrix.load(args.matrix)
    report = validate(matrix, _records(args.records))
    for line in report.lines():
        print(line)
    hard = len(report.hard)
    print(f"{len(report.violations)} violations ({hard} hard)")
    return 1 if hard else 0


def cmd_matrix_init(args) -> int:
    samples = _records(args.records)
    classes = args.classes or sorted({a.class_name for s in samples for a in s.annotations})
    matrix_from_samples(samples, classes, default=args.default).save(args.out)
    print(f"wrote {args.out}")
    return 0


def load_train_yaml(path):
    """Split a YAML train file into (TrainConfig, data section)."""
    from .pipeline import TrainConfig

    raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    data = raw.pop("data", {}) or {}
    for key in ("train", "out_dir"):
        if key not in data:
            raise ValueError(f"{path}: data.{key} is required")
    return TrainConfig.from_dict(raw), data


def cmd_train(args) -> int:
    import torch

    from .detector import save_checkpoint
    from .pipeline import Trainer

    cfg, data = load_train_yaml(args.config)
    base = Path(args.config).resolve().parent
    resolve = lambda p: p if Path(p).is_absolute() else str(base / p)  # noqa: E731
    train = _records([resolve(p) for p in np.atleast_1d(data["train"])])
    matrix = PresenceMatrix.load(resolve(data["matrix"])) if data.get("matrix") else None
    out_dir = Path(resolve(data["out_dir"]))
    out_dir.mkdir(parents=True, exist_ok=True)
    pool = cfg.class_pool or (list(matrix.classes) if matrix else sorted(
        {a.class_name for s in train for a in s.annotations}))
    torch.set_num_threads(args.threads)
    trainer = Trainer(cfg, matrix, _encoder(cfg.encoder_backend, cfg.encoder_dim, cfg.seed), pool, out_dir=out_dir)
    (out_dir / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False), encoding="utf-8")
    with (out_dir / "loss_curve.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "step", "total", "contrastive", "iou", "dfl"])

        def on_epoch(tr, stats):
            for i, l in enumerate(stats.losses):
                writer.writerow([stats.epoch, i, l["total"], l["contrastive"], l["iou"], l["dfl"]])
            fh.flush()
            print(f"epoch {stats.epoch:3d}  loss {stats.mean_loss['total']:.4f}  {stats.counts}")
            if args.save_every and stats.epoch % args.save_every == 0:
                save_checkpoint(out_dir / f"epoch{stats.epoch:03d}.pt", tr.model, _extra(cfg, pool))

        trainer.fit(train, callback=on_epoch)
    save_checkpoint(out_dir / "last.pt", trainer.model, _extra(cfg, pool))
    print(f"checkpoint: {out_dir / 'last.pt'}")
    return 0


def _extra(cfg, pool) -> dict:
    return {"train_config": cfg.to_dict(), "class_pool": list(pool)}


def _load(path):
    from .detector import load_checkpoint

    model, extra = load_checkpoint(path)
    tc = extra.get("train_config", {})
    encoder = _encoder(tc.get("encoder_backend", "aligned-mock"), model.config.embed_dim, tc.get("seed", 0))
    return model, encoder


def cmd_eval(args) -> int:
    from .pipeline import evaluate

    model, encoder = _load(args.checkpoint)
    samples = _records(args.records)
    base, novel = _classes(args, samples)
    report = evaluate(model, samples, base, novel, encoder=encoder)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.save(out)
    table = report.table()
    out.with_suffix(".txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return 0


def cmd_fps(args) -> int:
    from .pipeline import measure_fps
    from .vocabulary import Vocabulary, encode_labels

    model, encoder = _load(args.checkpoint)
    samples = _records(args.records)
    base, novel = _classes(args, samples)
    text = encode_labels(encoder, Vocabulary.from_labels(base + novel)).embeddings()
    images = [s.image for s in samples][: args.limit]
    runs = [measure_fps(model, images, text, warmup=args.warmup) for _ in range(args.runs)]
    fps = np.array([r.fps for r in runs])
    for i, r in enumerate(runs):
        print(f"run {i}: {r.fps:.1f} FPS over {r.images} images")
    print(f"mean {fps.mean():.1f} FPS  cv {fps.std() / fps.mean():.3f}  ({runs[0].hardware})")
    return 0


def cmd_visualize(args) -> int:
    from .pipeline import visualize

    model, encoder = _load(args.checkpoint)
    samples = _records(args.records)[: args.limit]
    base, novel = _classes(args, samples)
    paths = visualize(model, samples, base + novel, encoder, args.out)
    print(f"wrote {len(paths)} images to {args.out}")
    return 0


def cmd_audit(args) -> int:
    rows = [json.loads(line) for line in Path(args.log).read_text(encoding="utf-8").splitlines() if line.strip()]
    if not rows:
        print("empty audit log")
        return 1
    keys = sorted({k for r in rows for k in r["counts"]})
    print("epoch  loss     " + "  ".join(keys))
    totals: Counter = Counter()
    for r in rows:
        totals.update(r["counts"])
        cells = "  ".join(f"{r['counts'].get(k, 0):>{len(k)}d}" for k in keys)
        print(f"{r['epoch']:5d}  {r['loss'].get('total', float('nan')):.4f}   {cells}")
    print("total  " + " " * 9 + "  ".join(f"{totals[k]:>{len(k)}d}" for k in keys))
    return 0


def cmd_synth(args) -> int:
    from .synthetic import make_corpus

    out = Path(args.out)
    classes = args.classes or ["liver", "kidney", "spleen", "lesion"]
    samples = make_corpus(args.n, classes, seed=args.seed, dataset_id=args.dataset_id)
    n = write_records(out / f"{args.dataset_id}.jsonl", samples)
    matrix_from_samples(samples, classes, default=0).save(out / "matrix.csv")
    print(f"wrote {n} records and matrix.csv to {out}")
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="medovd", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("curate", help="descriptor files to detection records and a split manifest")
    c.add_argument("descriptor", nargs="+")
    c.add_argument("--out", required=True)
    c.add_argument("--val-fraction", type=float, default=0.05)
    c.add_argument("--holdout", nargs="*", help="classes whose volumes are held out")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_curate)

    m = sub.add_parser("matrix", help="presence matrix tools")
    msub = m.add_subparsers(dest="matrix_command", required=True)
    mv = msub.add_parser("validate", help="check records against a matrix; exit 1 on hard violations")
    mv.add_argument("matrix")
    mv.add_argument("records", nargs="+")
    mv.set_defaults(func=cmd_matrix_validate)
    mi = msub.add_parser("init", help="derive a matrix from annotated records")
    mi.add_argument("records", nargs="+")
    mi.add_argument("--out", required=True)
    mi.add_argument("--classes", nargs="*")
    mi.add_argument("--default", type=int, default=0, choices=(0, -1))
    mi.set_defaults(func=cmd_matrix_init)

    t = sub.add_parser("train", help="train from a YAML config")
    t.add_argument("config")
    t.add_argument("--save-every", type=int, default=0)
    t.add_argument("--threads", type=int, default=1)
    t.set_defaults(func=cmd_train)

    def with_split(q):
        q.add_argument("checkpoint")
        q.add_argument("records", nargs="+")
        q.add_argument("--classes", nargs="*", help="base classes (default: annotated classes)")
        q.add_argument("--novel", nargs="*", help="novel classes")
        q.add_argument("--manifest", help="take novel classes from a split manifest")

    e = sub.add_parser("eval", help="mAP report for a checkpoint on a split")
    with_split(e)
    e.add_argument("--out", default="report.json")
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("fps", help="single-image inference throughput")
    with_split(f)
    f.add_argument("--warmup", type=int, default=5)
    f.add_argument("--runs", type=int, default=5)
    f.add_argument("--limit", type=int, default=105)
    f.set_defaults(func=cmd_fps)

    v = sub.add_parser("visualize", help="draw elbow-thresholded detections")
    with_split(v)
    v.add_argument("--out", required=True)
    v.add_argument("--limit", type=int, default=20)
    v.set_defaults(func=cmd_visualize)

    a = sub.add_parser("audit", help="summarize a per-epoch pseudo-label audit log")
    a.add_argument("log")
    a.set_defaults(func=cmd_audit)

    s = sub.add_parser("synth", help="write a synthetic corpus and matching matrix")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=200)
    s.add_argument("--classes", nargs="*")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--dataset-id", default="synth")
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
