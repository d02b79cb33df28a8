"""Command-line entry point.

Subcommands: gen-data, train, eval, viz-mask, grad-check.  Every command is
deterministic given its flags and seed.  Exit codes: 0 success, 1 runtime
failure, 2 usage error.  An optional key=value config file supplies flag
defaults; explicit flags win.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, dataset, gradcheck, netpbm, oel, trainer
from . import tensor as T
from .backbone import BackboneConfig
from .errors import ContractViolation, DomainError, FormatError, ShapeError
from .trainer import TrainConfig


def _parse_stages(text: str, bconfig: BackboneConfig) -> tuple[int, ...]:
    """Stage list given as grid sides, e.g. '8' or '16,8'."""
    sides = bconfig.grid_sides()
    out = []
    for tok in text.split(","):
        side = int(tok)
        if side not in sides:
            raise ContractViolation(f"no stage with grid side {side}; have {list(sides)}")
        out.append(sides.index(side))
    return tuple(out)


def _apply_config_file(args: argparse.Namespace, parser_defaults: dict) -> None:
    """key=value file entries override parser defaults but not explicit flags."""
    if not getattr(args, "config", None):
        return
    entries = {}
    with open(args.config) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, val = line.partition("=")
            entries[key.strip().replace("-", "_")] = val.strip()
    for key, val in entries.items():
        if not hasattr(args, key):
            continue
        if getattr(args, key) != parser_defaults.get(key):
            continue  # explicitly set on the command line
        current = parser_defaults.get(key)
        if isinstance(current, bool):
            setattr(args, key, val.lower() in ("1", "true", "yes"))
        elif isinstance(current, int):
            setattr(args, key, int(val))
        elif isinstance(current, float):
            setattr(args, key, float(val))
        else:
            setattr(args, key, val)


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        print(f"error: {out} exists and is not empty (use --force)", file=sys.stderr)
        return 1
    spec = dataset.SyntheticSpec(
        classes=args.classes,
        train_per_class=args.per_class,
        val_per_class=args.val_per_class,
        image_size=args.size,
        clutter=args.clutter,
        noise=args.noise,
        scale_range=(args.scale_min, args.scale_max),
        seed=args.seed,
    )
    train_ds, val_ds = dataset.generate(spec)
    out.mkdir(parents=True, exist_ok=True)
    dataset.write_dataset(out, train_ds, val_ds)
    print(f"wrote {len(train_ds)} train / {len(val_ds)} val samples to {out}")
    return 0


def _backbone_config(args, class_count: int) -> BackboneConfig:
    return BackboneConfig(input_size=args.size, class_count=class_count, seed=args.seed)


def _load_split(root: str, split: str, size: int) -> dataset.Dataset:
    return dataset.load_folder(Path(root) / split, image_size=size)


def cmd_train(args) -> int:
    train_ds = _load_split(args.data, "train", args.size)
    val_ds = None
    val_dir = Path(args.data) / "val"
    if val_dir.is_dir():
        val_ds = _load_split(args.data, "val", args.size)
    bconfig = _backbone_config(args, train_ds.class_count)
    alpha, beta = (0.0, 0.0) if args.baseline else (args.alpha, args.beta)
    tconfig = TrainConfig(
        alpha=alpha, beta=beta, positives=args.positives,
        attached_stages=(1,), batch_size=args.batch_size, epochs=args.epochs,
        lr=args.lr, momentum=args.momentum, seed=args.seed,
        use_gt_mask=args.gm, flip=args.flip, eval_every=args.eval_every,
    )
    if tconfig.lio_active:
        tconfig = trainer.attach_stages(tconfig, _parse_stages(args.stages, bconfig), bconfig)
    result = trainer.train(train_ds, val_ds, bconfig, tconfig, out_dir=args.out, quiet=False)
    last = result.history[-1]
    print(f"final: epoch={last['epoch']} total={last['total']:.4f} "
          f"train_acc={last['train_acc']:.4f} val_acc={result.final_val_acc}")
    print(f"checkpoint: {Path(args.out) / 'final.lioc'}")
    return 0


def cmd_eval(args) -> int:
    if args.mode not in ("accuracy", "mask-iou"):
        print(f"error: unknown mode {args.mode!r}", file=sys.stderr)
        return 2
    split_dir = Path(args.data) / args.split
    ds = _load_split(args.data, args.split, args.size) if split_dir.is_dir() \
        else dataset.load_folder(args.data, image_size=args.size)
    if args.gm:
        if not ds.has_masks():
            print("error: --gm needs ground-truth masks", file=sys.stderr)
            return 1
        train_ds = _load_split(args.data, "train", args.size)
        bconfig = _backbone_config(args, train_ds.class_count)
        tconfig = TrainConfig(epochs=args.epochs, seed=args.seed, use_gt_mask=True,
                              batch_size=args.batch_size, lr=args.lr)
        result = trainer.train(train_ds, ds, bconfig, tconfig, out_dir=args.out)
        model = result.model
    else:
        cp = checkpoint.load(args.checkpoint)
        model = trainer.model_from_checkpoint(cp)
    if args.mode == "mask-iou" and not ds.has_masks():
        print("error: mask-iou needs ground-truth masks", file=sys.stderr)
        return 1
    value = trainer.evaluate(ds, model, args.mode)
    print(f"{args.mode}: {value:.4f}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        trainer._append_csv(Path(args.out) / "eval.csv",
                            ["mode", "split", "value"], [args.mode, args.split, value])
    return 0


def cmd_viz_mask(args) -> int:
    cp = checkpoint.load(args.checkpoint)
    model = trainer.model_from_checkpoint(cp)
    ds = dataset.load_folder(Path(args.data) / args.split, image_size=args.size)
    sample = ds.samples[args.index]
    stage = model.tconfig.attached_stages[0]
    N = model.bconfig.grid_sides()[stage]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    grids, _ = trainer.backbone.forward(model.params, sample.image, model.bconfig, upto=stage)
    f = grids[stage]
    ow, ob = model.head_params(stage, "oel")
    m_pred = oel.mask_head(f, ow, ob).data
    netpbm.write_pgm_normalized(out / "predicted_mask.pgm", m_pred)

    by_class = ds.by_class()
    rng = trainer.Rng(trainer.derive_seed(args.seed, 77))
    for p_count in (int(x) for x in args.p_sweep.split(",")):
        picks = trainer.sample_positive_indices(by_class, sample.label, args.index, p_count, rng)
        pos = np.stack([ds.samples[i].image for i in picks])
        pos_grids, _ = trainer.backbone.forward(model.params, pos, model.bconfig, upto=stage)
        positives = [T.const(pos_grids[stage].data[i]) for i in range(p_count)]
        M = oel.pseudo_mask(f, positives).data
        netpbm.write_pgm_normalized(out / f"pseudo_mask_p{p_count}.pgm", M)
    if sample.mask is not None:
        netpbm.write_pgm_normalized(out / "gt_mask.pgm",
                                    dataset.downsample_mask(sample.mask, N).astype(float))
    print(f"wrote mask images to {out}")
    return 0


def cmd_grad_check(args) -> int:
    report = gradcheck.run_all(instances=args.instances, fault=args.inject_fault or None)
    for r in report.results:
        status = "pass" if r.passed else "FAIL"
        print(f"{status}  {r.name:32s} max_rel_err={r.max_rel_err:.3e} "
              f"({r.instances} instances, {r.seconds:.2f}s)")
    if not report.passed:
        print(f"failed: {', '.join(report.failures())}", file=sys.stderr)
        return 1
    print("all gradient checks passed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lio", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic shape dataset to disk")
    g.add_argument("--classes", type=int, default=8)
    g.add_argument("--per-class", type=int, default=250, help="train images per class")
    g.add_argument("--val-per-class", type=int, default=63)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--clutter", type=float, default=6.0)
    g.add_argument("--noise", type=float, default=0.06)
    g.add_argument("--scale-min", type=float, default=0.5)
    g.add_argument("--scale-max", type=float, default=1.0)
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true")
    g.add_argument("--config", help="key=value defaults file")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a classifier with or without the auxiliary heads")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--alpha", type=float, default=0.1)
    t.add_argument("--beta", type=float, default=0.1)
    t.add_argument("--positives", type=int, default=3)
    t.add_argument("--stages", default="8", help="grid sides, e.g. '8' or '16,8'")
    t.add_argument("--epochs", type=int, default=10)
    t.add_argument("--batch-size", type=int, default=16)
    t.add_argument("--lr", type=float, default=0.05)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--size", type=int, default=64)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--eval-every", type=int, default=1)
    t.add_argument("--baseline", action="store_true", help="force alpha=beta=0")
    t.add_argument("--gm", action="store_true", help="regress ground-truth masks instead")
    t.add_argument("--flip", action="store_true")
    t.add_argument("--config", help="key=value defaults file")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint (or the --gm variant)")
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="val")
    e.add_argument("--checkpoint")
    e.add_argument("--mode", default="accuracy", help="accuracy or mask-iou")
    e.add_argument("--size", type=int, default=64)
    e.add_argument("--gm", action="store_true",
                   help="train with ground-truth masks first, then evaluate")
    e.add_argument("--epochs", type=int, default=10)
    e.add_argument("--batch-size", type=int, default=16)
    e.add_argument("--lr", type=float, default=0.05)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    e.add_argument("--config", help="key=value defaults file")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("viz-mask", help="dump predicted/pseudo/gt masks as PGM")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--split", default="val")
    v.add_argument("--index", type=int, default=0)
    v.add_argument("--p-sweep", default="1,3,5")
    v.add_argument("--size", type=int, default=64)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_viz_mask)

    c = sub.add_parser("grad-check", help="finite-difference verification suite")
    c.add_argument("--instances", type=int, default=20)
    c.add_argument("--inject-fault", default="", help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    defaults = {a.dest: a.default for g in parser._subparsers._group_actions
                for a in g.choices[args.command]._actions}
    try:
        _apply_config_file(args, defaults)
        return args.func(args)
    except (ContractViolation, DomainError, FormatError, ShapeError,
            trainer.TrainingDiverged, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
