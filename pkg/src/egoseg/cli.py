"""Command-line entry point: ``egoseg <command> ...``.

Commands: gen-data, train, eval, infer, ablate, cods recombine, visualize, config.
Any validation error prints ``error: ...`` to stderr and exits with status 2;
a diverged training run exits with status 3.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from PIL import Image

from .cods import FinalMasks, recombine
from .config import ConfigError, RunConfig
from .datamodel import (
    read_image_png,
    read_label_png,
    read_mask_png,
    write_label_png,
    write_mask_png,
)
from .model import VARIANTS
from .synthdata import SampleError, SceneError, generate_dataset, load_egohos_dir, write_dataset
from .training import TrainingDiverged

log = logging.getLogger("egoseg")

MASK_FILES = {
    "m_o_l": "left_object.png",
    "m_o_r": "right_object.png",
    "m_o_t": "two_hand_object.png",
    "m_cb": "contact_boundary.png",
}


# ------------------------------------------------------------------ helpers


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if getattr(args, "variant", None):
        cfg.model.use_cods, cfg.model.use_hofe = VARIANTS[args.variant]
    if getattr(args, "deterministic", None) is not None:
        cfg.deterministic = args.deterministic
    if getattr(args, "iters", None):
        cfg.schedule.max_iters = args.iters
        cfg.schedule.warmup_iters = min(cfg.schedule.warmup_iters, args.iters)
    return cfg.validate()


def _samples(root, split):
    samples = list(load_egohos_dir(root, split=split))
    if not samples:
        raise ConfigError(f"no samples for split {split!r} under {root}")
    return samples


def write_masks(out_dir: Path, masks: FinalMasks) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    write_label_png(out_dir / "hand.png", masks.m_h)
    for field, name in MASK_FILES.items():
        write_mask_png(out_dir / name, getattr(masks, field))


def read_masks(mask_dir: Path) -> FinalMasks:
    mask_dir = Path(mask_dir)
    return FinalMasks(
        m_h=read_label_png(mask_dir / "hand.png"),
        **{field: read_mask_png(mask_dir / name) for field, name in MASK_FILES.items()},
    )


# ----------------------------------------------------------------- commands


def cmd_gen_data(args):
    splits = {"train": args.n_train, "val": args.n_val, "test": args.n_test}
    samples = {
        split: generate_dataset(n, seed=args.seed + 7919 * i, image_size=args.size,
                                max_distractors=args.max_distractors)
        for i, (split, n) in enumerate(splits.items())
        if n > 0
    }
    stems = write_dataset(args.out, samples)
    print(f"wrote {len(stems)} samples to {args.out}")


def cmd_train(args):
    from .training import train

    cfg = _config(args)
    train_set = _samples(args.data, args.split)
    val_set = _samples(args.data, args.val_split) if args.val_split else None
    state = train(train_set, cfg, seed=args.seed, val_samples=val_set, out_dir=args.out)
    print(f"finished {state.iteration} iterations; final loss {state.log[-1]['loss']:.4f}")
    if val_set:
        print(f"best val mIoU {100 * state.best_val_miou:.2f}")


def cmd_eval(args):
    from .evaluation import evaluate_samples
    from .training import TrainState

    state = TrainState.load(args.checkpoint)
    report = evaluate_samples(state.model, _samples(args.data, args.split), state.config)
    report.extra["split"] = args.split
    report.extra["checkpoint"] = str(args.checkpoint)
    print(report.table())
    if args.json:
        Path(args.json).write_text(report.to_json())
    else:
        print(report.to_json())


def cmd_infer(args):
    from .evaluation import attention_maps, attention_tiles, infer, visualize
    from .training import TrainState

    state = TrainState.load(args.checkpoint)
    image = read_image_png(args.image)
    masks = infer(image, state)
    out = Path(args.out)
    write_masks(out, masks)
    visualize(image, masks, out / "overlay.png", args.alpha)
    if args.dump_attention:
        p = state.config.model.encoder.patch_size
        grid = (image.shape[0] // p, image.shape[1] // p)
        for name, attn in attention_maps(state, image).items():
            Image.fromarray(attention_tiles(attn, grid)).save(out / f"attention_{name}.png")
    print(f"wrote masks to {out}")


def cmd_ablate(args):
    from .evaluation import ablate, ablation_table, untrained_report

    cfg = _config(args)
    train_set = _samples(args.data, args.split)
    test_set = _samples(args.data, args.test_split)
    variants = args.variants.split(",")
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ConfigError(f"unknown variants {unknown}; choose from {list(VARIANTS)}")
    base = untrained_report(test_set, cfg, seed=args.seed)
    results = ablate(train_set, test_set, cfg, variants, seed=args.seed, out_dir=args.out)
    print(f"untrained mIoU {100 * base.miou:.2f}")
    print(ablation_table(results))
    if args.out:
        with open(Path(args.out) / "ablation.json", "w") as fh:
            json.dump({"untrained": base.to_dict(), "variants": [r.to_dict() for _, r in results]}, fh, indent=2)


def cmd_cods_recombine(args):
    m_lo, m_ro = read_mask_png(args.left), read_mask_png(args.right)
    m_t, m_l, m_r = recombine(m_lo, m_ro)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_mask_png(out / MASK_FILES["m_o_l"], m_l)
    write_mask_png(out / MASK_FILES["m_o_r"], m_r)
    write_mask_png(out / MASK_FILES["m_o_t"], m_t)
    print(f"wrote 3 masks to {out}")


def cmd_visualize(args):
    from .evaluation import visualize

    visualize(read_image_png(args.image), read_masks(args.masks), args.out, args.alpha)


def cmd_config(args):
    cfg = RunConfig.paper() if args.preset == "paper" else RunConfig()
    text = cfg.dump()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="egoseg", description="Egocentric hand-object segmentation")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def run_flags(sp, out_required=False):
        sp.add_argument("--config", help="run config YAML (default: toy config)")
        sp.add_argument("--data", required=True, help="dataset root with images/, labels/")
        sp.add_argument("--split", default="train")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)
        sp.add_argument("--iters", type=int, help="override schedule.max_iters")
        sp.add_argument("--out", required=out_required, help="output directory")

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n-train", type=int, default=512)
    g.add_argument("--n-val", type=int, default=64)
    g.add_argument("--n-test", type=int, default=128)
    g.add_argument("--size", type=int, default=128)
    g.add_argument("--max-distractors", type=int, default=3, help="use fewer for very small images")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one model")
    run_flags(t, out_required=True)
    t.add_argument("--val-split", default="val", help="empty string disables validation")
    t.add_argument("--variant", choices=list(VARIANTS))
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--json", help="write the report JSON here instead of stdout")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="predict masks for one image")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--alpha", type=float, default=0.5)
    i.add_argument("--dump-attention", action="store_true", help="save HOFE attention tiles as PNG")
    i.set_defaults(func=cmd_infer)

    a = sub.add_parser("ablate", help="train and score several variants with a shared seed")
    run_flags(a)
    a.add_argument("--test-split", default="test")
    a.add_argument("--variants", default=",".join(VARIANTS))
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("cods", help="contact-centric object decoupling tools")
    csub = c.add_subparsers(dest="cods_command", required=True)
    r = csub.add_parser("recombine", help="left/right object masks -> left, right, two-hand masks")
    r.add_argument("--left", required=True, help="mask PNG of everything the left hand touches")
    r.add_argument("--right", required=True, help="mask PNG of everything the right hand touches")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_cods_recombine)

    v = sub.add_parser("visualize", help="overlay a mask directory on an image")
    v.add_argument("--image", required=True)
    v.add_argument("--masks", required=True, help="directory written by `infer`")
    v.add_argument("--out", required=True)
    v.add_argument("--alpha", type=float, default=0.5)
    v.set_defaults(func=cmd_visualize)

    cf = sub.add_parser("config", help="print a default config")
    cf.add_argument("--preset", choices=["toy", "paper"], default="toy")
    cf.add_argument("--out")
    cf.set_defaults(func=cmd_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        if exc.last_good is not None:
            print(f"last good checkpoint: {exc.last_good}", file=sys.stderr)
        return 3
    except (ValueError, OSError, SampleError, SceneError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
