"""Command-line entry point: ``mama {synth,captions,pretrain,eval,simmap}``."""

from __future__ import annotations

import argparse
import csv
import io
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .captions import CaptionBuilder, CaptionStyle, CaptionTemplate, Segment
from .config import RunConfig
from .data_model import Density, flatten, group_studies, parse_records, split_patients
from .errors import ConfigError, InputError, MamaError
from .evaluation import (PROBE_FRACTIONS, ZeroShotSpec, full_finetune, linear_probe, make_report,
                         zero_shot_classify)
from .inference import correspondence
from .multiview import ImageStore, SamplingStrategy
from .simmap import MapFormat, export_map, localization_rate, normalize_unit, sentence_map
from .synthetic import generate_dataset, read_truth
from .trainer import MetricsLog, TrainState, load_checkpoint, run_training, save_checkpoint

CHECKPOINT_DIR = "checkpoint"
METRICS_FILE = "metrics.csv"
TARGET_CLASSES = {"density": [d.value for d in Density], "birads": [str(k) for k in range(7)],
                  "cancer": ["no", "yes"]}


class Dataset:
    """Records, studies and lazily loaded images from a data directory."""

    def __init__(self, root):
        self.root = Path(root)
        path = self.root / "records.csv"
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise InputError(f"cannot read {path}: {exc.strerror}") from None
        self.records = parse_records(text)
        self.studies = group_studies(self.records)
        self.images = ImageStore(root=self.root)

    def splits(self, cfg: RunConfig):
        return split_patients(self.studies, cfg.split)

    def truth(self):
        path = self.root / "ground_truth.csv"
        return read_truth(path) if path.exists() else None


def label_fn(target: str):
    classes = TARGET_CLASSES.get(target)
    if classes is None:
        raise ConfigError(f"unknown eval target {target!r}; choose from {sorted(TARGET_CLASSES)}")

    def label(record):
        value = record.field_value(target)
        if value is None:
            raise InputError(f"record {record.image_id} has no {target} label")
        return classes.index(value)
    return label, classes


# --- commands ----------------------------------------------------------------

def cmd_synth(cfg: RunConfig, args) -> int:
    out = Path(args.out)
    corpus = generate_dataset(cfg.synth, out)
    cfg.echo(out)
    print(f"wrote {len(corpus.records)} records to {out}")
    return 0


def cmd_captions(cfg: RunConfig, args) -> int:
    data = Dataset(args.data)
    template = CaptionTemplate.from_file(cfg.pretrain.template_path) if cfg.pretrain.template_path else None
    builder = CaptionBuilder(cfg.pretrain.caption_style, template, cfg.pretrain.mask_prob)
    rng = np.random.default_rng(cfg.train.seed)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["image_id", "style", "text"])
    for rec in data.records:
        cap = builder(rec, rng)
        writer.writerow([rec.image_id, cap.style.value, cap.text])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(buf.getvalue(), encoding="utf-8")
    cfg.echo(out.parent)
    print(f"wrote {len(data.records)} captions to {out}")
    return 0


def cmd_pretrain(cfg: RunConfig, args) -> int:
    data = Dataset(args.data)
    train, _, _ = data.splits(cfg)
    out = Path(args.out)
    pcfg = cfg.pretrain_config()
    ck = out / CHECKPOINT_DIR
    metrics = out / METRICS_FILE
    if args.resume and ck.exists():
        state = load_checkpoint(ck, expected_config=pcfg)
    else:
        state = TrainState(pcfg)
        out.mkdir(parents=True, exist_ok=True)
        metrics.unlink(missing_ok=True)
    cfg.echo(out)
    every = cfg.pretrain.checkpoint_every

    def callback(step, lr, breakdown):
        if every and state.step % every == 0:
            save_checkpoint(state, ck)

    run_training(state, train, data.images, steps=args.steps, metrics_path=metrics, callback=callback)
    MetricsLog(metrics)  # header exists even for a zero-step run
    save_checkpoint(state, ck)
    print(f"trained to step {state.step}; checkpoint at {ck}")
    return 0


def _target(cfg: RunConfig) -> str:
    return cfg.eval.target or "density"


def cmd_eval(cfg: RunConfig, args) -> int:
    data = Dataset(args.data)
    train, _, test = data.splits(cfg)
    if not test:
        raise InputError("test split is empty")
    state = load_checkpoint(Path(args.checkpoint) / CHECKPOINT_DIR if
                            (Path(args.checkpoint) / CHECKPOINT_DIR).exists() else args.checkpoint)
    target = _target(cfg)
    label, classes = label_fn(target)
    mode = cfg.eval.mode
    out = Path(args.out)
    if mode == "zeroshot":
        records = flatten(test)
        spec = ZeroShotSpec(classes, target_field=target, prompt_style=cfg.eval.prompt_style,
                            fill_meta=cfg.eval.fill_meta, temperature_for_probs=cfg.eval.temperature_for_probs,
                            template=state.caption_builder.template)
        images = np.stack([data.images(r) for r in records])
        preds, _, probs = zero_shot_classify(state.model, state.tokenizer, records, images, spec)
        y = np.array([label(r) for r in records])
        report = make_report(y, preds, probs, len(classes), mode="zeroshot")
        stem = "zeroshot"
    elif mode == "probe":
        report = linear_probe(state.model, train, cfg.eval.fraction, label, test, data.images, len(classes),
                              cfg.probe)
        stem = f"probe_{cfg.eval.fraction:g}"
    elif mode == "finetune":
        report = full_finetune(state.model, train, label, test, data.images, len(classes), cfg.finetune)
        stem = "finetune"
    else:
        raise ConfigError(f"unknown eval mode {mode!r}")
    cfg.echo(out)
    path, _ = report.save(out, stem)
    bacc = "undefined" if report.balanced_accuracy is None else f"{report.balanced_accuracy:.4f}"
    print(f"{stem}: bACC {bacc}; report at {path}")
    return 0


def cmd_simmap(cfg: RunConfig, args) -> int:
    data = Dataset(args.data)
    train, val, test = data.splits(cfg)
    chosen = {"train": train, "val": val, "test": test, "all": data.studies}.get(cfg.simmap.split)
    if chosen is None:
        raise ConfigError(f"unknown simmap split {cfg.simmap.split!r}")
    records = flatten(chosen)
    if cfg.simmap.limit:
        records = records[: cfg.simmap.limit]
    ck = Path(args.checkpoint)
    state = load_checkpoint(ck / CHECKPOINT_DIR if (ck / CHECKPOINT_DIR).exists() else ck)
    template = state.caption_builder.template
    fmt = MapFormat(cfg.simmap.format)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = state.config.encoder.patch_grid
    truth = data.truth()
    maps, cells = [], []
    for rec in records:
        caption = CaptionBuilder(CaptionStyle.STRUCTURED, template, 0.0)(rec, None)
        idx = cfg.simmap.sentence_index
        if idx is None:
            idx = caption.sentence_index(Segment.FINDINGS)
            if idx is None:
                continue
        corr = correspondence(state.model, state.tokenizer, data.images(rec), caption)
        smap = sentence_map(corr, idx, grid, caption.sentences[idx] if idx < len(caption.sentences) else "")
        if cfg.simmap.normalize or fmt is MapFormat.PGM:
            smap = normalize_unit(smap)
        export_map(smap, out / f"{rec.image_id}_s{idx}.{fmt.value}", fmt)
        maps.append(smap)
        if truth is not None and rec.image_id in truth:
            cells.append(truth[rec.image_id].cell)
    cfg.echo(out)
    msg = f"wrote {len(maps)} maps to {out}"
    if maps and len(cells) == len(maps):
        rate = localization_rate(maps, cells)
        (out / "localization.txt").write_text(f"planted_cell_recovery = {rate!r}\nn = {len(maps)}\n")
        msg += f"; planted-cell recovery {rate:.3f}"
    print(msg)
    return 0


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mama", description="Multi-view mammography-report pre-training on CPU.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI file with one section per module")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config key (repeatable)")
        return p

    p = common(sub.add_parser("synth", help="generate a synthetic dataset"))
    p.add_argument("--out", required=True)
    p.add_argument("--patients", type=int)
    p.add_argument("--classes", type=int)

    p = common(sub.add_parser("captions", help="dump one caption per record"))
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--style", choices=[s.value for s in CaptionStyle])
    p.add_argument("--mask-prob", type=float)

    p = common(sub.add_parser("pretrain", help="contrastive pre-training"))
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--views", choices=[s.value for s in SamplingStrategy])
    p.add_argument("--no-sla", action="store_true")
    p.add_argument("--no-symmetric-vt", action="store_true")
    p.add_argument("--no-vv", action="store_true")
    p.add_argument("--no-lora", action="store_true")
    p.add_argument("--steps", type=int, help="stop after this many updates in this invocation")
    p.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint if present")

    p = common(sub.add_parser("eval", help="zero-shot, linear-probe or fine-tune evaluation"))
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["zeroshot", "probe", "finetune"])
    p.add_argument("--fraction", type=float, choices=PROBE_FRACTIONS)
    p.add_argument("--target", choices=sorted(TARGET_CLASSES))

    p = common(sub.add_parser("simmap", help="export sentence-patch similarity maps"))
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sentence-index", type=int)
    p.add_argument("--format", choices=[f.value for f in MapFormat])
    return parser


_FLAG_KEYS = {
    "patients": ("synth", "num_patients"), "classes": ("synth", "num_classes"),
    "style": ("pretrain", "caption_style"), "mask_prob": ("pretrain", "mask_prob"),
    "views": ("pretrain", "strategy"), "mode": ("eval", "mode"), "fraction": ("eval", "fraction"),
    "target": ("eval", "target"), "sentence_index": ("simmap", "sentence_index"),
    "format": ("simmap", "format"),
}
_SWITCHES = {"no_sla": ("loss", "use_sla"), "no_symmetric_vt": ("loss", "use_symmetric_vt"),
             "no_vv": ("loss", "use_vv"), "no_lora": ("pretrain", "use_lora")}


def resolve_config(args, environ=None) -> RunConfig:
    """Config file, then ``--set`` overrides, then dedicated flags, then ``MAMA_SEED``."""
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    cfg.apply_overrides(args.set)
    for flag, (section, key) in _FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            cfg.set(section, key, str(value))
    for flag, (section, key) in _SWITCHES.items():
        if getattr(args, flag, False):
            cfg.set(section, key, "false")
    cfg.apply_seed_env(environ)
    return cfg.validated()


COMMANDS = {"synth": cmd_synth, "captions": cmd_captions, "pretrain": cmd_pretrain, "eval": cmd_eval,
            "simmap": cmd_simmap}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)

    def show(message, category, filename, lineno, file=None, line=None):
        print(f"mama {args.command}: warning: {message}", file=sys.stderr)

    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            warnings.showwarning = show
            cfg = resolve_config(args)
            return COMMANDS[args.command](cfg, args)
    except (MamaError, OSError, ValueError) as exc:
        message = " ".join(str(exc).split()) or type(exc).__name__
        print(f"mama {args.command}: error: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
