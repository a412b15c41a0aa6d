"""Command-line entry point for the full pipeline.

Subcommands: pretrain, probe, train-caption, evaluate, caption, report,
make-synthetic.  Exit codes: 0 success, 1 input/config error, 2 numerical
failure.  Every command that produces files writes them under one --out
root with fixed names plus an effective-config.txt dump of the resolved
settings.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import evaluation, report as report_mod
from .config import derive_seed, dump_effective_config, new_rng, parse_config, get_int
from .data import PreprocessConfig, load_dataset, TokenizedDataset
from .errors import ConfigError, DataError, RotcapError, TrainingDivergence
from .models import CaptionDecoder, ConvEncoder, DecoderSpec, EncoderSpec, \
    LinearHead, rotation_head
from .rotation import pretext_train
from .synthetic import load_labels, make_synthetic
from .training import TrainConfig, finetune_classifier, subset_labels, train_captioner
from .vocab import Vocabulary


class _Parser(argparse.ArgumentParser):
    # usage errors are input errors: exit 1, not argparse's default 2
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _cfgmap(args) -> dict[str, str]:
    return parse_config(args.config) if getattr(args, "config", None) else {}


def _encoder_spec(cfg: dict[str, str]) -> EncoderSpec:
    widths_text = cfg.get("encoder_widths", "16,32,64,128")
    try:
        widths = [int(w) for w in widths_text.replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"encoder_widths: expected integers, got {widths_text!r}") from None
    if not widths:
        raise ConfigError("encoder_widths may not be empty")
    skip = cfg.get("skip_connections", "true").lower() not in ("false", "0", "no")
    spec = EncoderSpec.from_widths(widths, get_int(cfg, "embed_size", 512), skip)
    kernel = get_int(cfg, "encoder_kernel", 3)
    stride = get_int(cfg, "encoder_stride", 2)
    for st in spec.stages:
        st.kernel = kernel
        st.stride = stride
    return spec


def _preprocess_from_meta(meta: dict) -> PreprocessConfig | None:
    pp = meta.get("preprocess")
    if not pp:
        return None
    return PreprocessConfig(
        resize_to=int(pp["resize_to"]), crop_size=int(pp["crop_size"]),
        hflip_prob=float(pp["hflip_prob"]),
        channel_mean=tuple(pp["channel_mean"]), channel_std=tuple(pp["channel_std"]),
    ).validate()


def _resolve_preprocess(args, meta: dict) -> PreprocessConfig:
    if getattr(args, "config", None):
        return PreprocessConfig.from_mapping(parse_config(args.config))
    stored = _preprocess_from_meta(meta)
    return stored if stored is not None else PreprocessConfig().validate()


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump_config(out: Path, command: str, args, extra: dict) -> None:
    values = {"command": command}
    for key in ("data", "out", "seed", "threads", "manifest"):
        if hasattr(args, key):
            values[key] = getattr(args, key)
    values.update(extra)
    dump_effective_config(out / "effective-config.txt", values)


def _load_dataset(args):
    root = Path(args.data)
    return load_dataset(root, root / args.manifest)


def cmd_pretrain(args) -> int:
    cfg = _cfgmap(args)
    out = _out_dir(args)
    pre = PreprocessConfig.from_mapping(cfg, train_mode=False)
    tcfg = TrainConfig.from_mapping(
        cfg, seed=args.seed,
        **({"epochs": args.epochs} if args.epochs else {}),
        **({"batch_size": args.batch_size} if args.batch_size else {}))
    dataset = _load_dataset(args)
    if len(dataset) == 0:
        raise DataError(f"dataset at {args.data} has no records")
    images = evaluation.prepare_images(dataset, pre)
    spec = _encoder_spec(cfg)
    init_rng = new_rng(derive_seed(args.seed, "init"))
    encoder = ConvEncoder(spec, init_rng)
    head = rotation_head(spec.embed_size, init_rng)
    history = pretext_train(encoder, head, images, tcfg)
    meta = {"epochs": tcfg.epochs, "final_loss": history.rows[-1][1],
            "final_rotation_accuracy": history.rows[-1][2],
            "preprocess": _preprocess_dict(pre)}

    if args.label_fraction > 0.0:
        if not args.labels:
            raise ConfigError("--label-fraction needs --labels FILE")
        labels = load_labels(args.labels)
        ids = [i for i in dataset.unique_image_ids() if i in labels]
        classes = sorted(set(labels[i] for i in ids))
        y = np.array([classes.index(labels[i]) for i in ids], dtype=np.int64)
        imgs = evaluation.prepare_images(dataset, pre, ids)
        picked = subset_labels(len(ids), args.label_fraction, args.seed, classes=y)
        ft_cfg = TrainConfig.from_mapping(
            cfg, seed=args.seed, epochs=get_int(cfg, "finetune_epochs", 10),
            label_fraction=args.label_fraction)
        ft_head = LinearHead(spec.embed_size, len(classes), init_rng)
        ft_history = finetune_classifier(encoder, ft_head, imgs[picked], y[picked], ft_cfg)
        ft_history.to_csv(out / "history-finetune.csv")
        meta["finetune_labels"] = len(picked)

    ckpt = ckpt_io.pretext_checkpoint(encoder, head, meta=meta,
                                      extra_arrays=getattr(history, "optimizer_arrays", None))
    ckpt_io.save_checkpoint(out / "checkpoint.bin", ckpt)
    history.to_csv(out / "history.csv")
    _dump_config(out, "pretrain", args, {**asdict(tcfg), **_preprocess_dict(pre)})
    print(f"pretext training done: {len(dataset.unique_image_ids())} images, "
          f"{tcfg.epochs} epochs, final loss {history.rows[-1][1]:.4f}, "
          f"rotation accuracy {history.rows[-1][2]:.4f}")
    print(f"wrote {out / 'checkpoint.bin'} and {out / 'history.csv'}")
    return 0


def _preprocess_dict(pre: PreprocessConfig) -> dict:
    return {"resize_to": pre.resize_to, "crop_size": pre.crop_size,
            "hflip_prob": pre.hflip_prob, "channel_mean": list(pre.channel_mean),
            "channel_std": list(pre.channel_std)}


def cmd_probe(args) -> int:
    out = _out_dir(args)
    ckpt = ckpt_io.load_checkpoint(args.encoder)
    encoder = ckpt_io.restore_encoder(ckpt)
    pre = _resolve_preprocess(args, ckpt.meta)
    dataset = _load_dataset(args)
    labels = load_labels(args.labels)
    ids = [i for i in dataset.unique_image_ids() if i in labels]
    if len(ids) < 4:
        raise DataError("need at least 4 labeled images for probing")
    classes = sorted(set(labels[i] for i in ids))
    y = np.array([classes.index(labels[i]) for i in ids], dtype=np.int64)
    feats = evaluation.encode_images(encoder, evaluation.prepare_images(dataset, pre, ids))
    acc = evaluation.heldout_probe_accuracy(feats, y, l2=args.l2,
                                            train_fraction=args.train_fraction,
                                            split_seed=args.seed)
    (out / "probe.csv").write_text(f"probe_accuracy\n{acc:.6f}\n", encoding="utf-8")
    _dump_config(out, "probe", args, {"l2": args.l2, "train_fraction": args.train_fraction,
                                      "labels": args.labels, "encoder": args.encoder,
                                      **_preprocess_dict(pre)})
    print(f"probe_accuracy={acc:.6f}")
    return 0


def cmd_train_caption(args) -> int:
    cfg = _cfgmap(args)
    out = _out_dir(args)
    pre = PreprocessConfig.from_mapping(cfg, train_mode=True)
    tcfg = TrainConfig.from_mapping(
        cfg, seed=args.seed,
        epochs=args.epochs or get_int(cfg, "epochs", 10),
        batch_size=args.batch_size or get_int(cfg, "batch_size", 64))
    dataset = _load_dataset(args)
    if len(dataset) == 0:
        raise DataError(f"dataset at {args.data} has no records")
    threshold = get_int(cfg, "vocab_threshold", 4)
    vocab = Vocabulary.build([r.caption_text for r in dataset.records], threshold)
    vocab.save(out / "vocab.txt")

    init_rng = new_rng(derive_seed(args.seed, "init"))
    if args.encoder.lower() == "none":
        encoder = ConvEncoder(_encoder_spec(cfg), init_rng)
    else:
        encoder = ckpt_io.restore_encoder(ckpt_io.load_checkpoint(args.encoder))
    dec_spec = DecoderSpec(embed_size=encoder.embed_size,
                           hidden_size=get_int(cfg, "hidden_size", 512),
                           vocab_size=len(vocab))
    decoder = CaptionDecoder(dec_spec, init_rng)
    tokenized = TokenizedDataset.from_dataset(dataset, vocab, pre)
    history = train_captioner(encoder, decoder, tokenized, vocab, tcfg)

    meta = {"epochs": tcfg.epochs, "final_loss": history.rows[-1][1],
            "final_perplexity": history.rows[-1][2], "preprocess": _preprocess_dict(pre)}
    ckpt = ckpt_io.captioner_checkpoint(encoder, decoder, vocab.content_hash(), meta=meta,
                                        extra_arrays=getattr(history, "optimizer_arrays", None))
    ckpt_io.save_checkpoint(out / "checkpoint.bin", ckpt)
    history.to_csv(out / "history.csv")
    _dump_config(out, "train-caption", args,
                 {**asdict(tcfg), **_preprocess_dict(pre),
                  "vocab_threshold": threshold, "vocab_size": len(vocab),
                  "hidden_size": dec_spec.hidden_size, "encoder": args.encoder})
    print(f"caption training done: {len(dataset)} records, vocab {len(vocab)}, "
          f"final loss {history.rows[-1][1]:.4f}, perplexity {history.rows[-1][2]:.4f}")
    print(f"wrote {out / 'checkpoint.bin'}, {out / 'vocab.txt'}, {out / 'history.csv'}")
    return 0


def _resolve_vocab(args, model_path: Path) -> Vocabulary:
    vocab_path = Path(args.vocab) if args.vocab else model_path.parent / "vocab.txt"
    return Vocabulary.load(vocab_path)


def cmd_evaluate(args) -> int:
    out = _out_dir(args)
    model_path = Path(args.model)
    ckpt = ckpt_io.load_checkpoint(model_path)
    vocab = _resolve_vocab(args, model_path)
    pre = _resolve_preprocess(args, ckpt.meta)
    dataset = _load_dataset(args)
    labels = load_labels(args.labels) if args.labels else None
    name = args.name or model_path.parent.name or "model"
    rep = evaluation.evaluate_model(
        model_path, dataset, vocab, pre, labels=labels,
        pretext_checkpoint_path=args.pretext, max_len=args.max_len,
        model_name=name, sample_count=args.samples)
    report_mod.write_report_csv([rep], out / "report.csv")
    report_mod.write_samples([rep], out / "samples.txt")
    _dump_config(out, "evaluate", args,
                 {"model": str(model_path), "name": name, "max_len": args.max_len,
                  **_preprocess_dict(pre)})
    print(f"model={name}")
    print(f"loss={rep.caption_loss:.6f}")
    print(f"perplexity={rep.perplexity:.6f}")
    print(f"bleu4={rep.bleu4:.6f}")
    if rep.probe_accuracy is not None:
        print(f"probe_accuracy={rep.probe_accuracy:.6f}")
    if rep.pretext_accuracy is not None:
        print(f"pretext_accuracy={rep.pretext_accuracy:.6f}")
    return 0


def cmd_caption(args) -> int:
    model_path = Path(args.model)
    ckpt = ckpt_io.load_checkpoint(model_path)
    encoder, decoder = ckpt_io.restore_captioner(ckpt)
    vocab = _resolve_vocab(args, model_path)
    stored = ckpt.meta.get("vocab_hash")
    if stored and stored != vocab.content_hash():
        raise DataError("vocabulary file does not match the model checkpoint")
    pre = _resolve_preprocess(args, ckpt.meta)
    from .data import preprocess
    from .imageio import load_image

    tensor = preprocess(load_image(args.image), pre.eval_mode())
    feature = encoder.forward(tensor[None])[0]
    tokens = decoder.generate(feature, max_len=args.max_len)
    text = vocab.detokenize(tokens)
    print(text)
    if args.out:
        out = _out_dir(args)
        (out / "caption.txt").write_text(text + "\n", encoding="utf-8")
        _dump_config(out, "caption", args,
                     {"model": args.model, "image": args.image,
                      "max_len": args.max_len, **_preprocess_dict(pre)})
    return 0


def cmd_report(args) -> int:
    out = _out_dir(args)
    reports = []
    for in_dir in args.in_dirs:
        in_dir = Path(in_dir)
        rows = report_mod.read_report_csv(in_dir / "report.csv")
        samples_path = in_dir / "samples.txt"
        if samples_path.is_file():
            by_model = report_mod.read_samples(samples_path)
            for row in rows:
                row.samples = by_model.get(row.model_name, [])
        reports.extend(rows)
    paths = report_mod.render_report(reports, out)
    _dump_config(out, "report", args, {"inputs": ";".join(str(p) for p in args.in_dirs)})
    for kind, path in paths.items():
        print(f"wrote {kind}: {path}")
    return 0


def cmd_make_synthetic(args) -> int:
    out = _out_dir(args)
    info = make_synthetic(out, args.n, args.seed, size=args.size, image_format=args.format)
    _dump_config(out, "make-synthetic", args,
                 {"n": args.n, "size": args.size, "format": args.format})
    print(f"wrote {info['images']} {info['size']}x{info['size']} images "
          f"({info['classes']} shape classes) under {out}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="rotcap",
                     description="Rotation-pretext self-supervised image captioning toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        if data:
            p.add_argument("--data", required=True, help="dataset root directory")
            p.add_argument("--manifest", default="manifest.tsv",
                           help="manifest filename inside the data root")
        p.add_argument("--seed", type=int, default=0, help="master random seed")
        p.add_argument("--threads", type=int, default=1,
                       help="worker parallelism cap (1 = bitwise deterministic)")

    p = sub.add_parser("pretrain", help="rotation-pretext pretraining")
    common(p)
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--label-fraction", type=float, default=0.0,
                   help="optional supervised fine-tune on this label share (0 skips)")
    p.add_argument("--labels", help="labels file for --label-fraction")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", help="linear-probe a frozen encoder")
    common(p)
    p.add_argument("--encoder", required=True, help="encoder-bearing checkpoint")
    p.add_argument("--labels", required=True)
    p.add_argument("--config", help="preprocess config override")
    p.add_argument("--out", required=True)
    p.add_argument("--l2", type=float, default=1e-4)
    p.add_argument("--train-fraction", type=float, default=0.7)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("train-caption", help="train the CNN-LSTM captioner")
    common(p)
    p.add_argument("--encoder", required=True, help="pretext checkpoint or 'none'")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.set_defaults(func=cmd_train_caption)

    p = sub.add_parser("evaluate", help="compute metrics for one captioner checkpoint")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--vocab", help="vocabulary file (default: next to the model)")
    p.add_argument("--labels", help="labels file enabling the probe metric")
    p.add_argument("--pretext", help="pretext checkpoint for rotation accuracy")
    p.add_argument("--config", help="preprocess config override")
    p.add_argument("--name", help="model name in the report")
    p.add_argument("--max-len", type=int, default=20)
    p.add_argument("--samples", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("caption", help="caption a single image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--vocab")
    p.add_argument("--config")
    p.add_argument("--max-len", type=int, default=20)
    p.add_argument("--out", help="optionally also write caption.txt here")
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("report", help="merge evaluate outputs into one comparison report")
    p.add_argument("--in", dest="in_dirs", action="append", required=True,
                   metavar="DIR", help="evaluate output directory (repeatable)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("make-synthetic", help="generate the oriented-shapes dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--format", choices=("ppm", "png"), default="ppm")
    p.set_defaults(func=cmd_make_synthetic)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "threads", 1) < 1:
        print("rotcap: error: --threads must be >= 1", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except TrainingDivergence as exc:
        print(f"rotcap: numerical failure: {exc}", file=sys.stderr)
        return 2
    except (RotcapError, OSError) as exc:
        print(f"rotcap: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
