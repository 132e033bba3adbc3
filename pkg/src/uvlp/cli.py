"""Command line entry points.

Exit codes: 0 success, 2 validation/config error, 3 runtime abort (NaN loss,
checkpoint failure mid-run).
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

import numpy as np

from . import corpus as corpusmod
from . import evaluation as ev
from .checkpoint import CheckpointError, load_model, read_manifest, save_checkpoint
from .config import RunConfig, config_hash, load_run_config, save_run_config, split_pairs
from .model import VLModel, encode_batch
from .text import build_vocabulary, load_vocabulary, save_vocabulary
from .trainer import TrainAbort, Trainer


class ValidationFailure(Exception):
    pass


def _resolve_out(arg, name: str) -> Path:
    if arg is not None:
        return Path(arg)
    root = os.environ.get("UVLP_RUN_DIR")
    if root:
        return Path(root) / name
    raise ValidationFailure(
        f"no output directory: pass --out or set UVLP_RUN_DIR (default {name}/)")


def _prepare_dir(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise ValidationFailure(
                f"output directory {path} is not empty (use --force to overwrite)")
    path.mkdir(parents=True, exist_ok=True)


def _parse_size(text: str):
    parts = text.lower().split("x")
    if len(parts) != 3:
        raise ValidationFailure("--image-size must look like CxHxW, e.g. 1x32x32")
    c, h, w = (int(p) for p in parts)
    return (c, h, w)


def _write_csv(path: Path, fieldnames, rows) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


# -- corpus --------------------------------------------------------------------


def cmd_gen_corpus(args) -> None:
    out = _resolve_out(args.out, "corpus")
    _prepare_dir(out, args.force)
    size = _parse_size(args.image_size)
    pairs = corpusmod.generate_corpus(args.pairs, args.classes, size, args.seed)
    corpusmod.save_corpus(out, pairs, args.seed, args.classes)
    print(f"wrote {len(pairs)} pairs ({args.classes} classes) to {out}")


# -- pretraining -----------------------------------------------------------------


def _apply_objective_flags(cfg: RunConfig, args) -> RunConfig:
    if args.objectives is not None:
        chosen = {part.strip() for part in args.objectives.split(",") if part.strip()}
        known = {"itc", "itm", "itg", "tig"}
        bad = chosen - known
        if bad:
            raise ValidationFailure(f"unknown objectives: {sorted(bad)}")
        if not chosen:
            raise ValidationFailure("--objectives must name at least one objective")
        for name in known - chosen:
            setattr(cfg, f"lambda_{name}", 0.0)
    if args.tig_weight is not None:
        cfg.lambda_tig = args.tig_weight
    return cfg


def cmd_pretrain(args) -> None:
    corpus_dir = Path(args.corpus)
    if not corpus_dir.exists():
        raise ValidationFailure(f"corpus directory not found: {corpus_dir}")
    out = _resolve_out(args.out, "run")
    _prepare_dir(out, args.force)

    if args.config:
        cfg = load_run_config(Path(args.config))
    else:
        cfg = RunConfig()
    for field in ("seed", "total_steps", "batch_size", "peak_lr", "holdout_frac"):
        val = getattr(args, field)
        if val is not None:
            setattr(cfg, field, val)
    cfg = _apply_objective_flags(cfg, args)

    pairs, meta = corpusmod.load_corpus(corpus_dir)
    train_pairs, held = split_pairs(pairs, cfg.holdout_frac)
    vocab = build_vocabulary([p.words for p in train_pairs], cfg.vocab_max)
    save_vocabulary(out / "vocab.txt", vocab)

    image_size = tuple(meta["image_size"])
    model_cfg = cfg.model_config(len(vocab), image_size)
    model = VLModel(model_cfg, cfg.seed)
    chash = save_run_config(cfg, out / "config.json")
    (out / "config_hash.txt").write_text(chash + "\n")

    trainer = Trainer(model, vocab, train_pairs, cfg.train_config(), run_dir=out)
    print(f"training {cfg.total_steps} steps on {len(train_pairs)} pairs "
          f"({len(held)} held out), config {chash[:12]}")
    reports = trainer.run()
    ckpt = out / "ckpt"
    save_checkpoint(ckpt, trainer, chash)
    last = reports[-1]
    print(f"done: step {last.step} total {last.total:.4f} -> {ckpt}")


# -- evaluation -------------------------------------------------------------------


def _load_run(args):
    ckpt = Path(args.ckpt)
    if not ckpt.exists():
        raise CheckpointError(f"checkpoint not found: {ckpt}")
    run_dir = ckpt.parent
    cfg = load_run_config(run_dir / "config.json")
    chash = config_hash(cfg)
    manifest = read_manifest(ckpt)
    if manifest["config_hash"] != chash:
        raise ValidationFailure(
            f"checkpoint {ckpt} was trained under a different config")
    vocab = load_vocabulary(run_dir / "vocab.txt")
    corpus_dir = Path(args.corpus)
    pairs, meta = corpusmod.load_corpus(corpus_dir)
    train_pairs, held = split_pairs(pairs, cfg.holdout_frac)
    model = VLModel(cfg.model_config(len(vocab), tuple(meta["image_size"])), cfg.seed)
    load_model(ckpt, model, chash)
    return model, vocab, cfg, meta, train_pairs, held, run_dir


def cmd_eval_retrieval(args) -> None:
    model, vocab, _, _, _, held, run_dir = _load_run(args)
    ks = tuple(int(k) for k in args.k.split(","))
    labels = np.array([p.class_id for p in held])
    gq = ev.embed_images(model, np.stack([p.image for p in held]))
    gt = ev.embed_texts(model, [p.words for p in held], vocab)
    sims = ev.pairwise_similarity(gq, gt)
    rows = []
    for direction, scores, qlab, glab in (
            ("image_to_text", sims, labels, labels),
            ("text_to_image", sims.T, labels, labels)):
        res = ev.retrieve(scores, qlab, glab, ks, direction)
        for k, v in res.map_at.items():
            rows.append({"direction": direction, "k": k, "map": repr(v)})
            print(f"{direction} mAP@{k} = {v:.4f}")
    _write_csv(run_dir / "retrieval.csv", ["direction", "k", "map"], rows)


def cmd_eval_zeroshot(args) -> None:
    model, vocab, _, meta, _, held, run_dir = _load_run(args)
    num_classes = meta["num_classes"]
    images = np.stack([p.image for p in held])
    labels = np.array([p.class_id for p in held])
    pred, scores = ev.zero_shot_classify(model, images, vocab,
                                         ev.default_ensembles(num_classes))
    rows = []
    for c in range(num_classes):
        mask = labels == c
        acc = float((pred[mask] == c).mean()) if mask.any() else 0.0
        rows.append({"class_id": c, "support": int(mask.sum()), "accuracy": repr(acc)})
    overall = float((pred == labels).mean())
    rows.append({"class_id": "all", "support": len(held), "accuracy": repr(overall)})
    _write_csv(run_dir / "zeroshot.csv", ["class_id", "support", "accuracy"], rows)
    print(f"zero-shot accuracy = {overall:.4f} over {len(held)} held-out images")


def cmd_eval_report_gen(args) -> None:
    model, vocab, _, _, _, held, run_dir = _load_run(args)
    subset = held[: args.num] if args.num else held
    images = np.stack([p.image for p in subset])
    if args.beam > 1:
        hyp_ids = [model.beam_report(img, args.beam) for img in images]
    else:
        hyp_ids = model.greedy_report(images)
    rows = []
    sums = {"bleu1": 0.0, "bleu2": 0.0, "bleu3": 0.0, "bleu4": 0.0, "rougeL": 0.0}
    for i, (p, ids) in enumerate(zip(subset, hyp_ids)):
        hyp = [vocab.id_to_token[t] for t in ids if t < len(vocab.id_to_token)]
        ref = p.words
        row = {"index": i, "class_id": p.class_id,
               "hypothesis": " ".join(hyp), "reference": " ".join(ref)}
        for n in range(1, 5):
            row[f"bleu{n}"] = repr(ev.bleu_n(hyp, [ref], n))
            sums[f"bleu{n}"] += float(row[f"bleu{n}"])
        row["rougeL"] = repr(ev.rouge_l(hyp, ref))
        sums["rougeL"] += float(row["rougeL"])
        rows.append(row)
    _write_csv(run_dir / "nlg.csv",
               ["index", "class_id", "hypothesis", "reference",
                "bleu1", "bleu2", "bleu3", "bleu4", "rougeL"], rows)
    n = len(rows)
    print("  ".join(f"{k}={v / n:.4f}" for k, v in sums.items()))


def cmd_eval_reconstruct(args) -> None:
    model, vocab, _, _, _, held, run_dir = _load_run(args)
    subset = held[: args.num] if args.num else held
    rows = ev.reconstruction_report(model, subset, vocab)
    out_rows = [{k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()}
                for r in rows]
    _write_csv(run_dir / "recon.csv", ["index", "class_id", "mse", "psnr"], out_rows)
    show = subset[:8]
    images = np.stack([p.image for p in show])
    batch = encode_batch([p.words for p in show], vocab, model.cfg.fusion.l_t)
    recon = model.reconstruct(images, batch)
    rdir = run_dir / "recon"
    rdir.mkdir(exist_ok=True)
    ev.save_png_grid(np.concatenate([images, recon]), rdir / "recon.png",
                     ncol=len(show))
    recon.astype("<f4").tofile(rdir / "recon.f32")
    mean_mse = float(np.mean([r["mse"] for r in rows]))
    print(f"reconstruction MSE = {mean_mse:.6f} over {len(rows)} held-out images")


def cmd_eval_sample(args) -> None:
    model, vocab, cfg, _, train_pairs, _, run_dir = _load_run(args)
    tops, bots = [], []
    for i in range(0, len(train_pairs), 64):
        part = train_pairs[i : i + 64]
        images = np.stack([p.image for p in part])
        batch = encode_batch([p.words for p in part], vocab, model.cfg.fusion.l_t)
        t, b = model.encode_codes(images, batch)
        tops.append(t)
        bots.append(b)
    top_grids = np.concatenate(tops)
    bot_grids = np.concatenate(bots)
    tcfg = model.cfg.tig
    prior_top, prior_bot = ev.train_priors(
        top_grids, bot_grids, tcfg.k_top, tcfg.k_bot,
        seed=args.seed, steps=args.prior_steps)
    nll_top = prior_top.nll(top_grids.reshape(len(top_grids), -1))
    print(f"top prior NLL = {nll_top:.4f} nats/site (uniform {np.log(tcfg.k_top):.4f})")
    top_s, bot_s = ev.sample_codes(
        prior_top, prior_bot, args.num, args.seed,
        (tcfg.h_top, tcfg.w_top), (tcfg.h_bot, tcfg.w_bot))
    images = model.gen.codes_to_images(top_s, bot_s)
    sdir = run_dir / "samples"
    sdir.mkdir(exist_ok=True)
    ev.save_png_grid(images, sdir / "samples.png")
    images.astype("<f4").tofile(sdir / "samples.f32")
    print(f"sampled {args.num} images: mean {images.mean():.4f} std {images.std():.4f}")


# -- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uvlp",
                                     description="Unified vision-language pretraining")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-corpus", help="generate a synthetic paired corpus")
    g.add_argument("--pairs", type=int, default=512)
    g.add_argument("--classes", type=int, default=5)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--image-size", default="1x32x32")
    g.add_argument("--out")
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("pretrain", help="run multi-objective pretraining")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out")
    p.add_argument("--config", help="JSON run config (flags override)")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int, dest="total_steps")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--peak-lr", type=float, dest="peak_lr")
    p.add_argument("--holdout-frac", type=float, dest="holdout_frac")
    p.add_argument("--objectives", help="comma list, e.g. itc,itm (others zeroed)")
    p.add_argument("--tig-weight", type=float, dest="tig_weight")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_pretrain)

    e = sub.add_parser("eval", help="evaluate a trained checkpoint")
    esub = e.add_subparsers(dest="eval_command", required=True)

    def common(sp):
        sp.add_argument("--ckpt", required=True)
        sp.add_argument("--corpus", required=True)

    r = esub.add_parser("retrieval", help="cross-modal retrieval mAP@K")
    common(r)
    r.add_argument("--k", default="1,5,10")
    r.set_defaults(func=cmd_eval_retrieval)

    z = esub.add_parser("zeroshot", help="prompt-ensemble classification")
    common(z)
    z.set_defaults(func=cmd_eval_zeroshot)

    n = esub.add_parser("report-gen", help="decode reports, score BLEU/ROUGE-L")
    common(n)
    n.add_argument("--num", type=int, default=0, help="0 = all held out")
    n.add_argument("--beam", type=int, default=1, help="1 = greedy decoding")
    n.set_defaults(func=cmd_eval_report_gen)

    c = esub.add_parser("reconstruct", help="encode-quantize-decode fidelity")
    common(c)
    c.add_argument("--num", type=int, default=0)
    c.set_defaults(func=cmd_eval_reconstruct)

    s = esub.add_parser("sample", help="train code priors and sample images")
    common(s)
    s.add_argument("--num", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--prior-steps", type=int, default=400, dest="prior_steps")
    s.set_defaults(func=cmd_eval_sample)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except (ValidationFailure, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainAbort as exc:
        print(f"abort: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
