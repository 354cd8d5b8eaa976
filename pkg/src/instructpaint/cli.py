"""Command-line pipeline: datagen, pretrain, train, eval, generate, gradcheck.

Every command is reproducible from (config file, seed); reports and
checkpoints embed the config hash. Exit codes: 0 success, 1 usage error,
2 numerical failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import itertools
import json
import os
import sys

import numpy as np

from . import checks as mchecks
from . import data as mdata
from . import metrics as mmetrics
from . import text as mtext
from .config import RunConfig
from .trainer import GANTrainer, NumericalError, Pretrainer, load_text_encoder

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2
EXIT_IO = 3


class UsageError(Exception):
    pass


class CliParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    p = CliParser(prog="instructpaint", description=__doc__)
    p.add_argument("--config", help="JSON run-config file")
    p.add_argument("--seed", type=int, help="override train.seed")
    p.add_argument("--out", default="runs/default", help="output directory")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key by dotted path, e.g. train.batch_size=4")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("datagen", help="generate train/val/test datasets")
    d.add_argument("--n-train", type=int)
    d.add_argument("--n-val", type=int)
    d.add_argument("--n-test", type=int)

    pre = sub.add_parser("pretrain", help="phase-1 text-encoder pretraining")
    pre.add_argument("--data", help="training dataset file (default <out>/train.bin)")
    pre.add_argument("--steps", type=int, help="override train.pretrain_steps")

    tr = sub.add_parser("train", help="phase-2 adversarial training")
    tr.add_argument("--data", help="training dataset file (default <out>/train.bin)")
    tr.add_argument("--pretrain-ckpt", help="default <out>/pretrain.ltte")
    tr.add_argument("--steps", type=int, help="override train.max_steps")
    tr.add_argument("--resume", action="store_true", help="continue from <out>/model.ltte")

    ev = sub.add_parser("eval", help="evaluate a trained model")
    ev.add_argument("--data", help="eval dataset file (default <out>/test.bin)")
    ev.add_argument("--ckpt", help="default <out>/model.ltte")
    ev.add_argument("--csv", action="store_true", help="also write per-scene CSV")
    ev.add_argument("--oracle", action="store_true",
                    help="plug the ground-truth renderer in place of the generator")
    ev.add_argument("--report", help="report path (default <out>/report.json)")

    g = sub.add_parser("generate", help="write per-turn images for episodes")
    g.add_argument("--data", help="dataset file (default <out>/test.bin)")
    g.add_argument("--ckpt", help="default <out>/model.ltte")
    g.add_argument("--episodes", default="0", help="comma-separated episode indices")

    sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    return p


def load_config(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    for override in args.set:
        key, _, value = override.partition("=")
        if not value:
            raise UsageError(f"--set needs KEY=VALUE, got {override!r}")
        cfg.apply_override(key, value)
    if args.seed is not None:
        cfg.train.seed = args.seed
    return cfg


def _require(path, producer):
    if not os.path.exists(path):
        raise UsageError(f"missing required file {path}; run `instructpaint {producer}` first")
    return path


def _guard_overwrite(paths, force):
    existing = [p for p in paths if os.path.exists(p)]
    if existing and not force:
        raise UsageError(f"refusing to overwrite {existing[0]} (use --force)")


def _build_vocab_encoder(cfg, ckpt_path=None):
    vocab = mtext.build_default_vocab()
    if ckpt_path is not None:
        return vocab, load_text_encoder(ckpt_path, vocab, cfg.model.emb_dim)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.train.seed, 0]))
    return vocab, mtext.TextEncoder(rng, len(vocab), cfg.model.emb_dim)


def cmd_datagen(args, cfg, out):
    n = {
        "train": args.n_train if args.n_train is not None else cfg.data.n_train,
        "val": args.n_val if args.n_val is not None else cfg.data.n_val,
        "test": args.n_test if args.n_test is not None else cfg.data.n_test,
    }
    paths = {split: os.path.join(out, f"{split}.bin") for split in n}
    _guard_overwrite(list(paths.values()) + [os.path.join(out, "manifest.json")], args.force)
    seed = cfg.train.seed
    offsets = {"train": 0, "val": 1_000_000, "test": 2_000_000}
    for split, count in n.items():
        episodes = mdata.generate_dataset(
            seed, count, cfg.data.grid_size, cfg.data.n_turns, cfg.model.image_size,
            cfg.data.p_it, index_offset=offsets[split],
        )
        mdata.save_dataset(episodes, paths[split], cfg.model.image_size, cfg.data.grid_size)
    mdata.write_manifest(os.path.join(out, "manifest.json"), seed, n,
                         cfg.model.image_size, cfg.data.grid_size)
    print(f"datagen: wrote {n} episodes to {out}")
    return EXIT_OK


def cmd_pretrain(args, cfg, out):
    data_path = args.data or os.path.join(out, "train.bin")
    _require(data_path, "datagen")
    episodes, _meta = mdata.load_dataset(data_path)
    vocab, encoder = _build_vocab_encoder(cfg)
    blob = cfg.to_dict()
    blob["config_hash"] = cfg.config_hash()
    pre = Pretrainer(encoder, vocab, episodes, cfg.train, cfg.model,
                     log_path=os.path.join(out, "pretrain_losses.jsonl"), config_blob=blob)
    pre.run(args.steps)
    vocab.save(os.path.join(out, "vocab.txt"))
    pre.save_text_checkpoint(os.path.join(out, "pretrain.ltte"))
    print(f"pretrain: {pre.step} steps, checkpoint at {out}/pretrain.ltte")
    return EXIT_OK


def cmd_train(args, cfg, out):
    data_path = args.data or os.path.join(out, "train.bin")
    _require(data_path, "datagen")
    pretrain_path = args.pretrain_ckpt or os.path.join(out, "pretrain.ltte")
    _require(pretrain_path, "pretrain")
    episodes, _meta = mdata.load_dataset(data_path)
    vocab, encoder = _build_vocab_encoder(cfg, ckpt_path=pretrain_path)
    blob = cfg.to_dict()
    blob["config_hash"] = cfg.config_hash()
    trainer = GANTrainer(cfg.model, cfg.train, cfg.loss, encoder, vocab, episodes,
                         log_path=os.path.join(out, "losses.jsonl"), config_blob=blob)
    model_path = os.path.join(out, "model.ltte")
    if args.resume:
        _require(model_path, "train")
        trainer.load(model_path)
    trainer.fit(max_steps=args.steps, checkpoint_path=model_path)
    trainer.save(model_path)
    print(f"train: reached step {trainer.step}, checkpoint at {model_path}")
    return EXIT_OK


def _make_trainer_for_eval(cfg, out, ckpt_path, episodes):
    vocab, encoder = _build_vocab_encoder(cfg)
    trainer = GANTrainer(cfg.model, cfg.train, cfg.loss, encoder, vocab, episodes, config_blob=cfg.to_dict())
    trainer.load(ckpt_path)
    mtext.freeze_text(trainer.encoder)
    return trainer


def cmd_eval(args, cfg, out):
    data_path = args.data or os.path.join(out, "test.bin")
    _require(data_path, "datagen")
    episodes, meta = mdata.load_dataset(data_path)
    if args.oracle:
        def rollout(ep):
            return [t.image for t in ep.turns]
    else:
        ckpt_path = args.ckpt or os.path.join(out, "model.ltte")
        _require(ckpt_path, "train")
        trainer = _make_trainer_for_eval(cfg, out, ckpt_path, episodes)
        counter = itertools.count()

        def rollout(ep):
            # Independent derived stream per scene, in evaluation order.
            rng = np.random.default_rng(np.random.SeedSequence([cfg.train.seed, 5, next(counter)]))
            return trainer.rollout_episode(ep, mode="eval", rng=rng)

    report = mmetrics.evaluate(episodes, rollout, meta["grid_size"])
    report_path = args.report or os.path.join(out, "report.json")
    report.save_json(report_path, extra={"config_hash": cfg.config_hash()})
    if args.csv:
        report.save_csv(os.path.join(out, "report.csv"))
    print(json.dumps({k: getattr(report, k) for k in ("precision", "recall", "f1", "rsim")}))
    return EXIT_OK


def _write_ppm(path, image):
    """image: [3, S, S] float in (-1, 1) -> binary P6."""
    arr = np.clip((np.asarray(image) + 1.0) * 127.5, 0, 255).astype(np.uint8)
    h, w = arr.shape[1], arr.shape[2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(arr.transpose(1, 2, 0).tobytes())


def cmd_generate(args, cfg, out):
    data_path = args.data or os.path.join(out, "test.bin")
    _require(data_path, "datagen")
    ckpt_path = args.ckpt or os.path.join(out, "model.ltte")
    _require(ckpt_path, "train")
    episodes, _meta = mdata.load_dataset(data_path)
    trainer = _make_trainer_for_eval(cfg, out, ckpt_path, episodes)
    try:
        indices = [int(s) for s in args.episodes.split(",") if s]
    except ValueError:
        raise UsageError(f"--episodes must be comma-separated integers, got {args.episodes!r}")
    img_dir = os.path.join(out, "samples")
    os.makedirs(img_dir, exist_ok=True)
    for idx in indices:
        if not (0 <= idx < len(episodes)):
            raise UsageError(f"episode index {idx} out of range (dataset has {len(episodes)})")
        ep = episodes[idx]
        rng = np.random.default_rng(np.random.SeedSequence([cfg.train.seed, 6, idx]))
        images = trainer.rollout_episode(ep, mode="eval", rng=rng)
        for t, img in enumerate(images):
            _write_ppm(os.path.join(img_dir, f"ep{idx:04d}_turn{t}.ppm"), img)
        sheet = np.concatenate(
            [np.concatenate([t.image for t in ep.turns], axis=2),
             np.concatenate(images, axis=2)], axis=1)
        _write_ppm(os.path.join(img_dir, f"ep{idx:04d}_sheet.ppm"), sheet)
    print(f"generate: wrote images for episodes {indices} to {img_dir}")
    return EXIT_OK


def cmd_gradcheck(args, cfg, out):
    results = mchecks.run_suite(verbose=True)
    failed = [name for name, _err, ok in results if not ok]
    worst = max(err for _n, err, ok in results if ok and np.isfinite(err)) if results else 0.0
    print(f"gradcheck: {len(results)} checks, worst passing rel_err {worst:.3e}")
    if failed:
        print("gradcheck FAILED: " + ", ".join(failed[:10]))
        return EXIT_NUMERIC
    return EXIT_OK


COMMANDS = {
    "datagen": cmd_datagen,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "generate": cmd_generate,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = load_config(args)
        os.makedirs(args.out, exist_ok=True)
        return COMMANDS[args.command](args, cfg, args.out)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
