"""Command-line interface: synth | train | eval | infer | bench.

Every command echoes its effective configuration (config file values merged
with flag overrides) as JSON before doing any work, so a run can be reproduced
from its output alone.
"""

import argparse
import dataclasses
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from PIL import Image

from . import data as dat
from . import loss as lo
from . import metrics as me
from . import model as mo
from . import numerics as nx
from . import train as tr
from .errors import ConfigError

# fixed overlay palette, class id -> RGB
PALETTE = [
    (0, 0, 0),
    (239, 183, 155),
    (84, 48, 23),
    (64, 180, 229),
    (38, 120, 255),
    (222, 170, 61),
    (252, 116, 83),
    (219, 62, 91),
    (96, 201, 109),
    (150, 109, 206),
    (255, 255, 128),
    (189, 189, 189),
    (64, 128, 64),
    (128, 64, 128),
    (255, 128, 0),
    (0, 128, 128),
    (128, 0, 64),
    (192, 96, 32),
    (32, 96, 192),
    (240, 240, 240),
]


def _load_config_file(path):
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as f:
            cfg = json.load(f)
    except (OSError, ValueError) as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return cfg


def _merge_model_config(file_cfg, args):
    fields = dict(file_cfg.get("model", {}))
    if "lambda" in fields:  # accepted alias in the loss section only
        raise ConfigError("'lambda' belongs in the loss section of the config")
    if getattr(args, "res", None):
        fields["input_resolution"] = args.res
    if getattr(args, "mode", None):
        fields["decode_mode"] = args.mode
    if getattr(args, "classes", None):
        fields["num_classes"] = args.classes
    return mo.ModelConfig.from_dict({**mo.ModelConfig().to_dict(), **fields})


def _merge_loss_config(file_cfg, args):
    fields = dict(file_cfg.get("loss", {}))
    if "lambda" in fields:
        fields["lam"] = fields.pop("lambda")
    cfg = lo.LossConfig(**{**dataclasses.asdict(lo.LossConfig()), **fields})
    cfg.validate()
    return cfg


def _merge_train_config(file_cfg, args, loss_cfg):
    fields = dict(file_cfg.get("train", {}))
    for key, flag in (("epochs", "epochs"), ("batch_size", "batch"), ("initial_lr", "lr")):
        v = getattr(args, flag, None)
        if v is not None:
            fields[key] = v
    if getattr(args, "seed", None) is not None:
        fields["seed"] = args.seed
    base = tr.TrainConfig(loss=loss_cfg)
    known = {f.name for f in dataclasses.fields(tr.TrainConfig)} - {"loss", "augment"}
    unknown = set(fields) - known
    if unknown:
        raise ConfigError(f"unknown train config fields: {sorted(unknown)}")
    for k, v in fields.items():
        setattr(base, k, v)
    if getattr(args, "augment", False):
        base.augment = dat.AugmentPolicy(crop=None)
    base.validate()
    return base


def _apply_threads(args):
    threads = 1 if getattr(args, "deterministic", False) else getattr(args, "threads", None)
    if threads:
        try:
            import threadpoolctl

            threadpoolctl.threadpool_limits(threads)
        except ImportError:
            os.environ["OMP_NUM_THREADS"] = str(threads)
    return threads or 0


def _echo(command, payload):
    print(json.dumps({"command": command, "effective_config": payload}, sort_keys=True))


def _palette_image(mask):
    img = Image.fromarray(mask.astype(np.uint8), mode="P")
    flat = []
    for rgb in PALETTE:
        flat.extend(rgb)
    img.putpalette(flat + [0] * (768 - len(flat)))
    return img


def _overlay(image_chw, mask, alpha=0.55):
    colors = np.array(PALETTE, dtype=np.float64) / 255.0
    color_map = colors[np.minimum(mask, len(PALETTE) - 1)]
    base = image_chw.transpose(1, 2, 0)
    blend = alpha * base + (1 - alpha) * color_map
    return Image.fromarray((np.clip(blend, 0, 1) * 255).round().astype(np.uint8))


# ---------------------------------------------------------------------------
# commands


def _cmd_synth(args):
    _apply_threads(args)
    _echo(
        "synth",
        {"data": args.data, "n": args.n, "res": args.res, "seed": args.seed,
         "classes": args.classes or dat.SYNTH_CLASSES, "split": args.split},
    )
    classes = args.classes or dat.SYNTH_CLASSES
    ids = [f"{i:05d}" for i in range(args.n)]
    samples = (
        dat.synth_face(tr.derive_seed(args.seed, f"synth.{i}"), args.res, classes)
        for i in range(args.n)
    )
    dat.write_dataset(samples, ids, args.data, args.split)
    print(f"wrote {args.n} samples under {args.data}")
    return 0


def _cmd_train(args):
    _apply_threads(args)
    file_cfg = _load_config_file(args.config)
    model_cfg = _merge_model_config(file_cfg, args)
    loss_cfg = _merge_loss_config(file_cfg, args)
    train_cfg = _merge_train_config(file_cfg, args, loss_cfg)
    _echo(
        "train",
        {"data": args.data, "out": args.out, "model": model_cfg.to_dict(),
         "train": {**dataclasses.asdict(train_cfg), "loss": dataclasses.asdict(loss_cfg),
                   "augment": None if train_cfg.augment is None else dataclasses.asdict(train_cfg.augment)},
         "deterministic": args.deterministic},
    )
    train_set = dat.load_dataset(args.data, args.split, model_cfg.num_classes)
    val_path = os.path.join(args.data, "val.txt")
    val_set = dat.load_dataset(args.data, "val", model_cfg.num_classes) if os.path.exists(val_path) else []
    os.makedirs(args.out, exist_ok=True)
    log_path = os.path.join(args.out, "train_log.jsonl")
    if os.path.exists(log_path):
        os.remove(log_path)
    model = mo.build_model(model_cfg, tr.derive_seed(train_cfg.seed, "init"))
    result = tr.fit(model, train_set, val_set, train_cfg, out_dir=args.out, log_fn=print)
    print(f"best val mean F1 {result.best_val_f1:.4f} at epoch {result.best_epoch}")
    return 0


def _predict_mask(model, sample, out_res, score_res):
    res = model.config.input_resolution
    prepared = dat.resize_sample(sample, res)
    with nx.no_grad():
        logits = mo.forward(model, nx.tensor(prepared.image[None]), out_res, out_res)
    pred = logits.data[0].argmax(axis=0)
    if score_res != out_res:
        pred = dat.resize_labels_nearest(pred, score_res, score_res)
    gt = dat.resize_labels_nearest(sample.labels, score_res, score_res)
    return pred, gt


def _cmd_eval(args):
    threads = _apply_threads(args)
    model = mo.load_checkpoint(args.ckpt)
    if args.mode:
        model.config.decode_mode = args.mode
    out_res = args.out_res or model.config.input_resolution
    score_res = args.score_res or out_res
    _echo(
        "eval",
        {"ckpt": args.ckpt, "data": args.data, "split": args.split, "out_res": out_res,
         "score_res": score_res, "mode": model.config.decode_mode, "threads": threads},
    )
    samples = dat.load_dataset(args.data, args.split, model.config.num_classes)
    c = model.config.num_classes

    def one(sample):
        pred, gt = _predict_mask(model, sample, out_res, score_res)
        return me.confusion(pred, gt, c)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            mats = list(pool.map(one, samples))
    else:
        mats = [one(s) for s in samples]
    cm = np.sum(mats, axis=0) if mats else np.zeros((c, c), dtype=np.int64)
    report = me.MetricsReport.from_confusion(cm, params=mo.count_params(model))
    if args.report:
        with open(args.report, "w", encoding="utf-8") as f:
            f.write(report.to_json() + "\n")
    print(report.to_json())
    return 0


def _cmd_infer(args):
    _apply_threads(args)
    model = mo.load_checkpoint(args.ckpt)
    if args.mode:
        model.config.decode_mode = args.mode
    out_res = args.out_res or model.config.input_resolution
    _echo("infer", {"ckpt": args.ckpt, "image": args.image, "out_res": out_res,
                    "mask": args.mask, "overlay": args.overlay})
    img = np.asarray(Image.open(args.image).convert("RGB"), dtype=np.float32) / 255.0
    chw = img.transpose(2, 0, 1)
    res = model.config.input_resolution
    chw_in = dat.resize_image_bicubic(chw, res, res)
    with nx.no_grad():
        logits = mo.forward(model, nx.tensor(chw_in[None]), out_res, out_res)
    mask = logits.data[0].argmax(axis=0).astype(np.uint8)
    if args.mask:
        _palette_image(mask).save(args.mask)
    if args.overlay:
        base = dat.resize_image_bicubic(chw, out_res, out_res)
        _overlay(base, mask).save(args.overlay)
    print(f"classes present: {sorted(int(v) for v in np.unique(mask))}")
    return 0


def _cmd_bench(args):
    _apply_threads(args)
    if args.ckpt:
        model = mo.load_checkpoint(args.ckpt)
    else:
        file_cfg = _load_config_file(args.config)
        model = mo.build_model(_merge_model_config(file_cfg, args), tr.derive_seed(args.seed or 0, "init"))
    if args.mode:
        model.config.decode_mode = args.mode
    input_res = args.res or model.config.input_resolution
    ladder = [args.out_res] if args.out_res else [64, 96, 128, 192, 256]
    _echo("bench", {"input_res": input_res, "ladder": ladder, "iters": args.iters,
                    "warmup": args.warmup, "mode": model.config.decode_mode})
    rows = []
    for out_res in ladder:
        bench = me.fps_benchmark(model, input_res, out_res, warmup=args.warmup, iters=args.iters)
        est = me.flops_estimate(model.config, out_res, out_res)
        rows.append({"out_res": out_res, "fps": bench.fps, "gflops": est.gflops})
        print(f"out {out_res:4d}: {bench.fps:8.2f} fps   {est.gflops:8.2f} GFLOPs (analytic)")
    report = {
        "params": mo.count_params(model),
        "input_res": input_res,
        "decode_mode": model.config.decode_mode,
        "flops_convention": me.FLOPS_CONVENTION,
        "host": me.host_descriptor(),
        "ladder": rows,
    }
    if args.report:
        with open(args.report, "w", encoding="utf-8") as f:
            json.dump(report, f, indent=2)
    print(json.dumps(report))
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _build_parser():
    p = argparse.ArgumentParser(prog="liifseg", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, *flags):
        if "config" in flags:
            sp.add_argument("--config", help="JSON config file (model/train/loss sections)")
        if "seed" in flags:
            sp.add_argument("--seed", type=int, help="root seed")
        if "threads" in flags:
            sp.add_argument("--threads", type=int, help="numeric thread cap")
            sp.add_argument("--deterministic", action="store_true", help="single-threaded, bit-reproducible")
        if "mode" in flags:
            sp.add_argument("--mode", choices=["ensemble", "bilinear"], help="decoder mode")

    sp = sub.add_parser("synth", help="materialize a synthetic dataset")
    sp.add_argument("--data", required=True, help="dataset root to write")
    sp.add_argument("--n", type=int, required=True, help="sample count")
    sp.add_argument("--res", type=int, default=128, help="sample resolution")
    sp.add_argument("--classes", type=int, help="class count (default 8)")
    sp.add_argument("--split", default="train", help="split file name")
    common(sp, "seed", "threads")
    sp.set_defaults(seed=0, func=_cmd_synth)

    sp = sub.add_parser("train", help="train on a dataset in the documented layout")
    sp.add_argument("--data", required=True, help="dataset root")
    sp.add_argument("--out", required=True, help="output directory (checkpoints, log)")
    sp.add_argument("--split", default="train", help="training split name")
    sp.add_argument("--res", type=int, help="input resolution override")
    sp.add_argument("--classes", type=int, help="class count override")
    sp.add_argument("--epochs", type=int, help="epoch count override")
    sp.add_argument("--batch", type=int, help="batch size override")
    sp.add_argument("--lr", type=float, help="initial learning rate override")
    sp.add_argument("--augment", action="store_true", help="enable training augmentation")
    common(sp, "config", "seed", "threads", "mode")
    sp.set_defaults(func=_cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="val")
    sp.add_argument("--out-res", type=int, dest="out_res", help="prediction resolution")
    sp.add_argument("--score-res", type=int, dest="score_res", help="scoring resolution (upsampled)")
    sp.add_argument("--report", help="write MetricsReport JSON here")
    common(sp, "threads", "mode")
    sp.set_defaults(func=_cmd_eval)

    sp = sub.add_parser("infer", help="segment a single image")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--out-res", type=int, dest="out_res")
    sp.add_argument("--mask", help="indexed mask PNG path")
    sp.add_argument("--overlay", help="color overlay PNG path")
    common(sp, "threads", "mode")
    sp.set_defaults(func=_cmd_infer)

    sp = sub.add_parser("bench", help="fps + analytic FLOPs across the resolution ladder")
    sp.add_argument("--ckpt", help="checkpoint to benchmark")
    sp.add_argument("--res", type=int, help="input resolution (default from config)")
    sp.add_argument("--out-res", type=int, dest="out_res", help="single output resolution")
    sp.add_argument("--iters", type=int, default=5)
    sp.add_argument("--warmup", type=int, default=2)
    sp.add_argument("--classes", type=int, help="class count override")
    sp.add_argument("--report", help="write the benchmark JSON here")
    common(sp, "config", "seed", "threads", "mode")
    sp.set_defaults(func=_cmd_bench)
    return p


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
