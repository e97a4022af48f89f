"""``ssiu`` command line: train, eval, infer, oracle-check, flops."""

import argparse
import logging
import os
import sys
import warnings
from pathlib import Path

import torch

from . import hqs
from .config import ConfigError, dump_yaml, load_run_config
from .data import PatchSampler, load_image, load_pairs, save_image, scan_dataset
from .evaluate import evaluate, evaluate_pairs, super_resolve
from .model import CheckpointError, build_model, count_parameters, estimate_flops, load_checkpoint
from .train import TrainingDiverged, train

log = logging.getLogger("ssiu")


def _device():
    dev = os.environ.get("SSIU_DEVICE", "cpu")
    if dev.startswith("cuda") and not torch.cuda.is_available():
        log.warning("SSIU_DEVICE=%s but CUDA is unavailable; using cpu", dev)
        return torch.device("cpu")
    return torch.device(dev)


def _fail(msg, code=2):
    print(f"error: {msg}", file=sys.stderr)
    return code


def set_deterministic(flag: bool):
    if flag:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def run_dirs(out: Path):
    for sub in ("checkpoints", "logs", "reports"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args):
    try:
        cfg = load_run_config(args.config, args.set)
        if args.deterministic:
            cfg.train.num_workers = 0
        if args.output_dir:
            cfg.output_dir = args.output_dir
        cfg.validate()
    except ConfigError as e:
        return _fail(f"invalid config: {e}")
    except FileNotFoundError as e:
        return _fail(str(e))
    set_deterministic(args.deterministic)
    out = run_dirs(Path(cfg.output_dir))
    (out / "config.yaml").write_text(dump_yaml(cfg))
    try:
        manifest = scan_dataset(cfg.data.train_root, cfg.data.train_split, cfg.model.scale,
                                regenerate=cfg.data.regenerate_cache, max_images=cfg.data.max_images)
        val_pairs = None
        if cfg.data.val_root:
            val_pairs = load_pairs(scan_dataset(cfg.data.val_root, cfg.data.val_split, cfg.model.scale))
    except FileNotFoundError as e:
        return _fail(str(e))
    pairs = load_pairs(manifest)
    if not pairs:
        return _fail(f"data.train_root: no images found under {cfg.data.train_root}")
    device = _device()
    model = build_model(cfg.model, seed=cfg.seed).to(device)
    sampler = PatchSampler(pairs, cfg.train.patch_lr, cfg.train.batch_size, seed=cfg.train.seed)

    def val_fn(m, vp):
        return evaluate_pairs(m, vp, cfg.model.scale).mean_psnr

    try:
        train(model, sampler, cfg.train, out_dir=out, val_pairs=val_pairs, evaluate_fn=val_fn)
    except TrainingDiverged as e:
        return _fail(str(e), code=3)
    print(f"training finished; checkpoint at {out / 'checkpoints' / 'latest.ckpt'}")
    return 0


def cmd_eval(args):
    try:
        model, _ = load_checkpoint(args.checkpoint)
    except (CheckpointError, FileNotFoundError) as e:
        return _fail(f"checkpoint integrity check failed: {e}")
    if model.cfg.scale != args.scale:
        return _fail(f"checkpoint is x{model.cfg.scale} but --scale {args.scale} was given")
    try:
        manifest = scan_dataset(args.dataset, args.split, args.scale, regenerate=args.regenerate_cache)
    except FileNotFoundError as e:
        return _fail(str(e))
    device = _device()
    model.to(device)
    report = evaluate(model, manifest, args.scale, tile=args.tile, device=device)
    report.params = count_parameters(model)
    report.flops_1280x720 = estimate_flops(model.cfg, 1280, 720).total
    print(report.to_table())
    report_path = Path(args.report) if args.report else Path(args.checkpoint).parent / f"eval_{manifest.root.name}_x{args.scale}.jsonl"
    report.write_jsonl(report_path)
    print(f"report written to {report_path}")
    return 0


def cmd_infer(args):
    try:
        model, _ = load_checkpoint(args.checkpoint)
    except (CheckpointError, FileNotFoundError) as e:
        return _fail(f"checkpoint integrity check failed: {e}")
    try:
        from PIL import Image

        with Image.open(args.input) as im:
            mode = im.mode
        img = load_image(args.input)
    except (OSError, ValueError) as e:
        return _fail(f"cannot read input image {args.input}: {e}")
    if mode in ("L", "LA", "I", "I;16", "1"):
        warnings.warn(f"{args.input} is single-channel ({mode}); replicated to RGB", stacklevel=1)
        print(f"warning: {args.input} is grayscale; converted to 3 channels", file=sys.stderr)
    model.to(_device())
    sr = super_resolve(model, img, tile=args.tile).cpu()
    save_image(sr, args.output)
    print(f"wrote {args.output} ({sr.shape[-1]}x{sr.shape[-2]})")
    return 0


def cmd_oracle_check(args):
    rows = list(hqs.run_oracle_suite(seed=args.seed, n_instances=args.n_instances, atol=args.atol))
    print(f"{'seed':>6}{'iters':>8}{'objective':>14}{'max|err|':>12}  result")
    for r in rows:
        status = "PASS" if r["passed"] else "FAIL"
        print(f"{r['seed']:>6}{r['iterations']:>8}{r['objective']:>14.6f}{r['max_abs_err']:>12.2e}  {status}")
    failed = [r["seed"] for r in rows if not r["passed"]]
    print(f"{len(rows) - len(failed)}/{len(rows)} instances within {args.atol:g}")
    if failed:
        print("failed seeds: " + ", ".join(map(str, failed)))
        return 1
    return 0


def cmd_flops(args):
    try:
        cfg = load_run_config(args.config, args.set)
        cfg.model.validate()
    except ConfigError as e:
        return _fail(f"invalid config: {e}")
    model = build_model(cfg.model)
    report = estimate_flops(cfg.model, args.out_h, args.out_w)
    print(f"scale x{cfg.model.scale}, C={cfg.model.channels}, N={cfg.model.num_stages}")
    print(f"parameters: {count_parameters(model)}")
    print(f"FLOPs @ {args.out_w}x{args.out_h} output: {report.total} ({report.giga:.2f} G)")
    for k, v in report.breakdown.items():
        print(f"  {k:<18}{v / 1e9:10.3f} G")
    print(report.rules)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="ssiu", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a YAML run config")
    t.add_argument("config", nargs="?", help="YAML run config")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted override, e.g. train.lambda_f=0")
    t.add_argument("--output-dir")
    t.add_argument("--deterministic", action="store_true", help="single-threaded, no parallel data loading")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("checkpoint")
    e.add_argument("dataset", help="dataset root containing <split>/HR")
    e.add_argument("--scale", type=int, required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--report", help="line-delimited JSON output path")
    e.add_argument("--tile", type=int, default=None, help="tile size for memory-limited inference")
    e.add_argument("--regenerate-cache", action="store_true")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="super-resolve one PNG")
    i.add_argument("checkpoint")
    i.add_argument("input")
    i.add_argument("output")
    i.add_argument("--tile", type=int, default=None)
    i.set_defaults(func=cmd_infer)

    o = sub.add_parser("oracle-check", help="classical HQS vs coordinate-descent LASSO")
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--n-instances", type=int, default=20)
    o.add_argument("--atol", type=float, default=1e-4)
    o.set_defaults(func=cmd_oracle_check)

    f = sub.add_parser("flops", help="parameter count and FLOP estimate")
    f.add_argument("--config", help="YAML run config (defaults to the built-in x4 model)")
    f.add_argument("out_h", type=int, nargs="?", default=720)
    f.add_argument("out_w", type=int, nargs="?", default=1280)
    f.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    f.set_defaults(func=cmd_flops)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
