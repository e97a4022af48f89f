import json
import logging
import math
import time
from pathlib import Path

import torch

from .config import TrainConfig
from .model import save_checkpoint

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


def _same_shape(pred, gt):
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {tuple(pred.shape)} and target {tuple(gt.shape)} differ in shape")


def loss_l1(pred, gt):
    _same_shape(pred, gt)
    return (pred - gt).abs().mean()


def loss_fft(pred, gt, mode="complex"):
    """L1 distance between per-channel 2-D DFTs (unnormalised).

    ``complex``: mean |dRe| and mean |dIm| averaged; ``amplitude``: mean ||F p| - |F g||.
    """
    _same_shape(pred, gt)
    fp = torch.fft.fft2(pred, dim=(-2, -1))
    fg = torch.fft.fft2(gt, dim=(-2, -1))
    if mode == "complex":
        return 0.5 * ((fp.real - fg.real).abs().mean() + (fp.imag - fg.imag).abs().mean())
    if mode == "amplitude":
        return (fp.abs() - fg.abs()).abs().mean()
    raise ValueError(f"unknown fft loss mode {mode!r}")


def total_loss(pred, gt, lambda_f=0.01, mode="complex"):
    if lambda_f < 0:
        raise ValueError("lambda_f must be non-negative")
    l1 = loss_l1(pred, gt)
    if lambda_f == 0:
        return l1
    return l1 + lambda_f * loss_fft(pred, gt, mode)


def lr_at(it: int, cfg: TrainConfig) -> float:
    if not 0 <= it <= cfg.total_iters:
        raise ValueError(f"iteration {it} outside [0, {cfg.total_iters}]")
    return cfg.lr_final + 0.5 * (cfg.lr_init - cfg.lr_final) * (1 + math.cos(math.pi * it / cfg.total_iters))


def make_optimizer(model, cfg: TrainConfig):
    return torch.optim.Adam(model.parameters(), lr=cfg.lr_init, betas=cfg.adam_betas, eps=cfg.adam_eps)


def _batches(sampler, cfg: TrainConfig, start: int):
    if cfg.num_workers > 0:
        loader = torch.utils.data.DataLoader(
            torch.utils.data.Subset(sampler, range(start, cfg.total_iters)),
            batch_size=None,
            num_workers=cfg.num_workers,
            prefetch_factor=2,
        )
        yield from loader
    else:
        for it in range(start, cfg.total_iters):
            yield sampler.batch(it)


def train(model, sampler, cfg: TrainConfig, out_dir=None, val_pairs=None, evaluate_fn=None):
    """Adam + cosine schedule on batches from ``sampler`` (a `PatchSampler`).

    Writes ``checkpoints/`` and ``logs/metrics.jsonl`` under ``out_dir`` when given.
    ``evaluate_fn(model, pairs) -> mean PSNR`` runs on ``val_pairs`` at checkpoints.
    Returns (model, list of log records).
    """
    torch.manual_seed(cfg.seed)
    opt = make_optimizer(model, cfg)
    records = []
    out_dir = Path(out_dir) if out_dir is not None else None
    metrics_file = None
    if out_dir is not None:
        (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        (out_dir / "logs").mkdir(parents=True, exist_ok=True)
        metrics_file = open(out_dir / "logs" / "metrics.jsonl", "w")
    model.train()
    t0 = time.time()
    try:
        for it, (lr_img, hr_img, ids) in enumerate(_batches(sampler, cfg, 0)):
            lr = lr_at(it, cfg)
            for group in opt.param_groups:
                group["lr"] = lr
            pred = model(lr_img)
            l1 = loss_l1(pred, hr_img)
            lf = loss_fft(pred, hr_img, cfg.fft_mode) if cfg.lambda_f > 0 else torch.zeros(())
            loss = l1 + cfg.lambda_f * lf
            if not torch.isfinite(loss):
                dump = {"iteration": it, "lr": lr, "batch_ids": [int(i) for i in ids], "l1": l1.item(), "fft": lf.item()}
                if out_dir is not None:
                    (out_dir / "logs" / "divergence.json").write_text(json.dumps(dump, indent=1))
                raise TrainingDiverged(f"non-finite loss at iteration {it}: {dump}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()

            step = it + 1
            rec = {"iteration": step, "loss": loss.item(), "l1": l1.item(), "fft": lf.item(), "lr": lr}
            at_ckpt = step % cfg.checkpoint_every == 0 or step == cfg.total_iters
            at_val = cfg.validate_every and step % cfg.validate_every == 0
            if (at_ckpt or at_val) and val_pairs and evaluate_fn is not None:
                model.eval()
                rec["val_psnr"] = float(evaluate_fn(model, val_pairs))
                model.train()
            records.append(rec)
            if metrics_file and (step % cfg.log_every == 0 or "val_psnr" in rec or step == 1):
                metrics_file.write(json.dumps(rec) + "\n")
                metrics_file.flush()
            if step % cfg.log_every == 0:
                log.info("iter %d loss %.5f lr %.2e (%.1fs)", step, rec["loss"], lr, time.time() - t0)
            if at_ckpt and out_dir is not None:
                extra = {"iteration": step}
                save_checkpoint(model, out_dir / "checkpoints" / f"iter_{step:07d}.ckpt", extra)
                save_checkpoint(model, out_dir / "checkpoints" / "latest.ckpt", extra)
    finally:
        if metrics_file:
            metrics_file.close()
    model.eval()
    return model, records
