"""Optimization loop: L1 loss, Adam, patch sampling, augmentation, evaluation."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import data as D
from .errors import ConfigurationError, EvaluationError, NumericalError, PatchTooLargeError
from .model import A2FModel, lambda_report

log = logging.getLogger(__name__)

LOSS_TAIL = 100


@dataclass
class TrainConfig:
    lr: float = 1e-3
    lr_halving_interval: int = 200_000
    batch_size: int = 16
    lr_patch: int = 48
    total_steps: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    checkpoint_interval: int = 0   # 0 disables periodic checkpoints
    eval_interval: int = 0         # 0 disables periodic evaluation
    log_interval: int = 1
    augment: bool = True

    def __post_init__(self):
        positive = ("lr", "lr_halving_interval", "batch_size", "lr_patch", "eps", "log_interval")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("total_steps", "checkpoint_interval", "eval_interval"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative, got {getattr(self, name)}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigurationError("Adam betas must lie in [0, 1)")

    def lr_at(self, step: int) -> float:
        """Learning rate used for the update that follows ``step`` completed steps."""
        return self.lr * 0.5 ** (step // self.lr_halving_interval)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros(cls, named_params) -> "AdamState":
        named_params = list(named_params)
        return cls(
            m={n: np.zeros_like(s.value) for n, s in named_params},
            v={n: np.zeros_like(s.value) for n, s in named_params},
        )


# --------------------------------------------------------------------------
# loss and optimizer


def l1_loss(pred, target):
    """Mean absolute error and its gradient ``sign(pred - target) / N``."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ConfigurationError(f"l1_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.astype(np.float64) - target
    loss = float(np.mean(np.abs(diff)))
    grad = (np.sign(diff) / diff.size).astype(pred.dtype if pred.dtype.kind == "f" else np.float64)
    return loss, grad


def adam_step(named_params, state: AdamState, config: TrainConfig) -> float:
    """One bias-corrected Adam update in place; gradients are zeroed afterward.

    Returns the learning rate that was applied.
    """
    named_params = list(named_params)
    for name, slot in named_params:
        if not np.all(np.isfinite(slot.grad)):
            raise NumericalError(f"non-finite gradient in {name}; step aborted", name=name)

    lr = config.lr_at(state.t)
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, slot in named_params:
        g = slot.grad
        m = state.m.setdefault(name, np.zeros_like(slot.value))
        v = state.v.setdefault(name, np.zeros_like(slot.value))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        slot.value -= (lr * m_hat / (np.sqrt(v_hat) + config.eps)).astype(slot.value.dtype)
        slot.zero_grad()
    return lr


# --------------------------------------------------------------------------
# patches and augmentation


def _chw_unit(arr: np.ndarray) -> np.ndarray:
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    return np.ascontiguousarray(arr.transpose(2, 0, 1), dtype=np.float32) / np.float32(255.0)


def sample_patch(pair: D.ImagePair, scale: int, lr_patch: int, rng):
    """Aligned LR/HR crops as (3, s, s) float32 arrays in [0, 1]."""
    lr, hr = pair.lr, pair.hr
    lh, lw = lr.shape[:2]
    if hr.shape[0] != lh * scale or hr.shape[1] != lw * scale:
        raise ConfigurationError(
            f"{pair.name}: HR {hr.shape[:2]} is not {scale}x the LR {lr.shape[:2]}"
        )
    if lr_patch > lh or lr_patch > lw:
        raise PatchTooLargeError(f"{pair.name}: LR image {lh}x{lw} smaller than patch {lr_patch}")
    y = int(rng.integers(0, lh - lr_patch + 1))
    x = int(rng.integers(0, lw - lr_patch + 1))
    hp = lr_patch * scale
    lr_crop = lr[y:y + lr_patch, x:x + lr_patch]
    hr_crop = hr[y * scale:y * scale + hp, x * scale:x * scale + hp]
    return _chw_unit(lr_crop), _chw_unit(hr_crop)


def dihedral(x: np.ndarray, k: int) -> np.ndarray:
    """Element ``k`` (0..7) of the dihedral group acting on the last two axes.

    ``k % 4`` counter-clockwise quarter turns, followed by a horizontal flip when ``k >= 4``.
    """
    out = np.rot90(x, k % 4, axes=(-2, -1))
    if k >= 4:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


def augment(lr, hr, rng):
    k = int(rng.integers(0, 8))
    return dihedral(lr, k), dihedral(hr, k)


def sample_batch(pairs: Sequence[D.ImagePair], config: TrainConfig, scale: int, step: int):
    """Batch for ``step``; depends only on (seed, step) so runs can resume exactly."""
    rng = np.random.default_rng([config.seed, step])
    idx = rng.integers(0, len(pairs), size=config.batch_size)
    lrs, hrs = [], []
    for i in idx:
        lr, hr = sample_patch(pairs[i], scale, config.lr_patch, rng)
        if config.augment:
            lr, hr = augment(lr, hr, rng)
        lrs.append(lr)
        hrs.append(hr)
    return np.stack(lrs), np.stack(hrs)


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    lambdas: list = field(default_factory=list)
    evals: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.records]


class _LogWriter:
    """Appends step records (JSON lines) and lambda snapshots (CSV) under ``out_dir``."""

    def __init__(self, out_dir: Path | None):
        self.out_dir = out_dir
        if out_dir is None:
            return
        out_dir.mkdir(parents=True, exist_ok=True)
        self.log_path = out_dir / "train_log.jsonl"
        self.lambda_path = out_dir / "lambdas.csv"
        if not self.lambda_path.exists():
            with open(self.lambda_path, "w", newline="") as fh:
                csv.writer(fh).writerow(["step", "block", "lambda_res", "lambda_att", "lambda_x"])

    def record(self, rec: dict):
        if self.out_dir is not None:
            with open(self.log_path, "a") as fh:
                fh.write(json.dumps(rec) + "\n")

    def lambdas(self, rows):
        if self.out_dir is not None:
            with open(self.lambda_path, "a", newline="") as fh:
                csv.writer(fh).writerows(rows)


def _lambda_rows(model: A2FModel, step: int):
    return [(step, i, lr_, "" if la is None else la, lx)
            for i, (lr_, la, lx) in enumerate(lambda_report(model), start=1)]


def train(
    model: A2FModel,
    pairs: Sequence[D.ImagePair],
    config: TrainConfig,
    *,
    out_dir=None,
    optimizer_state: AdamState | None = None,
    eval_pairs: Sequence[D.ImagePair] | None = None,
    lambda_interval: int | None = None,
):
    """Run steps ``optimizer_state.t .. config.total_steps`` and return ``(model, TrainLog)``.

    Passing the optimizer state restored from a checkpoint resumes the run; the
    batch drawn at each step depends only on the seed and step index.
    """
    from .store import save_checkpoint

    scale = model.config.scale
    state = optimizer_state or AdamState.zeros(model.named_parameters())
    out_dir = Path(out_dir) if out_dir is not None else None
    writer = _LogWriter(out_dir)
    history = TrainLog()
    lambda_interval = lambda_interval or config.log_interval

    def checkpoint(name: str):
        meta = {"step": state.t, "seed": config.seed, "loss_tail": history.losses[-LOSS_TAIL:],
                "train_config": config.to_dict()}
        path = save_checkpoint(model, out_dir / name, state, meta)
        history.checkpoints.append(str(path))

    if state.t >= config.total_steps:
        if out_dir is not None:
            checkpoint("last.a2f")
        return model, history

    usable = []
    for p in pairs:
        if min(p.lr.shape[:2]) >= config.lr_patch:
            usable.append(p)
        else:
            log.warning("skipping %s: smaller than the %d-pixel LR patch", p.name, config.lr_patch)
    if not usable:
        raise PatchTooLargeError(f"no training image fits an LR patch of {config.lr_patch}")

    named = model.named_parameters()

    while state.t < config.total_steps:
        step = state.t
        t0 = time.perf_counter()
        lr_b, hr_b = sample_batch(usable, config, scale, step)
        cache: dict = {}
        sr = model.forward(lr_b, cache)
        loss, grad = l1_loss(sr, hr_b)
        if not math.isfinite(loss):
            if out_dir is not None:
                checkpoint("last_good.a2f")
            raise NumericalError(f"non-finite loss at step {step}; last good weights retained")
        model.backward(grad, cache)
        del cache
        applied_lr = adam_step(named, state, config)
        ms = (time.perf_counter() - t0) * 1000.0

        rec = {"step": state.t, "loss": loss, "lr": applied_lr, "ms": ms}
        history.records.append(rec)
        if state.t % config.log_interval == 0 or state.t == config.total_steps:
            writer.record(rec)
        if state.t % lambda_interval == 0 or state.t == config.total_steps:
            rows = _lambda_rows(model, state.t)
            history.lambdas.extend(rows)
            writer.lambdas(rows)
        if eval_pairs and config.eval_interval and state.t % config.eval_interval == 0:
            report = evaluate(model, eval_pairs, scale)
            history.evals.append({"step": state.t, "psnr": report.mean_psnr, "ssim": report.mean_ssim})
            writer.record({"step": state.t, "eval_psnr": report.mean_psnr, "eval_ssim": report.mean_ssim})
        if out_dir is not None and config.checkpoint_interval and state.t % config.checkpoint_interval == 0:
            checkpoint(f"step_{state.t:08d}.a2f")

    if out_dir is not None:
        checkpoint("last.a2f")
    return model, history


# --------------------------------------------------------------------------
# evaluation


def bicubic_upscaler(scale: int) -> Callable[[np.ndarray], np.ndarray]:
    """Baseline 'model' that upsamples with bicubic interpolation."""
    return lambda lr: D.bicubic_upscale_tensor(lr, scale)


def evaluate(model, eval_set: Sequence[D.ImagePair], scale: int, shave: int | None = None) -> D.MetricsReport:
    """PSNR/SSIM on the Y channel plus forward wall time per image.

    ``model`` is an :class:`A2FModel` or any callable mapping a (1, 3, h, w)
    tensor to its super-resolved counterpart.
    """
    shave = scale if shave is None else shave
    fn = model.forward if isinstance(model, A2FModel) else model
    entries = []
    for pair in eval_set:
        x = D.image_to_tensor(D.ImagePlane(pair.lr))
        t0 = time.perf_counter()
        y = fn(x)
        ms = (time.perf_counter() - t0) * 1000.0
        sr = D.tensor_to_image(np.asarray(y))
        hr = D.ImagePlane(pair.hr).to_rgb()
        if sr.data.shape != hr.data.shape:
            raise EvaluationError(f"{pair.name}: SR output {sr.data.shape} does not match HR {hr.data.shape}")
        entries.append(D.ImageMetrics(pair.name, D.psnr_y(sr, hr, shave), D.ssim_y(sr, hr, shave), ms))
    return D.MetricsReport(scale, shave, entries)
