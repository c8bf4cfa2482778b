"""Semi-supervised masking, joint loss and the adversarial training schedule."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tensor, adam_step
from .data import Dataset, SplitPlan, batch_windows, make_windows
from .model import STAGANN

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 0.003
    adversarial_rounds: int = 5
    dropout: float = 0.3
    mask_ratio: float = 0.25
    label_noise: float = 0.05
    grl_lambda: float = 1.0
    seed: int = 0
    adversarial: bool = True
    train_stride: int = 1
    eval_stride: int = 0  # 0 -> window length

    def validate(self) -> None:
        if not 0.0 <= self.label_noise < 0.5:
            raise ValueError("label noise must lie in [0, 0.5)")
        if self.adversarial_rounds > self.epochs:
            raise ValueError("adversarial rounds cannot exceed epochs")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ValueError("mask ratio must lie in [0, 1]")


@dataclass
class MaskPlan:
    known: np.ndarray  # bool per sensor
    masked: np.ndarray  # bool per sensor, subset of known

    @property
    def domain_labels(self) -> np.ndarray:
        """0 for sensors the model sees, 1 for simulated unknowns."""
        return self.masked.astype(np.int64)


def sample_mask(known, ratio: float, rng: np.random.Generator) -> MaskPlan:
    """Mask ``ceil(ratio * |known|)`` known sensors, drawn without replacement."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("mask ratio must lie in [0, 1]")
    known = np.asarray(known, dtype=bool)
    idx = np.flatnonzero(known)
    count = int(math.ceil(ratio * idx.size - 1e-12))
    chosen = rng.choice(idx, size=count, replace=False) if count else np.array([], dtype=np.int64)
    masked = np.zeros_like(known)
    masked[chosen] = True
    return MaskPlan(known, masked)


def _row_mask(plan) -> np.ndarray:
    return plan.masked if isinstance(plan, MaskPlan) else np.asarray(plan, dtype=bool)


def loss_main(xhat: Tensor, x_true, plan) -> Tensor:
    """Mean absolute error over the masked sensors' cells only."""
    rows = _row_mask(plan)
    x_true = np.asarray(x_true, dtype=np.float64)
    if xhat.shape != x_true.shape:
        raise ad.DimensionError(f"prediction {xhat.shape} vs truth {x_true.shape}")
    if not rows.any():
        warnings.warn("empty mask: main loss defined as 0", RuntimeWarning, stacklevel=2)
        return ad.scale(ad.tsum(xhat), 0.0)
    weight = rows.astype(np.float64)[:, None]
    count = rows.sum() * x_true.shape[-1] * int(np.prod(x_true.shape[:-2]))
    err = ad.mul(ad.tabs(ad.sub(xhat, x_true)), weight)
    return ad.scale(ad.tsum(err), 1.0 / count)


def patch_labels(plan, shape, rho: float, rng: np.random.Generator | None) -> np.ndarray:
    """Per-patch domain labels ``(B, N, c)`` with each label flipped w.p. ``rho``."""
    rows = _row_mask(plan).astype(np.int64)
    labels = np.broadcast_to(rows[:, None], shape).copy()
    if rho > 0:
        flips = rng.random(shape) < rho
        labels = np.where(flips, 1 - labels, labels)
    return labels


def bce_from_logits(label_d: Tensor, labels: np.ndarray) -> Tensor:
    """Two-class softmax cross-entropy averaged over patches; logits ``(..., 2, c)``."""
    logits = ad.swapaxes(label_d, -1, -2)  # (..., c, 2)
    onehot = np.stack([labels == 0, labels == 1], axis=-1).astype(np.float64)
    ll = ad.tsum(ad.mul(ad.log_softmax(logits), onehot), axis=-1)
    return ad.negate(ad.mean(ll))


def loss_discriminator(label_d: Tensor, plan, rho: float, rng: np.random.Generator | None) -> Tensor:
    if not 0.0 <= rho < 0.5:
        raise ValueError("label noise must lie in [0, 0.5)")
    shape = label_d.shape[:-2] + (label_d.shape[-1],)
    return bce_from_logits(label_d, patch_labels(plan, shape, rho, rng))


def adversarial_active(config: TrainConfig, epoch: int) -> bool:
    """Epochs are 1-based; the discriminator trains for the first ``adversarial_rounds``."""
    return config.adversarial and epoch <= config.adversarial_rounds


def train_epoch(model: STAGANN, batches, config: TrainConfig, epoch: int, adam: AdamState,
                rng: np.random.Generator, masker=None) -> dict[str, float]:
    """One pass over ``batches`` (known sensors only).  Returns mean losses.

    ``masker(known, rng)`` returns the MaskPlan for a batch; by default a
    fresh ``mask_ratio`` sample is drawn each time.
    """
    model.train()
    params = model.named_parameters()
    joint = adversarial_active(config, epoch)
    if not joint:
        frozen = set(model.discriminator_parameter_names())
        params = {n: p for n, p in params.items() if n not in frozen}
    sums = {"loss_main": 0.0, "loss_d": 0.0}
    for batch in batches:
        plan = masker(batch.known, rng) if masker else sample_mask(batch.known, config.mask_ratio, rng)
        masked_batch = batch.with_mask(plan.masked)
        xhat, label_d = model.forward(masked_batch, with_discriminator=joint, grl_lambda=config.grl_lambda)
        lm = loss_main(xhat, masked_batch.target, plan)
        loss = lm
        if joint:
            ld = loss_discriminator(label_d, plan, config.label_noise, rng)
            loss = ad.add(lm, ld)
            sums["loss_d"] += ld.item()
        if not np.isfinite(loss.item()):
            raise FloatingPointError(
                f"non-finite loss at epoch {epoch}: main={lm.item()!r}; "
                f"masked={np.flatnonzero(plan.masked).tolist()}"
            )
        ad.backward(loss)
        grads = {n: p.grad for n, p in params.items()}
        adam_step(params, grads, adam)
        sums["loss_main"] += lm.item()
    n = max(len(batches), 1)
    return {k: v / n for k, v in sums.items()}


def fit_scaler(dataset: Dataset, split: SplitPlan) -> tuple[float, float]:
    vals = dataset.series[split.known, : split.time_boundary]
    sd = float(vals.std())
    return float(vals.mean()), sd if sd > 0 else 1.0


@dataclass
class FitResult:
    model: STAGANN
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    checkpoints: list[dict] = field(default_factory=list)


def predict(model: STAGANN, batches) -> np.ndarray:
    """Stacked predictions ``(B_total, N, L)`` in the original units."""
    model.eval()
    mu, sd = model.scaler_mean.data[0], model.scaler_std.data[0]
    outs = []
    with ad.no_grad():
        for b in batches:
            xhat, _ = model.forward(b, with_discriminator=False)
            outs.append(xhat.data * sd + mu)
    return np.concatenate(outs)


def fit(model: STAGANN, dataset: Dataset, split: SplitPlan, config: TrainConfig | None = None,
        keep_checkpoints: bool = False, epoch_callback=None) -> FitResult:
    """Train on known sensors over the training span, select on validation MAE.

    ``epoch_callback(epoch, model)`` may return a dict merged into the
    history row (used for the confusion probe).
    """
    from .evaluation import evaluate_batches

    config = config or TrainConfig()
    config.validate()
    if split.known.size == 0 or split.validation.size == 0:
        raise ValueError("split needs known and validation sensors")
    L = model.config.length
    mu, sd = fit_scaler(dataset, split)
    model.scaler_mean.data[:] = mu
    model.scaler_std.data[:] = sd
    train_windows = make_windows(dataset, split, L, config.train_stride, "train", (mu, sd))
    eval_windows = make_windows(dataset, split, L, config.eval_stride or L, "eval", (mu, sd))
    eval_batches = batch_windows(eval_windows, config.batch_size)
    rng = np.random.default_rng(config.seed)
    model.set_seed(config.seed)
    adam = AdamState(lr=config.lr)
    result = FitResult(model)
    best = (math.inf, None)
    for epoch in range(1, config.epochs + 1):
        batches = batch_windows(train_windows, config.batch_size, rng)
        losses = train_epoch(model, batches, config, epoch, adam, rng)
        report = evaluate_batches(model, eval_batches, dataset, split.validation, "validation")
        row = {"epoch": epoch, **losses, "val_mae": report.mae, "val_rmse": report.rmse, "val_r2": report.r2}
        if epoch_callback is not None:
            row.update(epoch_callback(epoch, model) or {})
        result.history.append(row)
        if keep_checkpoints:
            result.checkpoints.append(model.state_dict())
        if report.mae < best[0]:
            best = (report.mae, model.state_dict())
            result.best_epoch = epoch
        log.info("epoch %d main=%.4f d=%.4f val_mae=%.4f", epoch, losses["loss_main"], losses["loss_d"], report.mae)
    if best[1] is not None:
        model.load_state_dict(best[1])
    return result
