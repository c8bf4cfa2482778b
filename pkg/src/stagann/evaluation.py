"""Metrics, the neighbour-average baseline and diagnostics of domain confusion."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .data import Dataset, SplitPlan, batch_windows, make_split, make_windows
from .training import bce_from_logits


@dataclass
class MetricReport:
    mae: float
    rmse: float
    r2: float
    sensors: int
    windows: int
    scope: str = "test"

    def as_row(self) -> dict:
        return asdict(self)


def metrics(pred, truth, mask, scope: str = "test") -> MetricReport:
    """MAE, RMSE and R^2 over the cells selected by ``mask``.

    ``mask`` is boolean per sensor (``(N,)``, applied across batch and time)
    or per cell.  R^2 is NaN when the selected truth has zero variance.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction {pred.shape} vs truth {truth.shape}")
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 1:
        cell = np.zeros(truth.shape, dtype=bool)
        cell[..., mask, :] = True
        sensors = int(mask.sum())
    else:
        cell = np.broadcast_to(mask, truth.shape)
        sensors = int(cell.reshape(-1, *truth.shape[-2:]).any(axis=(0, 2)).sum()) if truth.ndim >= 2 else 1
    p, t = pred[cell], truth[cell]
    if t.size == 0:
        raise ValueError("metric mask selects no cells")
    err = p - t
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err * err)))
    ss_tot = float(np.sum((t - t.mean()) ** 2))
    r2 = 1.0 - float(np.sum(err * err)) / ss_tot if ss_tot > 0 else math.nan
    windows = int(np.prod(truth.shape[:-2])) if truth.ndim > 2 else 1
    return MetricReport(mae, rmse, r2, sensors, windows, scope)


def evaluate_batches(model, batches, dataset: Dataset, sensors, scope: str) -> MetricReport:
    from .training import predict

    pred = predict(model, batches)
    mu, sd = model.scaler_mean.data[0], model.scaler_std.data[0]
    truth = np.concatenate([b.target for b in batches]) * sd + mu
    mask = np.isin(batches[0].sensor_index, sensors)
    return metrics(pred, truth, mask, scope)


def okriging(x, adjacency, unknown) -> np.ndarray:
    """Weighted mean of each unknown sensor's known first-order neighbours.

    ``x`` is ``(..., N, L)``; rows of unknown sensors are ignored.  An unknown
    sensor without known neighbours receives the mean of all known series.
    Known rows are returned unchanged.
    """
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(getattr(adjacency, "weights", adjacency), dtype=np.float64).copy()
    n = w.shape[0]
    unknown = np.asarray(unknown)
    is_unknown = np.zeros(n, dtype=bool)
    is_unknown[unknown] = True
    w[:, is_unknown] = 0.0
    np.fill_diagonal(w, 0.0)
    out = x.copy()
    global_mean = x[..., ~is_unknown, :].mean(axis=-2)
    for i in np.flatnonzero(is_unknown):
        total = w[i].sum()
        if total > 0:
            out[..., i, :] = np.tensordot(w[i] / total, x, axes=([0], [-2]))
        else:
            out[..., i, :] = global_mean
    return out


def okriging_report(dataset: Dataset, split: SplitPlan, length: int = 24, scope: str = "test") -> MetricReport:
    """Baseline metrics over the evaluation span for the test (or validation) sensors."""
    windows = make_windows(dataset, split, length, length, "eval")
    truth = np.concatenate([w.target for w in windows])
    pred = okriging(truth, dataset.adjacency, split.unknown())
    sensors = split.test if scope == "test" else split.validation
    return metrics(pred, truth, np.isin(np.arange(dataset.n_sensors), sensors), scope)


def evaluate(model, dataset: Dataset, split: SplitPlan, scope: str = "test", batch_size: int = 64) -> MetricReport:
    L = model.config.length
    mu, sd = model.scaler_mean.data[0], model.scaler_std.data[0]
    windows = make_windows(dataset, split, L, L, "eval", (mu, sd))
    batches = batch_windows(windows, batch_size)
    sensors = split.test if scope == "test" else split.validation
    return evaluate_batches(model, batches, dataset, sensors, scope)


# ---------------------------------------------------------------------------
# missing-rate protocol
# ---------------------------------------------------------------------------

SWEEP_FIELDS = ["x", "y", "z", "seed", "MAE", "RMSE", "R2"]


def missing_rate_sweep(dataset: Dataset, model_factory: Callable, train: Callable,
                       known_tenths: Sequence[int] = (7, 4, 2, 1), z: int = 2,
                       seeds: Sequence[int] = (0,), out_csv=None) -> list[dict]:
    """``xKyVzU`` sweep: ``model_factory(seed)`` builds, ``train(model, ds, split, seed)`` fits.

    Returns one row per (configuration, seed) with test metrics.
    """
    rows = []
    for x in known_tenths:
        y = 10 - x - z
        if y < 0:
            raise ValueError(f"{x}K with {z}U leaves no room for validation")
        if x * dataset.n_sensors < 10:
            raise ValueError(f"{x}K gives fewer than one known sensor for N={dataset.n_sensors}")
        for seed in seeds:
            split = make_split(dataset, seed, (x, y, z))
            model = model_factory(seed)
            train(model, dataset, split, seed)
            rep = evaluate(model, dataset, split, "test")
            rows.append({"x": x, "y": y, "z": z, "seed": seed, "MAE": rep.mae, "RMSE": rep.rmse, "R2": rep.r2})
    if out_csv is not None:
        write_rows(out_csv, rows, SWEEP_FIELDS)
    return rows


def write_rows(path, rows: Sequence[dict], fieldnames: Sequence[str] | None = None) -> None:
    fieldnames = list(fieldnames or (rows[0].keys() if rows else []))
    with open(Path(path), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


# ---------------------------------------------------------------------------
# domain diagnostics
# ---------------------------------------------------------------------------

@dataclass
class DivergenceReport:
    d_hat: float
    bracket: float
    source_error: float
    target_error: float
    bce: float | None = None
    note: str = "lower bound: evaluated with one classifier, not minimised over the class"


def proxy_h_divergence_from_rates(source_error: float, target_error: float) -> DivergenceReport:
    """``2 * (1 - bracket)`` where bracket is the summed domain error.

    A classifier and its complement are both admissible, so the bracket is
    ``min(e_s + e_t, 2 - e_s - e_t)``.
    """
    raw = source_error + target_error
    bracket = min(raw, 2.0 - raw)
    return DivergenceReport(2.0 * (1.0 - bracket), bracket, source_error, target_error)


def proxy_h_divergence(source, target, classifier: Callable[[np.ndarray], np.ndarray]) -> DivergenceReport:
    """Empirical divergence between source (known) and target (unknown) patches.

    ``classifier`` maps ``(n, l)`` patches to ``(n, 2)`` logits or to hard
    labels (0 = source, 1 = target).
    """
    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if source.size == 0 or target.size == 0:
        raise ValueError("both patch sets must be non-empty")

    def labels(p):
        out = np.asarray(classifier(p))
        return out.argmax(axis=-1) if out.ndim == 2 else out.astype(np.int64)

    rep = proxy_h_divergence_from_rates(float(np.mean(labels(source) == 1)), float(np.mean(labels(target) == 0)))
    return rep


def discriminator_classifier(model) -> Callable[[np.ndarray], np.ndarray]:
    """Frozen discriminator MLP as a patch -> logits function."""
    mlp = model.discriminator.mlp

    def classify(patches):
        with ad.no_grad():
            was = mlp.training
            mlp.eval()
            out = mlp(ad.Tensor(patches)).data
            mlp.train(was)
        return out

    return classify


def encoder_patches(model, batches) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Encoder output cut into discriminator patches, with known/unknown labels.

    Returns ``(patches (n, l), labels (n,), logits (n, 2))``.
    """
    model.eval()
    l = model.config.patch_len
    patches, labels, logits = [], [], []
    with ad.no_grad():
        for b in batches:
            z = model.encode(b)
            c = z.shape[-1] // l
            p = z.data[..., : c * l].reshape(z.shape[:-1] + (c, l))  # (B, N, c, l)
            lab = np.broadcast_to((~b.known).astype(np.int64)[None, :, None], p.shape[:-1])
            out = model.discriminator(z).data  # (B, N, 2, c)
            patches.append(p.reshape(-1, l))
            labels.append(lab.reshape(-1))
            logits.append(np.swapaxes(out, -1, -2).reshape(-1, 2))
    return np.concatenate(patches), np.concatenate(labels), np.concatenate(logits)


def discriminator_bce(model, batches) -> float:
    """Known-vs-unknown cross-entropy of the (frozen) discriminator on encoder output."""
    _, labels, logits = encoder_patches(model, batches)
    lab = ad.Tensor(logits[:, :, None])
    return float(bce_from_logits(lab, labels[:, None]).item())


def confusion_probe(model, checkpoints: Sequence[dict], batches, discriminator_state: dict | None = None,
                    out_csv=None) -> list[dict]:
    """BCE of one fixed discriminator over a sequence of encoder checkpoints.

    ``discriminator_state`` (names starting ``discriminator.``) pins the
    classifier; by default the discriminator stored in each checkpoint is used.
    """
    if not checkpoints:
        raise ValueError("confusion probe needs at least one checkpoint")
    saved = model.state_dict()
    rows = []
    try:
        for i, state in enumerate(checkpoints, start=1):
            state = dict(state)
            if discriminator_state is not None:
                state.update(discriminator_state)
            model.load_state_dict(state)
            rows.append({"epoch": i, "bce": discriminator_bce(model, batches)})
    finally:
        model.load_state_dict(saved)
    if out_csv is not None:
        write_rows(out_csv, rows, ["epoch", "bce"])
    return rows


def divergence_report(model, batches) -> DivergenceReport:
    patches, labels, _ = encoder_patches(model, batches)
    clf = discriminator_classifier(model)
    rep = proxy_h_divergence(patches[labels == 0], patches[labels == 1], clf)
    rep.bce = discriminator_bce(model, batches)
    return rep
