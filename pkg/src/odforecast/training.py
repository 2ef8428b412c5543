"""Windowed training: Adam, step-halved learning rate, early stopping.

Samples pair K history slots with the following tau target slots; windows
are ordered chronologically and partitioned into train/val/test by
fractions. The loss is the ZINB negative log-likelihood averaged per tensor
element, so the learning rate is insensitive to batch and grid sizes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import zinb
from .data import DataError, NumericalError, ODTensor
from .model import ForecastModel, forward as model_forward


@dataclass(frozen=True)
class WindowDataset:
    """Chronological forecasting windows over one OD tensor.

    A window anchored at slot t pairs history [t-K+1, t] with future
    [t+1, t+tau]. Anchor arrays hold the t values per split.
    """

    od: ODTensor
    history: int
    horizon: int
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray

    @property
    def n_windows(self) -> int:
        return self.train_idx.size + self.val_idx.size + self.test_idx.size

    def hist(self, t: int) -> np.ndarray:
        return self.od.data[:, :, t - self.history + 1:t + 1]

    def future(self, t: int) -> np.ndarray:
        return self.od.data[:, :, t + 1:t + 1 + self.horizon]

    def batch(self, anchors) -> tuple[np.ndarray, np.ndarray]:
        hists = np.stack([self.hist(t) for t in anchors])
        futs = np.stack([self.future(t) for t in anchors])
        return hists, futs

    def train_tensor(self) -> ODTensor:
        """Slots covered by training windows only (for fitting baselines)."""
        if self.train_idx.size == 0:
            raise DataError("no training windows")
        end = int(self.train_idx[-1]) + self.horizon + 1
        return self.od.window(0, end)


def make_windows(od: ODTensor, history: int, horizon: int,
                 split=(0.5, 0.25, 0.25)) -> WindowDataset:
    """Enumerate the T-K-tau+1 windows and split the ordered list by fractions."""
    if history < 1 or horizon < 1:
        raise DataError("history and horizon must be positive")
    n_windows = od.n_slots - history - horizon + 1
    if n_windows < 1:
        raise DataError(f"tensor with {od.n_slots} slots is too short for "
                        f"K={history}, tau={horizon}")
    fr = np.asarray(split, dtype=np.float64)
    if fr.shape != (3,) or (fr < 0).any() or abs(fr.sum() - 1.0) > 1e-9:
        raise DataError("split must be three non-negative fractions summing to 1")
    anchors = np.arange(history - 1, od.n_slots - horizon)
    n_train = int(math.floor(fr[0] * n_windows))
    n_val = int(math.floor(fr[1] * n_windows))
    return WindowDataset(od, history, horizon,
                         anchors[:n_train],
                         anchors[n_train:n_train + n_val],
                         anchors[n_train + n_val:])


def adam_step(p, g, m, v, t: int, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; returns (p, m, v) as new arrays."""
    m = beta1 * m + (1.0 - beta1) * g
    v = beta2 * v + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    return p - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class Adam:
    """Adam over a named parameter dict; iteration order is insertion order."""

    def __init__(self, params: dict, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(t.values) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.values) for k, t in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        for name, tensor in self.params.items():
            g = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.values)
            tensor.values, self.m[name], self.v[name] = adam_step(
                tensor.values, g, self.m[name], self.v[name], self.t, lr,
                self.beta1, self.beta2, self.eps)


def lr_at(epoch: int, lr0: float = 0.004, halve_every: int = 50) -> float:
    """Step schedule: lr0 halved once per halve_every completed epochs."""
    if epoch < 1:
        raise DataError("epochs are 1-indexed")
    return lr0 * 0.5 ** ((epoch - 1) // halve_every)


def clip_gradients(params: dict, max_norm: float) -> float:
    """Scale all gradients down to a global L2 norm of max_norm; returns the norm."""
    total = 0.0
    for t in params.values():
        if t.grad is not None:
            total += float((t.grad * t.grad).sum())
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for t in params.values():
            if t.grad is not None:
                t.grad *= scale
    return norm


@dataclass
class TrainConfig:
    lr0: float = 0.004
    halve_every: int = 50
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10            # early-stopping patience, in epochs
    clip_norm: float | None = 5.0
    seed: int = 0
    split: tuple = (0.5, 0.25, 0.25)
    shuffle: bool = True
    monitor: str = "val_nll"      # checkpoint selection: val_nll or val_wmape


@dataclass
class TrainResult:
    history: list
    best_epoch: int
    best_val_nll: float
    n_epochs: int
    stopped_early: bool


def _constant_params(params: dict) -> dict:
    """Value-only view of the parameters so eval passes build no graph."""
    return {k: ad.Tensor(t.values) for k, t in params.items()}


def evaluate_split(model: ForecastModel, dataset: WindowDataset, anchors,
                   batch_size: int = 64) -> tuple[float, float]:
    """(per-element NLL, non-zero-mask wMAPE) of a window set; (nan, nan) if empty."""
    anchors = np.asarray(anchors)
    if anchors.size == 0:
        return float("nan"), float("nan")
    cparams = _constant_params(model.params)
    nll_sum = 0.0
    n_elem = 0
    abs_err = 0.0
    truth_sum = 0.0
    for lo in range(0, anchors.size, batch_size):
        ts = anchors[lo:lo + batch_size]
        hists, futs = dataset.batch(ts)
        out = model_forward(hists, model.assignment, model.poi.data,
                            cparams, model.config)
        nll_sum += zinb.nll(futs, out).item()
        n_elem += futs.size
        pred = zinb.mean(out)
        mask = futs > 0
        abs_err += float(np.abs(pred - futs)[mask].sum())
        truth_sum += float(futs[mask].sum())
    wmape = abs_err / truth_sum if truth_sum > 0 else float("nan")
    return nll_sum / n_elem, wmape


def write_history_csv(rows: list, path) -> None:
    lines = ["epoch,train_nll,val_nll,val_wmape,lr"]
    for r in rows:
        lines.append(f"{r['epoch']},{float(r['train_nll'])!r},"
                     f"{float(r['val_nll'])!r},{float(r['val_wmape'])!r},"
                     f"{float(r['lr'])!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def train(model: ForecastModel, dataset: WindowDataset, cfg: TrainConfig,
          history_path=None, checkpoint_path=None, verbose: bool = False) -> TrainResult:
    """Fit the model; restores the best-validation parameters before returning.

    Raises NumericalError with epoch/batch context if the loss or any
    gradient goes non-finite. When the validation split is empty, the
    training loss selects the checkpoint instead.
    """
    if dataset.train_idx.size == 0:
        raise DataError("no training windows")
    if dataset.history != model.config.history or dataset.horizon != model.config.horizon:
        raise DataError("dataset window sizes disagree with the model config")
    if cfg.monitor not in ("val_nll", "val_wmape"):
        raise DataError(f"unknown monitor {cfg.monitor!r}")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.params)
    rows = []
    best_metric = math.inf
    best_val = float("nan")
    best_epoch = 0
    best_state = None
    since_best = 0
    stopped = False

    for epoch in range(1, cfg.max_epochs + 1):
        lr = lr_at(epoch, cfg.lr0, cfg.halve_every)
        order = rng.permutation(dataset.train_idx) if cfg.shuffle \
            else dataset.train_idx.copy()
        loss_sum = 0.0
        n_elem = 0
        for lo in range(0, order.size, cfg.batch_size):
            ts = order[lo:lo + cfg.batch_size]
            hists, futs = dataset.batch(ts)
            model.zero_grad()
            try:
                out = model.forward(hists)
                batch_nll = zinb.nll(futs, out)
            except ValueError as exc:
                # NaN activations land outside the ZINB parameter domains
                raise NumericalError(f"diverged at epoch {epoch}, batch "
                                     f"{lo // cfg.batch_size}: {exc}") from exc
            value = batch_nll.item()
            if not math.isfinite(value):
                raise NumericalError(f"non-finite loss at epoch {epoch}, "
                                     f"batch {lo // cfg.batch_size}")
            (batch_nll * (1.0 / futs.size)).backward()
            for name, t in model.params.items():
                if t.grad is not None and not np.isfinite(t.grad).all():
                    raise NumericalError(f"non-finite gradient in {name} at "
                                         f"epoch {epoch}, batch {lo // cfg.batch_size}")
            if cfg.clip_norm is not None:
                clip_gradients(model.params, cfg.clip_norm)
            opt.step(lr)
            loss_sum += value
            n_elem += futs.size

        train_nll = loss_sum / n_elem
        try:
            val_nll, val_wmape = evaluate_split(model, dataset, dataset.val_idx,
                                                batch_size=max(cfg.batch_size, 64))
        except ValueError as exc:
            raise NumericalError(f"diverged during validation at epoch "
                                 f"{epoch}: {exc}") from exc
        rows.append({"epoch": epoch, "train_nll": train_nll, "val_nll": val_nll,
                     "val_wmape": val_wmape, "lr": lr})
        if verbose:
            print(f"epoch {epoch:3d}  lr {lr:.5f}  train {train_nll:.4f}  "
                  f"val {val_nll:.4f}  wmape {val_wmape:.4f}")

        cand = val_nll if cfg.monitor == "val_nll" else val_wmape
        metric = cand if math.isfinite(cand) else train_nll
        if metric < best_metric:
            best_metric = metric
            best_val = val_nll
            best_epoch = epoch
            best_state = {k: t.values.copy() for k, t in model.params.items()}
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                stopped = True
                break

    if best_state is not None:
        for name, t in model.params.items():
            t.values = best_state[name]
            t.zero_grad()
    if history_path is not None:
        write_history_csv(rows, history_path)
    if checkpoint_path is not None:
        model.save(checkpoint_path)
    return TrainResult(rows, best_epoch, best_val, len(rows), stopped)
