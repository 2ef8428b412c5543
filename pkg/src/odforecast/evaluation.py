"""Sparsity-aware error metrics and classical per-flow baselines.

All three metrics are computed on the non-zero-truth mask only: zeros
dominate OD tensors, and a model that predicts all zeros would otherwise
look excellent. RMSE and wMAPE measure error magnitude, CPC (common part of
commuters) measures overlap, 1 being perfect.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import zinb
from .data import DataError, ODTensor
from .model import ForecastModel, forward as model_forward
from .training import WindowDataset


@dataclass(frozen=True)
class MetricReport:
    rmse: float
    wmape: float
    cpc: float
    n_nonzero: int
    per_slot: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"rmse": self.rmse, "wmape": self.wmape, "cpc": self.cpc,
                "n_nonzero": self.n_nonzero, "per_slot": list(self.per_slot)}


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, ODTensor) else np.asarray(x, dtype=np.float64)


def _masked_scores(pred: np.ndarray, truth: np.ndarray):
    mask = truth > 0
    n = int(mask.sum())
    if n == 0:
        return None
    diff = pred[mask] - truth[mask]
    rmse = float(np.sqrt(np.mean(diff * diff)))
    wmape = float(np.abs(diff).sum() / truth[mask].sum())
    cpc = float(2.0 * np.minimum(pred[mask], truth[mask]).sum()
                / (pred[mask].sum() + truth[mask].sum()))
    return rmse, wmape, cpc, n


def metrics(pred, truth) -> MetricReport:
    """RMSE, wMAPE, and CPC over entries where the truth is non-zero.

    Raises if no truth entry is non-zero. For (N, N, T) inputs the report
    also carries a per-slot breakdown; slots whose mask is empty get None
    scores there.
    """
    pred = _as_array(pred)
    truth = _as_array(truth)
    if pred.shape != truth.shape:
        raise DataError(f"shape mismatch: pred {pred.shape} vs truth {truth.shape}")
    scores = _masked_scores(pred, truth)
    if scores is None:
        raise DataError("metrics need at least one non-zero truth entry")
    rmse, wmape, cpc, n = scores
    per_slot = []
    if pred.ndim == 3:
        for t in range(pred.shape[2]):
            s = _masked_scores(pred[:, :, t], truth[:, :, t])
            if s is None:
                per_slot.append({"slot": t, "rmse": None, "wmape": None,
                                 "cpc": None, "n_nonzero": 0})
            else:
                per_slot.append({"slot": t, "rmse": s[0], "wmape": s[1],
                                 "cpc": s[2], "n_nonzero": s[3]})
    return MetricReport(rmse, wmape, cpc, n, per_slot)


class HistoricalAverage:
    """Per time-of-day mean over the most recent D training days.

    recent_days=None averages every training day. Times of day never seen
    in training fall back to the overall mean field.
    """

    def __init__(self, train: ODTensor, slots_per_day: int,
                 recent_days: int | None = None):
        if slots_per_day < 1:
            raise DataError("slots_per_day must be positive")
        self.slots_per_day = slots_per_day
        tod = (train.start_slot + np.arange(train.n_slots)) % slots_per_day
        overall = train.data.mean(axis=2)
        self.table = np.empty((slots_per_day,) + overall.shape)
        for s in range(slots_per_day):
            idx = np.nonzero(tod == s)[0]
            if recent_days is not None:
                idx = idx[-recent_days:]
            self.table[s] = train.data[:, :, idx].mean(axis=2) if idx.size else overall

    def predict_slot(self, abs_slot: int) -> np.ndarray:
        return self.table[abs_slot % self.slots_per_day]

    def predict_slots(self, abs_slots) -> np.ndarray:
        return np.stack([self.predict_slot(int(s)) for s in abs_slots], axis=-1)


class PerFlowLinear:
    """Independent lag regression per OD flow, intercept included.

    coef has shape (N*N, K+1, tau); flows that were identically zero in
    training keep all-zero coefficients and therefore predict zero forever.
    Predictions are floored at zero since demand is non-negative.
    """

    def __init__(self, coef: np.ndarray, n_cells: int, history: int, horizon: int):
        self.coef = coef
        self.n_cells = n_cells
        self.history = history
        self.horizon = horizon

    def predict(self, hist: np.ndarray) -> np.ndarray:
        n, k = self.n_cells, self.history
        hist = np.asarray(hist, dtype=np.float64)
        if hist.shape != (n, n, k):
            raise DataError(f"history must be ({n}, {n}, {k})")
        x = np.concatenate([hist.reshape(n * n, k), np.ones((n * n, 1))], axis=1)
        y = np.einsum("fk,fkr->fr", x, self.coef)
        return np.maximum(y, 0.0).reshape(n, n, self.horizon)


def _soft_threshold(z: np.ndarray, t: float) -> np.ndarray:
    return np.sign(z) * np.maximum(np.abs(z) - t, 0.0)


def fit_linear(train: ODTensor, history: int, horizon: int, method: str = "ols",
               lam: float = 0.1, ridge_jitter: float = 1e-8, tol: float = 1e-6,
               max_sweeps: int = 10000, chunk: int = 1024) -> PerFlowLinear:
    """Fit per-flow lag regressions on the training slots.

    method="ols" solves the normal equations with a ridge jitter on the
    diagonal; method="lasso" runs cyclic coordinate descent with soft
    thresholding on the lag coefficients (the intercept is unpenalized),
    objective (1/2W)||y - Xb||^2 + lam * sum|b_lags|.
    """
    if method not in ("ols", "lasso"):
        raise DataError(f"unknown method {method!r}")
    n, t0 = train.n_cells, train.n_slots
    k, tau = history, horizon
    n_win = t0 - k - tau + 1
    if n_win < 1:
        raise DataError(f"training tensor too short: T={t0}, K={k}, tau={tau}")
    series = train.data.reshape(n * n, t0)
    active = np.nonzero(series.any(axis=1))[0]
    coef = np.zeros((n * n, k + 1, tau))

    for lo in range(0, active.size, chunk):
        rows = active[lo:lo + chunk]
        s = series[rows]                       # (C, T0)
        c = rows.size
        x = np.empty((c, n_win, k + 1))
        for j in range(k):
            x[:, :, j] = s[:, j:j + n_win]
        x[:, :, k] = 1.0
        y = np.empty((c, n_win, tau))
        for r in range(tau):
            y[:, :, r] = s[:, k + r:k + r + n_win]

        if method == "ols":
            gram = np.einsum("cwk,cwl->ckl", x, x)
            gram += ridge_jitter * np.eye(k + 1)
            rhs = np.einsum("cwk,cwr->ckr", x, y)
            coef[rows] = np.linalg.solve(gram, rhs)
        else:
            beta = np.zeros((c, k + 1, tau))
            resid = y.copy()
            col_sq = np.einsum("cwk,cwk->ck", x, x)
            thresh = lam * n_win
            for _ in range(max_sweeps):
                max_delta = 0.0
                for j in range(k + 1):
                    xj = x[:, :, j]
                    cs = col_sq[:, j]
                    rho = np.einsum("cw,cwr->cr", xj, resid) \
                        + beta[:, j, :] * cs[:, None]
                    if j == k:
                        new = np.where(cs[:, None] > 0, rho / np.maximum(cs[:, None], 1.0), 0.0)
                    else:
                        new = np.where(cs[:, None] > 0,
                                       _soft_threshold(rho, thresh)
                                       / np.maximum(cs[:, None], 1e-300), 0.0)
                    delta = new - beta[:, j, :]
                    md = float(np.abs(delta).max()) if delta.size else 0.0
                    max_delta = max(max_delta, md)
                    resid -= xj[:, :, None] * delta[:, None, :]
                    beta[:, j, :] = new
                if max_delta < tol:
                    break
            coef[rows] = beta
    return PerFlowLinear(coef, n, k, tau)


def evaluate_model(model: ForecastModel, dataset: WindowDataset,
                   which: str = "test", batch_size: int = 64,
                   zero_inflated: bool = False) -> MetricReport:
    """Stack mean predictions over a split's windows and score them."""
    anchors = getattr(dataset, f"{which}_idx")
    if anchors.size == 0:
        raise DataError(f"no {which} windows")
    # constant copies: inference should not build a gradient graph
    cparams = {k: ad.Tensor(t.values) for k, t in model.params.items()}
    preds, truths = [], []
    for lo in range(0, anchors.size, batch_size):
        ts = anchors[lo:lo + batch_size]
        hists, futs = dataset.batch(ts)
        out = model_forward(hists, model.assignment, model.poi.data,
                            cparams, model.config)
        preds.append(zinb.mean(out, zero_inflated=zero_inflated))
        truths.append(futs)
    pred = np.concatenate(preds, axis=0)      # (W, N, N, tau)
    truth = np.concatenate(truths, axis=0)
    w, n, _, tau = pred.shape
    pred = np.moveaxis(pred, 0, 2).reshape(n, n, w * tau)
    truth = np.moveaxis(truth, 0, 2).reshape(n, n, w * tau)
    return metrics(pred, truth)


def evaluate_baseline(dataset: WindowDataset, method: str, which: str = "test",
                      slots_per_day: int | None = None,
                      recent_days: int | None = None,
                      lam: float = 0.1) -> MetricReport:
    """Fit a baseline on the training slots and score it on a split.

    method is "ha", "ols", or "lasso". HA needs slots_per_day (taken from
    the tensor's slot_duration when omitted).
    """
    anchors = getattr(dataset, f"{which}_idx")
    if anchors.size == 0:
        raise DataError(f"no {which} windows")
    train_od = dataset.train_tensor()
    if method == "ha":
        if slots_per_day is None:
            slots_per_day = int(round(24.0 / dataset.od.slot_duration))
        ha = HistoricalAverage(train_od, slots_per_day, recent_days)
        predict = lambda t: ha.predict_slots(
            dataset.od.start_slot + np.arange(t + 1, t + 1 + dataset.horizon))
    elif method in ("ols", "lasso"):
        lin = fit_linear(train_od, dataset.history, dataset.horizon,
                         method=method, lam=lam)
        predict = lambda t: lin.predict(dataset.hist(t))
    else:
        raise DataError(f"unknown baseline {method!r}")
    preds = [predict(int(t)) for t in anchors]
    truths = [dataset.future(int(t)) for t in anchors]
    pred = np.concatenate(preds, axis=2)
    truth = np.concatenate(truths, axis=2)
    return metrics(pred, truth)


def compare(dataset: WindowDataset, model: ForecastModel | None = None,
            methods=("ha", "ols", "lasso"), which: str = "test",
            slots_per_day: int | None = None, recent_days: int | None = None,
            lam: float = 0.1) -> dict:
    """MetricReport per method name; includes "model" when a model is given."""
    out = {}
    for m in methods:
        out[m] = evaluate_baseline(dataset, m, which=which,
                                   slots_per_day=slots_per_day,
                                   recent_days=recent_days, lam=lam)
    if model is not None:
        out["model"] = evaluate_model(model, dataset, which=which)
    return out
