"""Attention encoder-decoder over coarsened OD tensors with a ZINB readout.

Forward path: contract the recent OD history through the assignment,
embed each super-cell's origin and destination slices permutation-
invariantly, add a POI projection, run multi-head self-attention over
super-cells, cross-attend cell queries against super-cell keys under the
assignment mask, and map per-pair features to (n, p, pi).

All shapes below carry an optional leading batch axis; single samples are
promoted to batch size one internally.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import zinb
from .data import Assignment, DataError, POIMatrix, aggregate_poi

N_FLOOR = 1e-6
P_EPS = 2e-6   # strictly inside the likelihood's [1e-6, 1-1e-6] domain, so
PI_FLOOR = 1e-12  # saturation plus rounding can never step outside it


@dataclass
class ModelConfig:
    n_cells: int
    n_supercells: int = 60
    history: int = 8          # input window length K
    horizon: int = 1          # forecast steps tau
    d: int = 64               # embedding width
    heads: int = 4
    n_queries: int = 32
    poi_dim: int = 16
    d_ff: int | None = None   # feed-forward width, defaults to d
    renorm_mask: bool = False # renormalize masked attention rows
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d_ff is None:
            self.d_ff = self.d
        if min(self.n_cells, self.n_supercells, self.history, self.horizon,
               self.d, self.heads, self.n_queries, self.poi_dim, self.d_ff) < 1:
            raise DataError("all model dimensions must be positive")
        if self.heads > self.d:
            raise DataError("more heads than embedding dimensions")
        if self.n_supercells > self.n_cells:
            raise DataError("more super-cells than cells")

    @property
    def d_head(self) -> int:
        return self.d // self.heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def init_params(config: ModelConfig, seed: int = 0) -> dict:
    """Fresh parameter dict: uniform(+-1/sqrt(fan_in)) for weights and
    biases, normal(0, 0.02) for the cell table and the embedding queries."""
    rng = np.random.default_rng(seed)
    k, d, h, dh = config.history, config.d, config.heads, config.d_head
    d_ff, tau, n, m = config.d_ff, config.horizon, config.n_cells, config.n_supercells

    def uniform(shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return ad.Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)

    def gaussian(shape):
        return ad.Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=True)

    def ones(shape):
        return ad.Tensor(np.ones(shape), requires_grad=True)

    def zeros(shape):
        return ad.Tensor(np.zeros(shape), requires_grad=True)

    params = {
        "embed.w_o": uniform((k, d), k),
        "embed.w_d": uniform((k, d), k),
        "embed.queries": gaussian((config.n_queries, d)),
        "embed.w_poi": uniform((config.poi_dim, d), config.poi_dim),
        "cells.table": gaussian((n, d)),
    }
    for block in ("enc", "dec"):
        params[f"{block}.wq"] = uniform((h, d, dh), d)
        params[f"{block}.wk"] = uniform((h, d, dh), d)
        params[f"{block}.wv"] = uniform((h, d, dh), d)
        params[f"{block}.w_out"] = uniform((h * dh, d), h * dh)
        params[f"{block}.b_out"] = uniform((d,), h * dh)
        params[f"{block}.ffn_w1"] = uniform((d, d_ff), d)
        params[f"{block}.ffn_b1"] = uniform((d_ff,), d)
        params[f"{block}.ffn_w2"] = uniform((d_ff, d), d_ff)
        params[f"{block}.ffn_b2"] = uniform((d,), d_ff)
    params["enc.ln1_g"] = ones((d,))
    params["enc.ln1_b"] = zeros((d,))
    params["enc.ln2_g"] = ones((d,))
    params["enc.ln2_b"] = zeros((d,))
    params["dec.ln_q_g"] = ones((d,))
    params["dec.ln_q_b"] = zeros((d,))
    params["dec.ln_kv_g"] = ones((d,))
    params["dec.ln_kv_b"] = zeros((d,))
    params["dec.ln3_g"] = ones((d,))
    params["dec.ln3_b"] = zeros((d,))
    params["head.a_map"] = uniform((d, d), d)
    params["head.a_bias"] = uniform((d,), d)
    params["head.b_map"] = uniform((d, d), d)
    params["head.b_bias"] = uniform((d,), d)
    for name in ("n", "p", "pi"):
        params[f"head.{name}_w"] = uniform((2 * d, tau), 2 * d)
        params[f"head.{name}_b"] = uniform((tau,), 2 * d)
    return params


def count_params(params: dict) -> int:
    return int(sum(t.values.size for t in params.values()))


def _ln(x, gain, bias, eps):
    return ad.layer_norm(x, eps) * gain + bias


def _with_batch(x: np.ndarray, want_ndim: int) -> tuple[np.ndarray, bool]:
    if x.ndim == want_ndim - 1:
        return x[None], True
    if x.ndim == want_ndim:
        return x, False
    raise DataError(f"expected {want_ndim - 1}- or {want_ndim}-d input, got {x.ndim}-d")


def od_embed(x_s: np.ndarray, params: dict, config: ModelConfig) -> ad.Tensor:
    """Permutation-invariant embedding of coarse OD slices, (B, M, d).

    For super-cell i the origin slice O_i = x_s[i, :, :] and destination
    slice D_i = x_s[:, i, :] are projected to width d, scored against the
    learned queries (softmax over queries for every row), and reduced by
    summing the weighted rows over both rows and queries. Row order cannot
    matter: each row's query weights sum to one.
    """
    x_s, squeeze = _with_batch(np.asarray(x_s, dtype=np.float64), 4)
    b, m, _, k = x_s.shape
    if m != config.n_supercells or k != config.history:
        raise DataError(f"coarse history must be (M={config.n_supercells}, M, "
                        f"K={config.history}), got {x_s.shape[1:]}")
    q_t = ad.swap_last(params["embed.queries"])  # (d, N_q)

    def side(mat_rows: np.ndarray, w: ad.Tensor) -> ad.Tensor:
        flat = mat_rows.reshape(b * m * m, k)
        proj = ad.matmul(ad.Tensor(flat), w)             # (BMM, d)
        alpha = ad.softmax(ad.matmul(proj, q_t))         # (BMM, N_q)
        weight = alpha.sum(axis=-1, keepdims=True)       # (BMM, 1), identically 1
        summed = (proj * weight).reshape((b, m, m, config.d)).sum(axis=2)
        return summed                                    # (B, M, d)

    e_o = side(x_s, params["embed.w_o"])
    e_d = side(x_s.transpose(0, 2, 1, 3), params["embed.w_d"])
    out = e_o + e_d
    return out[0] if squeeze else out


def poi_embed(poi_s: np.ndarray, params: dict) -> ad.Tensor:
    """Project super-cell POI indicators to the embedding width, (M, d)."""
    return ad.matmul(ad.Tensor(np.asarray(poi_s, dtype=np.float64)),
                     params["embed.w_poi"])


def _multi_head(q_in: ad.Tensor, kv_in: ad.Tensor, params: dict, block: str,
                config: ModelConfig, mask: np.ndarray | None = None) -> ad.Tensor:
    """Shared attention core; q_in (..., R, d), kv_in (..., S, d) -> (..., R, d)."""
    d, h, dh = config.d, config.heads, config.d_head
    q4 = q_in.reshape(q_in.shape[:-2] + (1,) + q_in.shape[-2:])
    kv4 = kv_in.reshape(kv_in.shape[:-2] + (1,) + kv_in.shape[-2:])
    q = ad.matmul(q4, params[f"{block}.wq"])    # (..., h, R, dh)
    k = ad.matmul(kv4, params[f"{block}.wk"])   # (..., h, S, dh)
    v = ad.matmul(kv4, params[f"{block}.wv"])
    scores = ad.matmul(q, ad.swap_last(k)) * (1.0 / math.sqrt(d))
    attn = ad.softmax(scores)                   # (..., h, R, S)
    if mask is not None:
        attn = attn * mask
        if config.renorm_mask:
            attn = ad.div(attn, attn.sum(axis=-1, keepdims=True))
    heads = ad.matmul(attn, v)                  # (..., h, R, dh)
    ndim = heads.ndim
    merged = ad.transpose(heads, tuple(range(ndim - 3)) + (ndim - 2, ndim - 3, ndim - 1))
    merged = merged.reshape(merged.shape[:-2] + (h * dh,))
    return ad.matmul(merged, params[f"{block}.w_out"]) + params[f"{block}.b_out"]


def _ffn(x: ad.Tensor, params: dict, block: str) -> ad.Tensor:
    hidden = ad.relu(ad.matmul(x, params[f"{block}.ffn_w1"]) + params[f"{block}.ffn_b1"])
    return ad.matmul(hidden, params[f"{block}.ffn_w2"]) + params[f"{block}.ffn_b2"]


def encode(e_s: ad.Tensor, params: dict, config: ModelConfig) -> ad.Tensor:
    """Pre-norm self-attention block over super-cells, (B, M, d) -> (B, M, d)."""
    eps = config.ln_eps
    normed = _ln(e_s, params["enc.ln1_g"], params["enc.ln1_b"], eps)
    e_mid = _multi_head(normed, normed, params, "enc", config) + e_s
    normed2 = _ln(e_mid, params["enc.ln2_g"], params["enc.ln2_b"], eps)
    return _ffn(normed2, params, "enc") + e_mid


def decode(e_hat_s: ad.Tensor, mask: np.ndarray, params: dict,
           config: ModelConfig) -> ad.Tensor:
    """Masked cross-attention from cell queries to super-cells, -> (B, N, d).

    The assignment mask multiplies the attention weights after the softmax;
    with renorm_mask the surviving weights are rescaled to sum to one, which
    makes a one-hot mask route each cell exclusively to its own super-cell.
    The final residual adds the normalized (not raw) intermediate state.
    """
    eps = config.ln_eps
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != (config.n_cells, config.n_supercells):
        raise DataError(f"mask must be (N={config.n_cells}, M={config.n_supercells})")
    q_in = _ln(params["cells.table"], params["dec.ln_q_g"], params["dec.ln_q_b"], eps)
    kv_in = _ln(e_hat_s, params["dec.ln_kv_g"], params["dec.ln_kv_b"], eps)
    mhca = _multi_head(q_in, kv_in, params, "dec", config, mask=mask)
    e_mid = mhca + params["cells.table"]
    normed = _ln(e_mid, params["dec.ln3_g"], params["dec.ln3_b"], eps)
    return _ffn(normed, params, "dec") + normed


def predict_params(e_hat_g: ad.Tensor, params: dict,
                   config: ModelConfig) -> zinb.ZINBParams:
    """Per-pair ZINB parameter fields from cell embeddings, each (B, N, N, tau).

    The pair feature is [A e_i || B e_j]; equivalently each head splits into
    an origin part applied to A e_i and a destination part applied to B e_j,
    which is how the quadratic blowup stays out of the matmuls. Outputs are
    squashed smoothly into the clamp domains so downstream logs stay finite.
    """
    d, tau = config.d, config.horizon
    u = ad.matmul(e_hat_g, params["head.a_map"]) + params["head.a_bias"]
    w = ad.matmul(e_hat_g, params["head.b_map"]) + params["head.b_bias"]

    def pair_field(name: str) -> ad.Tensor:
        wu = params[f"head.{name}_w"][:d]
        wv = params[f"head.{name}_w"][d:]
        left = ad.matmul(u, wu)    # (..., N, tau)
        right = ad.matmul(w, wv)
        shape_l = left.shape[:-2] + (left.shape[-2], 1, tau)
        shape_r = right.shape[:-2] + (1, right.shape[-2], tau)
        return left.reshape(shape_l) + right.reshape(shape_r) + params[f"head.{name}_b"]

    n = ad.softplus(pair_field("n")) + N_FLOOR
    p = P_EPS + (1.0 - 2.0 * P_EPS) * ad.sigmoid(pair_field("p"))
    pi = PI_FLOOR + (1.0 - 2e-6 - PI_FLOOR) * ad.sigmoid(pair_field("pi"))
    return zinb.ZINBParams(n, p, pi)


def coarsen_history(x_hist: np.ndarray, assignment: Assignment) -> np.ndarray:
    """Contract both spatial axes of (B, N, N, K) histories, -> (B, M, M, K)."""
    x_hist, squeeze = _with_batch(np.asarray(x_hist, dtype=np.float64), 4)
    y = assignment.data
    out = np.einsum("bijk,ia,jc->back", x_hist, y, y, optimize=True)
    return out[0] if squeeze else out


def forward(x_hist: np.ndarray, assignment: Assignment, poi_s: np.ndarray,
            params: dict, config: ModelConfig) -> zinb.ZINBParams:
    """Full model: histories (B, N, N, K) to ZINB fields (B, N, N, tau)."""
    x_hist, squeeze = _with_batch(np.asarray(x_hist, dtype=np.float64), 4)
    x_s = coarsen_history(x_hist, assignment)
    e_od = od_embed(x_s, params, config)
    e_s = e_od + poi_embed(poi_s, params)
    e_hat_s = encode(e_s, params, config)
    e_hat_g = decode(e_hat_s, assignment.data, params, config)
    out = predict_params(e_hat_g, params, config)
    if squeeze:
        return zinb.ZINBParams(out.n[0], out.p[0], out.pi[0])
    return out


class ForecastModel:
    """Stateful wrapper: config, parameters, and the frozen data-side buffers."""

    def __init__(self, config: ModelConfig, assignment: Assignment,
                 poi: POIMatrix, seed: int = 0, params: dict | None = None):
        if assignment.n_cells != config.n_cells:
            raise DataError("assignment rows do not match config.n_cells")
        if assignment.n_supercells != config.n_supercells:
            raise DataError("assignment columns do not match config.n_supercells")
        if poi.n_regions == config.n_cells and config.n_cells != config.n_supercells:
            poi = aggregate_poi(poi, assignment)
        if poi.n_regions != config.n_supercells:
            raise DataError("POI rows match neither cells nor super-cells")
        if poi.n_categories != config.poi_dim:
            raise DataError(f"POI has {poi.n_categories} categories, "
                            f"config.poi_dim={config.poi_dim}")
        self.config = config
        self.assignment = assignment
        self.poi = poi
        self.params = params if params is not None else init_params(config, seed)

    def forward(self, x_hist: np.ndarray) -> zinb.ZINBParams:
        return forward(x_hist, self.assignment, self.poi.data, self.params, self.config)

    def nll(self, x_hist: np.ndarray, x_future: np.ndarray) -> ad.Tensor:
        """Summed NLL of the future block under the predicted fields."""
        return zinb.nll(np.asarray(x_future, dtype=np.float64), self.forward(x_hist))

    def predict_mean(self, x_hist: np.ndarray, zero_inflated: bool = False) -> np.ndarray:
        return zinb.mean(self.forward(x_hist), zero_inflated=zero_inflated)

    def count_params(self) -> int:
        return count_params(self.params)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def state_tensors(self) -> dict:
        state = {name: t.values for name, t in self.params.items()}
        state["buffer.assignment"] = self.assignment.data
        state["buffer.poi"] = self.poi.data
        return state

    def save(self, path) -> None:
        ad.save_named_tensors(path, self.state_tensors(),
                              meta={"format": "od-forecast-checkpoint-v1",
                                    "config": self.config.to_dict()})

    @classmethod
    def load(cls, path) -> "ForecastModel":
        tensors, meta = ad.load_named_tensors(path)
        config = ModelConfig.from_dict(meta["config"])
        assignment = Assignment(tensors.pop("buffer.assignment"))
        poi = POIMatrix(tensors.pop("buffer.poi"))
        params = {name: ad.Tensor(v, requires_grad=True)
                  for name, v in tensors.items()}
        expected = set(init_params(config, seed=0))
        if set(params) != expected:
            raise DataError("checkpoint parameter names do not match the config")
        return cls(config, assignment, poi, params=params)
