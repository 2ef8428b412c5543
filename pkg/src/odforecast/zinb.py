"""Zero-inflated negative binomial likelihood, sampling, and point prediction.

Parameterization: f_NB(x; n, p) = C(x+n-1, x) p^n (1-p)^x, so the NB mean is
n(1-p)/p. The zero-inflated pmf mixes a point mass pi at zero with the NB:
pmf(0) = pi + (1-pi) f_NB(0), pmf(x>0) = (1-pi) f_NB(x). All log-pmf math
runs through log-gamma, never factorials.

Accepted domains match the head clamps: n >= 1e-6, p in [1e-6, 1-1e-6],
pi in [0, 1-1e-6].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from . import autodiff as ad

N_MIN = 1e-6
P_MIN = 1e-6
P_MAX = 1.0 - 1e-6
PI_MAX = 1.0 - 1e-6


def _validate(n, p, pi) -> None:
    n, p, pi = np.asarray(n), np.asarray(p), np.asarray(pi)
    if (n < N_MIN).any() or not np.isfinite(n).all():
        raise ValueError(f"n must lie in [{N_MIN}, inf)")
    if (p < P_MIN).any() or (p > P_MAX).any():
        raise ValueError(f"p must lie in [{P_MIN}, {P_MAX}]")
    if (pi < 0.0).any() or (pi > PI_MAX).any():
        raise ValueError(f"pi must lie in [0, {PI_MAX}]")


def _validate_counts(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if (x < 0).any() or not np.isfinite(x).all() or (x != np.floor(x)).any():
        raise ValueError("counts must be non-negative integers")
    return x


@dataclass(frozen=True)
class ZINBParams:
    """Distribution parameter triple; fields are autodiff tensors.

    Shapes must broadcast against the observed count array. Values are
    validated against the clamp domains at construction.
    """

    n: ad.Tensor
    p: ad.Tensor
    pi: ad.Tensor

    def __post_init__(self):
        object.__setattr__(self, "n", ad.as_tensor(self.n))
        object.__setattr__(self, "p", ad.as_tensor(self.p))
        object.__setattr__(self, "pi", ad.as_tensor(self.pi))
        _validate(self.n.values, self.p.values, self.pi.values)

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.n.values, self.p.values, self.pi.values


def nb_log_pmf(x, n, p) -> np.ndarray:
    """Plain negative binomial log-pmf (no inflation)."""
    x = _validate_counts(x)
    n = np.asarray(n, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    return (gammaln(x + n) - gammaln(n) - gammaln(x + 1.0)
            + n * np.log(p) + x * np.log1p(-p))


def log_pmf(x, n, p, pi) -> np.ndarray:
    """Zero-inflated NB log-pmf, exact at pi = 0 (reduces to the NB)."""
    x = _validate_counts(x)
    _validate(n, p, pi)
    n = np.asarray(n, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    pi = np.asarray(pi, dtype=np.float64)
    nb = nb_log_pmf(x, n, p)
    with np.errstate(divide="ignore"):
        zero = np.logaddexp(np.log(pi), np.log1p(-pi) + n * np.log(p))
    pos = np.log1p(-pi) + nb
    return np.where(x == 0, zero, pos)


def nll(x, params: ZINBParams) -> ad.Tensor:
    """Differentiable negative log-likelihood, summed over all entries.

    x is a constant count array; surfaces producing the parameters receive
    gradients through the returned scalar. The x = 0 branch is assembled in
    log space (log-sum-exp), and both branches stay finite everywhere inside
    the parameter domains, so masking never mixes NaNs in.
    """
    x = _validate_counts(x)
    n, p, pi = params.n, params.p, params.pi
    if (pi.values <= 0.0).any() and pi.requires_grad:
        raise ValueError("gradient path requires pi > 0 (use a floored head)")

    log_p = ad.log(p)
    log_1mp = ad.log(1.0 - p)
    log_1mpi = ad.log(1.0 - pi)
    nb = (ad.gammaln(x + n) - ad.gammaln(n) - gammaln(x + 1.0)
          + n * log_p + x * log_1mp)
    with np.errstate(divide="ignore"):
        zero_term = ad.logaddexp(ad.log(pi), log_1mpi + n * log_p)
    pos_term = log_1mpi + nb
    mask0 = (x == 0).astype(np.float64)
    log_lik = mask0 * zero_term + (1.0 - mask0) * pos_term
    return -log_lik.sum()


def mean(params_or_n, p=None, pi=None, zero_inflated: bool = False) -> np.ndarray:
    """Point prediction: the NB mean n(1-p)/p.

    The default deliberately ignores the inflation mass, which targets the
    demand level of slots where travel actually happens; zero_inflated=True
    scales by (1-pi) to predict the marginal mean instead.
    """
    if isinstance(params_or_n, ZINBParams):
        n, p, pi = params_or_n.arrays()
    else:
        n = params_or_n
    _validate(n, p, 0.0 if pi is None else pi)
    n = np.asarray(n, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    out = (1.0 / p - 1.0) * n
    if zero_inflated:
        if pi is None:
            raise ValueError("zero_inflated mean needs pi")
        out = (1.0 - np.asarray(pi, dtype=np.float64)) * out
    return out


def sample(rng: np.random.Generator, n, p, pi, size=None) -> np.ndarray:
    """Draw ZINB counts: NB draws zeroed out with probability pi."""
    _validate(n, p, pi)
    counts = rng.negative_binomial(n, p, size=size).astype(np.float64)
    keep = rng.random(size=counts.shape) >= np.asarray(pi, dtype=np.float64)
    return counts * keep
