"""Per-cell loss functions and their derivative bundles.

Single-index families depend on the data only through v = x'theta + pi, so
every theta-derivative is a multiple of x. The random-coefficient logit is a
simulated mixture over R fixed standard-normal draws per cell; its parameter
vector is ``theta = (beta_bar, vech(C))`` with C the lower Cholesky factor of
the coefficient covariance (vech stacks ``np.tril_indices(p)`` row by row).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_ndtr, logsumexp

from .errors import UnsupportedFamilyError, ValidationError
from .panel import Family, ModelSpec, PanelData

PROB_CLAMP = 1e-12


@dataclass
class DerivativeBundle:
    """Derivatives of the loss at one cell, or stacked over cells along the
    leading axes. ``q`` is the length of theta."""

    d_pi: np.ndarray
    d_pi2: np.ndarray
    d_pi3: np.ndarray
    d_theta: np.ndarray  # (..., q)
    d_theta_theta: np.ndarray  # (..., q, q)
    d_theta_pi: np.ndarray  # (..., q)
    d_theta_pi2: np.ndarray  # (..., q)

    def masked(self, mask):
        """Zero every entry at unobserved cells."""
        m = np.asarray(mask, dtype=float)
        return DerivativeBundle(
            self.d_pi * m,
            self.d_pi2 * m,
            self.d_pi3 * m,
            self.d_theta * m[..., None],
            self.d_theta_theta * m[..., None, None],
            self.d_theta_pi * m[..., None],
            self.d_theta_pi2 * m[..., None],
        )

    def cell(self, i, t) -> "DerivativeBundle":
        return DerivativeBundle(*(np.asarray(getattr(self, f))[i, t] for f in self.__dataclass_fields__))


# ---------------------------------------------------------------------------
# single-index families


class SingleIndexLoss:
    """Loss l(y, v) of the scalar index v. Subclasses provide the value and the
    first three v-derivatives."""

    family: Family

    def n_theta(self, p):
        return p

    def index_loss(self, y, v):
        raise NotImplementedError

    def index_derivs(self, y, v):
        """Return (l', l'', l''') with respect to v."""
        raise NotImplementedError

    def h(self, y, v):
        return self.index_derivs(y, v)[0]

    def value(self, Y, X, theta, Pi):
        return self.index_loss(Y, _index(X, theta) + Pi)

    def pi_derivatives(self, Y, X, theta, Pi):
        d1, d2, _ = self.index_derivs(Y, _index(X, theta) + Pi)
        return d1, d2

    def theta_grad_hess(self, Y, X, theta, Pi, mask):
        """Sums over ``mask`` of d_theta and d_theta_theta."""
        d1, d2, _ = self.index_derivs(Y, _index(X, theta) + Pi)
        Xm = np.asarray(X, dtype=float)[:, mask]
        return Xm @ d1[mask], (Xm * d2[mask]) @ Xm.T

    def derivatives(self, Y, X, theta, Pi) -> DerivativeBundle:
        d1, d2, d3 = self.index_derivs(Y, _index(X, theta) + Pi)
        x = np.moveaxis(np.asarray(X, dtype=float), 0, -1)
        return DerivativeBundle(
            d_pi=d1,
            d_pi2=d2,
            d_pi3=d3,
            d_theta=x * d1[..., None],
            d_theta_theta=x[..., :, None] * x[..., None, :] * d2[..., None, None],
            d_theta_pi=x * d2[..., None],
            d_theta_pi2=x * d3[..., None],
        )


def _index(X, theta):
    X = np.asarray(X, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if X.shape[0] == 0:
        return np.zeros(X.shape[1:])
    return np.tensordot(theta, X, axes=1)


class LinearLoss(SingleIndexLoss):
    family = Family.LINEAR

    def index_loss(self, y, v):
        return 0.5 * (y - v) ** 2

    def index_derivs(self, y, v):
        r = v - y
        return r, np.ones_like(r), np.zeros_like(r)


class LogitLoss(SingleIndexLoss):
    """Negative logistic log-likelihood, computed as softplus(v) - y v, which
    never takes the log of a zero probability."""

    family = Family.LOGIT

    def index_loss(self, y, v):
        return np.logaddexp(0.0, v) - y * v

    def index_derivs(self, y, v):
        p = expit(v)
        s = p * (1.0 - p)
        return p - y, s, s * (1.0 - 2.0 * p)


class ProbitLoss(SingleIndexLoss):
    """Binary choice with a standard normal CDF."""

    family = Family.BINARY

    def index_loss(self, y, v):
        u = (2.0 * y - 1.0) * v
        # log_ndtr is finite for every finite u, so no probability clamp is needed
        return -log_ndtr(u)

    def index_derivs(self, y, v):
        q = 2.0 * y - 1.0
        u = q * v
        mills = np.exp(-0.5 * u**2 - 0.5 * np.log(2 * np.pi) - log_ndtr(u))
        g1 = -mills
        g2 = mills * (u + mills)
        g3 = mills - mills * (u + mills) * (u + 2.0 * mills)
        return q * g1, g2, q * g3


class ClampedBinaryLoss(SingleIndexLoss):
    """Binary choice -[y log F + (1-y) log(1-F)] for a logistic F with the
    probability clamped to [1e-12, 1 - 1e-12]; the CDF-tag variant of the logit."""

    family = Family.BINARY

    def index_loss(self, y, v):
        F = np.clip(expit(v), PROB_CLAMP, 1 - PROB_CLAMP)
        return -(y * np.log(F) + (1 - y) * np.log1p(-F))

    def index_derivs(self, y, v):
        g1, g2, g3 = LogitLoss.index_derivs(self, y, v)
        # where the clamp binds on the term that enters the loss, the loss is flat
        p = expit(v)
        flat = ((y == 1) & (p < PROB_CLAMP)) | ((y == 0) & (p > 1 - PROB_CLAMP))
        return tuple(np.where(flat, 0.0, g) for g in (g1, g2, g3))


class SmoothedQuantileLoss(SingleIndexLoss):
    """rho(u) = u (tau - K(-u/h)) with u = y - v and K the logistic CDF."""

    family = Family.QUANTILE

    def __init__(self, tau, bandwidth):
        self.tau = float(tau)
        self.h_bw = float(bandwidth)

    def index_loss(self, y, v):
        u = y - v
        return u * (self.tau - expit(-u / self.h_bw))

    def index_derivs(self, y, v):
        h = self.h_bw
        u = y - v
        lam = expit(-u / h)
        k = lam * (1 - lam)
        k1 = k * (1 - 2 * lam)
        k2 = k * (1 - 6 * lam + 6 * lam**2)
        r1 = self.tau - lam + u * k / h
        r2 = 2 * k / h - u * k1 / h**2
        r3 = -3 * k1 / h**2 + u * k2 / h**3
        return -r1, r2, -r3


# ---------------------------------------------------------------------------
# random-coefficient logit


def rc_n_theta(p):
    return p + p * (p + 1) // 2


def rc_pack(beta_bar, chol):
    beta_bar = np.asarray(beta_bar, dtype=float)
    p = beta_bar.size
    chol = np.asarray(chol, dtype=float).reshape(p, p)
    return np.concatenate([beta_bar, chol[np.tril_indices(p)]])


def rc_unpack(theta, p):
    theta = np.asarray(theta, dtype=float)
    if theta.size != rc_n_theta(p):
        raise ValidationError(f"random-coefficient theta needs {rc_n_theta(p)} entries, got {theta.size}")
    C = np.zeros((p, p))
    C[np.tril_indices(p)] = theta[p:]
    return theta[:p].copy(), C


def rc_theta_dim_from(q):
    """Invert q = p + p(p+1)/2."""
    p = 0
    while rc_n_theta(p) < q:
        p += 1
    if rc_n_theta(p) != q:
        raise ValidationError(f"{q} is not a valid random-coefficient parameter length")
    return p


@dataclass
class RcLogitParams:
    """Mean and Cholesky factor of the coefficient law plus the standard
    normal draws (N, T, R, p) that realize it."""

    beta_bar: np.ndarray
    sigma_chol: np.ndarray
    draws: np.ndarray

    def __post_init__(self):
        self.beta_bar = np.asarray(self.beta_bar, dtype=float)
        self.sigma_chol = np.asarray(self.sigma_chol, dtype=float)
        if np.any(np.triu(self.sigma_chol, 1) != 0):
            raise ValidationError("sigma_chol must be lower triangular")

    @property
    def theta(self):
        return rc_pack(self.beta_bar, self.sigma_chol)

    @property
    def sigma(self):
        return self.sigma_chol @ self.sigma_chol.T

    def positive_definite(self) -> bool:
        return bool(np.all(np.diag(self.sigma_chol) > 0))


def standard_draws(N, T, R, p, seed) -> np.ndarray:
    """Common random numbers: (N, T, R, p) standard normals from one seed."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    return rng.standard_normal((N, T, R, p))


def _rc_cell_terms(y, x, e, beta_bar, C, pi):
    """Per-draw index and log-likelihood for flattened cells.

    y, pi: (n,), x: (n, p), e: (n, R, p). Returns v (n, R) and a = log L (n, R).
    """
    shift = np.einsum("nrk,jk->nrj", e, C)
    v = (x @ beta_bar + pi)[:, None] + np.einsum("nrj,nj->nr", shift, x)
    a = y[:, None] * v - np.logaddexp(0.0, v)
    return v, a


def _rc_z(x, e):
    """d v_r / d theta for every draw: (n, R, q)."""
    n, R, p = e.shape
    rows, cols = np.tril_indices(p)
    zc = x[:, None, rows] * e[:, :, cols]
    return np.concatenate([np.broadcast_to(x[:, None, :], (n, R, p)), zc], axis=2)


class RcLogitLoss:
    """Simulated negative log-likelihood -log((1/R) sum_r L(x'beta_r + pi)),
    beta_r = beta_bar + C e_r, with e fixed for the lifetime of the object."""

    family = Family.RCLOGIT
    chunk = 2048

    def __init__(self, draws):
        draws = np.asarray(draws, dtype=float)
        if draws.ndim != 4:
            raise ValidationError("draws must have shape (N, T, R, p)")
        self.draws = draws

    @property
    def R(self):
        return self.draws.shape[2]

    def n_theta(self, p):
        return rc_n_theta(p)

    def _flat(self, Y, X, theta, Pi):
        X = np.asarray(X, dtype=float)
        p = X.shape[0]
        shape = np.shape(Y)
        beta_bar, C = rc_unpack(theta, p)
        y = np.asarray(Y, float).reshape(-1)
        x = np.moveaxis(X, 0, -1).reshape(-1, p)
        e = self.draws.reshape(-1, self.R, p)
        if e.shape[0] != y.size:
            raise ValidationError(f"draws cover {e.shape[0]} cells, panel has {y.size}")
        pi = np.broadcast_to(np.asarray(Pi, float), shape).reshape(-1)
        return shape, y, x, e, beta_bar, C, pi

    def log_weights(self, Y, X, theta, Pi):
        """log w_r per cell, (N, T, R); normalized in log space."""
        shape, y, x, e, b, C, pi = self._flat(Y, X, theta, Pi)
        _, a = _rc_cell_terms(y, x, e, b, C, pi)
        return (a - logsumexp(a, axis=1, keepdims=True)).reshape(shape + (self.R,))

    def value(self, Y, X, theta, Pi):
        shape, y, x, e, b, C, pi = self._flat(Y, X, theta, Pi)
        _, a = _rc_cell_terms(y, x, e, b, C, pi)
        return (np.log(self.R) - logsumexp(a, axis=1)).reshape(shape)

    def pi_derivatives(self, Y, X, theta, Pi):
        shape, y, x, e, b, C, pi = self._flat(Y, X, theta, Pi)
        v, a = _rc_cell_terms(y, x, e, b, C, pi)
        w = np.exp(a - logsumexp(a, axis=1, keepdims=True))
        p_ = expit(v)
        bb = y[:, None] - p_
        Eb = (w * bb).sum(1)
        Ec = -(w * p_ * (1 - p_)).sum(1)
        Eb2 = (w * bb**2).sum(1)
        return (-Eb).reshape(shape), (-(Ec + Eb2 - Eb**2)).reshape(shape)

    def h(self, Y, X, theta, Pi):
        return self.pi_derivatives(Y, X, theta, Pi)[0]

    def theta_grad_hess(self, Y, X, theta, Pi, mask):
        """Sums over ``mask`` of d_theta and d_theta_theta, without the
        third-order terms of the full bundle."""
        shape, y, x, e, beta_bar, C, pi = self._flat(Y, X, theta, Pi)
        idx = np.flatnonzero(np.asarray(mask).reshape(-1))
        q = rc_n_theta(x.shape[1])
        g, H = np.zeros(q), np.zeros((q, q))
        for lo in range(0, idx.size, self.chunk):
            sl = idx[lo:lo + self.chunk]
            v, a = _rc_cell_terms(y[sl], x[sl], e[sl], beta_bar, C, pi[sl])
            w = np.exp(a - logsumexp(a, axis=1, keepdims=True))
            p_ = expit(v)
            b = y[sl][:, None] - p_
            z = _rc_z(x[sl], e[sl])
            Ebz = np.einsum("nr,nrq->nq", w * b, z)
            g -= Ebz.sum(0)
            zf = z.reshape(-1, q)
            H -= (zf * (w * (b**2 - p_ * (1 - p_))).reshape(-1)[:, None]).T @ zf - Ebz.T @ Ebz
        return g, H

    def derivatives(self, Y, X, theta, Pi) -> DerivativeBundle:
        shape, y, x, e, beta_bar, C, pi = self._flat(Y, X, theta, Pi)
        n = y.size
        q = rc_n_theta(x.shape[1])
        out = {
            "d_pi": np.empty(n),
            "d_pi2": np.empty(n),
            "d_pi3": np.empty(n),
            "d_theta": np.empty((n, q)),
            "d_theta_theta": np.empty((n, q, q)),
            "d_theta_pi": np.empty((n, q)),
            "d_theta_pi2": np.empty((n, q)),
        }
        for lo in range(0, n, self.chunk):
            sl = slice(lo, min(lo + self.chunk, n))
            part = _rc_derivs(y[sl], x[sl], e[sl], beta_bar, C, pi[sl])
            for k, val in part.items():
                out[k][sl] = val
        return DerivativeBundle(
            d_pi=out["d_pi"].reshape(shape),
            d_pi2=out["d_pi2"].reshape(shape),
            d_pi3=out["d_pi3"].reshape(shape),
            d_theta=out["d_theta"].reshape(shape + (q,)),
            d_theta_theta=out["d_theta_theta"].reshape(shape + (q, q)),
            d_theta_pi=out["d_theta_pi"].reshape(shape + (q,)),
            d_theta_pi2=out["d_theta_pi2"].reshape(shape + (q,)),
        )


def _rc_derivs(y, x, e, beta_bar, C, pi):
    # l = log R - log sum_r exp(a_r); with A_u = a' dv_r/du etc. the mixed
    # derivatives of log-sum-exp are joint cumulants under the weights w.
    v, a = _rc_cell_terms(y, x, e, beta_bar, C, pi)
    w = np.exp(a - logsumexp(a, axis=1, keepdims=True))
    p_ = expit(v)
    b = y[:, None] - p_
    c = -p_ * (1 - p_)
    d = c * (1 - 2 * p_)
    z = _rc_z(x, e)

    def E(f):
        return (w * f).sum(1)

    def Ez(f):
        return np.einsum("nr,nrq->nq", w * f, z)

    Eb, Ec, Ed = E(b), E(c), E(d)
    Eb2, Eb3, Ebc = E(b**2), E(b**3), E(b * c)
    Ebz = Ez(b)
    Ecz = Ez(c)
    Eb2z = Ez(b**2)
    K_pp = Ec + Eb2 - Eb**2
    K_ppp = Ed + 3 * (Ebc - Ec * Eb) + Eb3 - 3 * Eb2 * Eb + 2 * Eb**3
    K_tt = np.einsum("nr,nrj,nrk->njk", w * (c + b**2), z, z) - Ebz[:, :, None] * Ebz[:, None, :]
    K_tp = Ecz + Eb2z - Ebz * Eb[:, None]
    K_tpp = (
        Ez(d)
        + 3 * Ez(b * c)
        - 2 * Ecz * Eb[:, None]
        - Ec[:, None] * Ebz
        + Ez(b**3)
        - 2 * Eb2z * Eb[:, None]
        - Eb2[:, None] * Ebz
        + 2 * Ebz * (Eb**2)[:, None]
    )
    return {
        "d_pi": -Eb,
        "d_pi2": -K_pp,
        "d_pi3": -K_ppp,
        "d_theta": -Ebz,
        "d_theta_theta": -K_tt,
        "d_theta_pi": -K_tp,
        "d_theta_pi2": -K_tpp,
    }


# ---------------------------------------------------------------------------
# construction and scalar API


def make_loss(spec: ModelSpec, N=None, T=None, draws=None):
    fam = spec.family
    if fam is Family.LINEAR:
        return LinearLoss()
    if fam is Family.LOGIT:
        return LogitLoss()
    if fam is Family.BINARY:
        return ProbitLoss() if spec.cdf == "normal" else ClampedBinaryLoss()
    if fam is Family.QUANTILE:
        bw = spec.bandwidth
        if bw is None:
            if N is None or T is None:
                raise ValidationError("quantile bandwidth default needs N and T")
            bw = min(N, T) ** (-0.2)
        return SmoothedQuantileLoss(spec.tau, bw)
    if fam is Family.RCLOGIT:
        if draws is None:
            raise ValidationError("random-coefficient logit needs draws")
        return RcLogitLoss(draws)
    raise UnsupportedFamilyError(f"unknown family {fam}")


def _cell_args(x, draws):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    X = x.reshape(-1, 1, 1)
    if draws is not None:
        draws = np.asarray(draws, dtype=float).reshape(1, 1, -1, x.size)
    return X, draws


def _check_finite(*vals):
    for v in vals:
        if not np.all(np.isfinite(np.asarray(v, dtype=float))):
            raise ValidationError("non-finite input to loss")


def cell_loss(spec: ModelSpec, y, x, theta, pi, draws=None) -> float:
    """Loss at a single cell. For the random-coefficient logit ``draws`` is an
    (R, p) array of standard normals and theta is (beta_bar, vech C)."""
    _check_finite(y, x, theta, pi)
    X, draws = _cell_args(x, draws)
    loss = make_loss(spec, N=1, T=1, draws=draws)
    return float(loss.value(np.array([[y]], float), X, theta, np.array([[pi]], float))[0, 0])


def cell_derivatives(spec: ModelSpec, y, x, theta, pi, draws=None) -> DerivativeBundle:
    _check_finite(y, x, theta, pi)
    X, draws = _cell_args(x, draws)
    loss = make_loss(spec, N=1, T=1, draws=draws)
    bundle = loss.derivatives(np.array([[y]], float), X, theta, np.array([[pi]], float))
    return bundle.cell(0, 0)


def rc_weights(y, x, params: RcLogitParams, pi) -> np.ndarray:
    """Posterior weights w_r = L(beta_r, pi) / sum_r' L(beta_r', pi) at one cell;
    ``params.draws`` is an (R, p) array. Computed in log space so that
    underflowing likelihoods still normalize."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    e = np.asarray(params.draws, dtype=float).reshape(1, -1, x.size)
    _, a = _rc_cell_terms(
        np.array([float(y)]), x[None], e, params.beta_bar, params.sigma_chol, np.array([float(pi)])
    )
    return np.exp(a[0] - logsumexp(a[0]))


def aggregate_loss(spec: ModelSpec, panel: PanelData, theta, Pi, draws=None, loss=None) -> float:
    """Mean cell loss over observed cells."""
    if loss is None:
        loss = make_loss(spec, panel.N, panel.T, draws=draws)
    vals = loss.value(panel.Y, panel.X, theta, Pi)
    return float(vals[panel.mask].sum() / panel.n_obs)
