"""Integrated (observed-data) likelihood machinery.

The likelihood of the data with factors integrated out analytically and
log-volatility paths integrated out by importance sampling: a Gaussian
importance density is built from the mode of p(h | y, params) (found by an
EM algorithm whose M-step is banded Newton-Raphson) and the negative Hessian
at the mode.  Two Hessian routes are available: the EM decomposition (always
positive definite, the default) and direct differentiation of the log target.

Throughout, `h` is stored (T, n+r) with the idiosyncratic block first;
stacked vectors interleave time-major, matching the banded state precision.
"""

from dataclasses import dataclass

import numpy as np

from .bandlin import BandSymMatrix, GaussianInPrecisionForm, band_add
from .exceptions import (
    DegenerateWeightsError,
    MaxIterationsExceededError,
    NonStationaryError,
    NotPositiveDefiniteError,
    NumericalError,
)

_LOG2PI = np.log(2.0 * np.pi)


def residuals(y, x, beta):
    """VAR residuals y_t - (I kron x_t') beta, shape (T, n)."""
    n = y.shape[1]
    bmat = np.asarray(beta, dtype=float).reshape(n, -1)
    return y - x @ bmat.T


# ---------------------------------------------------------------------------
# state prior


@dataclass(frozen=True)
class StatePriorAssembly:
    """Stacked state-equation representation of p(h | mu, phi, sig2).

    mean      m, the stacked unconditional mean (idiosyncratic blocks mu,
              factor blocks zero)
    s_diag    diagonal of S: innovation variances, with the first time block
              scaled to the stationary variance sig2 / (1 - phi^2)
    precision the banded matrix H' S^{-1} H (H has unit diagonal, so the
              precision log-determinant is -log|S|)
    """

    mean: np.ndarray
    s_diag: np.ndarray
    phi: np.ndarray
    precision: BandSymMatrix
    log_det_precision: float

    @classmethod
    def build(cls, mu, phi, sig2, T):
        mu = np.asarray(mu, dtype=float)
        phi = np.asarray(phi, dtype=float)
        sig2 = np.asarray(sig2, dtype=float)
        if np.any(np.abs(phi) >= 1.0):
            raise NonStationaryError("|phi| must be < 1")
        if np.any(sig2 <= 0):
            raise ValueError("sig2 must be positive")
        d = len(phi)
        n = len(mu)
        mean = np.tile(np.concatenate([mu, np.zeros(d - n)]), T)
        s_diag = np.tile(sig2, T)
        s_diag[:d] = sig2 / (1.0 - phi**2)
        bands = np.zeros((d + 1 if T > 1 else 1, T * d))
        bands[0] = 1.0 / s_diag
        if T > 1:
            bands[0, : (T - 1) * d] += np.tile(phi**2 / sig2, T - 1)
            bands[d, : (T - 1) * d] = np.tile(-phi / sig2, T - 1)
        log_det = float(-T * np.sum(np.log(sig2)) + np.sum(np.log1p(-(phi**2))))
        return cls(mean, s_diag, phi, BandSymMatrix(bands), log_det)


def log_state_prior(h, mu, phi, sig2):
    """Exact Gaussian log-density of the stacked log-volatility paths.

    h has shape (T, d) or (batch, T, d); returns a scalar or (batch,).
    """
    h = np.asarray(h, dtype=float)
    mu = np.asarray(mu, dtype=float)
    phi = np.asarray(phi, dtype=float)
    sig2 = np.asarray(sig2, dtype=float)
    if np.any(np.abs(phi) >= 1.0):
        raise NonStationaryError("|phi| must be < 1")
    T, d = h.shape[-2], h.shape[-1]
    m = np.concatenate([mu, np.zeros(d - len(mu))])
    dev = h - m
    quad = np.sum((1.0 - phi**2) / sig2 * dev[..., 0, :] ** 2, axis=-1)
    if T > 1:
        innov = dev[..., 1:, :] - phi * dev[..., :-1, :]
        quad = quad + np.sum(innov**2 / sig2, axis=(-2, -1))
    log_det = -T * np.sum(np.log(sig2)) + np.sum(np.log1p(-(phi**2)))
    return -0.5 * T * d * _LOG2PI + 0.5 * log_det - 0.5 * quad


# ---------------------------------------------------------------------------
# conditional likelihood p(y | beta, L, h), factors integrated out


def log_cond_likelihood(y, x, beta, load, h):
    """Sum over t of log N(y_t; (I kron x_t')beta, L Omega_t L' + Sigma_t).

    h may be (T, n+r) or batched (R, T, n+r); returns scalar or (R,).
    The diagonal-plus-low-rank structure is exploited through the Woodbury
    identity when r is small relative to n.
    """
    y = np.asarray(y, dtype=float)
    load = np.atleast_2d(np.asarray(load, dtype=float))
    n, r = load.shape
    eps = residuals(y, x, beta)
    h = np.asarray(h, dtype=float)
    batched = h.ndim == 3
    hh = h if batched else h[None]
    out = _log_cond_batch(eps, load, hh, n, r)
    return out if batched else float(out[0])


def _log_cond_batch(eps, load, h, n, r):
    T = eps.shape[0]
    hy = h[:, :, :n]
    hf = h[:, :, n:]
    if r == 0:
        quad = np.sum(eps**2 * np.exp(-hy), axis=(1, 2))
        logdet = np.sum(hy, axis=(1, 2))
        return -0.5 * T * n * _LOG2PI - 0.5 * logdet - 0.5 * quad
    if 2 * r < n:
        ehy = np.exp(-hy)  # (R, T, n)
        ehf = np.exp(-hf)  # (R, T, r)
        K = np.einsum("btn,nj,nk->btjk", ehy, load, load)
        K[..., np.arange(r), np.arange(r)] += ehf
        b = np.einsum("btn,nj->btj", ehy * eps, load)
        try:
            ck = np.linalg.cholesky(K)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefiniteError("factor-block matrix not PD") from exc
        logdet = np.sum(hy, axis=(1, 2)) + np.sum(hf, axis=(1, 2)) + 2.0 * np.sum(
            np.log(np.diagonal(ck, axis1=-2, axis2=-1)), axis=(1, 2)
        )
        quad = np.sum(eps**2 * ehy, axis=(1, 2)) - np.sum(
            b * np.linalg.solve(K, b[..., None])[..., 0], axis=(1, 2)
        )
        return -0.5 * T * n * _LOG2PI - 0.5 * logdet - 0.5 * quad
    # dense route: n is small or r close to n
    G = np.einsum("btj,nj,mj->btnm", np.exp(hf), load, load)
    G[..., np.arange(n), np.arange(n)] += np.exp(hy)
    try:
        cg = np.linalg.cholesky(G)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError("observation covariance not PD") from exc
    logdet = 2.0 * np.sum(
        np.log(np.diagonal(cg, axis1=-2, axis2=-1)), axis=(1, 2)
    )
    rhs = np.broadcast_to(eps[..., None], G.shape[:2] + (n, 1))
    sol = np.linalg.solve(G, rhs)[..., 0]
    quad = np.einsum("tn,btn->b", eps, sol)
    return -0.5 * T * n * _LOG2PI - 0.5 * logdet - 0.5 * quad


# ---------------------------------------------------------------------------
# EM mode finding


@dataclass
class EmResult:
    h_hat: np.ndarray  # (T, n + r)
    n_em_iters: int
    n_newton_steps: int
    q_trace: list


def _estep(eps, load, h, n, r):
    """Conditional factor moments and the per-coordinate quadratic weights
    z-hat entering the Q function."""
    ehy = np.exp(-h[:, :n])
    if r == 0:
        return None, None, eps**2
    K = np.einsum("tn,nj,nk->tjk", ehy, load, load)
    K[:, np.arange(r), np.arange(r)] += np.exp(-h[:, n:])
    b = np.einsum("tn,nj->tj", ehy * eps, load)
    fhat = np.linalg.solve(K, b[..., None])[..., 0]
    kinv = np.linalg.inv(K)
    resid = eps - fhat @ load.T
    zy = resid**2 + np.einsum("nj,tjk,nk->tn", load, kinv, load)
    zf = fhat**2 + np.diagonal(kinv, axis1=1, axis2=2)
    return fhat, kinv, np.concatenate([zy, zf], axis=1)


def _q_value(prior, h_flat, zhat_flat):
    dev = h_flat - prior.mean
    return float(
        -0.5 * prior.precision.quad_form(dev)
        - 0.5 * np.sum(h_flat)
        - 0.5 * np.sum(zhat_flat * np.exp(-h_flat))
    )


def q_gradient(prior, h_flat, zhat_flat):
    dev = h_flat - prior.mean
    return -prior.precision.matvec(dev) - 0.5 * (1.0 - np.exp(-h_flat) * zhat_flat)


def neg_q_hessian(prior, h_flat, zhat_flat):
    """-H_Q: the banded state precision plus a positive diagonal; always PD."""
    return prior.precision.add_diagonal(0.5 * np.exp(-h_flat) * zhat_flat)


def em_mode(y, x, draw, h0=None, eps1=1e-4, eps2=1e-4, max_em=100, max_newton=50):
    """Mode of p(h | y, params) by EM with Newton-Raphson M-steps.

    The Q objective is asserted non-decreasing across EM iterations; a
    decrease beyond numerical tolerance raises NumericalError.
    """
    y = np.asarray(y, dtype=float)
    n, r = draw.n, draw.r
    T = y.shape[0]
    eps = residuals(y, x, draw.beta)
    prior = StatePriorAssembly.build(draw.mu, draw.phi, draw.sig2, T)
    if h0 is None:
        h = np.tile(np.concatenate([draw.mu, np.zeros(r)]), (T, 1))
    else:
        h = np.array(h0, dtype=float).reshape(T, n + r)
    h_flat = h.ravel()
    total_newton = 0
    q_trace = []
    for em_iter in range(1, max_em + 1):
        _, _, zhat = _estep(eps, draw.load, h_flat.reshape(T, n + r), n, r)
        z_flat = zhat.ravel()
        q_old = _q_value(prior, h_flat, z_flat)
        h_new, steps = _newton_max_q(prior, h_flat, z_flat, eps1, max_newton)
        total_newton += steps
        q_new = _q_value(prior, h_new, z_flat)
        if q_new < q_old - 1e-8 * (1.0 + abs(q_old)):
            raise NumericalError(
                f"M-step decreased Q: {q_old:.10g} -> {q_new:.10g}"
            )
        q_trace.append((q_old, q_new))
        delta = np.linalg.norm(h_new - h_flat)
        h_flat = h_new
        if delta < eps2:
            return EmResult(h_flat.reshape(T, n + r), em_iter, total_newton, q_trace)
    raise MaxIterationsExceededError(f"EM did not converge in {max_em} iterations")


def _newton_max_q(prior, h_flat, z_flat, tol, max_newton):
    h = h_flat.copy()
    q = _q_value(prior, h, z_flat)
    steps = 0
    for _ in range(max_newton):
        grad = q_gradient(prior, h, z_flat)
        step = neg_q_hessian(prior, h, z_flat).cholesky().solve(grad)
        # step-halving keeps Q non-decreasing within the M-step
        scale = 1.0
        for _ in range(40):
            h_try = h + scale * step
            q_try = _q_value(prior, h_try, z_flat)
            if q_try >= q - 1e-12 * (1.0 + abs(q)):
                break
            scale *= 0.5
        steps += 1
        moved = np.linalg.norm(h_try - h)
        h, q = h_try, q_try
        if moved < tol:
            break
    return h, steps


# ---------------------------------------------------------------------------
# Hessian routes


def hessian_em(h_hat, draw, y, x):
    """Negative Hessian at the mode from the EM identity
    log p(h | .) = Q(h|h) + H(h|h): banded, positive definite by construction
    (checked by the caller via factorization)."""
    y = np.asarray(y, dtype=float)
    n, r = draw.n, draw.r
    T = y.shape[0]
    h = np.asarray(h_hat, dtype=float).reshape(T, n + r)
    eps = residuals(y, x, draw.beta)
    prior = StatePriorAssembly.build(draw.mu, draw.phi, draw.sig2, T)
    _, kinv, zhat = _estep(eps, draw.load, h, n, r)
    neg_hq = neg_q_hessian(prior, h.ravel(), zhat.ravel())
    if r == 0:
        return neg_hq
    w = np.vstack([draw.load, np.eye(r)])  # (n+r, r)
    c = np.einsum("dj,tjk,ek->tde", w, kinv, w)
    z = np.exp(-h)[:, :, None] * c
    neg_hh = 0.5 * z.transpose(0, 2, 1) * (np.eye(n + r) - z)
    return band_add(neg_hq, BandSymMatrix.from_blocks(neg_hh))


def hessian_direct(h_hat, draw, y, x):
    """Negative Hessian of log p(y|h) + log p(h) by direct differentiation;
    banded but not guaranteed positive definite away from the mode."""
    y = np.asarray(y, dtype=float)
    n, r = draw.n, draw.r
    T = y.shape[0]
    d = n + r
    h = np.asarray(h_hat, dtype=float).reshape(T, d)
    eps = residuals(y, x, draw.beta)
    prior = StatePriorAssembly.build(draw.mu, draw.phi, draw.sig2, T)
    ginv = _obs_cov_inverse(draw.load, h, n, r)
    v = np.hstack([np.eye(n), draw.load])  # (n, n+r); column i hits h coordinate i
    m = np.einsum("nd,tnm,me->tde", v, ginv, v)
    a = np.einsum("nd,tnm,tm->td", v, ginv, eps)
    eh = np.exp(h)
    zt = eh[:, :, None] * m
    neg_h1 = 0.5 * zt.transpose(0, 2, 1) * (np.eye(d) - zt)
    zb = (eh * a)[:, :, None] * a[:, None, :]
    neg_h2 = -0.5 * zb.transpose(0, 2, 1) * (np.eye(d) - 2.0 * zt)
    return band_add(prior.precision, BandSymMatrix.from_blocks(neg_h1 + neg_h2))


def _obs_cov_inverse(load, h, n, r):
    """(L Omega_t L' + Sigma_t)^{-1} for all t, via Woodbury."""
    ehy = np.exp(-h[:, :n])
    T = h.shape[0]
    if r == 0:
        out = np.zeros((T, n, n))
        out[:, np.arange(n), np.arange(n)] = ehy
        return out
    K = np.einsum("tn,nj,nk->tjk", ehy, load, load)
    K[:, np.arange(r), np.arange(r)] += np.exp(-h[:, n:])
    u = ehy[:, :, None] * load  # (T, n, r) = Sigma^{-1} L
    out = -np.einsum("tnj,tjk,tmk->tnm", u, np.linalg.inv(K), u)
    out[:, np.arange(n), np.arange(n)] += ehy
    return out


# ---------------------------------------------------------------------------
# importance density and the likelihood estimator


def importance_density(y, x, draw, route="em", **em_kwargs):
    """Gaussian N(h-hat, K_h^{-1}) approximation of p(h | y, params).

    Returns (gaussian, em_result, used_fallback): if the chosen route's
    precision fails the Cholesky test, -H_Q alone (always PD) is used and the
    flag is set.
    """
    em = em_mode(y, x, draw, **em_kwargs)
    builder = hessian_em if route == "em" else hessian_direct
    kh = builder(em.h_hat, draw, y, x)
    fallback = False
    try:
        g = GaussianInPrecisionForm(em.h_hat.ravel(), kh)
        g.factor  # force the factorization
    except NotPositiveDefiniteError:
        fallback = True
        eps = residuals(y, x, draw.beta)
        prior = StatePriorAssembly.build(draw.mu, draw.phi, draw.sig2, y.shape[0])
        _, _, zhat = _estep(eps, draw.load, em.h_hat, draw.n, draw.r)
        g = GaussianInPrecisionForm(
            em.h_hat.ravel(), neg_q_hessian(prior, em.h_hat.ravel(), zhat.ravel())
        )
        g.factor
    return g, em, fallback


def log_importance_average(logw):
    """Log-mean of importance weights given in logs, with a delta-method
    standard error for the log estimate and the effective sample size."""
    logw = np.asarray(logw, dtype=float)
    m = np.max(logw)
    if not np.isfinite(m):
        raise NumericalError("all importance weights are zero or non-finite")
    w = np.exp(logw - m)
    wbar = w.mean()
    log_mean = m + np.log(wbar)
    se = float(w.std(ddof=1) / (wbar * np.sqrt(len(w)))) if len(w) > 1 else np.inf
    ess = float(w.sum() ** 2 / np.sum(w**2))
    return float(log_mean), se, ess


@dataclass
class IntegratedLikelihoodResult:
    log_value: float
    se: float  # delta-method SE of the log estimate
    ess: float
    r1: int
    kh_fallback: bool = False
    n_em_iters: int = 0


def integrated_likelihood(y, x, draw, r1, rng, route="em"):
    """Importance-sampling estimate of log p(y | params) using R1 draws from
    the Gaussian approximation of p(h | y, params)."""
    if r1 < 2:
        raise ValueError("need r1 >= 2")
    g, em, fallback = importance_density(y, x, draw, route=route)
    hs = g.sample(rng, size=r1)
    res = integrated_likelihood_from_draws(y, x, draw, g, hs)
    res.kh_fallback = fallback
    res.n_em_iters = em.n_em_iters
    return res


def importance_log_weights(y, x, draw, g, hs):
    """Log integrand-over-proposal ratios for stacked draws hs (rows)."""
    T = np.asarray(y).shape[0]
    d = draw.n + draw.r
    hcube = hs.reshape(-1, T, d)
    return (
        log_cond_likelihood(y, x, draw.beta, draw.load, hcube)
        + log_state_prior(hcube, draw.mu, draw.phi, draw.sig2)
        - g.logpdf(hs)
    )


def integrated_likelihood_from_draws(y, x, draw, g, hs):
    """The importance-sampling average for externally supplied draws
    (rows of hs are stacked h vectors)."""
    logw = importance_log_weights(y, x, draw, g, hs)
    log_mean, se, ess = log_importance_average(logw)
    if ess < 2.0:
        raise DegenerateWeightsError(
            f"importance weights degenerate (ESS={ess:.2f}); the Gaussian "
            "approximation is poor"
        )
    return IntegratedLikelihoodResult(log_mean, se, ess, r1=len(logw))
