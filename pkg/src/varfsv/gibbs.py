"""Six-block Gibbs sampler for the factor-SV VAR posterior.

Sweep order: latent factors (joint precision sampler), VAR coefficients and
loadings (equation by equation, truncated to the sign restrictions),
log-volatility paths (auxiliary mixture sampler with a tridiagonal precision
sampler), innovation variances (inverse-gamma), log-volatility means
(normal), and AR coefficients (independence-chain Metropolis-Hastings).

Each block consumes randomness from its own spawned stream, so chain output
is bit-reproducible from the seed and invariant to the internal ordering of
the conditionally independent equation draws.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import tmvn
from .bandlin import BandSymMatrix, GaussianInPrecisionForm
from .exceptions import ConfigError, NumericalError, TruncationFailureError
from .model import (
    FREE,
    NEG,
    POS,
    ZERO,
    LatentStates,
    ParamDraw,
    validate_point_identification,
)

# 7-component normal mixture approximation of the log chi-squared(1)
# distribution; component means are stored net of the -1.2704 location shift.
_MIX_PROB = np.array(
    [0.00730, 0.10556, 0.00002, 0.04395, 0.34001, 0.24566, 0.25750]
)
_MIX_MEAN = (
    np.array([-10.12999, -3.97281, -8.56686, 2.77786, 0.61942, 1.79518, -1.08819])
    - 1.2704
)
_MIX_VAR = np.array([5.79596, 2.61369, 5.17950, 0.16735, 0.64009, 0.34023, 1.26261])

LOG_SQUARE_OFFSET = 1e-4  # c in log(z^2 + c)


@dataclass
class McmcSettings:
    """Sweep counts and seeding: `draws` post-burn-in sweeps are run and
    every `thin`-th is stored."""

    burn_in: int = 1000
    draws: int = 5000
    thin: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.draws < 1:
            raise ConfigError("draws must be >= 1")
        if self.thin < 1:
            raise ConfigError("thin must be >= 1")
        if self.burn_in < 0:
            raise ConfigError("burn_in must be >= 0")

    @property
    def stored(self):
        return (self.draws + self.thin - 1) // self.thin


CHAIN_FORMAT = "varfsv-chain-v1"


@dataclass
class McmcChain:
    """Stored posterior draws (thinned, post-burn-in) plus diagnostics."""

    n: int
    p: int
    r: int
    T: int
    settings: McmcSettings
    beta: np.ndarray  # (S, n*k)
    load: np.ndarray  # (S, n, r)
    mu: np.ndarray  # (S, n)
    phi: np.ndarray  # (S, n+r)
    sig2: np.ndarray  # (S, n+r)
    h: np.ndarray  # (S, T, n+r)
    f: np.ndarray  # (S, T, r)
    phi_accept: np.ndarray = field(default=None)  # (n+r,) acceptance rates

    @property
    def size(self):
        return self.beta.shape[0]

    @property
    def k(self):
        return self.n * self.p + 1

    def param_draw(self, s):
        return ParamDraw(
            beta=self.beta[s], load=self.load[s], mu=self.mu[s],
            phi=self.phi[s], sig2=self.sig2[s],
        )

    def latent_states(self, s):
        return LatentStates(h=self.h[s], f=self.f[s])

    def validate_records(self, signs=None):
        for s in range(self.size):
            self.param_draw(s).validate(signs)
        return True

    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        np.savez_compressed(
            os.path.join(directory, "draws.npz"),
            beta=self.beta, load=self.load, mu=self.mu, phi=self.phi,
            sig2=self.sig2, h=self.h, f=self.f, phi_accept=self.phi_accept,
        )
        manifest = {
            "format": CHAIN_FORMAT,
            "n": self.n, "p": self.p, "r": self.r, "T": self.T,
            "settings": {
                "burn_in": self.settings.burn_in,
                "draws": self.settings.draws,
                "thin": self.settings.thin,
                "seed": self.settings.seed,
            },
            "stored": int(self.size),
        }
        with open(os.path.join(directory, "chain.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)

    @classmethod
    def read(cls, directory):
        with open(os.path.join(directory, "chain.json")) as fh:
            manifest = json.load(fh)
        if manifest.get("format") != CHAIN_FORMAT:
            raise ConfigError(f"unsupported chain format in {directory}")
        data = np.load(os.path.join(directory, "draws.npz"))
        return cls(
            n=manifest["n"], p=manifest["p"], r=manifest["r"], T=manifest["T"],
            settings=McmcSettings(**manifest["settings"]),
            beta=data["beta"], load=data["load"], mu=data["mu"],
            phi=data["phi"], sig2=data["sig2"], h=data["h"], f=data["f"],
            phi_accept=data["phi_accept"],
        )


# ---------------------------------------------------------------------------
# step 1: latent factors


def sample_factors(y, x, draw, h, rng):
    """Joint draw of all factor paths from N(f-hat, K_f^{-1}); K_f is block
    diagonal over time, assembled as one band matrix so a single banded
    factorization covers the whole path."""
    n, r = draw.n, draw.r
    T = y.shape[0]
    if r == 0:
        return np.zeros((T, 0))
    eps = y - x @ draw.beta_matrix().T
    ehy = np.exp(-h[:, :n])
    K = np.einsum("tn,nj,nk->tjk", ehy, draw.load, draw.load)
    K[:, np.arange(r), np.arange(r)] += np.exp(-h[:, n:])
    b = np.einsum("tn,nj->tj", ehy * eps, draw.load)
    fhat = np.linalg.solve(K, b[..., None])[..., 0]
    gauss = GaussianInPrecisionForm(fhat.ravel(), BandSymMatrix.from_blocks(K))
    return gauss.sample(rng).reshape(T, r)


# ---------------------------------------------------------------------------
# step 2: VAR coefficients and loadings, one equation


def sample_beta_loadings(y_i, x, fmat, h_i, beta_mean_i, beta_var_i,
                         load_mean_i, load_var_i, sign_row, rng,
                         prev_load=None, max_proposals=100):
    """Joint draw of (beta_i, l_i) from the truncated normal conditional of
    equation i.  Zero-restricted loadings are excluded from the regression;
    sign-restricted ones are drawn from their truncated Gaussian marginal
    (minimax-tilting accept-reject, Gibbs fallback), then the VAR block from
    its exact conditional."""
    k = x.shape[1]
    r = fmat.shape[1]
    sign_row = np.asarray(sign_row)
    kept = np.flatnonzero(sign_row != ZERO)
    z = np.column_stack([x, fmat[:, kept]]) if kept.size else x
    theta0 = np.concatenate([beta_mean_i, load_mean_i[kept]])
    var0 = np.concatenate([beta_var_i, load_var_i[kept]])
    w = np.exp(-h_i)
    K = (z * w[:, None]).T @ z
    K[np.diag_indices_from(K)] += 1.0 / var0
    rhs = theta0 / var0 + z.T @ (w * y_i)
    try:
        ck = scipy.linalg.cho_factor(K, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError as exc:
        raise NumericalError(f"equation posterior precision not PD: {exc}") from exc
    theta_hat = scipy.linalg.cho_solve(ck, rhs, check_finite=False)

    constrained = kept[np.isin(sign_row[kept], (POS, NEG))]
    l_full = np.zeros(r)
    if constrained.size == 0:
        zdraw = rng.standard_normal(k + kept.size)
        theta = theta_hat + scipy.linalg.solve_triangular(
            ck[0], zdraw, trans="T", lower=True, check_finite=False
        )
        l_full[kept] = theta[k:]
        return theta[:k], l_full

    # marginal of the loadings block: Schur complement in the precision
    kbb = K[:k, :k]
    kbl = K[:k, k:]
    cb = scipy.linalg.cho_factor(kbb, lower=True, check_finite=False)
    e = scipy.linalg.cho_solve(cb, kbl, check_finite=False)
    schur = K[k:, k:] - kbl.T @ e
    cov_l = np.linalg.inv(schur)
    lb = np.where(sign_row[kept] == POS, 0.0, -np.inf)
    ub = np.where(sign_row[kept] == NEG, 0.0, np.inf)
    l_hat = theta_hat[k:]
    l_draw = None
    try:
        sampler = tmvn.TruncatedMVN(l_hat, cov_l, lb.copy(), ub.copy())
        l_draw = sampler.sample_one(rng, max_proposals=max_proposals)
        region_prob = sampler.log_region_prob
    except (TruncationFailureError, np.linalg.LinAlgError):
        region_prob = None
    if l_draw is None:
        x0 = prev_load[kept] if prev_load is not None else _feasible_point(
            l_hat, sign_row[kept]
        )
        if not np.all((x0 > lb) & (x0 < ub)):
            raise TruncationFailureError(
                "no feasible starting point for the loading orthant",
                orthant_prob=region_prob,
            )
        l_draw = tmvn.gibbs_sample_box(rng, l_hat, schur, lb, ub, x0)
    beta_mean_cond = theta_hat[:k] - e @ (l_draw - l_hat)
    beta_i = beta_mean_cond + scipy.linalg.solve_triangular(
        cb[0], rng.standard_normal(k), trans="T", lower=True, check_finite=False
    )
    l_full[kept] = l_draw
    return beta_i, l_full


def _feasible_point(l_hat, codes):
    mag = np.maximum(np.abs(l_hat), 0.1)
    out = l_hat.copy()
    pos = codes == POS
    neg = codes == NEG
    out[pos] = mag[pos]
    out[neg] = -mag[neg]
    return out


# ---------------------------------------------------------------------------
# step 3: log-volatility paths


def _mixture_indicators(ystar, h, rng):
    """Posterior draw of the mixture component for each (t, series) cell."""
    dev = ystar[..., None] - h[..., None] - _MIX_MEAN  # (..., 7)
    logp = (
        np.log(_MIX_PROB)
        - 0.5 * np.log(2 * np.pi * _MIX_VAR)
        - 0.5 * dev**2 / _MIX_VAR
    )
    logp -= logp.max(axis=-1, keepdims=True)
    prob = np.exp(logp)
    prob /= prob.sum(axis=-1, keepdims=True)
    u = rng.uniform(size=ystar.shape)[..., None]
    return (u > np.cumsum(prob, axis=-1)).sum(axis=-1)


def _stacked_sv_draw(ystar, h_current, means, phi, sig2, rng):
    """One scan of the volatility block: mixture indicators drawn from their
    exact conditional given the current paths, then all paths jointly from
    the resulting linear-Gaussian model via a single banded precision sampler
    over the series-stacked system (independent tridiagonal blocks)."""
    T, d = ystar.shape
    s = _mixture_indicators(ystar, h_current, rng)
    # series-major stacking: series i occupies [i*T, (i+1)*T)
    obs = (ystar - _MIX_MEAN[s]).T.ravel()
    obs_prec = (1.0 / _MIX_VAR[s]).T.ravel()
    main = np.empty((d, T))
    main[:, 0] = (1.0 - phi**2) / sig2
    main[:, 1:] = (1.0 / sig2)[:, None]
    main[:, :-1] += (phi**2 / sig2)[:, None]
    off = np.zeros((d, T))
    off[:, : T - 1] = (-phi / sig2)[:, None]
    prior_bands = np.vstack([main.ravel(), off.ravel()]) if T > 1 else main.ravel()[None]
    prior = BandSymMatrix(prior_bands)
    prior_mean = np.repeat(means, T)
    post = prior.add_diagonal(obs_prec)
    rhs = prior.matvec(prior_mean) + obs_prec * obs
    factor = post.cholesky()
    mean = factor.solve(rhs)
    gauss = GaussianInPrecisionForm(mean, post)
    gauss._factor = factor
    return gauss.sample(rng).reshape(d, T).T


def sample_volatility_path(z, mu, phi, sig2, rng, h_current=None, scans=1):
    """Draw of a single series' log-volatility path given the series whose
    conditional variance is exp(h_t).

    Inside the posterior sampler this is one Gibbs scan from `h_current`
    (indicators from their exact conditional, then the path jointly).  For
    stand-alone use leave `h_current=None`: the scan is iterated `scans`
    times from a flat start, which with enough scans yields a draw from the
    path posterior under the mixture measurement model.
    """
    z = np.asarray(z, dtype=float)
    ystar = np.log(z**2 + LOG_SQUARE_OFFSET)
    h = np.full(len(z), mu) if h_current is None else np.asarray(h_current, float)
    if h_current is None and scans == 1:
        scans = 20
    for _ in range(scans):
        h = _stacked_sv_draw(
            ystar[:, None], h[:, None], np.array([mu]), np.array([phi]),
            np.array([sig2]), rng,
        )[:, 0]
    return h


# ---------------------------------------------------------------------------
# steps 4-6: SV parameters


def sample_sigma2(h_i, mu_i, phi_i, shape0, scale0, rng):
    """Inverse-gamma conditional for one series' innovation variance."""
    dev = h_i - mu_i
    ssq = (1.0 - phi_i**2) * dev[0] ** 2
    if len(dev) > 1:
        ssq += np.sum((dev[1:] - phi_i * dev[:-1]) ** 2)
    shape = shape0 + len(h_i) / 2.0
    scale = scale0 + ssq / 2.0
    return scale / rng.gamma(shape)


def sample_mu(h_i, phi_i, sig2_i, mu0, v_mu, rng):
    """Normal conditional for one idiosyncratic series' log-volatility mean."""
    T = len(h_i)
    prec = 1.0 / v_mu + ((1.0 - phi_i**2) + (T - 1) * (1.0 - phi_i) ** 2) / sig2_i
    num = mu0 / v_mu + (
        (1.0 - phi_i**2) * h_i[0]
        + (1.0 - phi_i) * np.sum(h_i[1:] - phi_i * h_i[:-1])
    ) / sig2_i
    return num / prec + rng.standard_normal() / np.sqrt(prec)


def _log_g_phi(phi, h1_dev, sig2):
    return 0.5 * np.log1p(-(phi**2)) - (1.0 - phi**2) * h1_dev**2 / (2.0 * sig2)


def sample_phi(h_i, mu_i, sig2_i, phi0, v_phi, phi_cur, rng):
    """Independence-chain MH update of one AR coefficient; returns
    (new value, accepted flag)."""
    dev = h_i - mu_i
    ssx = np.sum(dev[:-1] ** 2)
    sxy = np.sum(dev[:-1] * dev[1:])
    prec = 1.0 / v_phi + ssx / sig2_i
    mean = (phi0 / v_phi + sxy / sig2_i) / prec
    sd = 1.0 / np.sqrt(prec)
    prop = mean + sd * tmvn.trandn(
        rng, np.array([(-1.0 - mean) / sd]), np.array([(1.0 - mean) / sd])
    )[0]
    log_ratio = _log_g_phi(prop, dev[0], sig2_i) - _log_g_phi(
        phi_cur, dev[0], sig2_i
    )
    if np.log(rng.uniform()) < min(0.0, log_ratio):
        return prop, True
    return phi_cur, False


# ---------------------------------------------------------------------------
# the full sampler


def initial_values(spec, rng):
    """Starting point inside all support constraints: prior-mean coefficients
    and volatility means, zero factors, loadings of magnitude 0.1 obeying the
    signs, phi = 0.95, sig2 = 0.01."""
    n, r = spec.n, spec.r
    load = np.zeros((n, r))
    codes = spec.signs.codes
    mag = np.where(codes == ZERO, 0.0, 0.1)
    direction = np.where(
        codes == NEG, -1.0, np.where(codes == POS, 1.0, 0.0)
    )
    free = codes == FREE
    direction = np.where(free, np.where(rng.uniform(size=codes.shape) < 0.5, -1.0, 1.0), direction)
    load = mag * direction
    draw = ParamDraw(
        beta=spec.priors.beta_mean.ravel().copy(),
        load=load,
        mu=spec.priors.mu_mean.copy(),
        phi=np.full(n + r, 0.95),
        sig2=np.full(n + r, 0.01),
    )
    h = np.tile(np.concatenate([draw.mu, np.zeros(r)]), (spec.T, 1))
    states = LatentStates(h=h, f=np.zeros((spec.T, r)))
    return draw, states


def run_chain(y, x, spec, settings, reduced_form=False):
    """Run the posterior sampler and return the thinned chain.

    The sign matrix must pass the point-identification check unless
    `reduced_form=True` is given explicitly.
    """
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    n, p, r, T = spec.n, spec.p, spec.r, spec.T
    d = n + r
    if y.shape != (T, n) or x.shape != (T, spec.k):
        raise ConfigError(
            f"data shape mismatch: y {y.shape} x {x.shape}, expected "
            f"{(T, n)} and {(T, spec.k)}"
        )
    if not reduced_form:
        report = validate_point_identification(spec.signs)
        if not report.passed:
            raise ConfigError(
                "sign restrictions do not point-identify the loadings: "
                + "; ".join(report.problems)
                + " (pass reduced_form=True to run anyway)"
            )

    ss = np.random.SeedSequence(settings.seed)
    streams = ss.spawn(5 + n)
    rng_init = np.random.default_rng(streams[0])
    rng_f = np.random.default_rng(streams[1])
    rng_h = np.random.default_rng(streams[2])
    rng_sv = np.random.default_rng(streams[3])
    rng_phi = np.random.default_rng(streams[4])
    rng_eq = [np.random.default_rng(s) for s in streams[5:]]

    draw, states = initial_values(spec, rng_init)
    beta_mat = draw.beta_matrix().copy()
    load = draw.load.copy()
    mu = draw.mu.copy()
    phi = draw.phi.copy()
    sig2 = draw.sig2.copy()
    h = states.h.copy()
    f = states.f.copy()
    pri = spec.priors

    stored = settings.stored
    chain = McmcChain(
        n=n, p=p, r=r, T=T, settings=settings,
        beta=np.empty((stored, n * spec.k)),
        load=np.empty((stored, n, r)),
        mu=np.empty((stored, n)),
        phi=np.empty((stored, d)),
        sig2=np.empty((stored, d)),
        h=np.empty((stored, T, d)),
        f=np.empty((stored, T, r)),
    )
    accept = np.zeros(d)
    total = settings.burn_in + settings.draws
    mean_full = np.concatenate([mu, np.zeros(r)])
    slot = 0
    for sweep in range(total):
        try:
            cur = ParamDraw(beta=beta_mat.ravel(), load=load, mu=mu, phi=phi, sig2=sig2)
            f = sample_factors(y, x, cur, h, rng_f)
            for i in range(n):
                beta_mat[i], load[i] = sample_beta_loadings(
                    y[:, i], x, f, h[:, i],
                    pri.beta_mean[i], pri.beta_var[i],
                    pri.load_mean[i], pri.load_var[i],
                    spec.signs.codes[i], rng_eq[i], prev_load=load[i],
                )
            resid = y - x @ beta_mat.T - f @ load.T
            zmat = np.concatenate([resid, f], axis=1)
            ystar = np.log(zmat**2 + LOG_SQUARE_OFFSET)
            mean_full[:n] = mu
            h = _stacked_sv_draw(ystar, h, mean_full, phi, sig2, rng_h)
            for i in range(d):
                m_i = mu[i] if i < n else 0.0
                sig2[i] = sample_sigma2(
                    h[:, i], m_i, phi[i], pri.sig2_shape[i], pri.sig2_scale[i], rng_sv
                )
            for i in range(n):
                mu[i] = sample_mu(
                    h[:, i], phi[i], sig2[i], pri.mu_mean[i], pri.mu_var[i], rng_sv
                )
            for i in range(d):
                m_i = mu[i] if i < n else 0.0
                phi[i], ok = sample_phi(
                    h[:, i], m_i, sig2[i], pri.phi_mean[i], pri.phi_var[i],
                    phi[i], rng_phi,
                )
                if sweep >= settings.burn_in:
                    accept[i] += ok
        except NumericalError as exc:
            raise NumericalError(f"sweep {sweep}: {exc}") from exc
        post = sweep - settings.burn_in
        if post >= 0 and post % settings.thin == 0:
            chain.beta[slot] = beta_mat.ravel()
            chain.load[slot] = load
            chain.mu[slot] = mu
            chain.phi[slot] = phi
            chain.sig2[slot] = sig2
            chain.h[slot] = h
            chain.f[slot] = f
            slot += 1
    chain.phi_accept = accept / max(settings.draws, 1)
    return chain
