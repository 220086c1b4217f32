"""Marginal likelihood estimation by adaptive importance sampling.

The importance density over the static parameters is a product of simple
families fitted to posterior draws by maximum likelihood (the cross-entropy
solution): componentwise Gaussians for the VAR coefficients and loadings
(truncated to the sign restrictions), inverse-gammas for the innovation
variances, Gaussians for the volatility means and truncated Gaussians on
(-1, 1) for the AR coefficients.  For each parameter draw the integrated
likelihood is estimated with an inner simulation size adapted until the
variance of the log estimate is about one.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import special

from . import intlike, tmvn
from .exceptions import DegenerateWeightsError, InsufficientDrawsError
from .model import NEG, POS, ZERO, ModelSpec, ParamDraw, SignMatrix

_LOG2PI = np.log(2.0 * np.pi)
_VAR_FLOOR = 1e-10


@dataclass
class CeFamilyParams:
    """Fitted importance-family parameters.

    The VAR-coefficient block is one full-covariance Gaussian per equation
    (intercepts and persistent-lag coefficients are strongly correlated in
    the posterior, and neglecting that correlation degenerates the weights).
    The free loadings form one Gaussian with full covariance, sampled
    sequentially with each entry truncated to its sign region given the
    previous entries; the density of that construction is exact, so the sign
    regions stay exact while cross-loading correlation is captured.
    Variances, means and AR coefficients are componentwise.
    """

    beta_mean: np.ndarray  # (n, k)
    beta_chol: np.ndarray  # (n, k, k) lower Cholesky factors of the covariances
    load_mean: np.ndarray  # (m,) over free (non-zero-restricted) entries, row-major
    load_chol: np.ndarray  # (m, m) lower Cholesky of the loading covariance
    sig2_shape: np.ndarray
    sig2_scale: np.ndarray
    mu_mean: np.ndarray
    mu_var: np.ndarray
    phi_mean: np.ndarray
    phi_var: np.ndarray


def fit_invgamma(x, tol=1e-12, max_iter=100):
    """Maximum-likelihood inverse-gamma fit: moment-matched start, then
    Newton on the profile likelihood in the shape."""
    x = np.asarray(x, dtype=float)
    mean_inv = np.mean(1.0 / x)
    b = np.log(mean_inv) + np.mean(np.log(x))  # >= 0 by Jensen
    m, v = x.mean(), x.var()
    shape = 2.0 + m**2 / v if v > 1e-30 else 1e8
    shape = min(max(shape, 1.01), 1e8)
    for _ in range(max_iter):
        f = np.log(shape) - special.digamma(shape) - b
        fp = 1.0 / shape - special.polygamma(1, shape)
        step = f / fp
        new = shape - step
        if new <= 0:
            new = shape / 2.0
        shape = min(new, 1e8)
        if abs(f) < tol:
            break
    return shape, shape / mean_inv


def _gauss_fit(draws):
    mean = draws.mean(axis=0)
    var = np.maximum(draws.var(axis=0), _VAR_FLOOR)
    return mean, var


def _fit_equation_gaussians(beta_draws, n, k):
    """Per-equation multivariate Gaussian MLE with a light diagonal ridge so
    the Cholesky factor exists even for near-degenerate draw sets."""
    cube = beta_draws.reshape(-1, n, k)
    means = cube.mean(axis=0)
    chols = np.empty((n, k, k))
    for i in range(n):
        dev = cube[:, i, :] - means[i]
        cov = dev.T @ dev / len(dev)
        ridge = 1e-10 + 1e-8 * np.trace(cov) / k
        cov[np.diag_indices(k)] += ridge
        chols[i] = np.linalg.cholesky(cov)
    return means, chols


def fit_ce_family(chain, signs):
    """Blockwise maximum-likelihood fit of the importance family to the
    stored posterior draws."""
    if chain.size < 30:
        raise InsufficientDrawsError(
            f"need at least 30 posterior draws, have {chain.size}"
        )
    beta_mean, beta_chol = _fit_equation_gaussians(chain.beta, chain.n, chain.k)
    mu_mean, mu_var = _gauss_fit(chain.mu)
    n, r = chain.n, chain.r
    keep = signs.codes.ravel() != ZERO
    m = int(keep.sum())
    load_mean = np.zeros(m)
    load_chol = np.eye(m)
    if m:
        draws = chain.load.reshape(chain.size, -1)[:, keep]
        load_mean = draws.mean(axis=0)
        dev = draws - load_mean
        cov = dev.T @ dev / len(dev)
        cov[np.diag_indices(m)] += 1e-10 + 1e-8 * np.trace(cov) / m
        load_chol = np.linalg.cholesky(cov)
    d = n + r
    sig2_shape = np.empty(d)
    sig2_scale = np.empty(d)
    for i in range(d):
        sig2_shape[i], sig2_scale[i] = fit_invgamma(chain.sig2[:, i])
    phi_mean = np.clip(chain.phi.mean(axis=0), -1 + 1e-6, 1 - 1e-6)
    phi_var = np.maximum(chain.phi.var(axis=0), _VAR_FLOOR)
    return CeFamilyParams(
        beta_mean=beta_mean, beta_chol=beta_chol, load_mean=load_mean,
        load_chol=load_chol, sig2_shape=sig2_shape, sig2_scale=sig2_scale,
        mu_mean=mu_mean, mu_var=mu_var, phi_mean=phi_mean, phi_var=phi_var,
    )


def _sign_bounds(codes):
    lb = np.where(codes == POS, 0.0, -np.inf)
    ub = np.where(codes == NEG, 0.0, np.inf)
    return lb, ub


def _sample_sequential_truncated(mean, chol, lb, ub, rng):
    """l = mean + C w with each w_j standard normal truncated so that the
    j-th coordinate of l lands in [lb_j, ub_j] given the previous ones."""
    m = len(mean)
    w = np.zeros(m)
    out = np.empty(m)
    for j in range(m):
        c = mean[j] + chol[j, :j] @ w[:j]
        s = chol[j, j]
        w[j] = tmvn.trandn(
            rng, np.array([(lb[j] - c) / s]), np.array([(ub[j] - c) / s])
        )[0]
        out[j] = c + s * w[j]
    return out


def _sequential_truncated_logpdf(value, mean, chol, lb, ub):
    import scipy.linalg

    w = scipy.linalg.solve_triangular(chol, value - mean, lower=True,
                                      check_finite=False)
    cond = mean + chol @ w - np.diag(chol) * w  # c_j = mean_j + C[j,:j] w[:j]
    s = np.diag(chol)
    mass = tmvn.ln_normal_prob((lb - cond) / s, (ub - cond) / s)
    return float(
        np.sum(-0.5 * (_LOG2PI + w**2) - np.log(s) - mass)
    )


def sample_from_family(fam, signs, rng):
    """One parameter draw from the fitted family; sign-restricted loadings
    come from the sequentially conditioned truncated Gaussian block."""
    n, k = fam.beta_mean.shape
    z = rng.standard_normal((n, k))
    beta = (
        fam.beta_mean + np.einsum("ikl,il->ik", fam.beta_chol, z)
    ).ravel()
    r = signs.r
    load = np.zeros((n, r))
    codes = signs.codes.ravel()
    keep = codes != ZERO
    if keep.any():
        lb, ub = _sign_bounds(codes[keep])
        flat = np.zeros(n * r)
        flat[keep] = _sample_sequential_truncated(
            fam.load_mean, fam.load_chol, lb, ub, rng
        )
        load = flat.reshape(n, r)
    sig2 = fam.sig2_scale / rng.gamma(fam.sig2_shape)
    mu = fam.mu_mean + np.sqrt(fam.mu_var) * rng.standard_normal(fam.mu_mean.shape)
    ps = np.sqrt(fam.phi_var)
    phi = fam.phi_mean + ps * tmvn.trandn(
        rng, (-1.0 - fam.phi_mean) / ps, (1.0 - fam.phi_mean) / ps
    )
    return ParamDraw(beta=beta, load=load, mu=mu, phi=phi, sig2=sig2)


def _normal_logpdf(x, mean, var):
    return -0.5 * (_LOG2PI + np.log(var) + (x - mean) ** 2 / var)


def _truncnorm_logpdf(x, mean, var, lb, ub):
    sd = np.sqrt(var)
    mass = tmvn.ln_normal_prob((lb - mean) / sd, (ub - mean) / sd)
    return _normal_logpdf(x, mean, var) - mass


def _invgamma_logpdf(x, shape, scale):
    return (
        shape * np.log(scale)
        - special.gammaln(shape)
        - (shape + 1.0) * np.log(x)
        - scale / x
    )


def family_logpdf(fam, draw, signs):
    """Log-density of a parameter draw under the fitted family, including
    the truncation masses of the sign-restricted blocks."""
    import scipy.linalg

    n, k = fam.beta_mean.shape
    dev = draw.beta.reshape(n, k) - fam.beta_mean
    total = -0.5 * n * k * _LOG2PI
    for i in range(n):
        white = scipy.linalg.solve_triangular(
            fam.beta_chol[i], dev[i], lower=True, check_finite=False
        )
        total += -np.sum(np.log(np.diag(fam.beta_chol[i]))) - 0.5 * white @ white
    n, r = fam.load_mean.shape
    if r:
        codes = signs.codes.ravel()
        keep = codes != ZERO
        lb, ub = _sign_bounds(codes[keep])
        total += np.sum(
            _truncnorm_logpdf(
                draw.load.ravel()[keep], fam.load_mean.ravel()[keep],
                fam.load_var.ravel()[keep], lb, ub,
            )
        )
    total += np.sum(_invgamma_logpdf(draw.sig2, fam.sig2_shape, fam.sig2_scale))
    total += np.sum(_normal_logpdf(draw.mu, fam.mu_mean, fam.mu_var))
    total += np.sum(
        _truncnorm_logpdf(draw.phi, fam.phi_mean, fam.phi_var, -1.0, 1.0)
    )
    return float(total)


def log_prior(draw, spec):
    """Log prior density: normal VAR coefficients, per-entry truncated-normal
    loadings (normalizing masses included), inverse-gamma variances, normal
    volatility means, truncated-normal AR coefficients on (-1, 1)."""
    pri = spec.priors
    total = np.sum(
        _normal_logpdf(draw.beta, pri.beta_mean.ravel(), pri.beta_var.ravel())
    )
    if spec.r:
        codes = spec.signs.codes.ravel()
        keep = codes != ZERO
        lb, ub = _sign_bounds(codes[keep])
        total += np.sum(
            _truncnorm_logpdf(
                draw.load.ravel()[keep], pri.load_mean.ravel()[keep],
                pri.load_var.ravel()[keep], lb, ub,
            )
        )
    total += np.sum(_invgamma_logpdf(draw.sig2, pri.sig2_shape, pri.sig2_scale))
    total += np.sum(_normal_logpdf(draw.mu, pri.mu_mean, pri.mu_var))
    total += np.sum(_truncnorm_logpdf(draw.phi, pri.phi_mean, pri.phi_var, -1.0, 1.0))
    return float(total)


def adaptive_integrated_likelihood(y, x, draw, rng, r1_init=10, r1_cap=640,
                                   target_var=1.0, route="em", max_em=2000):
    """Integrated-likelihood estimate with the inner simulation size doubled
    until the variance of the log estimate is at most `target_var`.

    Family draws far out in the parameter tails can make the mode finding
    slow, so the EM cap here is higher than the stand-alone default.
    """
    g, _, fallback = intlike.importance_density(
        y, x, draw, route=route, max_em=max_em
    )
    hs = g.sample(rng, size=r1_init)
    logw = intlike.importance_log_weights(y, x, draw, g, hs)
    r1 = r1_init
    while True:
        log_mean, se, ess = intlike.log_importance_average(logw)
        if se**2 <= target_var or r1 >= r1_cap:
            break
        extra = min(r1, r1_cap - r1)
        hs = g.sample(rng, size=extra)
        logw = np.concatenate(
            [logw, intlike.importance_log_weights(y, x, draw, g, hs)]
        )
        r1 += extra
    res = intlike.IntegratedLikelihoodResult(log_mean, se, ess, r1=r1)
    res.kh_fallback = fallback
    return res


@dataclass
class MarginalLikelihoodResult:
    log_value: float
    se: float
    ess: float
    r2: int
    r1_history: list = field(default_factory=list)
    log_weights: np.ndarray = None


def marginal_likelihood(y, x, spec, chain, r2, rng, r1_init=10, r1_cap=640,
                        target_var=1.0, route="em", keep_weights=False):
    """Importance-sampling estimate of the log marginal likelihood: R2 draws
    from the fitted family, each weighted by estimated integrated likelihood
    times prior over family density."""
    if chain.size == 0:
        raise InsufficientDrawsError("chain is empty")
    fam = fit_ce_family(chain, spec.signs)
    logw = np.empty(r2)
    r1_history = []
    for j in range(r2):
        draw = sample_from_family(fam, spec.signs, rng)
        li = adaptive_integrated_likelihood(
            y, x, draw, rng, r1_init=r1_init, r1_cap=r1_cap,
            target_var=target_var, route=route,
        )
        r1_history.append(li.r1)
        logw[j] = li.log_value + log_prior(draw, spec) - family_logpdf(
            fam, draw, spec.signs
        )
    log_mean, se, ess = intlike.log_importance_average(logw)
    if ess < 2.0:
        raise DegenerateWeightsError(
            f"marginal-likelihood weights degenerate (ESS={ess:.2f})"
        )
    return MarginalLikelihoodResult(
        log_value=log_mean, se=se, ess=ess, r2=r2, r1_history=r1_history,
        log_weights=logw if keep_weights else None,
    )


@dataclass
class FactorCountRow:
    r: int
    log_ml: float = None
    se: float = None
    ess: float = None
    error: str = None


def reduced_form_spec(spec, r):
    """Same data and priors as `spec` but with r factors, default unit-variance
    loading priors, and no sign restrictions.  Factor-series SV hyperpriors
    replicate the template's factor block when present, otherwise its first
    idiosyncratic values."""
    import warnings

    from .model import PriorSpec

    pri = spec.priors
    src = spec.n if len(pri.phi_mean) > spec.n else 0

    def pad(a):
        return np.concatenate([a[: spec.n], np.full(r, a[src])])

    priors = PriorSpec(
        beta_mean=pri.beta_mean, beta_var=pri.beta_var,
        load_mean=np.zeros((spec.n, r)), load_var=np.ones((spec.n, r)),
        mu_mean=pri.mu_mean, mu_var=pri.mu_var,
        phi_mean=pad(pri.phi_mean), phi_var=pad(pri.phi_var),
        sig2_shape=pad(pri.sig2_shape), sig2_scale=pad(pri.sig2_scale),
    )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        return ModelSpec(
            n=spec.n, p=spec.p, r=r, T=spec.T, priors=priors,
            signs=SignMatrix.all_free(spec.n, r),
        )


def select_factor_count(y, x, spec_builder, candidates, settings, r2, seed,
                        reduced_form=True, r1_cap=640, route="em"):
    """Chain plus marginal likelihood per candidate factor count; returns
    rows ranked by log marginal likelihood with ties toward smaller r.
    Per-candidate failures are recorded, not raised."""
    from .gibbs import run_chain

    if not candidates:
        raise ValueError("candidates must be nonempty")
    rows = []
    for idx, r in enumerate(candidates):
        try:
            spec_r = spec_builder(r)
            chain = run_chain(y, x, spec_r, settings, reduced_form=reduced_form)
            rng = np.random.default_rng(
                np.random.SeedSequence((seed, 1000 + idx))
            )
            res = marginal_likelihood(
                y, x, spec_r, chain, r2, rng, r1_cap=r1_cap, route=route
            )
            rows.append(
                FactorCountRow(r=r, log_ml=res.log_value, se=res.se, ess=res.ess)
            )
        except Exception as exc:  # noqa: BLE001 - candidate marked failed
            rows.append(FactorCountRow(r=r, error=f"{type(exc).__name__}: {exc}"))
    ok = [row for row in rows if row.error is None]
    failed = [row for row in rows if row.error is not None]
    ok.sort(key=lambda row: (-row.log_ml, row.r))
    return ok + failed
