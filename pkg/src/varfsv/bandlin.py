"""Banded symmetric linear algebra.

Every sampler and likelihood evaluation in the package runs through the
routines here: Cholesky factorization of a symmetric positive-definite band
matrix, triangular solves, log-determinants, and exact Gaussian sampling from
a distribution specified by its (banded) precision matrix.

Storage follows scipy's lower diagonal-ordered form: ``bands[d, j]`` holds
entry ``(j + d, j)`` of the matrix, so row 0 is the main diagonal and row
``d`` the d-th subdiagonal (zero-padded at the tail).  Only the lower bands
are kept; symmetry is implicit.  All operations are O(dim * bandwidth^2) in
time and O(dim * bandwidth) in memory - no dense dim x dim array is ever
allocated.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .exceptions import DimensionMismatchError, NotPositiveDefiniteError

__all__ = [
    "BandSymMatrix",
    "BandCholeskyFactor",
    "GaussianInPrecisionForm",
    "band_add",
]


@dataclass(frozen=True)
class BandSymMatrix:
    """Symmetric matrix stored by its main diagonal and lower bands.

    Parameters
    ----------
    bands : ndarray, shape (bandwidth + 1, dim)
        Lower diagonal-ordered storage; ``bands[d, j] = A[j + d, j]``.
        Entries ``bands[d, dim - d:]`` are padding and must be zero.
    """

    bands: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bands, dtype=float)
        if b.ndim != 2:
            raise DimensionMismatchError("bands must be 2-D (bandwidth+1, dim)")
        if b.shape[1] < 1:
            raise DimensionMismatchError("dim must be >= 1")
        if b.shape[0] > b.shape[1]:
            raise DimensionMismatchError("bandwidth must be < dim")
        object.__setattr__(self, "bands", b)

    @property
    def dim(self):
        return self.bands.shape[1]

    @property
    def bandwidth(self):
        return self.bands.shape[0] - 1

    @classmethod
    def from_dense(cls, a, bandwidth=None):
        a = np.asarray(a, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise DimensionMismatchError("expected a square matrix")
        if not np.allclose(a, a.T, atol=1e-12 * max(1.0, np.abs(a).max())):
            raise ValueError("matrix is not symmetric")
        n = a.shape[0]
        if bandwidth is None:
            bandwidth = 0
            for d in range(n - 1, 0, -1):
                if np.any(np.diagonal(a, -d) != 0.0):
                    bandwidth = d
                    break
        bands = np.zeros((bandwidth + 1, n))
        for d in range(bandwidth + 1):
            bands[d, : n - d] = np.diagonal(a, -d)
        return cls(bands)

    @classmethod
    def from_blocks(cls, blocks):
        """Block-diagonal matrix from a (T, D, D) stack of symmetric blocks."""
        blocks = np.asarray(blocks, dtype=float)
        nblocks, d, d2 = blocks.shape
        if d != d2:
            raise DimensionMismatchError("blocks must be square")
        dim = nblocks * d
        bands = np.zeros((d, dim))
        for off in range(d):
            sub = np.diagonal(blocks, offset=-off, axis1=1, axis2=2)  # (T, d-off)
            bands[off].reshape(nblocks, d)[:, : d - off] = sub
        return cls(bands)

    def to_dense(self):
        n = self.dim
        a = np.zeros((n, n))
        for d in range(self.bandwidth + 1):
            idx = np.arange(n - d)
            a[idx + d, idx] = self.bands[d, : n - d]
            if d > 0:
                a[idx, idx + d] = self.bands[d, : n - d]
        return a

    def matvec(self, x):
        """A @ x for x of shape (dim,) or (..., dim)."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise DimensionMismatchError("vector length does not match dim")
        n = self.dim
        y = x * self.bands[0]
        for d in range(1, self.bandwidth + 1):
            band = self.bands[d, : n - d]
            y[..., d:] += band * x[..., : n - d]
            y[..., : n - d] += band * x[..., d:]
        return y

    def quad_form(self, x):
        """x' A x, batched over leading axes of x."""
        return np.sum(np.asarray(x) * self.matvec(x), axis=-1)

    def add_diagonal(self, v):
        """A + diag(v) as a new matrix."""
        v = np.asarray(v, dtype=float)
        if v.shape != (self.dim,):
            raise DimensionMismatchError("diagonal length does not match dim")
        bands = self.bands.copy()
        bands[0] += v
        return BandSymMatrix(bands)

    def cholesky(self):
        """Lower Cholesky factor G with G G' = A; bandwidth is preserved."""
        try:
            c = scipy.linalg.cholesky_banded(self.bands, lower=True, check_finite=False)
        except (scipy.linalg.LinAlgError, np.linalg.LinAlgError) as exc:
            raise NotPositiveDefiniteError(f"band Cholesky failed: {exc}") from exc
        if not np.all(np.isfinite(c[0])) or np.any(c[0] <= 0):
            raise NotPositiveDefiniteError("non-positive pivot in band Cholesky")
        return BandCholeskyFactor(c)


def band_add(a, b):
    """Sum of two band matrices; the result takes the wider bandwidth."""
    if a.dim != b.dim:
        raise DimensionMismatchError("dimensions differ")
    if a.bandwidth < b.bandwidth:
        a, b = b, a
    bands = a.bands.copy()
    bands[: b.bandwidth + 1] += b.bands
    return BandSymMatrix(bands)


@dataclass(frozen=True)
class BandCholeskyFactor:
    """Lower-banded Cholesky factor, same storage layout as BandSymMatrix."""

    bands: np.ndarray

    @property
    def dim(self):
        return self.bands.shape[1]

    @property
    def bandwidth(self):
        return self.bands.shape[0] - 1

    @property
    def log_det(self):
        """Log-determinant of the *factored* matrix A = G G'."""
        return 2.0 * float(np.sum(np.log(self.bands[0])))

    def _upper_form(self):
        # G' in scipy's (u, l) = (bw, 0) banded form for solve_banded
        bw, n = self.bandwidth, self.dim
        ab = np.zeros((bw + 1, n))
        for d in range(bw + 1):
            ab[bw - d, d:] = self.bands[d, : n - d]
        return ab

    def solve(self, b):
        """A^{-1} b for the factored matrix A; b may be (dim,) or (dim, k)."""
        b = np.asarray(b, dtype=float)
        if b.shape[0] != self.dim:
            raise DimensionMismatchError("right-hand side does not match dim")
        return scipy.linalg.cho_solve_banded((self.bands, True), b, check_finite=False)

    def solve_lower(self, b):
        """G x = b (forward substitution)."""
        return scipy.linalg.solve_banded(
            (self.bandwidth, 0), self.bands, b, check_finite=False
        )

    def solve_upper(self, b):
        """G' x = b (back substitution); the sampling backsolve."""
        return scipy.linalg.solve_banded(
            (0, self.bandwidth), self._upper_form(), b, check_finite=False
        )


@dataclass
class GaussianInPrecisionForm:
    """Gaussian N(mean, precision^{-1}) with a banded precision matrix.

    The Cholesky factor is computed on first use and cached, so repeated
    sampling and density evaluation share one factorization.
    """

    mean: np.ndarray
    precision: BandSymMatrix
    _factor: BandCholeskyFactor = field(default=None, repr=False)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        if self.mean.shape != (self.precision.dim,):
            raise DimensionMismatchError("mean length does not match precision dim")

    @property
    def factor(self):
        if self._factor is None:
            self._factor = self.precision.cholesky()
        return self._factor

    def sample(self, rng, size=None):
        """Exact draw(s): x = mean + backsolve(G', z), z ~ N(0, I).

        Returns shape (dim,) for size=None, else (size, dim).
        """
        n = self.precision.dim
        if size is None:
            z = rng.standard_normal(n)
            return self.mean + self.factor.solve_upper(z)
        z = rng.standard_normal((n, size))
        return (self.mean[:, None] + self.factor.solve_upper(z)).T

    def logpdf(self, x):
        """Log-density at x, shape (dim,) or (..., dim)."""
        x = np.asarray(x, dtype=float)
        dev = x - self.mean
        quad = self.precision.quad_form(dev)
        n = self.precision.dim
        return -0.5 * n * np.log(2.0 * np.pi) + 0.5 * self.factor.log_det - 0.5 * quad
