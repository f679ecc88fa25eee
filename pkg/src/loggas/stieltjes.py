"""Stieltjes and Hilbert transforms, principal-value quadrature, boundary
extraction, and the order-kappa strip decomposition calculus.

Conventions used throughout the package:

    f_z(x)   = 1/(x - z)
    M(z)     = integral rho(x)/(x - z) dx, so M(z) ~ -1/z at infinity and
               Im M(z) > 0 for Im z > 0 (Herglotz).
    F(f)(s)  = integral f(x) exp(-i x s) dx, inverse with 1/(2 pi).
    Hf(x)    = (1/pi) p.v. integral f(y)/(x - y) dy, i.e. the Fourier
               multiplier -i sgn(s).

A field h(a, b) on the upper strip 0 < b <= b_max represents a real function
through the weighted reconstruction

    (C h)(x) = 2/(1+kappa)! * int da int_0^{b_max} db b^(1+kappa)
                 Im[f_{a+ib}(x) h(a, b)],

and the inverse map (kernel_apply) is diagonal in Fourier: multiplication by
K(s) = (1+kappa)! / (2 pi m(|s|)) with m(s) = int_0^{b_max} b^(1+kappa)
exp(-b s) db.
"""

import csv
import json
import math
import warnings

import numpy as np
from scipy.special import gammainc

B_MAX = 0.5
B_MIN_DEFAULT = 1e-3
# log-spacing ratios: storage grids are coarse, decomposition-calculus grids
# finer because the b-quadrature accuracy enters the round-trip error budget
B_RATIO_STORE = 1.25
B_RATIO_CALC = 1.08
KAPPA_MAX = 5
C0_DEFAULT = 4.0
PAD_FACTOR = 4


class ExtrapolationError(ValueError):
    pass


class OnAxisError(ValueError):
    pass


# ---------------------------------------------------------------------------
# containers


class DensityGrid:
    """Real function sampled on a uniform grid with compact support."""

    def __init__(self, x, values, support=None):
        x = np.asarray(x, dtype=float)
        values = np.asarray(values, dtype=float)
        if x.ndim != 1 or x.shape != values.shape:
            raise ValueError("x and values must be 1-d arrays of equal length")
        dx = np.diff(x)
        if x.size < 2 or not np.allclose(dx, dx[0], rtol=1e-9, atol=0.0):
            raise ValueError("grid must be uniform")
        self.x = x
        self.values = values
        self.support = (float(x[0]), float(x[-1])) if support is None else (
            float(support[0]),
            float(support[1]),
        )

    @property
    def dx(self):
        return float(self.x[1] - self.x[0])

    def mass(self):
        return float(np.trapezoid(self.values, self.x))

    def interp(self, xq):
        # zero outside the grid: functions here are compactly supported
        return np.interp(xq, self.x, self.values, left=0.0, right=0.0)

    @classmethod
    def from_function(cls, f, lo, hi, n, support=None):
        x = np.linspace(lo, hi, n)
        return cls(x, np.asarray(f(x), dtype=float), support=support)


class StripField:
    """Complex field sampled on a rectangular grid over the upper strip.

    values has shape (len(a_grid), len(b_grid)); b_grid is positive and
    ascending with max <= B_MAX. With conjugate_symmetric=True the field at
    (a, -b) is understood as the complex conjugate of the field at (a, b).
    """

    def __init__(self, a_grid, b_grid, values, conjugate_symmetric=True):
        a_grid = np.asarray(a_grid, dtype=float)
        b_grid = np.asarray(b_grid, dtype=float)
        values = np.asarray(values, dtype=complex)
        if values.shape != (a_grid.size, b_grid.size):
            raise ValueError("values must have shape (len(a_grid), len(b_grid))")
        if np.any(b_grid <= 0) or np.any(np.diff(b_grid) <= 0):
            raise ValueError("b_grid must be positive and strictly increasing")
        if b_grid[-1] > B_MAX + 1e-12:
            raise ValueError(f"b_grid exceeds b_max = {B_MAX}")
        self.a_grid = a_grid
        self.b_grid = b_grid
        self.values = values
        self.conjugate_symmetric = conjugate_symmetric

    @property
    def da(self):
        return float(self.a_grid[1] - self.a_grid[0])

    def copy(self):
        return StripField(
            self.a_grid, self.b_grid, self.values.copy(), self.conjugate_symmetric
        )

    def value_at(self, a, b):
        """Bilinear interpolation, linear in a and in log b."""
        ia = np.clip(np.searchsorted(self.a_grid, a) - 1, 0, self.a_grid.size - 2)
        lb = np.log(self.b_grid)
        ib = np.clip(np.searchsorted(self.b_grid, b) - 1, 0, self.b_grid.size - 2)
        ta = (a - self.a_grid[ia]) / (self.a_grid[ia + 1] - self.a_grid[ia])
        tb = (np.log(b) - lb[ib]) / (lb[ib + 1] - lb[ib])
        ta = np.clip(ta, 0.0, 1.0)
        tb = np.clip(tb, 0.0, 1.0)
        v = self.values
        return (
            v[ia, ib] * (1 - ta) * (1 - tb)
            + v[ia + 1, ib] * ta * (1 - tb)
            + v[ia, ib + 1] * (1 - ta) * tb
            + v[ia + 1, ib + 1] * ta * tb
        )


class DecompositionSpec:
    """Order and scales of a strip decomposition."""

    def __init__(self, kappa, b_max=B_MAX, rho=None):
        if not (0 <= int(kappa) <= KAPPA_MAX):
            raise ValueError(f"kappa must be in 0..{KAPPA_MAX}")
        if not (0.0 < b_max <= B_MAX + 1e-12):
            raise ValueError(f"b_max must lie in (0, {B_MAX}]")
        if rho is not None and not (0.0 < rho <= b_max):
            raise ValueError("rho must lie in (0, b_max]")
        self.kappa = int(kappa)
        self.b_max = float(b_max)
        self.rho = None if rho is None else float(rho)


def geometric_b_grid(b_min=B_MIN_DEFAULT, b_max=B_MAX, ratio=B_RATIO_CALC):
    """Ascending log-spaced b grid from ~b_min up to exactly b_max."""
    n = int(math.ceil(math.log(b_max / b_min) / math.log(ratio)))
    return b_max * ratio ** -np.arange(n, -1, -1, dtype=float)


# ---------------------------------------------------------------------------
# Fourier helpers (continuous-transform conventions on a uniform grid)


def _pad_len(n, factor=PAD_FACTOR):
    m = 1
    while m < factor * n:
        m *= 2
    return m


def fourier_s_grid(x, m):
    return 2.0 * np.pi * np.fft.fftfreq(m, d=x[1] - x[0])


def forward_fft(values, x, m):
    """F(f)(s_k) = dx exp(-i s_k x0) FFT(f zero-padded to m)."""
    dx = x[1] - x[0]
    s = fourier_s_grid(x, m)
    return dx * np.exp(-1j * s * x[0]) * np.fft.fft(values, n=m)


def inverse_fft(vhat, x, m):
    """Inverse of forward_fft, returned on the original grid."""
    dx = x[1] - x[0]
    s = fourier_s_grid(x, m)
    full = np.fft.ifft(vhat * np.exp(1j * s * x[0])) / dx
    return full[: x.size]


# ---------------------------------------------------------------------------
# transforms


def stieltjes_points(points, z):
    """Normalized empirical Stieltjes transform (1/N) sum 1/(lambda_i - z)."""
    z = complex(z)
    if z.imag == 0.0:
        raise OnAxisError("Stieltjes transform needs Im z != 0")
    points = np.asarray(points, dtype=float)
    return complex(np.mean(1.0 / (points - z)))


def stieltjes_points_sum(points, z):
    """Unnormalized sum over points of 1/(lambda_i - z)."""
    z = complex(z)
    if z.imag == 0.0:
        raise OnAxisError("Stieltjes transform needs Im z != 0")
    points = np.asarray(points, dtype=float)
    return complex(np.sum(1.0 / (points - z)))


def stieltjes_density(rho, z):
    """Quadrature of integral rho(x)/(x - z) dx on the density grid."""
    z = np.asarray(z, dtype=complex)
    if np.any(z.imag == 0.0):
        raise OnAxisError("Stieltjes transform needs Im z != 0")
    x = rho.x
    vals = rho.values
    if z.ndim == 0:
        return complex(np.trapezoid(vals / (x - complex(z)), x))
    out = np.empty(z.shape, dtype=complex)
    flat = z.ravel()
    res = [np.trapezoid(vals / (x - zz), x) for zz in flat]
    out.ravel()[:] = res
    return out


def pv_integral(f, x):
    """p.v. integral of f(y)/(x - y) dy by the subtracted-singularity rule.

    The integrand is regularized as (f(y) - f(x))/(x - y), which is smooth
    with diagonal value -f'(x), and the subtracted part integrates to the
    exact logarithm over the grid span. Works for x inside the grid.
    """
    y = f.x
    fx = f.interp(x)
    d = x - y
    g = np.empty_like(y)
    near = np.abs(d) < 0.5 * f.dx
    g[~near] = (f.values[~near] - fx) / d[~near]
    if np.any(near):
        # central-difference slope at the singular cell
        fp = np.gradient(f.values, f.dx)
        g[near] = -np.interp(x, y, fp)
    main = np.trapezoid(g, y)
    lo, hi = y[0], y[-1]
    if x <= lo or x >= hi:
        log_term = fx * np.log(abs((x - lo) / (x - hi)))
    else:
        log_term = fx * np.log((x - lo) / (hi - x))
    return float(main + log_term)


def hilbert_transform(f, pad_factor=PAD_FACTOR):
    """Hf(x) = (1/pi) p.v. int f(y)/(x-y) dy via the -i sgn(s) multiplier."""
    edge = max(abs(f.values[0]), abs(f.values[-1]))
    peak = np.max(np.abs(f.values)) if f.values.size else 0.0
    if peak > 0 and edge > 1e-6 * peak:
        warnings.warn("hilbert_transform input not decayed at grid edges")
    m = _pad_len(f.x.size, pad_factor)
    s = fourier_s_grid(f.x, m)
    fhat = forward_fft(f.values, f.x, m)
    hf = inverse_fft(-1j * np.sign(s) * fhat, f.x, m).real
    return DensityGrid(f.x, hf, support=f.support)


def plemelj_extract(M_of_b, b_list, x=None):
    """Extrapolate M(x + ib) to b -> 0+.

    Returns (density, pv_part) where density = Im M(x+i0)/pi and pv_part =
    Re M(x+i0). b_list must be strictly decreasing with at least 3 entries.
    A measure with an atom at x makes |M| grow like 1/b; that case is
    rejected as non-extrapolable.
    """
    b = np.asarray(b_list, dtype=float)
    M = np.asarray(M_of_b, dtype=complex)
    if b.size < 3 or M.size != b.size:
        raise ValueError("need >= 3 matching (b, M) samples")
    if np.any(np.diff(b) >= 0) or np.any(b <= 0):
        raise ValueError("b_list must be strictly decreasing and positive")
    growth = np.abs(M[-1]) / max(np.abs(M[0]), 1e-300)
    shrink = b[0] / b[-1]
    # an atom at x gives |M| ~ 1/b (growth ~ shrink); a density gives
    # growth ~ 1; split the two on the geometric mean
    if growth > 1.2 * np.sqrt(shrink):
        raise ExtrapolationError(
            "transform grows like 1/b; boundary value does not exist"
        )
    deg = min(3, b.size - 1)
    coef = np.polynomial.polynomial.polyfit(b, M, deg)
    M0 = complex(coef[0])
    return M0.imag / np.pi, M0.real


# ---------------------------------------------------------------------------
# order-kappa decomposition calculus


def m_weight(s, kappa, b_max):
    """m(s) = int_0^{b_max} b^(1+kappa) exp(-b s) db for s >= 0, vectorized."""
    s = np.asarray(s, dtype=float)
    if np.any(s < 0):
        raise ValueError("m_weight takes s >= 0; pass |s|")
    a = kappa + 2
    out = np.empty_like(s)
    tiny = s < 1e-12
    out[tiny] = b_max**a / a
    st = s[~tiny]
    out[~tiny] = math.gamma(a) * gammainc(a, b_max * st) / st**a
    return out


def kernel_multiplier(spec, s):
    """Fourier multiplier K(s) of the order-kappa inverse map.

    K(s) = (1+kappa)! / (2 pi m(|s|)) for the standard decomposition; the
    rho-family variant shifts the argument by 1/rho.
    """
    s = np.abs(np.asarray(s, dtype=float))
    shift = 0.0 if spec.rho is None else 1.0 / spec.rho
    fac = math.factorial(1 + spec.kappa)
    return fac / (2.0 * np.pi * m_weight(s + shift, spec.kappa, spec.b_max))


def kernel_apply(spec, f, b_grid=None, pad_factor=PAD_FACTOR):
    """Decompose f: returns the strip field h with f = C^kappa h.

    h is constant in b (the standard decomposition); computed by Fourier
    division. Requires spec.rho to be unset.
    """
    if spec.rho is not None:
        raise ValueError("kernel_apply is the standard (rho-free) route")
    edge = max(abs(f.values[0]), abs(f.values[-1]))
    peak = np.max(np.abs(f.values)) if f.values.size else 0.0
    if peak > 0 and edge > 1e-6 * peak:
        warnings.warn("kernel_apply input not decayed at grid edge; window it")
    m = _pad_len(f.x.size, pad_factor)
    s = fourier_s_grid(f.x, m)
    fhat = forward_fft(f.values, f.x, m)
    hvals = inverse_fft(kernel_multiplier(spec, s) * fhat, f.x, m).real
    if b_grid is None:
        b_grid = geometric_b_grid(b_max=spec.b_max)
    vals = np.repeat(hvals[:, None], b_grid.size, axis=1).astype(complex)
    return StripField(f.x, b_grid, vals)


def _b_quad_weights(b_grid, kappa):
    """Weights integrating b^(1+kappa) g(b) db over (0, b_max] from samples.

    Product-trapezoid: g is taken linear in b inside each cell and the
    b^(1+kappa) weight is integrated exactly; the (0, b_min] tail uses
    g(b_min). Exact for b-independent fields.
    """
    p = kappa + 2
    w = np.zeros_like(b_grid)
    b0 = b_grid[:-1]
    b1 = b_grid[1:]
    mu0 = (b1**p - b0**p) / p
    mu1 = (b1 ** (p + 1) - b0 ** (p + 1)) / (p + 1)
    db = b1 - b0
    w[:-1] += (b1 * mu0 - mu1) / db
    w[1:] += (mu1 - b0 * mu0) / db
    w[0] += b_grid[0] ** p / p  # analytic tail below the first node
    return w


def reconstruct(spec, h, x):
    """(C^kappa h)(x): weighted strip integral of Cauchy kernels against h."""
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 0
    xq = np.atleast_1d(x)
    a = h.a_grid
    wb = _b_quad_weights(h.b_grid, spec.kappa)
    da = h.da
    # trapezoid weights in a
    wa = np.full(a.size, da)
    wa[0] *= 0.5
    wa[-1] *= 0.5
    acc = np.zeros(xq.size)
    d = xq[:, None] - a[None, :]
    for j, b in enumerate(h.b_grid):
        denom = d * d + b * b
        im_f = b / denom
        re_f = d / denom
        col = h.values[:, j]
        integ = im_f * col.real[None, :] + re_f * col.imag[None, :]
        acc += wb[j] * (integ @ wa)
    out = acc * 2.0 / math.factorial(1 + spec.kappa)
    return float(out[0]) if scalar else out


def rho_family(z_T, spec, a_grid=None, b_grid=None, window_R=None,
               pad_factor=PAD_FACTOR):
    """Concentrated strip density h with C^kappa h = Im f_{z_T}.

    h(a, b) = exp(-b/rho) * H(a) where H is the rho-shifted kernel applied to
    Im f_{z_T}; for kappa = 0 and rho = b_T / C0 with C0 moderately large the
    result is nonnegative. window_R multiplies the target by the chi_R
    mollifier first (the compactly windowed variant).
    """
    z_T = complex(z_T)
    a_T, b_T = z_T.real, z_T.imag
    if not (0.0 < b_T <= spec.b_max):
        raise ValueError(f"need 0 < Im z_T <= b_max = {spec.b_max}")
    rho = spec.rho if spec.rho is not None else b_T / C0_DEFAULT
    work = DecompositionSpec(spec.kappa, spec.b_max, rho)
    if a_grid is None:
        half = max(8.0, 60.0 * b_T)
        # resolve the width-b_T core; spectrum must die before Nyquist
        n = 1 << int(np.ceil(np.log2(max(4096, 20.0 * half / b_T))))
        a_grid = a_T + np.linspace(-half, half, n)
    m = _pad_len(a_grid.size, pad_factor)
    s = fourier_s_grid(a_grid, m)
    if window_R is not None:
        target = b_T / ((a_grid - a_T) ** 2 + b_T**2)
        target = target * mollifier_chi(a_grid, window_R)
        that = forward_fft(DensityGrid(a_grid, target).values, a_grid, m)
    else:
        # exact transform of the Poisson kernel; a numerical transform of the
        # truncated tail leaves an O(1/s) floor that the division by m_kappa
        # amplifies like s^(1+kappa)
        that = np.pi * np.exp(-b_T * np.abs(s) - 1j * a_T * s)
    H = inverse_fft(kernel_multiplier(work, s) * that, a_grid, m).real
    if b_grid is None:
        b_grid = geometric_b_grid(b_max=spec.b_max)
    vals = H[:, None] * np.exp(-b_grid / rho)[None, :]
    return StripField(a_grid, b_grid, vals.astype(complex))


def strip_l1(h, weight=None):
    """L1 norm of h over the upper strip; optional extra weight(b) factor."""
    wb = np.zeros_like(h.b_grid)
    b = h.b_grid
    db = np.diff(b)
    wb[:-1] += 0.5 * db
    wb[1:] += 0.5 * db
    wb[0] += b[0]  # flat tail down to b = 0
    if weight is not None:
        wb = wb * weight(b)
    da = h.da
    wa = np.full(h.a_grid.size, da)
    wa[0] *= 0.5
    wa[-1] *= 0.5
    return float(wa @ np.abs(h.values) @ wb)


def strip_linf(h):
    return float(np.max(np.abs(h.values)))


def mollifier_chi(x, R):
    """Smooth cutoff: 1 on [-R, R], 0 outside (-3R/2, 3R/2), C-infinity.

    Built from the standard exp(-1/t) transition on the shoulder.
    """
    x = np.asarray(x, dtype=float)
    u = (np.abs(x) - R) / (0.5 * R)
    out = np.ones_like(u)
    out[u >= 1.0] = 0.0
    mid = (u > 0.0) & (u < 1.0)
    if np.any(mid):
        t = u[mid]
        f1 = np.exp(-1.0 / (1.0 - t))
        f0 = np.exp(-1.0 / t)
        out[mid] = f1 / (f1 + f0)
    return out


# ---------------------------------------------------------------------------
# serialization


def density_to_csv(dg, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "rho"])
        for xi, vi in zip(dg.x, dg.values):
            w.writerow([repr(float(xi)), repr(float(vi))])


def density_from_csv(path):
    data = np.genfromtxt(path, delimiter=",", skip_header=1)
    return DensityGrid(data[:, 0], data[:, 1])


def strip_to_csv(sf, path, meta_path=None):
    """CSV columns (a, b, re, im); grid metadata in a JSON sidecar."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["a", "b", "re", "im"])
        for i, a in enumerate(sf.a_grid):
            for j, b in enumerate(sf.b_grid):
                v = sf.values[i, j]
                w.writerow(
                    [
                        repr(float(a)),
                        repr(float(b)),
                        repr(float(v.real)),
                        repr(float(v.imag)),
                    ]
                )
    if meta_path is None:
        meta_path = str(path) + ".json"
    meta = {
        "n_a": int(sf.a_grid.size),
        "n_b": int(sf.b_grid.size),
        "a_min": float(sf.a_grid[0]),
        "a_max": float(sf.a_grid[-1]),
        "b_min": float(sf.b_grid[0]),
        "b_max": float(sf.b_grid[-1]),
        "conjugate_symmetric": bool(sf.conjugate_symmetric),
    }
    with open(meta_path, "w") as fh:
        json.dump(meta, fh, indent=2)


def strip_from_csv(path, meta_path=None):
    if meta_path is None:
        meta_path = str(path) + ".json"
    with open(meta_path) as fh:
        meta = json.load(fh)
    data = np.genfromtxt(path, delimiter=",", skip_header=1)
    na, nb = meta["n_a"], meta["n_b"]
    a = data[::nb, 0]
    b = data[:nb, 1]
    vals = (data[:, 2] + 1j * data[:, 3]).reshape(na, nb)
    return StripField(a, b, vals, meta["conjugate_symmetric"])
