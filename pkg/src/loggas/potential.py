"""Confining potentials: exact derivatives, convexity checks, and the cubic
Taylor remainder of V' used by the strip-operator calculus.

All shipped potential kinds reduce to polynomials, so every derivative up to
order 11 is computed exactly (no finite differencing anywhere downstream).
"""

import numpy as np

MAX_ORDER = 11
TOL_CONVEX = 1e-12
# below this |u| the direct W formula divides by u^3 and loses digits


class UnsupportedOrderError(ValueError):
    pass


class PotentialSpec:
    """A confining potential V given by polynomial coefficients.

    Parameters
    ----------
    kind : str
        One of "polynomial", "harmonic", "landau_ginzburg". Purely a label;
        the coefficient array is the source of truth.
    coeffs : array_like
        Polynomial coefficients of V in ascending order.

    The leading term must have even degree with a positive coefficient
    (confinement). Use the classmethod constructors for the named kinds.
    """

    def __init__(self, kind, coeffs):
        c = np.atleast_1d(np.asarray(coeffs, dtype=float))
        if c.size == 0 or not np.all(np.isfinite(c)):
            raise ValueError("potential coefficients must be a finite list")
        # trim trailing zeros so the degree test sees the true leading term
        nz = np.nonzero(c)[0]
        if nz.size == 0:
            # free system: V identically zero (no confinement requested)
            c = np.zeros(1)
            degree = 0
        else:
            c = c[: nz[-1] + 1]
            degree = c.size - 1
            if degree % 2 != 0 or c[-1] <= 0.0:
                raise ValueError(
                    f"leading term x^{degree} with coefficient {c[-1]} is not "
                    "confining (need even degree and positive coefficient)"
                )
        self.kind = kind
        self.coeffs = c
        self.degree = degree
        self.derivative_cache_order = MAX_ORDER
        # cache coefficients of V, V', ..., V^(11); exact for polynomials
        dc = [c]
        for _ in range(MAX_ORDER):
            prev = dc[-1]
            if prev.size > 1:
                dc.append(np.polynomial.polynomial.polyder(prev))
            else:
                dc.append(np.zeros(1))
        self._dcoeffs = dc

    @classmethod
    def harmonic(cls, scale=1.0):
        """V(x) = scale * x^2 / 2."""
        if scale <= 0:
            raise ValueError("harmonic scale must be positive")
        return cls("harmonic", [0.0, 0.0, 0.5 * scale])

    @classmethod
    def landau_ginzburg(cls, lam):
        """V(x) = x^2/2 + lam * x^4/4 with lam >= 0."""
        if lam < 0:
            raise ValueError("landau_ginzburg lambda must be >= 0")
        if lam == 0.0:
            return cls("landau_ginzburg", [0.0, 0.0, 0.5])
        return cls("landau_ginzburg", [0.0, 0.0, 0.5, 0.0, 0.25 * lam])

    @classmethod
    def free(cls):
        """V identically zero (pure repulsion plus noise)."""
        return cls("free", [0.0])

    @classmethod
    def polynomial(cls, coeffs):
        return cls("polynomial", coeffs)

    def deriv(self, x, order):
        """V^(order)(x), exact, vectorized over x."""
        if order < 0 or order > MAX_ORDER:
            raise UnsupportedOrderError(
                f"derivative order {order} outside 0..{MAX_ORDER}"
            )
        return np.polynomial.polynomial.polyval(x, self._dcoeffs[order])

    def __call__(self, x):
        return self.deriv(x, 0)

    def __repr__(self):
        return f"PotentialSpec({self.kind!r}, {self.coeffs.tolist()})"

    def to_dict(self):
        if self.kind == "free":
            return {"kind": "free"}
        if self.kind == "harmonic":
            return {"kind": "harmonic", "scale": 2.0 * self.coeffs[2]}
        if self.kind == "landau_ginzburg":
            lam = 4.0 * self.coeffs[4] if self.coeffs.size > 4 else 0.0
            return {"kind": "landau_ginzburg", "lambda": lam}
        return {"kind": "polynomial", "coefficients": self.coeffs.tolist()}

    @classmethod
    def from_dict(cls, d):
        kind = d["kind"]
        if kind == "free":
            return cls.free()
        if kind == "harmonic":
            return cls.harmonic(d.get("scale", 1.0))
        if kind == "landau_ginzburg":
            return cls.landau_ginzburg(d.get("lambda", d.get("lam", 1.0)))
        if kind == "polynomial":
            return cls.polynomial(d["coefficients"])
        raise ValueError(f"unknown potential kind {kind!r}")


def eval_derivatives(pot, x, max_order):
    """Return [V(x), V'(x), ..., V^(max_order)(x)].

    Exact for the polynomial representation; max_order must be <= 11.
    """
    if max_order > MAX_ORDER:
        raise UnsupportedOrderError(f"max_order {max_order} > {MAX_ORDER}")
    return [float(pot.deriv(x, k)) for k in range(max_order + 1)]


def convexity_check(pot, interval, n_grid=512, tol=TOL_CONVEX):
    """Check V'' >= -tol on a grid over the interval.

    Returns (ok, min_second_derivative). The check is restricted to the
    declared compact interval; no growth condition at infinity is verified.
    """
    if n_grid < 2:
        raise ValueError("n_grid must be >= 2")
    lo, hi = interval
    xs = np.linspace(lo, hi, n_grid)
    v2 = pot.deriv(xs, 2)
    vmin = float(np.min(v2))
    return vmin >= -tol, vmin


def taylor_remainder_W(pot, a, u):
    """Cubic Taylor remainder W_a(u) of V' around a.

    V'(a+u) = V'(a) + V''(a) u + V'''(a) u^2/2 + u^3 W_a(u), with
    W_a(0) = V''''(a)/6 by continuity. Evaluated as the terminating series
    W_a(u) = sum_m V^(4+m)(a) u^m / (m+3)!, which is exact for polynomial
    potentials and avoids the cancellation of dividing the remainder by u^3.

    Vectorized over u.
    """
    u = np.asarray(u, dtype=float)
    scalar = u.ndim == 0
    u = np.atleast_1d(u)
    acc = np.zeros_like(u)
    fact = 6.0  # (m+3)! starting at m=0
    upow = np.ones_like(u)
    for m in range(0, MAX_ORDER - 3):
        acc += pot.deriv(a, 4 + m) / fact * upow
        upow = upow * u
        fact *= m + 4
    return float(acc[0]) if scalar else acc
