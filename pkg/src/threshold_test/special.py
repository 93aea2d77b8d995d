"""Beta-distribution CDF, gamma-family helpers and a small forward-mode AD type.

Two evaluation paths share one algorithm (the modified Lentz continued
fraction for the regularized incomplete beta function):

* a generic pure-Python path that works on floats or :class:`Dual` numbers,
  convenient for testing and for differentiating w.r.t. arbitrary inputs;
* a numba-compiled kernel that carries the two tangents ``d/da`` and
  ``d/db`` inline and works in log space.  The likelihood uses this one.
"""

from __future__ import annotations

import math
from typing import Sequence

import numba
import numpy as np

__all__ = [
    "Dual",
    "dual_exp",
    "dual_log",
    "log_gamma",
    "digamma",
    "log_beta",
    "beta_logpdf",
    "reg_inc_beta",
    "reg_inc_beta_grad",
    "reg_inc_beta_dual",
    "log_beta_tails",
]

CF_TOL = 1e-14
CF_MAXIT = 500
_FPMIN = 1e-300


class Dual:
    """Scalar carrying a value and a fixed-length vector of partials.

    >>> x = Dual(2.0, [1.0, 0.0]); y = Dual(3.0, [0.0, 1.0])
    >>> (x * y).partials.tolist()
    [3.0, 2.0]
    """

    __slots__ = ("value", "partials")

    def __init__(self, value: float, partials: Sequence[float] | np.ndarray):
        self.value = float(value)
        self.partials = np.asarray(partials, dtype=float)

    @classmethod
    def variable(cls, value: float, index: int, size: int) -> "Dual":
        p = np.zeros(size)
        p[index] = 1.0
        return cls(value, p)

    def _lift(self, other) -> "Dual":
        if isinstance(other, Dual):
            if other.partials.shape != self.partials.shape:
                raise ValueError("partials length mismatch")
            return other
        return Dual(other, np.zeros_like(self.partials))

    def __repr__(self) -> str:
        return f"Dual({self.value!r}, {self.partials.tolist()!r})"

    def __float__(self) -> float:
        return self.value

    def __neg__(self):
        return Dual(-self.value, -self.partials)

    def __pos__(self):
        return self

    def __abs__(self):
        return -self if self.value < 0 else self

    def __add__(self, other):
        o = self._lift(other)
        return Dual(self.value + o.value, self.partials + o.partials)

    __radd__ = __add__

    def __sub__(self, other):
        o = self._lift(other)
        return Dual(self.value - o.value, self.partials - o.partials)

    def __rsub__(self, other):
        return self._lift(other) - self

    def __mul__(self, other):
        o = self._lift(other)
        return Dual(self.value * o.value, self.partials * o.value + o.partials * self.value)

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = self._lift(other)
        v = self.value / o.value
        return Dual(v, (self.partials - v * o.partials) / o.value)

    def __rtruediv__(self, other):
        return self._lift(other) / self

    def __pow__(self, other):
        if isinstance(other, Dual):
            return dual_exp(other * dual_log(self))
        v = self.value**other
        return Dual(v, other * self.value ** (other - 1) * self.partials)

    def __rpow__(self, other):
        return dual_exp(self * math.log(other))

    # comparisons act on the primal value so control flow follows the primal pass
    def __lt__(self, other):
        return self.value < float(other)

    def __le__(self, other):
        return self.value <= float(other)

    def __gt__(self, other):
        return self.value > float(other)

    def __ge__(self, other):
        return self.value >= float(other)


def _val(x) -> float:
    return x.value if isinstance(x, Dual) else float(x)


def dual_exp(x):
    if isinstance(x, Dual):
        v = math.exp(x.value)
        return Dual(v, v * x.partials)
    return math.exp(x)


def dual_log(x):
    if isinstance(x, Dual):
        return Dual(math.log(x.value), x.partials / x.value)
    return math.log(x)


def _dual_log1p(x):
    if isinstance(x, Dual):
        return Dual(math.log1p(x.value), x.partials / (1.0 + x.value))
    return math.log1p(x)


# ---------------------------------------------------------------------------
# gamma family


@numba.njit(cache=True)
def _digamma(x):
    r = 0.0
    while x < 10.0:
        r -= 1.0 / x
        x += 1.0
    f = 1.0 / (x * x)
    t = f * (
        -1.0 / 12
        + f * (1.0 / 120 + f * (-1.0 / 252 + f * (1.0 / 240 + f * (-1.0 / 132 + f * (691.0 / 32760 - f / 12.0)))))
    )
    return r + math.log(x) - 0.5 / x + t


def log_gamma(x):
    """Natural log of the gamma function for ``x > 0``.

    Accepts a :class:`Dual`, in which case the tangent is scaled by digamma.
    """
    v = _val(x)
    if not v > 0 or not math.isfinite(v):
        raise ValueError(f"log_gamma domain error: x={v}")
    out = math.lgamma(v)
    if isinstance(x, Dual):
        return Dual(out, _digamma(v) * x.partials)
    return out


def digamma(x: float) -> float:
    if not x > 0:
        raise ValueError(f"digamma domain error: x={x}")
    return float(_digamma(float(x)))


def log_beta(a, b):
    return log_gamma(a) + log_gamma(b) - log_gamma(a + b)


def beta_logpdf(x: float, a: float, b: float) -> float:
    if not (0.0 < x < 1.0):
        raise ValueError("beta_logpdf requires 0 < x < 1")
    return (a - 1.0) * math.log(x) + (b - 1.0) * math.log1p(-x) - log_beta(a, b)


def _check_args(x, a, b):
    xv, av, bv = _val(x), _val(a), _val(b)
    if not (0.0 <= xv <= 1.0) or not av > 0 or not bv > 0:
        raise ValueError(f"reg_inc_beta domain error: x={xv}, a={av}, b={bv}")
    if not (math.isfinite(av) and math.isfinite(bv)):
        raise ValueError("reg_inc_beta requires finite a, b")


# ---------------------------------------------------------------------------
# generic (float or Dual) path


def _betacf_generic(x, a, b):
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(_val(d)) < _FPMIN:
        d = _FPMIN
    d = 1.0 / d
    h = d
    for m in range(1, CF_MAXIT + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(_val(d)) < _FPMIN:
            d = _FPMIN
        c = 1.0 + aa / c
        if abs(_val(c)) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        h = h * d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(_val(d)) < _FPMIN:
            d = _FPMIN
        c = 1.0 + aa / c
        if abs(_val(c)) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        delta = d * c
        h = h * delta
        if abs(_val(delta) - 1.0) < CF_TOL:
            if not isinstance(delta, Dual) or np.all(np.abs(delta.partials) < CF_TOL):
                break
    return h


def _log_front(x, a, b):
    return a * dual_log(x) + b * _dual_log1p(-x) - dual_log(a) - log_beta(a, b)


def reg_inc_beta_dual(x, a, b):
    """``I_x(a, b)`` for float or :class:`Dual` arguments.

    Same continued fraction and branch rule as the compiled kernel; slow,
    but differentiates w.r.t. whichever inputs carry tangents.
    """
    _check_args(x, a, b)
    xv, av, bv = _val(x), _val(a), _val(b)
    size = next((z.partials.shape for z in (x, a, b) if isinstance(z, Dual)), None)
    if xv == 0.0 or xv == 1.0:
        return Dual(xv, np.zeros(size)) if size is not None else xv
    if xv < (av + 1.0) / (av + bv + 2.0):
        return dual_exp(_log_front(x, a, b)) * _betacf_generic(x, a, b)
    return 1.0 - dual_exp(_log_front(1.0 - x, b, a)) * _betacf_generic(1.0 - x, b, a)


# ---------------------------------------------------------------------------
# compiled path


@numba.njit(cache=True)
def _lbeta(a, b):
    return math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)


@numba.njit(cache=True)
def _betacf_tangent(x, a, b):
    """Continued fraction with tangents w.r.t. a and b.

    Returns ``(log h, dlogh/da, dlogh/db, converged)``; the iteration stops
    once both the primal and the tangent increments have converged.
    """
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    c_a = 0.0
    c_b = 0.0
    d = 1.0 - qab * x / qap
    d_a = -x * (1.0 - b) / (qap * qap)
    d_b = -x / qap
    if abs(d) < _FPMIN:
        d = _FPMIN
        d_a = 0.0
        d_b = 0.0
    d_a = -d_a / (d * d)
    d_b = -d_b / (d * d)
    d = 1.0 / d
    h = d
    h_a = d_a
    h_b = d_b
    converged = False
    for m in range(1, CF_MAXIT + 1):
        m2 = 2.0 * m
        # even step
        den1 = qam + m2
        den2 = a + m2
        aa = m * (b - m) * x / (den1 * den2)
        aa_a = -aa * (1.0 / den1 + 1.0 / den2)
        aa_b = m * x / (den1 * den2)
        dt = 1.0 + aa * d
        dt_a = aa_a * d + aa * d_a
        dt_b = aa_b * d + aa * d_b
        if abs(dt) < _FPMIN:
            dt = _FPMIN
            dt_a = 0.0
            dt_b = 0.0
        cn = 1.0 + aa / c
        cn_a = aa_a / c - aa * c_a / (c * c)
        cn_b = aa_b / c - aa * c_b / (c * c)
        if abs(cn) < _FPMIN:
            cn = _FPMIN
            cn_a = 0.0
            cn_b = 0.0
        c, c_a, c_b = cn, cn_a, cn_b
        d = 1.0 / dt
        d_a = -dt_a * d * d
        d_b = -dt_b * d * d
        dl = d * c
        dl_a = d_a * c + d * c_a
        dl_b = d_b * c + d * c_b
        h_a = h_a * dl + h * dl_a
        h_b = h_b * dl + h * dl_b
        h = h * dl
        # odd step
        den1 = a + m2
        den2 = qap + m2
        aa = -(a + m) * (qab + m) * x / (den1 * den2)
        aa_a = aa * (1.0 / (a + m) + 1.0 / (qab + m) - 1.0 / den1 - 1.0 / den2)
        aa_b = aa / (qab + m)
        dt = 1.0 + aa * d
        dt_a = aa_a * d + aa * d_a
        dt_b = aa_b * d + aa * d_b
        if abs(dt) < _FPMIN:
            dt = _FPMIN
            dt_a = 0.0
            dt_b = 0.0
        cn = 1.0 + aa / c
        cn_a = aa_a / c - aa * c_a / (c * c)
        cn_b = aa_b / c - aa * c_b / (c * c)
        if abs(cn) < _FPMIN:
            cn = _FPMIN
            cn_a = 0.0
            cn_b = 0.0
        c, c_a, c_b = cn, cn_a, cn_b
        d = 1.0 / dt
        d_a = -dt_a * d * d
        d_b = -dt_b * d * d
        dl = d * c
        dl_a = d_a * c + d * c_a
        dl_b = d_b * c + d * c_b
        h_a = h_a * dl + h * dl_a
        h_b = h_b * dl + h * dl_b
        h = h * dl
        if abs(dl - 1.0) < CF_TOL and abs(dl_a) < CF_TOL and abs(dl_b) < CF_TOL:
            converged = True
            break
    return math.log(h), h_a / h, h_b / h, converged


@numba.njit(cache=True)
def _log1mexp(v):
    # log(1 - exp(v)) for v <= 0
    if v > -0.6931471805599453:
        return math.log(-math.expm1(v))
    return math.log1p(-math.exp(v))


@numba.njit(cache=True)
def _log_tails(x, a, b):
    """log I_x(a,b) and log(1 - I_x(a,b)) with their a- and b-derivatives.

    Returns (logL, logL_a, logL_b, logU, logU_a, logU_b, converged).
    """
    if x <= 0.0:
        return -np.inf, 0.0, 0.0, 0.0, 0.0, 0.0, True
    if x >= 1.0:
        return 0.0, 0.0, 0.0, -np.inf, 0.0, 0.0, True
    psi_ab = _digamma(a + b)
    if x < (a + 1.0) / (a + b + 2.0):
        lh, lh_a, lh_b, ok = _betacf_tangent(x, a, b)
        logL = a * math.log(x) + b * math.log1p(-x) - math.log(a) - _lbeta(a, b) + lh
        logL_a = math.log(x) - 1.0 / a - _digamma(a) + psi_ab + lh_a
        logL_b = math.log1p(-x) - _digamma(b) + psi_ab + lh_b
        logU = _log1mexp(logL)
        r = -1.0 / math.expm1(-logL)  # -L/(1-L)
        return logL, logL_a, logL_b, logU, r * logL_a, r * logL_b, ok
    y = 1.0 - x
    lh, lh_b, lh_a, ok = _betacf_tangent(y, b, a)
    logU = b * math.log(y) + a * math.log(x) - math.log(b) - _lbeta(a, b) + lh
    logU_b = math.log(y) - 1.0 / b - _digamma(b) + psi_ab + lh_b
    logU_a = math.log(x) - _digamma(a) + psi_ab + lh_a
    logL = _log1mexp(logU)
    r = -1.0 / math.expm1(-logU)
    return logL, r * logU_a, r * logU_b, logU, logU_a, logU_b, ok


@numba.njit(cache=True)
def _beta_logpdf(x, a, b):
    return (a - 1.0) * math.log(x) + (b - 1.0) * math.log1p(-x) - _lbeta(a, b)


def log_beta_tails(x: float, a: float, b: float):
    """``(log I_x(a,b), log(1 - I_x(a,b)))`` without cancellation in either tail."""
    _check_args(x, a, b)
    out = _log_tails(float(x), float(a), float(b))
    return out[0], out[3]


def reg_inc_beta(x: float, a: float, b: float) -> float:
    """Regularized incomplete beta function ``I_x(a, b)``.

    Parameters
    ----------
    x : float
        Upper integration limit, ``0 <= x <= 1``.
    a, b : float
        Positive shape parameters.
    """
    if isinstance(x, Dual) or isinstance(a, Dual) or isinstance(b, Dual):
        return reg_inc_beta_dual(x, a, b)
    _check_args(x, a, b)
    logL, _, _, logU, _, _, _ = _log_tails(float(x), float(a), float(b))
    # take whichever tail is smaller directly
    if logL <= logU:
        return math.exp(logL)
    return -math.expm1(logU)


def reg_inc_beta_grad(x: float, a: float, b: float) -> tuple[float, float, float]:
    """Partial derivatives ``(dI/dx, dI/da, dI/db)`` of ``I_x(a, b)``.

    ``dI/dx`` is the beta density. At ``x`` in {0, 1} the function is constant
    in ``a`` and ``b`` and the call raises; use :func:`reg_inc_beta_grad_or_zero`
    when the boundary convention is wanted instead.
    """
    _check_args(x, a, b)
    if x <= 0.0 or x >= 1.0:
        raise ValueError("reg_inc_beta_grad requires 0 < x < 1")
    return _grad_interior(float(x), float(a), float(b))


def reg_inc_beta_grad_or_zero(x: float, a: float, b: float) -> tuple[float, float, float]:
    _check_args(x, a, b)
    if x <= 0.0 or x >= 1.0:
        return 0.0, 0.0, 0.0
    return _grad_interior(float(x), float(a), float(b))


def _grad_interior(x, a, b):
    logL, logL_a, logL_b, logU, logU_a, logU_b, _ = _log_tails(x, a, b)
    dens = math.exp(_beta_logpdf(x, a, b))
    if logL <= logU:
        L = math.exp(logL)
        return dens, L * logL_a, L * logL_b
    U = math.exp(logU)
    return dens, -U * logU_a, -U * logU_b
