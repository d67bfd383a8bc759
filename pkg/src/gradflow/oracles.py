"""Independent ground-truth computations used to verify flow limits.

Everything here is deliberately brute-force or closed-form: subset
enumeration for the hard-margin SVM, principal-value quadrature for the
logarithmic integral, bisection for the 1-d non-separable equilibrium, and
a central-difference gradient checker. If a flow result disagrees with
these, the flow is wrong.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import NamedTuple

import numpy as np

from .linalg import RANK_CUTOFF, symmetric_eig
from .losses import Dataset

MAX_SVM_SAMPLES = 20
FEASIBILITY_SLACK = 1e-9


@dataclass(frozen=True)
class MarginSolution:
    """Hard-margin SVM answer: minimal-norm w with y_n w.x_n >= 1."""

    w_raw: np.ndarray
    w_tilde: np.ndarray
    margin: float
    support_indices: tuple


class NonSeparableError(ValueError):
    """Raised when no enumerated candidate satisfies every constraint."""

    def __init__(self, message, violated_indices):
        super().__init__(message)
        self.violated_indices = tuple(violated_indices)


def _solve_gram(gram, rhs):
    """Min-norm solution of the small symmetric system gram @ beta = rhs."""
    dec = symmetric_eig(gram, tol=1e-12)
    lam_max = float(np.abs(dec.eigenvalues).max(initial=0.0))
    if lam_max == 0.0:
        return None
    keep = dec.eigenvalues > RANK_CUTOFF * lam_max
    if not np.any(keep):
        return None
    vecs = dec.eigenvectors[:, keep]
    return vecs @ ((vecs.T @ rhs) / dec.eigenvalues[keep])


def hard_margin_svm(data: Dataset) -> MarginSolution:
    """Exact max-margin separator through the origin by subset enumeration.

    For each candidate support set S, solve the equality-constrained
    minimum-norm system y_n w.x_n = 1 (n in S) through the signed Gram
    matrix, keep candidates feasible on every constraint, and return the
    smallest-norm one. The optimum is determined by a linearly independent
    active set, which has at most d members, so subsets up to size d+1
    cover it; ties go to the first subset in lexicographic order.
    """
    if data.task != "binary":
        raise ValueError("hard_margin_svm needs binary -1/+1 labels")
    n, d = data.inputs.shape
    if n > MAX_SVM_SAMPLES:
        raise ValueError(
            f"subset enumeration is budgeted for N <= {MAX_SVM_SAMPLES}, got {n}"
        )
    signed = data.labels[:, None] * data.inputs
    best_w = None
    best_norm = None
    max_size = min(n, d + 1)
    for size in range(1, max_size + 1):
        for subset in combinations(range(n), size):
            z = signed[list(subset)]
            beta = _solve_gram(z @ z.T, np.ones(size))
            if beta is None:
                continue
            w = z.T @ beta
            if (signed @ w).min() < 1.0 - FEASIBILITY_SLACK:
                continue
            norm = float(w @ w)
            if best_norm is None or norm < best_norm * (1.0 - 1e-12):
                best_norm = norm
                best_w = w
    if best_w is None:
        # report the least-violating direction to make the failure concrete
        scores = signed @ signed.sum(axis=0)
        bad = np.nonzero(scores <= 0.0)[0]
        raise NonSeparableError(
            "no feasible separator found; samples "
            f"{bad.tolist()} oppose the aggregate direction",
            bad.tolist(),
        )
    norm = float(np.sqrt(best_w @ best_w))
    activations = signed @ best_w
    support = tuple(
        int(i) for i in np.nonzero(np.abs(activations - 1.0) <= 1e-9)[0]
    )
    return MarginSolution(
        w_raw=best_w,
        w_tilde=best_w / norm,
        margin=1.0 / norm,
        support_indices=support,
    )


def _adaptive_simpson(f, a, b, tol, max_depth=60):
    def rec(a, fa, b, fb, m, fm, whole, tol, depth):
        lm = 0.5 * (a + m)
        rm = 0.5 * (m + b)
        flm = f(lm)
        frm = f(rm)
        left = (m - a) / 6.0 * (fa + 4.0 * flm + fm)
        right = (b - m) / 6.0 * (fm + 4.0 * frm + fb)
        err = left + right - whole
        if depth <= 0 or abs(err) <= 15.0 * tol:
            return left + right + err / 15.0
        return rec(a, fa, m, fm, lm, flm, left, 0.5 * tol, depth - 1) + rec(
            m, fm, b, fb, rm, frm, right, 0.5 * tol, depth - 1
        )

    if a == b:
        return 0.0
    m = 0.5 * (a + b)
    fa, fb, fm = f(a), f(b), f(m)
    whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    return rec(a, fa, b, fb, m, fm, whole, tol, max_depth)


def _pv_pair(u: float) -> float:
    """1/log(1+u) + 1/log(1-u); the 1/u poles cancel, limit 1 at u=0."""
    if u < 1e-3:
        return 1.0 + u * u / 12.0
    return 1.0 / np.log1p(u) + 1.0 / np.log1p(-u)


def logarithmic_integral(z: float, tol: float = 1e-11) -> float:
    """Principal value of the integral of dt/log t from 0 to z, z > 1.

    The singularity at t=1 is handled by pairing symmetric points around
    it, which cancels the pole analytically; adaptive Simpson handles the
    three smooth pieces.
    """
    z = float(z)
    if not np.isfinite(z) or z <= 1.0:
        raise ValueError(f"logarithmic integral needs z > 1, got {z}")
    delta = min(0.5, 0.5 * (z - 1.0))
    scale = max(1.0, (z - 1.0) / np.log(z))
    piece_tol = tol * scale / 3.0
    total = _adaptive_simpson(
        lambda t: 1.0 / np.log(t) if t > 0.0 else 0.0, 0.0, 1.0 - delta, piece_tol
    )
    total += _adaptive_simpson(_pv_pair, 0.0, delta, piece_tol)
    total += _adaptive_simpson(lambda t: 1.0 / np.log(t), 1.0 + delta, z, piece_tol)
    return total


def inverse_logarithmic_integral(y: float, tol: float = 1e-12) -> float:
    """The z > 1 with li(z) = y, by bisection on the increasing branch."""
    lo = 1.0 + 1e-9
    while logarithmic_integral(lo) > y:
        lo = 1.0 + (lo - 1.0) / 1000.0
        if lo - 1.0 < 1e-15:
            raise ValueError(f"target {y} below the representable branch")
    hi = max(2.0, lo * 2.0)
    while logarithmic_integral(hi) < y:
        hi *= 2.0
        if hi > 1e300:
            raise ValueError(f"target {y} too large to invert")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if logarithmic_integral(mid) < y:
            lo = mid
        else:
            hi = mid
        if hi - lo <= tol * max(1.0, mid):
            break
    return 0.5 * (lo + hi)


def growth_closed_form(k: int, f_tilde: float, t: float, rho0: float = 0.0) -> float:
    """Closed-form per-layer scale rho(t) for the single-sample growth ODE
    rhodot = f * k * rho^(k-1) * exp(-rho^k * f), equal scales across layers.

    k=1 integrates to a plain logarithm; k=2 routes through the inverse
    logarithmic integral of exp(rho^2 f). Other depths have no closed form
    here; integrate numerically instead.
    """
    if f_tilde <= 0.0:
        raise ValueError("growth needs a positive margin value f_tilde")
    if t < 0.0:
        raise ValueError("time must be nonnegative")
    if k == 1:
        return float(np.log(f_tilde**2 * t + np.exp(rho0 * f_tilde)) / f_tilde)
    if k == 2:
        if rho0 <= 0.0:
            raise ValueError(
                "k=2 needs rho0 > 0; the all-zero scale is a fixed point"
            )
        c = logarithmic_integral(float(np.exp(f_tilde * rho0**2)))
        big_r = inverse_logarithmic_integral(4.0 * f_tilde * t + c)
        return float(np.sqrt(np.log(big_r) / f_tilde))
    raise ValueError(
        f"closed forms cover k in (1, 2); integrate k={k} numerically"
    )


def li_large_depth_form(z: float) -> float:
    """li(z) - z/log z, the depth limit of the growth antiderivative.

    Curiosity helper only; nothing downstream depends on it.
    """
    return logarithmic_integral(z) - z / np.log(z)


class Equilibrium1D(NamedTuple):
    w_star: float
    f_prime: float


def nonseparable_equilibrium_1d(x1: float, x2: float) -> Equilibrium1D:
    """Unique rest point of wdot = -x1 exp(x1 w) + x2 exp(-x2 w), 0 < x1 < x2.

    Found by bisection to 1e-12 and returned with the (always negative)
    derivative of the right-hand side there, so hyperbolicity is explicit.
    """
    if not 0.0 < x1 < x2:
        raise ValueError(f"need 0 < x1 < x2, got x1={x1}, x2={x2}")

    def rhs(w):
        return -x1 * np.exp(x1 * w) + x2 * np.exp(-x2 * w)

    lo, hi = 0.0, 1.0
    while rhs(hi) > 0.0:
        hi *= 2.0
        if hi > 1e6:
            raise RuntimeError("bisection bracket failed to close")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if rhs(mid) > 0.0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-12:
            break
    w_star = 0.5 * (lo + hi)
    f_prime = float(-x1**2 * np.exp(x1 * w_star) - x2**2 * np.exp(-x2 * w_star))
    return Equilibrium1D(float(w_star), f_prime)


def fd_gradient_check(f, grad, point, step: float = 1e-6) -> float:
    """Worst relative mismatch between an analytic gradient and central
    finite differences of f, normalized by the largest gradient magnitude.
    """
    point = np.asarray(point, dtype=float)
    grad_vec = np.asarray(grad(point) if callable(grad) else grad, dtype=float)
    grad_vec = grad_vec.reshape(-1)
    if grad_vec.shape != point.reshape(-1).shape:
        raise ValueError("gradient and point sizes differ")
    flat = point.reshape(-1)
    fd = np.zeros_like(flat)
    for i in range(flat.size):
        up = flat.copy()
        up[i] += step
        dn = flat.copy()
        dn[i] -= step
        f_up = float(f(up.reshape(point.shape)))
        f_dn = float(f(dn.reshape(point.shape)))
        if not (np.isfinite(f_up) and np.isfinite(f_dn)):
            raise ValueError(f"non-finite evaluation at coordinate {i}")
        fd[i] = (f_up - f_dn) / (2.0 * step)
    scale = max(float(np.abs(grad_vec).max()), float(np.abs(fd).max()), 1e-12)
    return float(np.abs(grad_vec - fd).max() / scale)
