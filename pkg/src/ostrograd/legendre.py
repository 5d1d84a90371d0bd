"""Legendre-Ostrogradsky maps, the unified-space Hamiltonian function, and
Hamiltonian construction for regular Lagrangians (exact symbolic inversion
when the top momenta are affine in the highest jets, damped Newton otherwise).
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import symexpr as sx
from .jetspace import JetSpec, total_derivative
from .lagrangian import Lagrangian, hessian, ostrogradsky_momenta, regularity
from .symexpr import Expr, diff, equivalent, substitute

NEWTON_TOL = 1e-12
NEWTON_MAX_ITERS = 50


class LegendreError(sx.ExprError):
    pass


class SingularLagrangianError(LegendreError):
    """Hessian not invertible: use the constraint algorithm instead."""


@dataclass(frozen=True)
class LegendreMap:
    """Restricted momenta p-hat[level][dof] plus the extended p component."""

    spec: JetSpec
    restricted: Tuple[Tuple[Expr, ...], ...]
    extended_p: Expr

    def momentum_bindings(self) -> Dict[str, Expr]:
        """Substitution map p{i}_{a} -> p-hat expressions (graph of FL)."""
        out = {}
        for i in range(self.spec.order):
            for ia, a in enumerate(self.spec.dofs):
                out["p%d_%s" % (i, a)] = self.restricted[i][ia]
        return out

    def top_bindings(self) -> Dict[str, Expr]:
        k = self.spec.order
        return {"p%d_%s" % (k - 1, a): self.restricted[k - 1][ia]
                for ia, a in enumerate(self.spec.dofs)}


@lru_cache(maxsize=None)
def legendre_map(lag: Lagrangian) -> LegendreMap:
    spec = lag.spec
    momenta = ostrogradsky_momenta(lag)
    extended = lag.L
    for r in range(1, spec.order + 1):
        for ia, a in enumerate(spec.dofs):
            extended = extended - spec.coord(r, a) * momenta[r - 1][ia]
    return LegendreMap(spec, momenta, extended)


@lru_cache(maxsize=None)
def unified_hamiltonian(lag: Lagrangian) -> Expr:
    """H-hat = -L + sum p^i_A q_{i+1}^A on the unified jet-momentum space."""
    spec = lag.spec
    out = -lag.L
    for i in range(spec.order):
        for a in spec.dofs:
            out = out + spec.momentum(i, a) * spec.coord(i + 1, a)
    return out


def _sym_gauss_solve(A: List[List[Expr]], b: List[Expr], seed: int = 0) -> List[Expr]:
    """Solve A x = b over the expression field (pivots checked by probing)."""
    n = len(b)
    A = [row[:] for row in A]
    b = b[:]
    perm = list(range(n))
    for col in range(n):
        pivot = None
        for r in range(col, n):
            if not equivalent(A[r][col], sx.ZERO, trials=4, seed=seed):
                pivot = r
                break
        if pivot is None:
            raise SingularLagrangianError("symbolic pivot vanished during inversion")
        A[col], A[pivot] = A[pivot], A[col]
        b[col], b[pivot] = b[pivot], b[col]
        inv = sx.pow_(A[col][col], Fraction(-1))
        for r in range(n):
            if r == col:
                continue
            factor = A[r][col] * inv
            if isinstance(factor, sx.Num) and factor.is_zero:
                continue
            for c in range(col, n):
                A[r][c] = A[r][c] - factor * A[col][c]
            b[r] = b[r] - factor * b[col]
    return [b[i] * sx.pow_(A[i][i], Fraction(-1)) for i in range(n)]


@dataclass(frozen=True)
class Hamiltonian:
    """Hamiltonian on (t, q_0..q_{k-1}, p^0..p^{k-1}).

    `expr` is set when the Legendre inversion succeeded symbolically;
    otherwise the Newton-backed numeric evaluator is used.
    """

    lag: Lagrangian
    provenance: str  # "symbolic" | "numeric"
    expr: Optional[Expr] = None

    def phase_names(self) -> List[str]:
        spec = self.lag.spec
        names = []
        for i in range(spec.order):
            for a in spec.dofs:
                names.append("q%d_%s" % (i, a))
        for i in range(spec.order):
            for a in spec.dofs:
                names.append("p%d_%s" % (i, a))
        return names

    # -- numeric protocol ---------------------------------------------------
    def value(self, t: float, state: Sequence[float], paramfns=None) -> float:
        if self.expr is not None:
            env = self._env(t, state)
            return sx.evaluate(self.expr, env, paramfns)
        return _newton_eval(self.lag, t, state, paramfns)[0]

    def gradient(self, t: float, state: Sequence[float], paramfns=None) -> np.ndarray:
        """(dH/dq_i^A, dH/dp^i_A) in the phase layout."""
        if self.expr is not None:
            grads = _symbolic_gradient(self)
            env = self._env(t, state)
            return np.array([sx.evaluate(g, env, paramfns) for g in grads])
        return _newton_eval(self.lag, t, state, paramfns)[1]

    def _env(self, t, state):
        env = {self.lag.spec.base: t}
        for name, v in zip(self.phase_names(), state):
            env[name] = v
        return env


@lru_cache(maxsize=None)
def _symbolic_gradient(H: Hamiltonian) -> Tuple[Expr, ...]:
    return tuple(diff(H.expr, sx.Sym(name)) for name in H.phase_names())


@lru_cache(maxsize=None)
def hamiltonian(lag: Lagrangian, probes: int = 32, seed: int = 0) -> Hamiltonian:
    """Invert the top Legendre block and build H per the regular recipe.

    Affine-in-q_k momenta are solved exactly; otherwise a Newton evaluator
    is returned.  Singular Lagrangians are rejected.
    """
    reg = regularity(lag, probes=max(probes, 16), seed=seed)
    if not reg.is_regular:
        raise SingularLagrangianError(
            "Hessian is not invertible: use the constraint algorithm")
    spec, k = lag.spec, lag.spec.order
    W = hessian(lag)
    affine = all(
        equivalent(diff(W.entries[ra][rb], spec.coord(k, c)), sx.ZERO, trials=4, seed=seed)
        for ra in range(spec.n) for rb in range(spec.n) for c in spec.dofs)
    if not affine:
        return Hamiltonian(lag, "numeric")
    top = ostrogradsky_momenta(lag)[k - 1]
    zero_qk = {("q%d_%s" % (k, a)): sx.ZERO for a in spec.dofs}
    bvec = [substitute(top[ia], zero_qk) for ia in range(spec.n)]
    rhs = [spec.momentum(k - 1, a) - bvec[ia] for ia, a in enumerate(spec.dofs)]
    A = [[W.entries[ra][rb] for rb in range(spec.n)] for ra in range(spec.n)]
    solved = _sym_gauss_solve(A, rhs, seed=seed)
    qk_sub = {("q%d_%s" % (k, a)): solved[ia] for ia, a in enumerate(spec.dofs)}
    H = sx.ZERO
    for i in range(k - 1):
        for a in spec.dofs:
            H = H + spec.momentum(i, a) * spec.coord(i + 1, a)
    for ia, a in enumerate(spec.dofs):
        H = H + spec.momentum(k - 1, a) * solved[ia]
    H = H - substitute(lag.L, qk_sub)
    return Hamiltonian(lag, "symbolic", H)


@lru_cache(maxsize=None)
def hamilton_equations(H: Hamiltonian) -> Tuple[Expr, ...]:
    """RHS expressions in the phase layout: qdot_i^A = dH/dp^i_A, pdot^i_A = -dH/dq_i^A.

    Only available for symbolic Hamiltonians; numeric ones integrate through
    `hamilton_rhs`.
    """
    if H.expr is None:
        raise LegendreError("no closed-form Hamiltonian: use hamilton_rhs")
    spec, k = H.lag.spec, H.lag.spec.order
    out = []
    for i in range(k):
        for a in spec.dofs:
            out.append(diff(H.expr, spec.momentum(i, a)))
    for i in range(k):
        for a in spec.dofs:
            out.append(-diff(H.expr, spec.coord(i, a)))
    return tuple(out)


def hamilton_rhs(H: Hamiltonian, paramfns=None) -> Callable[[float, np.ndarray], np.ndarray]:
    """Numeric RHS callable for the Hamilton equations."""
    spec, k = H.lag.spec, H.lag.spec.order
    n = spec.n
    if H.expr is not None:
        names = [spec.base] + H.phase_names()
        compiled = sx.compile_fn(hamilton_equations(H), names)

        def rhs(t, y):
            return np.array(compiled([t] + list(y), paramfns))

        return rhs

    def rhs_newton(t, y):
        _, grad = _newton_eval(H.lag, t, y, paramfns)
        qdot = grad[k * n:]
        pdot = -grad[:k * n]
        return np.concatenate([qdot, pdot])

    return rhs_newton


@lru_cache(maxsize=None)
def _newton_pieces(lag: Lagrangian):
    spec, k, n = lag.spec, lag.spec.order, lag.spec.n
    names = [spec.base] + ["q%d_%s" % (i, a) for i in range(k + 1) for a in spec.dofs]
    top = [diff(lag.L, spec.coord(k, a)) for a in spec.dofs]
    W = hessian(lag)
    wflat = [e for row in W.entries for e in row]
    grads = [diff(lag.L, spec.coord(i, a)) for i in range(k) for a in spec.dofs]
    return (names,
            sx.compile_fn(top, names),
            sx.compile_fn(wflat, names),
            sx.compile_fn(grads, names),
            sx.compile_fn([lag.L], names))


def _newton_eval(lag: Lagrangian, t: float, state, paramfns):
    """Solve p^{k-1} = dL/dq_k for q_k by damped Newton; return H and its gradient."""
    spec, k, n = lag.spec, lag.spec.order, lag.spec.n
    names, top_fn, w_fn, grad_fn, L_fn = _newton_pieces(lag)
    qpart = list(state[:k * n])
    pflat = np.asarray(state[k * n:], dtype=float)
    ptop = pflat[(k - 1) * n:]
    u = np.zeros(n)
    for it in range(NEWTON_MAX_ITERS):
        vals = [t] + qpart + list(u)
        r = np.array(top_fn(vals, paramfns)) - ptop
        if np.max(np.abs(r)) < NEWTON_TOL:
            break
        W = np.array(w_fn(vals, paramfns)).reshape(n, n)
        try:
            step = np.linalg.solve(W, r)
        except np.linalg.LinAlgError:
            step, *_ = np.linalg.lstsq(W, r, rcond=None)
        if np.max(np.abs(step)) < NEWTON_TOL:
            # flat spot (e.g. the zero initial guess of a quartic): nudge off it
            u = u + 0.1 * (1.0 + np.arange(n))
            continue
        lam = 1.0
        base = np.max(np.abs(r))
        for _ in range(20):
            cand = u - lam * step
            r2 = np.array(top_fn([t] + qpart + list(cand), paramfns)) - ptop
            if np.max(np.abs(r2)) < base:
                u = cand
                break
            lam *= 0.5
        else:
            raise LegendreError(
                "Newton failed to converge at t=%r, state=%r" % (t, list(state)))
    else:
        vals = [t] + qpart + list(u)
        r = np.array(top_fn(vals, paramfns)) - ptop
        if np.max(np.abs(r)) >= NEWTON_TOL:
            raise LegendreError(
                "Newton failed to converge at t=%r, state=%r" % (t, list(state)))
    vals = [t] + qpart + list(u)
    # H = sum_{i<k-1} p^i q_{i+1} + p^{k-1} u - L(q, u)
    H = float(np.dot(ptop, u)) - L_fn(vals, paramfns)[0]
    for i in range(k - 1):
        for ia in range(n):
            H += pflat[i * n + ia] * qpart[(i + 1) * n + ia]
    grad = np.zeros(2 * k * n)
    dL = np.array(grad_fn(vals, paramfns))
    for i in range(k):
        for ia in range(n):
            j = i * n + ia
            grad[j] = (pflat[(i - 1) * n + ia] if i >= 1 else 0.0) - dL[j]
    for i in range(k - 1):
        for ia in range(n):
            grad[k * n + i * n + ia] = qpart[(i + 1) * n + ia]
    grad[k * n + (k - 1) * n:] = u
    return H, grad
