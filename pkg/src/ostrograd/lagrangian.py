"""Lagrangian-side derivations: Hessian, regularity probing, Euler-Lagrange
expressions and the Poincare-Cartan forms as symbolic coefficient arrays."""

from __future__ import annotations

import random
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import symexpr as sx
from .jetspace import JetSpec, iterated_total_derivative, total_derivative
from .symexpr import Expr, diff, equivalent

RANK_TOL = 1e-8


class LagrangianError(sx.ExprError):
    pass


@dataclass(frozen=True)
class Lagrangian:
    spec: JetSpec
    L: Expr

    def __post_init__(self):
        top = self.spec.max_jet_order(self.L)
        if top > self.spec.order:
            raise LagrangianError(
                "Lagrangian references jet order %d above its declared order %d"
                % (top, self.spec.order))

    def probe_signatures(self):
        sigs = dict(sx.par_signatures(self.L))
        for name, args in self.spec.params:
            arity = len(args)
            if name not in sigs:
                sigs[name] = (arity, 0)
        return sigs


@dataclass(frozen=True)
class HessianMatrix:
    entries: Tuple[Tuple[Expr, ...], ...]

    @property
    def n(self) -> int:
        return len(self.entries)

    def is_symmetric(self, seed: int = 0) -> bool:
        n = self.n
        return all(
            equivalent(self.entries[a][b], self.entries[b][a], seed=seed)
            for a in range(n) for b in range(a + 1, n))


@dataclass(frozen=True)
class Regularity:
    status: str  # "regular" | "singular"
    corank: int
    probes: int
    hyperregular: str = "undecided"

    @property
    def is_regular(self) -> bool:
        return self.status == "regular"


@dataclass(frozen=True)
class OneForm:
    """Coefficients of dt and dq_i^A over the phase space of order 2k-1."""

    coords: Tuple[str, ...]
    coeffs: Tuple[Expr, ...]

    def coeff(self, name: str) -> Expr:
        return self.coeffs[self.coords.index(name)]


@dataclass(frozen=True)
class TwoForm:
    """Antisymmetric coefficient matrix M with Omega(X, Y) = X^T M Y."""

    coords: Tuple[str, ...]
    matrix: Tuple[Tuple[Expr, ...], ...]

    def is_antisymmetric(self, seed: int = 0) -> bool:
        d = len(self.coords)
        return all(
            equivalent(self.matrix[i][j], -self.matrix[j][i], seed=seed)
            for i in range(d) for j in range(i, d))

    def evaluate(self, bindings, paramfns=None) -> np.ndarray:
        d = len(self.coords)
        out = np.zeros((d, d))
        for i in range(d):
            for j in range(d):
                e = self.matrix[i][j]
                if isinstance(e, sx.Num) and e.is_zero:
                    continue
                out[i, j] = sx.evaluate(e, bindings, paramfns)
        return out


@lru_cache(maxsize=None)
def hessian(lag: Lagrangian) -> HessianMatrix:
    """W_AB = d^2 L / dq_k^A dq_k^B."""
    spec, k = lag.spec, lag.spec.order
    rows = []
    for a in spec.dofs:
        da = diff(lag.L, spec.coord(k, a))
        rows.append(tuple(diff(da, spec.coord(k, b)) for b in spec.dofs))
    return HessianMatrix(tuple(rows))


def _probe_point(rng: random.Random, lag: Lagrangian, exprs: Sequence[Expr]):
    names = set()
    for e in exprs:
        names |= sx.free_symbols(e)
    sigs = dict(lag.probe_signatures())
    for e in exprs:
        for name, (arity, dmax) in sx.par_signatures(e).items():
            cur = sigs.get(name)
            if cur is None or dmax > cur[1]:
                sigs[name] = (arity, dmax)
    return sx.probe_env(rng, names, sigs)


def regularity(lag: Lagrangian, probes: int = 64, seed: int = 0) -> Regularity:
    """Probe det W at random points: regular iff the determinant is not
    identically zero; singular otherwise, with the largest observed corank."""
    W = hessian(lag)
    n = W.n
    rng = random.Random(seed)
    flat = [e for row in W.entries for e in row]
    successes = 0
    max_corank = 0
    for _ in range(probes):
        for attempt in range(10):
            env, params = _probe_point(rng, lag, flat)
            try:
                M = np.array([[sx.evaluate(e, env, params) for e in row]
                              for row in W.entries])
            except sx.EvalError:
                continue
            successes += 1
            sv = np.linalg.svd(M, compute_uv=False) if n > 1 else np.abs(M.reshape(1))
            scale = max(sv[0], 1.0)
            rank = int(np.sum(sv > RANK_TOL * scale))
            if rank == n:
                return Regularity("regular", 0, probes)
            max_corank = max(max_corank, n - rank)
            break
    if successes == 0:
        raise LagrangianError("probe domain exhausted while testing regularity")
    return Regularity("singular", max_corank, probes)


@lru_cache(maxsize=None)
def euler_lagrange(lag: Lagrangian) -> Tuple[Expr, ...]:
    """EL^A = sum_{i=0..k} (-1)^i d_T^i (dL/dq_i^A), over jet order 2k."""
    spec, k = lag.spec, lag.spec.order
    out = []
    for a in spec.dofs:
        total = sx.ZERO
        for i in range(k + 1):
            term = iterated_total_derivative(spec, diff(lag.L, spec.coord(i, a)), i)
            total = total + (term if i % 2 == 0 else -term)
        out.append(total)
    return tuple(out)


@lru_cache(maxsize=None)
def ostrogradsky_momenta(lag: Lagrangian) -> Tuple[Tuple[Expr, ...], ...]:
    """p-hat_A^{r-1} = sum_{i=0..k-r} (-1)^i d_T^i (dL/dq_{r+i}^A), r = 1..k.

    Indexed [level][dof] with level = r-1 running 0..k-1; expressions live on
    jet order 2k-1.
    """
    spec, k = lag.spec, lag.spec.order
    levels = []
    for r in range(1, k + 1):
        row = []
        for a in spec.dofs:
            total = sx.ZERO
            for i in range(k - r + 1):
                term = iterated_total_derivative(spec, diff(lag.L, spec.coord(r + i, a)), i)
                total = total + (term if i % 2 == 0 else -term)
            row.append(total)
        levels.append(tuple(row))
    return tuple(levels)


def phase_coords(spec: JetSpec) -> Tuple[str, ...]:
    """Coordinate names of J^{2k-1}: base then q_i^A by level."""
    names = [spec.base]
    for i in range(2 * spec.order):
        for a in spec.dofs:
            names.append("q%d_%s" % (i, a))
    return tuple(names)


@lru_cache(maxsize=None)
def poincare_cartan_1form(lag: Lagrangian) -> OneForm:
    """Theta_L = sum_r p-hat^{r-1}_A (dq_{r-1}^A - q_r^A dt) + L dt."""
    spec, k = lag.spec, lag.spec.order
    momenta = ostrogradsky_momenta(lag)
    coords = phase_coords(spec)
    coeffs = {name: sx.ZERO for name in coords}
    dt_coeff = lag.L
    for r in range(1, k + 1):
        for ia, a in enumerate(spec.dofs):
            p = momenta[r - 1][ia]
            coeffs["q%d_%s" % (r - 1, a)] = p
            dt_coeff = dt_coeff - spec.coord(r, a) * p
    coeffs[spec.base] = dt_coeff
    return OneForm(coords, tuple(coeffs[name] for name in coords))


@lru_cache(maxsize=None)
def poincare_cartan_2form(lag: Lagrangian) -> TwoForm:
    """Omega_L = -d Theta_L, computed by formal exterior differentiation."""
    theta = poincare_cartan_1form(lag)
    coords = theta.coords
    d = len(coords)
    matrix = []
    for mu in range(d):
        row = []
        dmu = sx.Sym(coords[mu])
        for nu in range(d):
            # M[mu][nu] = d(c_mu)/dx_nu - d(c_nu)/dx_mu
            row.append(diff(theta.coeffs[mu], sx.Sym(coords[nu]))
                       - diff(theta.coeffs[nu], dmu))
        matrix.append(tuple(row))
    return TwoForm(coords, tuple(matrix))


def two_form_rank(form: TwoForm, bindings, paramfns=None, drop_base: bool = False) -> int:
    M = form.evaluate(bindings, paramfns)
    if drop_base:
        M = M[1:, 1:]
    sv = np.linalg.svd(M, compute_uv=False)
    if sv.size == 0:
        return 0
    scale = max(sv[0], 1.0)
    return int(np.sum(sv > RANK_TOL * scale))
