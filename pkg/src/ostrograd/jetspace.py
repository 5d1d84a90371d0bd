"""Coordinate model of higher-order jet spaces over a trivial bundle.

A curve t -> (q^A(t)) is represented through its jet coordinates
(t, q_0^A, q_1^A, ..., q_m^A); the kernel symbol for level i of degree of
freedom `a` is `q{i}_{a}`, the conjugate momenta are `p{i}_{a}` and the
affine momentum dual to dt is `p`.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, Mapping, Optional, Sequence, Tuple

from . import symexpr as sx
from .symexpr import Expr, Sym, diff, equivalent

_COORD_RE = re.compile(r"^q(\d+)_(.+)$")
_MOMENTUM_RE = re.compile(r"^p(\d+)_(.+)$")


class JetError(sx.ExprError):
    pass


@dataclass(frozen=True)
class JetSpec:
    """Degrees of freedom, Lagrangian order and naming for one model.

    `params` declares the opaque parameter functions as
    (name, (argument symbol, ...)) pairs; a dict is accepted and normalized.
    """

    dofs: Tuple[str, ...]
    order: int
    base: str = "t"
    params: Tuple[Tuple[str, Tuple[str, ...]], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "dofs", tuple(self.dofs))
        if isinstance(self.params, dict):
            object.__setattr__(
                self, "params",
                tuple(sorted((name, tuple(args)) for name, args in self.params.items())))
        else:
            object.__setattr__(
                self, "params",
                tuple(sorted((name, tuple(args)) for name, args in self.params)))
        if len(self.dofs) < 1:
            raise JetError("need at least one degree of freedom")
        if self.order < 1:
            raise JetError("Lagrangian order must be >= 1")
        if len(set(self.dofs)) != len(self.dofs):
            raise JetError("duplicate degree-of-freedom names")
        names = set()
        for a in self.dofs:
            for i in range(0, 2 * self.order + 1):
                names.add("q%d_%s" % (i, a))
            for i in range(0, self.order):
                names.add("p%d_%s" % (i, a))
        names.add(self.base)
        clashes = {name for name, _ in self.params} & names
        if clashes:
            raise JetError("parameter names clash with coordinates: %s" % sorted(clashes))

    @property
    def n(self) -> int:
        return len(self.dofs)

    @property
    def k(self) -> int:
        return self.order

    def base_sym(self) -> Sym:
        return Sym(self.base)

    def coord(self, i: int, a) -> Sym:
        return Sym("q%d_%s" % (i, self._dof(a)))

    def momentum(self, i: int, a) -> Sym:
        if not 0 <= i < self.order:
            raise JetError("momentum level %d out of range" % i)
        return Sym("p%d_%s" % (i, self._dof(a)))

    def extended_momentum(self) -> Sym:
        return Sym("p")

    def _dof(self, a) -> str:
        if isinstance(a, int):
            return self.dofs[a]
        if a not in self.dofs:
            raise JetError("unknown degree of freedom %r" % a)
        return a

    def coords(self, up_to: int) -> list:
        return [self.coord(i, a) for i in range(up_to + 1) for a in self.dofs]

    def momenta(self) -> list:
        return [self.momentum(i, a) for i in range(self.order) for a in self.dofs]

    def coord_index(self, name: str) -> Optional[Tuple[int, str]]:
        m = _COORD_RE.match(name)
        if m and m.group(2) in self.dofs:
            return int(m.group(1)), m.group(2)
        return None

    def momentum_index(self, name: str) -> Optional[Tuple[int, str]]:
        m = _MOMENTUM_RE.match(name)
        if m and m.group(2) in self.dofs:
            i = int(m.group(1))
            if i < self.order:
                return i, m.group(2)
        return None

    def max_jet_order(self, e: Expr) -> int:
        top = -1
        for name in sx.free_symbols(e):
            idx = self.coord_index(name)
            if idx is not None:
                top = max(top, idx[0])
        return top

    def unified_symbols(self) -> list:
        """Coordinates of the restricted jet-momentum space, dimension 3kn+1."""
        syms = [self.base_sym()]
        syms += self.coords(2 * self.order - 1)
        syms += self.momenta()
        assert len(syms) == 3 * self.order * self.n + 1
        return syms

    @property
    def param_map(self) -> Dict[str, Tuple[str, ...]]:
        return dict(self.params)

    def par_apply(self, name: str) -> Expr:
        args = self.param_map.get(name)
        if args is None:
            raise JetError("undeclared parameter function %r" % name)
        return sx.par(name, [Sym(a) for a in args])


@dataclass(frozen=True)
class JetPoint:
    """Numeric point of a jet space at prolongation order m: t plus q[i][A]."""

    t: float
    q: Tuple[Tuple[float, ...], ...]

    def __post_init__(self):
        import math
        if not math.isfinite(self.t):
            raise JetError("non-finite base value")
        widths = {len(row) for row in self.q}
        if len(widths) > 1:
            raise JetError("ragged jet coordinate matrix")
        for row in self.q:
            for v in row:
                if not math.isfinite(v):
                    raise JetError("non-finite jet coordinate")

    @property
    def prolongation_order(self) -> int:
        return len(self.q) - 1

    def bindings(self, spec: JetSpec) -> Dict[str, float]:
        if self.q and len(self.q[0]) != spec.n:
            raise JetError("jet point has %d dofs, spec has %d" % (len(self.q[0]), spec.n))
        out = {spec.base: self.t}
        for i, row in enumerate(self.q):
            for a, v in zip(spec.dofs, row):
                out["q%d_%s" % (i, a)] = v
        return out

    def to_json_obj(self):
        return {"t": self.t, "q": [list(row) for row in self.q]}

    @staticmethod
    def from_json_obj(obj) -> "JetPoint":
        return JetPoint(float(obj["t"]), tuple(tuple(float(v) for v in row) for row in obj["q"]))


def total_derivative(spec: JetSpec, e: Expr, source_order: Optional[int] = None) -> Expr:
    """d_T e = de/dt + sum q_{i+1}^A de/dq_i^A; raises the jet order by one."""
    top = spec.max_jet_order(e)
    if source_order is None:
        source_order = max(top, 0)
    elif top > source_order:
        raise JetError(
            "expression uses jet order %d above declared source order %d" % (top, source_order))
    out = diff(e, spec.base_sym())
    for i in range(source_order + 1):
        for a in spec.dofs:
            d = diff(e, spec.coord(i, a))
            if isinstance(d, sx.Num) and d.is_zero:
                continue
            out = out + spec.coord(i + 1, a) * d
    return out


def iterated_total_derivative(spec: JetSpec, e: Expr, times: int,
                              source_order: Optional[int] = None) -> Expr:
    if times < 0:
        raise JetError("cannot apply the total derivative a negative number of times")
    out = e
    order = source_order
    for _ in range(times):
        out = total_derivative(spec, out, order)
        if order is not None:
            order += 1
    return out


@dataclass(frozen=True)
class VectorFieldAnsatz:
    """Vector field on a jet space or on the unified jet-momentum space.

    Components may contain free symbols standing for still-undetermined
    functions (the F unknowns of the constraint algorithm).
    """

    spec: JetSpec
    f: Expr
    jet: Mapping[Tuple[int, str], Expr]
    mom: Mapping[Tuple[int, str], Expr] = field(default_factory=dict)
    ambient_order: int = None  # type: ignore[assignment]

    def __post_init__(self):
        m = self.ambient_order
        if m is None:
            m = max((i for i, _ in self.jet), default=0)
            object.__setattr__(self, "ambient_order", m)
        for (i, a) in self.jet:
            if not (0 <= i <= m) or a not in self.spec.dofs:
                raise JetError("jet component q%d_%s out of range" % (i, a))
        for (i, a) in self.mom:
            if not (0 <= i < self.spec.order) or a not in self.spec.dofs:
                raise JetError("momentum component p%d_%s out of range" % (i, a))

    def apply(self, e: Expr) -> Expr:
        """Directional derivative of a function along the field."""
        out = self.f * diff(e, self.spec.base_sym())
        for (i, a), comp in sorted(self.jet.items()):
            d = diff(e, self.spec.coord(i, a))
            if isinstance(d, sx.Num) and d.is_zero:
                continue
            out = out + comp * d
        for (i, a), comp in sorted(self.mom.items()):
            d = diff(e, self.spec.momentum(i, a))
            if isinstance(d, sx.Num) and d.is_zero:
                continue
            out = out + comp * d
        return out

    def substitute(self, bindings) -> "VectorFieldAnsatz":
        return VectorFieldAnsatz(
            self.spec,
            sx.substitute(self.f, bindings),
            {k: sx.substitute(v, bindings) for k, v in self.jet.items()},
            {k: sx.substitute(v, bindings) for k, v in self.mom.items()},
            self.ambient_order,
        )


def classify_semispray(spec: JetSpec, v: VectorFieldAnsatz,
                       ambient_order: Optional[int] = None,
                       seed: int = 0) -> Optional[int]:
    """Largest holonomy chain type: smallest r with f_i^A = f q_{i+1}^A for i <= m-r.

    Returns None when even the type-m chain fails (not a semispray).
    """
    m = v.ambient_order if ambient_order is None else ambient_order
    best = None
    for r in range(m, 0, -1):
        ok = True
        for i in range(0, m - r + 1):
            for a in spec.dofs:
                comp = v.jet.get((i, a), sx.ZERO)
                want = v.f * spec.coord(i + 1, a)
                if not equivalent(comp, want, seed=seed):
                    ok = False
                    break
            if not ok:
                break
        if ok:
            best = r
        else:
            break
    return best
