"""Presymplectic constraint algorithm on the unified jet-momentum space.

Two coupled tiers drive the iteration:

* graph tier: the relations xi^i_A = p^i_A - p-hat^i_A tie the momenta to
  the jets.  Their tangency rows form the linear system that determines the
  undetermined vector-field components (and, where the Hessian degenerates,
  the compatibility residuals).
* image tier: momentum-space constraint functions.  The primary ones are
  obtained by eliminating the highest jets from the top momentum block; the
  iteration then reduces Lie derivatives with the lower momenta kept as free
  coordinates, which is what makes the reported constraints projectable to
  the Hamiltonian side.

Reduction modulo the active constraints is rule-based: substitution of the
graph relations, momentum components solved from constraints linear in them,
parameter-function atoms forced to vanish (with their formal derivatives),
and sum-of-squares constraints zeroing each squared symbol.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import symexpr as sx
from .jetspace import JetSpec, VectorFieldAnsatz, classify_semispray
from .lagrangian import Lagrangian, hessian
from .legendre import LegendreMap, legendre_map
from .symexpr import Expr, Num, Par, Sym, diff, equivalent, substitute

PROBE_TRIALS = 8
FIT_DENOMINATOR_CAP = 64


class ConstraintError(sx.ExprError):
    pass


@dataclass(frozen=True)
class Constraint:
    label: str
    expr: Expr
    generation: int
    tier: str  # "graph" | "image"
    projectable: bool

    def to_json_obj(self):
        return {"label": self.label, "expr": sx.to_prefix(self.expr),
                "gen": self.generation, "tier": self.tier,
                "projectable": self.projectable}


@dataclass
class ConstraintLedger:
    lag: Lagrangian
    constraints: List[Constraint]
    status: str = "running"  # stabilized | max-generations-hit | inconsistent
    solved_components: Dict[str, Expr] = field(default_factory=dict)
    undetermined: Tuple[str, ...] = ()
    ansatz: Optional[VectorFieldAnsatz] = None

    def generation(self, g: int, tier: Optional[str] = None) -> List[Constraint]:
        return [c for c in self.constraints
                if c.generation == g and (tier is None or c.tier == tier)]

    @property
    def max_generation(self) -> int:
        return max((c.generation for c in self.constraints), default=-1)

    def image_generations(self) -> List[List[Constraint]]:
        out = []
        for g in range(self.max_generation + 1):
            out.append(self.generation(g, tier="image"))
        while out and not out[-1]:
            out.pop()
        return out

    def to_json_obj(self):
        return {
            "generations": [c.to_json_obj() for c in self.constraints],
            "status": self.status,
            "solved_components": {k: sx.to_prefix(v)
                                  for k, v in sorted(self.solved_components.items())},
            "undetermined": list(self.undetermined),
        }


# ---------------------------------------------------------------------------
# ansatz


def unknown_name(j: int, a: str) -> str:
    return "F%d_%s" % (j, a)


def build_ansatz(lag: Lagrangian, force_type1: bool = False) -> VectorFieldAnsatz:
    """Unified-space vector field with gauge f = 1: chain components below the
    Lagrangian order, free F components above it (or the full type-1 chain),
    momentum components from the dynamical equations."""
    spec, k = lag.spec, lag.spec.order
    jet = {}
    for i in range(k):
        for a in spec.dofs:
            jet[(i, a)] = spec.coord(i + 1, a)
    for j in range(k, 2 * k):
        for a in spec.dofs:
            if j == 2 * k - 1:
                jet[(j, a)] = Sym(unknown_name(j, a))
            elif force_type1:
                jet[(j, a)] = spec.coord(j + 1, a)
            else:
                jet[(j, a)] = Sym(unknown_name(j, a))
    mom = {}
    for a in spec.dofs:
        mom[(0, a)] = diff(lag.L, spec.coord(0, a))
    for i in range(1, k):
        for a in spec.dofs:
            mom[(i, a)] = diff(lag.L, spec.coord(i, a)) - spec.momentum(i - 1, a)
    return VectorFieldAnsatz(spec, sx.ONE, jet, mom, ambient_order=2 * k - 1)


def unknown_symbols(lag: Lagrangian, force_type1: bool = False) -> List[str]:
    spec, k = lag.spec, lag.spec.order
    if force_type1:
        return [unknown_name(2 * k - 1, a) for a in spec.dofs]
    return [unknown_name(j, a) for j in range(k, 2 * k) for a in spec.dofs]


def lie_derivative(v: VectorFieldAnsatz, xi: Expr) -> Expr:
    """Directional derivative of a constraint function along the field."""
    return v.apply(xi)


# ---------------------------------------------------------------------------
# probing helpers


def _signatures(lag: Lagrangian, exprs: Sequence[Expr]):
    sigs = dict(lag.probe_signatures())
    for e in exprs:
        for name, (arity, dmax) in sx.par_signatures(e).items():
            cur = sigs.get(name)
            if cur is None or dmax > cur[1]:
                sigs[name] = (arity, dmax)
    return sigs


def _draw(rng: random.Random, lag: Lagrangian, exprs: Sequence[Expr]):
    names = set()
    for e in exprs:
        names |= sx.free_symbols(e)
    return sx.probe_env(rng, names, _signatures(lag, exprs))


def _probe_zero(lag: Lagrangian, e: Expr, seed: int, trials: int = PROBE_TRIALS) -> bool:
    if isinstance(e, Num):
        return e.is_zero
    rng = random.Random(seed)
    for _ in range(trials):
        for attempt in range(10):
            env, params = _draw(rng, lag, [e])
            try:
                v = sx.evaluate(e, env, params)
            except sx.EvalError:
                continue
            if abs(v) > 1e-9:
                return False
            break
        else:
            raise ConstraintError("probe domain exhausted while testing a residual")
    return True


def _probe_proportional(lag: Lagrangian, a: Expr, b: Expr, seed: int) -> bool:
    """True when a is a constant multiple of b (nonzero) on probe points."""
    rng = random.Random(seed)
    ratio = None
    for _ in range(PROBE_TRIALS):
        for attempt in range(10):
            env, params = _draw(rng, lag, [a, b])
            try:
                va = sx.evaluate(a, env, params)
                vb = sx.evaluate(b, env, params)
            except sx.EvalError:
                continue
            if abs(vb) < 1e-12 and abs(va) < 1e-12:
                break
            if abs(vb) < 1e-12 or abs(va) < 1e-12:
                return False
            r = va / vb
            if ratio is None:
                ratio = r
            elif abs(r - ratio) > 1e-6 * (1 + abs(ratio)):
                return False
            break
        else:
            return False
    return True


# ---------------------------------------------------------------------------
# reduction rules


@dataclass
class _Rules:
    atom_protos: List[Tuple[str, Tuple[int, ...]]]
    zero_syms: List[str]
    plinear: List[Tuple[str, Expr]]  # ordered momentum solves


def _atom_proto(expr: Expr) -> Optional[Tuple[str, Tuple[int, ...]]]:
    """Constraint of the shape c * parameter-atom -> (name, dorder)."""
    coeff, mono = sx._as_coeff_monomial(expr)
    if len(mono) == 1 and isinstance(mono[0], Par):
        return mono[0].name, mono[0].dorder
    if isinstance(expr, Par):
        return expr.name, expr.dorder
    return None


def _sos_symbols(expr: Expr) -> Optional[List[str]]:
    """Constraint of the shape sum c_A s_A^2 (same-sign c) -> the symbols."""
    terms = expr.terms if isinstance(expr, sx.Add) else (expr,)
    syms = []
    sign = 0
    for t in terms:
        coeff, mono = sx._as_coeff_monomial(t)
        if len(mono) != 1 or not isinstance(mono[0], sx.Pow):
            return None
        p = mono[0]
        if not (isinstance(p.base, Sym) and p.exp == 2):
            return None
        s = 1 if coeff > 0 else -1
        if sign == 0:
            sign = s
        elif s != sign:
            return None
        syms.append(p.base.name)
    return syms or None


def _restricted_atom(spec: JetSpec, p: Par) -> bool:
    """Atom whose arguments involve only the base and configuration level."""
    for a in p.args:
        for name in sx.free_symbols(a):
            if name == spec.base:
                continue
            idx = spec.coord_index(name)
            if idx is not None and idx[0] == 0:
                continue
            return False
    return True


class _Reducer:
    def __init__(self, lag: Lagrangian, seed: int = 0):
        self.lag = lag
        self.seed = seed
        fl = legendre_map(lag)
        self.full_bindings = fl.momentum_bindings()
        self.top_bindings = fl.top_bindings()
        self.rules = _Rules([], [], [])

    def rebuild(self, active: Sequence[Constraint]):
        atoms, zeros, plinear = [], [], []
        for c in active:
            if c.tier != "image":
                continue
            proto = _atom_proto(c.expr)
            if proto is not None:
                atoms.append(proto)
                continue
            sos = _sos_symbols(c.expr)
            if sos is not None:
                for s in sos:
                    if s not in zeros:
                        zeros.append(s)
                continue
        # linear momentum solves, triangular in ledger order
        solved: Dict[str, Expr] = {}
        for c in active:
            if c.tier != "image" or not c.projectable:
                continue
            if _atom_proto(c.expr) is not None or _sos_symbols(c.expr) is not None:
                continue
            expr = substitute(self._apply_atoms(c.expr, atoms, zeros), solved)
            for s in sorted(sx.free_symbols(expr)):
                if self.lag.spec.momentum_index(s) is None:
                    continue
                sy = Sym(s)
                coeff = diff(expr, sy)
                dd = diff(coeff, sy)
                if not (isinstance(dd, Num) and dd.is_zero):
                    continue
                csub = substitute(coeff, self.top_bindings)
                try:
                    if _probe_zero(self.lag, csub, self.seed):
                        continue
                except ConstraintError:
                    continue
                rest = substitute(expr, {s: sx.ZERO})
                sol = -rest * sx.pow_(coeff, Fraction(-1))
                solved[s] = sol
                plinear.append((s, sol))
                break
        self.rules = _Rules(atoms, zeros, plinear)

    def _apply_atoms(self, e: Expr, atoms=None, zeros=None) -> Expr:
        atoms = self.rules.atom_protos if atoms is None else atoms
        zeros = self.rules.zero_syms if zeros is None else zeros

        def matcher(node):
            if isinstance(node, Par):
                for name, dorder in atoms:
                    if node.name == name and len(node.dorder) == len(dorder) and \
                            all(a >= b for a, b in zip(node.dorder, dorder)):
                        return sx.ZERO
            return None

        e = sx.replace_matching(e, matcher)
        if zeros:
            e = substitute(e, {s: sx.ZERO for s in zeros})
        return e

    def reduce_image(self, e: Expr) -> Expr:
        """Reduction with the lower momenta kept free: atoms, squares, linear
        momentum solves, then only the top-momentum graph substitution."""
        e = self.reduce_p_only(e)
        e = substitute(e, self.top_bindings)
        return e

    def reduce_p_only(self, e: Expr) -> Expr:
        """Reduction modulo the momentum-space constraints alone (no graph)."""
        e = self._apply_atoms(e)
        for s, sol in self.rules.plinear:
            e = substitute(e, {s: sol})
        return e

    def reduce_graph(self, e: Expr) -> Expr:
        """Full reduction onto the graph of the Legendre map."""
        e = self._apply_atoms(e)
        e = substitute(e, self.full_bindings)
        return e

    def is_zero(self, e: Expr, seed_shift: int = 0) -> bool:
        if isinstance(e, Num):
            return e.is_zero
        return _probe_zero(self.lag, e, self.seed + seed_shift)


# ---------------------------------------------------------------------------
# primary constraints


def _dot(spec: JetSpec, us, vs) -> Expr:
    return sx.add(*[u * v for u, v in zip(us, vs)])


def _catalog(spec: JetSpec) -> List[Tuple[str, Expr]]:
    """Momentum-space scalar candidates: p^i . q_j and p^i . p^j."""
    k = spec.order
    items = []
    for i in range(k):
        pi = [spec.momentum(i, a) for a in spec.dofs]
        for j in range(k):
            qj = [spec.coord(j, a) for a in spec.dofs]
            items.append(("p%d.q%d" % (i, j), _dot(spec, pi, qj)))
    for i in range(k):
        for j in range(i, k):
            pi = [spec.momentum(i, a) for a in spec.dofs]
            pj = [spec.momentum(j, a) for a in spec.dofs]
            items.append(("p%d.p%d" % (i, j), _dot(spec, pi, pj)))
    return items


def _allowed_image_expr(spec: JetSpec, e: Expr) -> bool:
    """Depends only on base, configuration levels below k, and parameters."""
    for name in sx.free_symbols(e):
        if name == spec.base:
            continue
        idx = spec.coord_index(name)
        if idx is not None:
            if idx[0] >= spec.order:
                return False
            continue
        if spec.momentum_index(name) is not None:
            return False
        # constants pass through
    return True


def primary_constraints(lag: Lagrangian, seed: int = 0) -> List[Constraint]:
    """Graph tier xi^i_A = p^i_A - p-hat^i_A plus image-tier constraints
    eliminated from the top momentum block."""
    spec, k = lag.spec, lag.spec.order
    fl = legendre_map(lag)
    out = []
    for i in range(k):
        for ia, a in enumerate(spec.dofs):
            out.append(Constraint("xi^%d_%s" % (i, a),
                                  spec.momentum(i, a) - fl.restricted[i][ia],
                                  0, "graph",
                                  _allowed_image_expr(spec, fl.restricted[i][ia])))
    top = [spec.momentum(k - 1, a) for a in spec.dofs]
    top_sub = fl.top_bindings()
    candidates: List[Expr] = list(top)
    for j in range(k):
        qj = [spec.coord(j, a) for a in spec.dofs]
        candidates.append(_dot(spec, top, qj))
    candidates.append(_dot(spec, top, top))
    image: List[Constraint] = []
    reducer = _Reducer(lag, seed=seed)
    idx = 1
    for cand in candidates:
        pulled = substitute(cand, top_sub)
        if not _allowed_image_expr(spec, pulled):
            continue
        phi = cand - pulled
        if isinstance(phi, Num):
            continue
        reducer.rebuild(image)
        red = reducer.reduce_p_only(phi)
        try:
            if reducer.is_zero(red):
                continue
        except ConstraintError:
            continue
        image.append(Constraint("phi^(0)_%d" % idx, phi, 0, "image", True))
        idx += 1
    return out + image


# ---------------------------------------------------------------------------
# residual classification


def _fsplit_unknowns(e: Expr, unknowns: Sequence[str]):
    """Affine split e = sum coeff_u * u + rest over the unknown symbols."""
    coeffs = {}
    rest = e
    for u in unknowns:
        su = Sym(u)
        cu = diff(e, su)
        if isinstance(cu, Num) and cu.is_zero:
            continue
        for v in unknowns:
            dv = diff(cu, Sym(v))
            if not (isinstance(dv, Num) and dv.is_zero):
                raise ConstraintError("tangency residual is not affine in the unknowns")
        coeffs[u] = cu
    rest = substitute(e, {u: sx.ZERO for u in coeffs})
    return coeffs, rest


def _atom_split(lag: Lagrangian, e: Expr, seed: int):
    """Split e into sum C_m * atom_m + rest over restricted parameter atoms.

    Returns (list of (atom, coefficient), rest) or None when e has no such
    atoms or is not affine in them.
    """
    spec = lag.spec
    atoms = sorted((p for p in sx.par_atoms(e) if _restricted_atom(spec, p)),
                   key=Expr.key)
    if not atoms:
        return None
    placeholders = {a: Sym("_z%d_" % i) for i, a in enumerate(atoms)}
    swapped = sx.replace_atoms(e, placeholders)
    pairs = []
    for a in atoms:
        z = placeholders[a]
        c = diff(swapped, z)
        for b in atoms:
            d2 = diff(c, placeholders[b])
            if not (isinstance(d2, Num) and d2.is_zero):
                return None
        pairs.append((a, c))
    rest = substitute(swapped, {placeholders[a].name: sx.ZERO for a in atoms})
    back = {z.name: a for a, z in placeholders.items()}

    def unswap(x: Expr) -> Expr:
        return sx.replace_matching(x, lambda n: back.get(n.name) if isinstance(n, Sym) else None)

    return [(a, unswap(c)) for a, c in pairs], unswap(rest)


def _coefficients_span(lag: Lagrangian, atom_list, coeff_rows, seed: int) -> bool:
    """Do the pooled coefficient rows span all atom directions over the domain?

    `coeff_rows` holds one {atom: coefficient Expr} per residual; rows are
    sampled at probe points and stacked before the rank test, so several
    rank-deficient residuals may still jointly force every atom to vanish.
    """
    rng = random.Random(seed)
    rows = []
    exprs = [c for row in coeff_rows for c in row.values()]
    for _ in range(6 * len(atom_list) + 6):
        for attempt in range(10):
            env, params = _draw(rng, lag, exprs)
            try:
                for row in coeff_rows:
                    rows.append([
                        sx.evaluate(row[a], env, params) if a in row else 0.0
                        for a in atom_list])
            except sx.EvalError:
                continue
            break
    if not rows:
        return False
    M = np.array(rows)
    rank = np.linalg.matrix_rank(M, tol=1e-8 * max(1.0, float(np.max(np.abs(M)))))
    return rank == len(atom_list)


def _fit_catalog(lag: Lagrangian, reducer: _Reducer, target: Expr, seed: int):
    """Express `target` as a rational-coefficient combination of the reduced
    catalog items; returns the raw-momentum-space combination on success."""
    spec = lag.spec
    items = _catalog(spec)
    reduced = [(lbl, raw, reducer.reduce_image(raw)) for lbl, raw in items]
    keep = []
    for lbl, raw, red in reduced:
        try:
            if not reducer.is_zero(red, seed_shift=7):
                keep.append((lbl, raw, red))
        except ConstraintError:
            continue
    if not keep:
        return None
    rng = random.Random(seed)
    exprs = [target] + [red for _, _, red in keep]
    rows, ys = [], []
    npts = max(24, 3 * len(keep))
    for _ in range(npts):
        for attempt in range(10):
            env, params = _draw(rng, lag, exprs)
            try:
                y = sx.evaluate(target, env, params)
                row = [sx.evaluate(red, env, params) for _, _, red in keep]
            except sx.EvalError:
                continue
            rows.append(row)
            ys.append(y)
            break
    if len(rows) < len(keep) + 2:
        return None
    M = np.array(rows)
    y = np.array(ys)
    coeffs, *_ = np.linalg.lstsq(M, y, rcond=None)
    scale = max(1.0, float(np.max(np.abs(coeffs))))
    rational = []
    for c in coeffs:
        if abs(c) < 1e-7 * scale:
            rational.append(Fraction(0))
        else:
            rational.append(Fraction(c).limit_denominator(FIT_DENOMINATOR_CAP))
    if all(c == 0 for c in rational):
        return None
    combo_red = sx.add(*[Num(c) * red for c, (_, _, red) in zip(rational, keep) if c != 0])
    try:
        if not equivalent(target, combo_red, trials=16, seed=seed + 3):
            return None
    except sx.EvalError:
        return None
    lead = next(c for c in rational if c != 0)
    combo_raw = sx.add(*[Num(c / lead) * raw for c, (_, raw, _) in zip(rational, keep) if c != 0])
    return combo_raw


# ---------------------------------------------------------------------------
# the algorithm


def _solve_affine_rows(lag: Lagrangian, rows, unknowns: List[str], seed: int):
    """Gaussian elimination over the expression field.

    rows: list of (coeffs dict, const Expr, source label), processed in order;
    returns (solved dict, leftover residual exprs with labels).
    """
    solved: Dict[str, Expr] = {}
    residuals = []
    pending = [dict(r[0]) for r in rows]
    consts = [r[1] for r in rows]
    labels = [r[2] for r in rows]
    used = [False] * len(rows)
    progress = True
    while progress:
        progress = False
        for ri in range(len(pending)):
            if used[ri]:
                continue
            coeffs = {u: substitute(c, solved) for u, c in pending[ri].items()}
            const = substitute(consts[ri], solved)
            coeffs = {u: c for u, c in coeffs.items()
                      if not (isinstance(c, Num) and c.is_zero)}
            live = [u for u in unknowns if u in coeffs and u not in solved]
            pivot = None
            for u in live:
                csub = substitute(coeffs[u], legendre_map(lag).momentum_bindings())
                try:
                    if not _probe_zero(lag, csub, seed + ri):
                        pivot = u
                        break
                except ConstraintError:
                    continue
            if pivot is None:
                continue
            others = sx.ZERO
            for u, c in coeffs.items():
                if u == pivot:
                    continue
                others = others + c * solved.get(u, Sym(u))
            sol = -(const + others) * sx.pow_(coeffs[pivot], Fraction(-1))
            solved[pivot] = sol
            # substitute into previous solutions so they stay current
            for u in list(solved):
                if u != pivot:
                    solved[u] = substitute(solved[u], {pivot: sol})
            used[ri] = True
            progress = True
    for ri in range(len(pending)):
        if used[ri]:
            continue
        coeffs = {u: substitute(c, solved) for u, c in pending[ri].items()}
        const = substitute(consts[ri], solved)
        residual = const
        for u, c in coeffs.items():
            if u in solved:
                continue
            residual = residual + c * Sym(u)
        residuals.append((labels[ri], residual))
    return solved, residuals


def tangency_step(lag: Lagrangian, ledger: ConstraintLedger, ansatz: VectorFieldAnsatz,
                  reducer: _Reducer, unknowns: List[str], seed: int = 0):
    """One sweep: Lie derivatives of all active constraints, multiplier solve,
    and classification of the surviving residuals into new constraints."""
    reducer.rebuild(ledger.constraints)
    current = ansatz.substitute(ledger.solved_components)
    rows = []
    candidates = []  # (source label, reduced expr, raw-for-report hint)
    graph_cs = [c for c in ledger.constraints if c.tier == "graph"]
    image_cs = [c for c in ledger.constraints if c.tier == "image"]
    # graph rows are processed from the top momentum level downwards (the
    # triangular structure of the tangency system)
    for c in sorted(graph_cs, key=lambda c: (-int(c.label.split("^")[1].split("_")[0]),
                                             c.label)):
        r = lie_derivative(current, c.expr)
        r = reducer.reduce_graph(r)
        live = [u for u in unknowns
                if u not in ledger.solved_components and u in sx.free_symbols(r)]
        if live:
            coeffs, rest = _fsplit_unknowns(r, live)
            rows.append((coeffs, rest, c.label))
        else:
            try:
                if not reducer.is_zero(r, seed_shift=1):
                    candidates.append((c.label, r))
            except ConstraintError:
                candidates.append((c.label, r))
    for c in image_cs:
        r = lie_derivative(current, c.expr)
        r = reducer.reduce_image(r)
        live = [u for u in unknowns
                if u not in ledger.solved_components and u in sx.free_symbols(r)]
        if live:
            coeffs, rest = _fsplit_unknowns(r, live)
            rows.append((coeffs, rest, c.label))
            continue
        try:
            if not reducer.is_zero(r, seed_shift=2):
                candidates.append((c.label, r))
        except ConstraintError:
            candidates.append((c.label, r))
    live_unknowns = [u for u in unknowns if u not in ledger.solved_components]
    solved, leftovers = _solve_affine_rows(lag, rows, live_unknowns, seed)
    for lbl, res in leftovers:
        red = reducer.reduce_graph(res)
        try:
            if not reducer.is_zero(red, seed_shift=3):
                candidates.append((lbl, red))
        except ConstraintError:
            candidates.append((lbl, red))
    return solved, candidates


def _emit_constraints(lag: Lagrangian, reducer: _Reducer, ledger: ConstraintLedger,
                      candidates, generation: int, seed: int):
    """Turn reduced residuals into labeled constraints (projectable where
    possible), deduplicating against the ledger and each other."""
    new: List[Constraint] = []
    inconsistent = False

    def is_dup(e: Expr) -> bool:
        for c in ledger.constraints + new:
            if e == c.expr:
                return True
            try:
                if _probe_proportional(lag, e, c.expr, seed):
                    return True
            except sx.EvalError:
                continue
        return False

    def push(expr: Expr, projectable: bool):
        nonlocal inconsistent
        if isinstance(expr, Num):
            if not expr.is_zero:
                inconsistent = True
            return
        if not sx.free_symbols(expr) and not sx.par_atoms(expr):
            inconsistent = True
            return
        if is_dup(expr):
            return
        new.append(Constraint("phi^(%d)_%d" % (generation, len(new) + 1),
                              expr, generation, "image", projectable))

    ordered = []
    rest_pool = []
    coeff_rows = []
    atoms_union = []
    for src, red in candidates:
        split = _atom_split(lag, red, seed)
        if split is not None:
            pairs, rest = split
            if not reducer.is_zero(rest, seed_shift=4):
                rest_pool.append(rest)
            coeff_rows.append({a: c for a, c in pairs})
            for a, _c in pairs:
                if a not in atoms_union:
                    atoms_union.append(a)
            continue
        rest_pool.append(red)
    if atoms_union:
        atoms_union.sort(key=Expr.key)
        if _coefficients_span(lag, atoms_union, coeff_rows, seed):
            atom_entries = [("atom", a, True) for a in atoms_union]
        else:
            atom_entries = []
            for row in coeff_rows:
                combo = sx.add(*[c * a for a, c in sorted(row.items(), key=lambda kv: kv[0].key())])
                atom_entries.append(("mixed", combo, _allowed_image_expr(lag.spec, combo)))
    else:
        atom_entries = []
    for rest in rest_pool:
        fit = _fit_catalog(lag, reducer, rest, seed)
        if fit is not None:
            ordered.append(("dot", fit, True))
        else:
            ordered.append(("jet", rest, _allowed_image_expr(lag.spec, rest)))
    # projectable dot-combinations first, then atom families, then leftovers
    ordered.extend(atom_entries)
    rank = {"dot": 0, "atom": 1, "mixed": 2, "jet": 3}
    ordered.sort(key=lambda item: rank[item[0]])
    for kind, expr, projectable in ordered:
        push(expr, projectable)
    return new, inconsistent


def run_constraint_algorithm(lag: Lagrangian, max_generations: int = 8,
                             force_type1: bool = False, seed: int = 0) -> ConstraintLedger:
    """Iterate tangency sweeps until stabilization, inconsistency or the cap."""
    if max_generations < 1:
        raise ConstraintError("max_generations must be >= 1")
    ansatz = build_ansatz(lag, force_type1=force_type1)
    unknowns = unknown_symbols(lag, force_type1=force_type1)
    ledger = ConstraintLedger(lag, primary_constraints(lag, seed=seed))
    reducer = _Reducer(lag, seed=seed)
    for _sweep in range(1, max_generations + 1):
        solved, candidates = tangency_step(lag, ledger, ansatz, reducer, unknowns, seed=seed)
        new_solved = {u: e for u, e in solved.items()
                      if u not in ledger.solved_components}
        ledger.solved_components.update(new_solved)
        generation = max((c.generation for c in ledger.constraints), default=0) + 1
        new, inconsistent = ([], False)
        if candidates:
            new, inconsistent = _emit_constraints(lag, reducer, ledger, candidates,
                                                  generation, seed)
        if inconsistent:
            ledger.status = "inconsistent"
            break
        if new:
            ledger.constraints.extend(new)
            continue
        if not new_solved:
            ledger.status = "stabilized"
            break
        # a pure multiplier-solving sweep is confirmed by one more quiet pass
    else:
        ledger.status = "max-generations-hit"
    ledger.undetermined = tuple(u for u in unknowns if u not in ledger.solved_components)
    ledger.ansatz = ansatz.substitute(ledger.solved_components)
    return ledger


def classify_solution_field(ledger: ConstraintLedger, seed: int = 0) -> Optional[int]:
    """Semispray type of the solved vector field (jet part)."""
    if ledger.ansatz is None:
        return None
    return classify_semispray(ledger.lag.spec, ledger.ansatz, seed=seed)
