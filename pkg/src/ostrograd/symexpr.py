"""Minimal symbolic kernel: expression trees over coordinates, momenta and
opaque parameter functions.

Normal form: flattened n-ary sums of n-ary products, terms ordered by a
total structural order, rational constants folded exactly, float constants
folded in IEEE double.  Products distribute over sums; small integer powers
of sums expand; negative powers of sums are kept as factors and cancelled
against numerators by exact polynomial division where possible.

Opaque parameter functions (mu, rho, V, ...) are first-class nodes carrying
a derivative multi-order per argument, so repeated differentiation is
closed: d/dx mu(x) stays `mu^(1)(x)` and is never expanded.
"""

from __future__ import annotations

import json
import math
import random
import re
from fractions import Fraction
from typing import Callable, Iterable, Mapping, Sequence, Union

Number = Union[int, float, Fraction]

_EXPAND_POW_CAP = 16  # integer powers of sums above this stay unexpanded
_CANCEL_TERM_CAP = 48  # skip division-cancellation on larger sums
_CANCEL_COFACTOR_CAP = 420  # skip a division when the cofactor grows past this

half = Fraction(1, 2)


class ExprError(Exception):
    """Malformed expression or unsupported operation."""


class EvalError(ExprError):
    """Numeric evaluation failure (unbound symbol, missing callback, non-finite)."""


# ---------------------------------------------------------------------------
# nodes


class Expr:
    """Immutable expression node.  Instances are normalized on construction."""

    __slots__ = ("_key", "_hash")
    kind = "?"

    def key(self):
        return self._key

    def __hash__(self):
        return self._hash

    def __eq__(self, other):
        return isinstance(other, Expr) and self._key == other._key

    def __lt__(self, other):
        return self._key < other._key

    def _finish(self, key):
        object.__setattr__(self, "_key", key)
        object.__setattr__(self, "_hash", hash(key))

    # arithmetic sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, as_expr(other))

    def __radd__(self, other):
        return add(as_expr(other), self)

    def __sub__(self, other):
        return add(self, mul(NEG_ONE, as_expr(other)))

    def __rsub__(self, other):
        return add(as_expr(other), mul(NEG_ONE, self))

    def __neg__(self):
        return mul(NEG_ONE, self)

    def __mul__(self, other):
        return mul(self, as_expr(other))

    def __rmul__(self, other):
        return mul(as_expr(other), self)

    def __truediv__(self, other):
        return mul(self, pow_(as_expr(other), Fraction(-1)))

    def __rtruediv__(self, other):
        return mul(as_expr(other), pow_(self, Fraction(-1)))

    def __pow__(self, exponent):
        return pow_(self, exponent)

    def __repr__(self):
        return to_prefix(self)


class Num(Expr):
    __slots__ = ("value",)
    kind = "num"

    def __init__(self, value):
        if isinstance(value, bool):
            raise ExprError("boolean is not a number")
        if isinstance(value, int):
            value = Fraction(value)
        if isinstance(value, Fraction):
            tag = (0, value.numerator, value.denominator)
        elif isinstance(value, float):
            if not math.isfinite(value):
                raise ExprError("non-finite constant %r" % value)
            tag = (1, value.hex(), 0)
        else:
            raise ExprError("bad constant %r" % (value,))
        object.__setattr__(self, "value", value)
        self._finish(("num", tag))

    @property
    def is_zero(self):
        return self.value == 0

    @property
    def is_one(self):
        return self.value == 1


class Sym(Expr):
    __slots__ = ("name",)
    kind = "sym"

    def __init__(self, name):
        if not _NAME_RE.match(name):
            raise ExprError("bad symbol name %r" % name)
        object.__setattr__(self, "name", name)
        self._finish(("sym", name))


class Par(Expr):
    """Opaque parameter function application with a derivative multi-order."""

    __slots__ = ("name", "args", "dorder")
    kind = "par"

    def __init__(self, name, args, dorder=None):
        args = tuple(args)
        if dorder is None:
            dorder = (0,) * len(args)
        dorder = tuple(int(d) for d in dorder)
        if len(dorder) != len(args) or any(d < 0 for d in dorder):
            raise ExprError("bad derivative multi-order for %s" % name)
        if not _NAME_RE.match(name):
            raise ExprError("bad parameter name %r" % name)
        object.__setattr__(self, "name", name)
        object.__setattr__(self, "args", args)
        object.__setattr__(self, "dorder", dorder)
        self._finish(("par", name, dorder, tuple(a.key() for a in args)))


class Fun(Expr):
    """Elementary function application (sin, cos, exp, log)."""

    __slots__ = ("name", "arg")
    kind = "fun"
    names = ("sin", "cos", "exp", "log")

    def __init__(self, name, arg):
        if name not in Fun.names:
            raise ExprError("unknown elementary function %r" % name)
        object.__setattr__(self, "name", name)
        object.__setattr__(self, "arg", arg)
        self._finish(("fun", name, arg.key()))


class Pow(Expr):
    """Power with a rational exponent (never 0 or 1 after normalization)."""

    __slots__ = ("base", "exp")
    kind = "pow"

    def __init__(self, base, exp):
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "exp", exp)
        self._finish(("pow", base.key(), exp.numerator, exp.denominator))


class Mul(Expr):
    __slots__ = ("factors",)
    kind = "mul"

    def __init__(self, factors):
        factors = tuple(factors)
        object.__setattr__(self, "factors", factors)
        self._finish(("mul", tuple(f.key() for f in factors)))


class Add(Expr):
    __slots__ = ("terms",)
    kind = "add"

    def __init__(self, terms):
        terms = tuple(terms)
        object.__setattr__(self, "terms", terms)
        self._finish(("add", tuple(t.key() for t in terms)))


_NAME_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")

ZERO = Num(0)
ONE = Num(1)
NEG_ONE = Num(-1)


def as_expr(v) -> Expr:
    if isinstance(v, Expr):
        return v
    if isinstance(v, (int, Fraction, float)):
        return Num(v)
    raise ExprError("cannot coerce %r to an expression" % (v,))


def sym(name: str) -> Sym:
    return Sym(name)


def num(v: Number) -> Num:
    return Num(v)


# ---------------------------------------------------------------------------
# smart constructors (normalization happens here)


def _as_coeff_monomial(term: Expr):
    """Split a product into (numeric coefficient, tuple of non-numeric factors)."""
    if isinstance(term, Num):
        return term.value, ()
    if isinstance(term, Mul):
        fs = term.factors
        if fs and isinstance(fs[0], Num):
            return fs[0].value, fs[1:]
        return Fraction(1), fs
    return Fraction(1), (term,)


def _from_coeff_monomial(coeff, mono):
    if coeff == 0:
        return ZERO
    if not mono:
        return Num(coeff)
    parts = list(mono)
    if coeff != 1:
        parts = [Num(coeff)] + parts
    if len(parts) == 1:
        return parts[0]
    return Mul(parts)


def add(*terms: Expr) -> Expr:
    flat = []
    stack = list(terms)
    while stack:
        t = stack.pop()
        if isinstance(t, Add):
            stack.extend(t.terms)
        else:
            flat.append(t)
    groups = {}
    order = []
    for t in flat:
        coeff, mono = _as_coeff_monomial(t)
        if mono not in groups:
            groups[mono] = coeff
            order.append(mono)
        else:
            groups[mono] = groups[mono] + coeff
    out = []
    for mono in order:
        coeff = groups[mono]
        if coeff == 0 and not isinstance(coeff, float):
            continue
        if isinstance(coeff, float) and coeff == 0.0:
            continue
        out.append(_from_coeff_monomial(coeff, mono))
    if not out:
        return ZERO
    out.sort(key=Expr.key)
    if len(out) == 1:
        result = out[0]
    else:
        result = Add(out)
    return _cancel_quotients(result)


def mul(*factors: Expr) -> Expr:
    flat = []
    stack = list(factors)
    while stack:
        f = stack.pop()
        if isinstance(f, Mul):
            stack.extend(f.factors)
        else:
            flat.append(f)
    coeff = Fraction(1)
    powers = {}
    porder = []
    sums = []
    for f in flat:
        if isinstance(f, Num):
            coeff = coeff * f.value
            continue
        if isinstance(f, Add):
            sums.append(f)
            continue
        if isinstance(f, Pow):
            base, exp = f.base, f.exp
        else:
            base, exp = f, Fraction(1)
        if base not in powers:
            powers[base] = exp
            porder.append(base)
        else:
            powers[base] = powers[base] + exp
    if coeff == 0 and not isinstance(coeff, float):
        return ZERO
    atoms = []
    for base in porder:
        e = powers[base]
        p = pow_(base, e)
        if isinstance(p, Num):
            coeff = coeff * p.value
        elif isinstance(p, Add):
            sums.append(p)
        elif isinstance(p, Mul):
            c2, mono = _as_coeff_monomial(p)
            coeff = coeff * c2
            atoms.extend(mono)
        else:
            atoms.append(p)
    if coeff == 0:
        return ZERO
    core = _from_coeff_monomial(coeff, tuple(sorted(atoms, key=Expr.key)))
    if not sums:
        return core
    # distribute over sums (sum-of-products normal form)
    result_terms = [core]
    for s in sums:
        new_terms = []
        for t in result_terms:
            for st in s.terms:
                new_terms.append(_mul_no_sums(t, st))
        result_terms = new_terms
    return add(*result_terms)


def _mul_no_sums(a: Expr, b: Expr) -> Expr:
    """Multiply two sum-free terms without re-triggering distribution."""
    ca, ma = _as_coeff_monomial(a)
    cb, mb = _as_coeff_monomial(b)
    powers = {}
    porder = []
    for f in ma + mb:
        if isinstance(f, Pow):
            base, exp = f.base, f.exp
        else:
            base, exp = f, Fraction(1)
        if base not in powers:
            powers[base] = exp
            porder.append(base)
        else:
            powers[base] = powers[base] + exp
    coeff = ca * cb
    atoms = []
    pending_sums = []
    for base in porder:
        p = pow_(base, powers[base])
        if isinstance(p, Num):
            coeff = coeff * p.value
        elif isinstance(p, Add):
            pending_sums.append(p)
        elif isinstance(p, Mul):
            c2, mono = _as_coeff_monomial(p)
            coeff = coeff * c2
            atoms.extend(mono)
        else:
            atoms.append(p)
    if coeff == 0:
        return ZERO
    out = _from_coeff_monomial(coeff, tuple(sorted(atoms, key=Expr.key)))
    for s in pending_sums:
        out = mul(out, s)
    return out


def _nth_root_exact(fr: Fraction, n: int):
    """Exact n-th root of a rational, or None."""

    def iroot(v, n):
        if v < 0:
            if n % 2 == 0:
                return None
            r = iroot(-v, n)
            return None if r is None else -r
        if v in (0, 1):
            return v
        r = round(v ** (1.0 / n))
        for cand in (r - 1, r, r + 1):
            if cand >= 0 and cand ** n == v:
                return cand
        return None

    a = iroot(fr.numerator, n)
    b = iroot(fr.denominator, n)
    if a is None or b is None:
        return None
    return Fraction(a, b)


_POW_CACHE: dict = {}


def pow_(base: Expr, exp) -> Expr:
    if isinstance(exp, Expr):
        if isinstance(exp, Num) and isinstance(exp.value, Fraction):
            exp = exp.value
        else:
            raise ExprError("exponent must be rational, got %r" % (exp,))
    if isinstance(exp, float):
        if float(exp).is_integer():
            exp = Fraction(int(exp))
        else:
            exp = Fraction(exp).limit_denominator(10 ** 6)
    exp = Fraction(exp)
    if exp == 0:
        return ONE
    if exp == 1:
        return base
    key = (base, exp)
    hit = _POW_CACHE.get(key)
    if hit is not None:
        return hit
    out = _pow_build(base, exp)
    if len(_POW_CACHE) < 200000:
        _POW_CACHE[key] = out
    return out


def _pow_build(base: Expr, exp: Fraction) -> Expr:
    if isinstance(base, Num):
        v = base.value
        if isinstance(v, Fraction):
            if exp.denominator == 1:
                if v == 0 and exp < 0:
                    raise EvalError("zero raised to a negative power")
                return Num(v ** exp.numerator)
            root = _nth_root_exact(v, exp.denominator)
            if root is not None:
                return Num(root ** exp.numerator)
            return Pow(base, exp)
        # float base folds in IEEE double when defined
        try:
            r = v ** float(exp)
        except (ValueError, ZeroDivisionError, OverflowError):
            return Pow(base, exp)
        if isinstance(r, complex) or not math.isfinite(r):
            return Pow(base, exp)
        return Num(r)
    if isinstance(base, Pow):
        inner = base.exp
        # (b^m)^e -> b^(m e) only when sound pointwise on the reals
        if exp.denominator == 1 or (inner.denominator == 1 and inner.numerator % 2 == 1):
            return pow_(base.base, inner * exp)
        return Pow(base, exp)
    if isinstance(base, Mul):
        if exp.denominator == 1:
            return mul(*[pow_(f, exp) for f in base.factors])
        coeff, mono = _as_coeff_monomial(base)
        if coeff != 1 and isinstance(coeff, Fraction) and coeff > 0:
            rest = _from_coeff_monomial(Fraction(1), mono)
            return mul(pow_(Num(coeff), exp), pow_(rest, exp))
        return Pow(base, exp)
    if isinstance(base, Add):
        if exp.denominator == 1 and 2 <= exp.numerator <= _EXPAND_POW_CAP:
            out = base
            for _ in range(exp.numerator - 1):
                out = mul(out, base)
            return out
        pulled = _pull_common(base, exp)
        if pulled is not None:
            return pulled
        return Pow(base, exp)
    return Pow(base, exp)


def _fraction_gcd(a: Fraction, b: Fraction) -> Fraction:
    return Fraction(math.gcd(a.numerator, b.numerator),
                    (a.denominator * b.denominator) // math.gcd(a.denominator, b.denominator))


def _manifestly_nonneg(b: Expr, m: Fraction) -> bool:
    if m.denominator == 1 and m.numerator % 2 == 0:
        return True
    if m.denominator > 1:
        return True  # real fractional powers are >= 0 where defined
    return isinstance(b, Pow) and b.exp.denominator > 1


def _pull_common(base: Add, exp: Fraction):
    """Rewrite (M * S)^e as M^e * S^e for the common monomial M of the sum."""
    if len(base.terms) > 80:
        return None
    decomp = []
    for t in base.terms:
        coeff, mono = _as_coeff_monomial(t)
        if not isinstance(coeff, Fraction):
            return None
        powers = {}
        for f in mono:
            if isinstance(f, Pow):
                powers[f.base] = powers.get(f.base, Fraction(0)) + f.exp
            else:
                powers[f] = powers.get(f, Fraction(0)) + 1
        decomp.append((coeff, powers))
    cg = Fraction(0)
    for coeff, _ in decomp:
        cg = _fraction_gcd(cg, abs(coeff)) if cg else abs(coeff)
    common = dict(decomp[0][1])
    for _, powers in decomp[1:]:
        for b in list(common):
            if b not in powers:
                del common[b]
            else:
                e1, e2 = common[b], powers[b]
                if e1 > 0 and e2 > 0:
                    common[b] = min(e1, e2)
                elif e1 < 0 and e2 < 0:
                    common[b] = max(e1, e2)
                else:
                    del common[b]
    if exp.denominator != 1:
        common = {b: m for b, m in common.items() if _manifestly_nonneg(b, m)}
    if not common and cg == 1:
        return None
    stripped_terms = []
    for coeff, powers in decomp:
        fs = []
        for b, e in powers.items():
            rem = e - common.get(b, Fraction(0))
            if rem:
                fs.append(pow_(b, rem))
        stripped_terms.append(_from_coeff_monomial(coeff / cg, tuple(sorted(fs, key=Expr.key))))
    stripped = add(*stripped_terms)
    outer = [pow_(Num(cg), exp)] if cg != 1 else []
    outer.extend(pow_(b, m * exp) for b, m in sorted(common.items(), key=lambda kv: kv[0].key()))
    return mul(*outer, pow_(stripped, exp))


def sqrt(e: Expr) -> Expr:
    return pow_(e, half)


def fun(name: str, arg: Expr) -> Expr:
    if name == "sqrt":
        return sqrt(arg)
    if isinstance(arg, Num):
        v = arg.value
        if v == 0 and name in ("sin", "exp", "cos"):
            return {"sin": ZERO, "cos": ONE, "exp": ONE}[name]
        if v == 1 and name == "log":
            return ZERO
        if isinstance(v, float):
            try:
                r = getattr(math, name)(v)
            except ValueError:
                raise EvalError("%s of %r is undefined" % (name, v))
            return Num(r)
    return Fun(name, arg)


def par(name: str, args: Sequence[Expr], dorder: Sequence[int] = None) -> Expr:
    return Par(name, [as_expr(a) for a in args], dorder)


# ---------------------------------------------------------------------------
# quotient cancellation by exact polynomial division


def _poly_decompose(term: Expr):
    """Term -> (Fraction coeff, {atom: positive int exponent}).  None if unsupported.

    Negative integer powers become reciprocal atoms (base^-1) so that mixed
    quotients still admit a polynomial view over opaque atoms.
    """
    coeff, mono = _as_coeff_monomial(term)
    if not isinstance(coeff, Fraction):
        return None
    powers = {}
    for f in mono:
        if isinstance(f, Pow) and f.exp.denominator == 1:
            if f.exp > 0:
                atom, e = f.base, f.exp.numerator
            else:
                atom, e = Pow(f.base, Fraction(-1)), -f.exp.numerator
        else:
            atom, e = f, 1
        _ATOM_CACHE[atom.key()] = atom
        powers[atom] = powers.get(atom, 0) + e
    return coeff, powers


def _as_poly(e: Expr):
    """Expression -> {monomial: Fraction} with positive-exponent atoms, or None."""
    terms = e.terms if isinstance(e, Add) else (e,)
    poly = {}
    for t in terms:
        if isinstance(t, Num):
            if not isinstance(t.value, Fraction):
                return None
            poly[()] = poly.get((), Fraction(0)) + t.value
            continue
        d = _poly_decompose(t)
        if d is None:
            return None
        coeff, powers = d
        mono = tuple(sorted(((a.key(), a, v) for a, v in powers.items() if v)))
        mono = tuple((k, v) for k, _, v in mono)
        poly[mono] = poly.get(mono, Fraction(0)) + coeff
    return {m: c for m, c in poly.items() if c != 0}


def _poly_div_exact(npoly, dpoly):
    """Exact multivariate division n / d, or None.

    Monomials are re-indexed as dense exponent vectors and peeled in graded
    lexicographic order, which is multiplicative, so exact quotients always
    divide out by leading terms.
    """
    if not dpoly:
        return None
    if not npoly:
        return {}
    atoms = sorted({a for m in list(npoly) + list(dpoly) for a, _ in m})
    index = {a: i for i, a in enumerate(atoms)}
    nvars = len(atoms)

    def to_vec(mono):
        v = [0] * nvars
        for a, e in mono:
            v[index[a]] = e
        return tuple(v)

    def from_vec(vec):
        return tuple((atoms[i], e) for i, e in enumerate(vec) if e)

    def grlex(vec):
        return (sum(vec), vec)

    nv = {to_vec(m): c for m, c in npoly.items()}
    dv = {to_vec(m): c for m, c in dpoly.items()}
    dlead = max(dv, key=grlex)
    dcoeff = dv[dlead]
    rem = dict(nv)
    quot = {}
    steps = 0
    while rem:
        steps += 1
        if steps > 2048:
            return None
        rlead = max(rem, key=grlex)
        if any(r < d for r, d in zip(rlead, dlead)):
            return None
        qvec = tuple(r - d for r, d in zip(rlead, dlead))
        qc = rem[rlead] / dcoeff
        quot[qvec] = quot.get(qvec, Fraction(0)) + qc
        for dm, dc in dv.items():
            pm = tuple(q + d for q, d in zip(qvec, dm))
            nc = rem.get(pm, Fraction(0)) - qc * dc
            if nc == 0:
                rem.pop(pm, None)
            else:
                rem[pm] = nc
    return {from_vec(v): c for v, c in quot.items()}


_ATOM_CACHE = {}


def _poly_to_expr(poly):
    terms = []
    for mono, coeff in poly.items():
        factors = [Num(coeff)]
        for akey, v in mono:
            factors.append(pow_(_ATOM_CACHE[akey], Fraction(v)))
        terms.append(mul(*factors))
    return add(*terms) if terms else ZERO


_IN_CANCEL = [False]
_CANCEL_FAILED = set()  # (expr hash, base hash) pairs that did not divide


def _cancel_quotients(e: Expr) -> Expr:
    """Cancel sum-denominators against numerators by exact division.

    Non-reentrant: rebuilds triggered from inside the pass skip it, so a
    single top-level `add` runs the pass to a fixpoint (bounded).  Failures
    are remembered so repeated construction of the same sum stays cheap.
    """
    if _IN_CANCEL[0]:
        return e
    if not isinstance(e, Add) or len(e.terms) > _CANCEL_TERM_CAP:
        return e
    _IN_CANCEL[0] = True
    try:
        for _ in range(8):
            changed, e = _cancel_one_base(e)
            if not changed or not isinstance(e, Add):
                break
    finally:
        _IN_CANCEL[0] = False
    return e


def _cancel_one_base(e: Add):
    # candidate divisor bases: sums appearing with a negative exponent
    bases = {}
    for t in e.terms:
        _, mono = _as_coeff_monomial(t)
        for f in mono:
            if isinstance(f, Pow) and f.exp < 0 and isinstance(f.base, Add):
                cur = bases.get(f.base)
                if cur is None or f.exp < cur:
                    bases[f.base] = f.exp
    for base in sorted(bases, key=Expr.key):
        if (e._hash, base._hash) in _CANCEL_FAILED:
            continue
        dpoly = _as_poly(base)
        if dpoly is None or len(dpoly) > 60:
            continue
        new = _try_cancel(e, base, dpoly)
        if new is not None:
            return True, new
        if len(_CANCEL_FAILED) < 200000:
            _CANCEL_FAILED.add((e._hash, base._hash))
    return False, e


def _split_base_exponent(term: Expr, base: Expr):
    """Term -> (exponent of `base` in term, term with that factor removed)."""
    coeff, mono = _as_coeff_monomial(term)
    exp = Fraction(0)
    rest = []
    for f in mono:
        if f == base:
            exp += 1
        elif isinstance(f, Pow) and f.base == base:
            exp += f.exp
        else:
            rest.append(f)
    return exp, _from_coeff_monomial(coeff, tuple(rest))


def _try_cancel(e: Add, base: Expr, dpoly):
    # group terms by the fractional part of their base-exponent
    classes = {}
    for t in e.terms:
        exp, rest = _split_base_exponent(t, base)
        frac_part = exp - math.floor(exp)
        classes.setdefault(frac_part, []).append((exp, rest))
    improved = False
    out_terms = []
    for frac_part, items in classes.items():
        emin = min(exp for exp, _ in items)
        if emin >= 0:
            for exp, rest in items:
                out_terms.append(_mul_keep(rest, base, exp))
            continue
        cof = add(*[mul(rest, pow_(base, exp - emin)) for exp, rest in items])
        cpoly = _as_poly(cof)
        if cpoly is None or len(cpoly) > _CANCEL_COFACTOR_CAP:
            for exp, rest in items:
                out_terms.append(_mul_keep(rest, base, exp))
            continue
        _register_atoms(cof)
        _register_atoms(base)
        e_cur = emin
        while e_cur < 0:
            q = _poly_div_exact(cpoly, dpoly)
            if q is None:
                break
            cpoly = q
            e_cur += 1
            improved = True
        rebuilt = _poly_to_expr(cpoly)
        out_terms.append(_mul_keep(rebuilt, base, e_cur))
    if not improved:
        return None
    return add(*out_terms)


def _mul_keep(rest: Expr, base: Expr, exp: Fraction) -> Expr:
    if exp == 0:
        return rest
    p = Pow(base, exp) if exp != 1 else base
    return mul(rest, p)


def _register_atoms(e: Expr):
    _ATOM_CACHE[e.key()] = e
    for c in children(e):
        _register_atoms(c)


# ---------------------------------------------------------------------------
# traversal helpers


def children(e: Expr):
    if isinstance(e, Add):
        return e.terms
    if isinstance(e, Mul):
        return e.factors
    if isinstance(e, Pow):
        return (e.base,)
    if isinstance(e, Fun):
        return (e.arg,)
    if isinstance(e, Par):
        return e.args
    return ()


def free_symbols(e: Expr) -> set:
    out = set()
    stack = [e]
    while stack:
        n = stack.pop()
        if isinstance(n, Sym):
            out.add(n.name)
        else:
            stack.extend(children(n))
    return out


def par_atoms(e: Expr) -> set:
    out = set()
    stack = [e]
    while stack:
        n = stack.pop()
        if isinstance(n, Par):
            out.add(n)
        stack.extend(children(n))
    return out


def par_signatures(e: Expr) -> dict:
    """Map parameter name -> (arity, max derivative order seen)."""
    out = {}
    for p in par_atoms(e):
        arity = len(p.args)
        dmax = max(p.dorder) if p.dorder else 0
        cur = out.get(p.name)
        if cur is None:
            out[p.name] = (arity, dmax)
        else:
            out[p.name] = (cur[0], max(cur[1], dmax))
    return out


def rebuild(e: Expr, new_children) -> Expr:
    if isinstance(e, Add):
        return add(*new_children)
    if isinstance(e, Mul):
        return mul(*new_children)
    if isinstance(e, Pow):
        return pow_(new_children[0], e.exp)
    if isinstance(e, Fun):
        return fun(e.name, new_children[0])
    if isinstance(e, Par):
        return Par(e.name, new_children, e.dorder)
    return e


def normalize(e: Expr) -> Expr:
    """Full recursive re-canonicalization (idempotent)."""
    kids = children(e)
    if not kids:
        return e
    return rebuild(e, [normalize(c) for c in kids])


# ---------------------------------------------------------------------------
# differentiation


_DIFF_CACHE: dict = {}


def diff(e: Expr, v) -> Expr:
    """Partial derivative treating every other symbol as independent."""
    if isinstance(v, str):
        v = Sym(v)
    if not isinstance(v, Sym):
        raise ExprError("can only differentiate with respect to a symbol")
    key = (e, v.name)
    hit = _DIFF_CACHE.get(key)
    if hit is None:
        hit = _diff(e, v)
        if len(_DIFF_CACHE) < 400000:
            _DIFF_CACHE[key] = hit
    return hit


def _diff(e: Expr, v: Sym) -> Expr:
    if isinstance(e, Num):
        return ZERO
    if isinstance(e, Sym):
        return ONE if e == v else ZERO
    if isinstance(e, Add):
        return add(*[diff(t, v) for t in e.terms])
    if isinstance(e, Mul):
        parts = []
        fs = e.factors
        for i, f in enumerate(fs):
            df = diff(f, v)
            if isinstance(df, Num) and df.is_zero:
                continue
            parts.append(mul(*(fs[:i] + (df,) + fs[i + 1:])))
        return add(*parts) if parts else ZERO
    if isinstance(e, Pow):
        db = diff(e.base, v)
        if isinstance(db, Num) and db.is_zero:
            return ZERO
        return mul(Num(e.exp), pow_(e.base, e.exp - 1), db)
    if isinstance(e, Fun):
        da = diff(e.arg, v)
        if isinstance(da, Num) and da.is_zero:
            return ZERO
        outer = {
            "sin": lambda a: fun("cos", a),
            "cos": lambda a: mul(NEG_ONE, fun("sin", a)),
            "exp": lambda a: fun("exp", a),
            "log": lambda a: pow_(a, Fraction(-1)),
        }[e.name](e.arg)
        return mul(outer, da)
    if isinstance(e, Par):
        parts = []
        for j, a in enumerate(e.args):
            da = diff(a, v)
            if isinstance(da, Num) and da.is_zero:
                continue
            dord = list(e.dorder)
            dord[j] += 1
            parts.append(mul(Par(e.name, e.args, dord), da))
        return add(*parts) if parts else ZERO
    raise ExprError("cannot differentiate %r" % (e,))


# ---------------------------------------------------------------------------
# substitution


Bindings = Mapping[str, Union[Expr, Number]]


def substitute(e: Expr, bindings: Bindings) -> Expr:
    """Simultaneous replacement of bound symbols; unbound symbols pass through."""
    table = {name: as_expr(v) for name, v in bindings.items()}
    return _subst(e, table)


def _subst(e: Expr, table) -> Expr:
    if isinstance(e, Sym):
        return table.get(e.name, e)
    kids = children(e)
    if not kids:
        return e
    new = [_subst(c, table) for c in kids]
    if all(a is b for a, b in zip(new, kids)):
        return e
    return rebuild(e, new)


def replace_matching(e: Expr, matcher: Callable[[Expr], Union[Expr, None]]) -> Expr:
    """Structural rewrite: `matcher` may map any subtree to a replacement."""
    hit = matcher(e)
    if hit is not None:
        return hit
    kids = children(e)
    if not kids:
        return e
    new = [replace_matching(c, matcher) for c in kids]
    if all(a is b for a, b in zip(new, kids)):
        return e
    return rebuild(e, new)


def replace_atoms(e: Expr, mapping: Mapping[Expr, Expr]) -> Expr:
    return replace_matching(e, lambda n: mapping.get(n))


# ---------------------------------------------------------------------------
# numeric evaluation

ParamFn = Callable[[Sequence[int], Sequence[float]], float]


def evaluate(e: Expr, point: Bindings, paramfns: Mapping[str, ParamFn] = None) -> float:
    """IEEE-double evaluation.  Non-finite results raise EvalError."""
    env = {}
    for name, v in point.items():
        if isinstance(v, Expr):
            if not isinstance(v, Num):
                raise EvalError("binding for %s is not numeric" % name)
            v = v.value
        env[name] = float(v)
    paramfns = paramfns or {}
    val = _eval(e, env, paramfns)
    if not math.isfinite(val):
        raise EvalError("non-finite result")
    return val


def _eval(e: Expr, env, paramfns) -> float:
    if isinstance(e, Num):
        return float(e.value)
    if isinstance(e, Sym):
        try:
            return env[e.name]
        except KeyError:
            raise EvalError("unbound symbol %s" % e.name) from None
    if isinstance(e, Add):
        return math.fsum(_eval(t, env, paramfns) for t in e.terms)
    if isinstance(e, Mul):
        out = 1.0
        for f in e.factors:
            out *= _eval(f, env, paramfns)
        return out
    if isinstance(e, Pow):
        b = _eval(e.base, env, paramfns)
        ex = e.exp
        if ex.denominator == 1:
            if b == 0.0 and ex < 0:
                raise EvalError("division by zero")
            return b ** ex.numerator
        if b < 0.0:
            raise EvalError("fractional power of a negative base")
        if b == 0.0 and ex < 0:
            raise EvalError("division by zero")
        return b ** float(ex)
    if isinstance(e, Fun):
        a = _eval(e.arg, env, paramfns)
        try:
            return getattr(math, e.name)(a)
        except ValueError:
            raise EvalError("%s domain error" % e.name) from None
        except OverflowError:
            raise EvalError("%s overflow" % e.name) from None
    if isinstance(e, Par):
        fn = paramfns.get(e.name)
        if fn is None:
            raise EvalError("missing callback for parameter function %s" % e.name)
        args = tuple(_eval(a, env, paramfns) for a in e.args)
        v = fn(e.dorder, args)
        if not math.isfinite(v):
            raise EvalError("non-finite value from parameter %s" % e.name)
        return v
    raise EvalError("cannot evaluate %r" % (e,))


def poly_param(coeffs: Mapping[tuple, float]) -> ParamFn:
    """Parameter callback backed by a polynomial: {exponent tuple: coefficient}.

    Derivatives of any multi-order are exact derivatives of the polynomial.
    """
    table = {tuple(m): float(c) for m, c in coeffs.items()}

    def call(dorder, args):
        total = 0.0
        for mono, c in table.items():
            term = c
            for x, m, d in zip(args, mono, dorder):
                if d > m:
                    term = 0.0
                    break
                for j in range(d):
                    term *= (m - j)
                term *= x ** (m - d)
            total += term
        return total

    return call


def random_poly_param(rng: random.Random, arity: int, degree: int) -> ParamFn:
    coeffs = {}
    monos = _monomials(arity, degree)
    for m in monos:
        coeffs[m] = rng.uniform(-1.0, 1.0)
    return poly_param(coeffs)


def _monomials(arity, degree):
    if arity == 0:
        return [()]
    out = []
    for d in range(degree + 1):
        rest = _monomials(arity - 1, degree - d)
        out.extend([(d,) + r for r in rest])
    return out


def compile_fn(exprs: Sequence[Expr], names: Sequence[str]):
    """Compile expressions to one fast callable(values, paramfns) -> list[float].

    `values` supplies the symbols in `names` positionally.  Used by the
    integrators; semantics match `evaluate` (EvalError on domain faults),
    finiteness is checked by the caller per step.
    """
    slot = {name: i for i, name in enumerate(names)}

    def gen(e: Expr) -> str:
        if isinstance(e, Num):
            v = e.value
            return repr(float(v)) if isinstance(v, float) else "(%r/%r)" % (
                v.numerator, v.denominator)
        if isinstance(e, Sym):
            if e.name not in slot:
                raise EvalError("unbound symbol %s in compiled expression" % e.name)
            return "x[%d]" % slot[e.name]
        if isinstance(e, Add):
            return "(" + "+".join(gen(t) for t in e.terms) + ")"
        if isinstance(e, Mul):
            return "(" + "*".join(gen(f) for f in e.factors) + ")"
        if isinstance(e, Pow):
            ex = e.exp
            if ex.denominator == 1:
                return "(%s)**(%d)" % (gen(e.base), ex.numerator)
            return "(%s)**(%r)" % (gen(e.base), float(ex))
        if isinstance(e, Fun):
            return "math.%s(%s)" % (e.name, gen(e.arg))
        if isinstance(e, Par):
            args = ",".join(gen(a) for a in e.args)
            return "P[%r](%r,(%s%s))" % (e.name, e.dorder, args, "," if len(e.args) == 1 else "")
        raise ExprError("cannot compile %r" % (e,))

    body = "[" + ",".join(gen(e) for e in exprs) + "]"
    code = compile(body, "<compiled-exprs>", "eval")

    def call(x, P=None):
        try:
            return eval(code, {"math": math, "x": x, "P": P or {}})
        except (ValueError, ZeroDivisionError, OverflowError, KeyError) as exc:
            raise EvalError("compiled evaluation failed: %s" % exc) from None

    return call


# ---------------------------------------------------------------------------
# randomized equivalence probing

PROBE_TOL = 1e-9
PROBE_TRIALS = 32


def draw_value(rng: random.Random) -> float:
    """Uniform over [-2,-0.1] U [0.1,2]."""
    mag = rng.uniform(0.1, 2.0)
    return mag if rng.random() < 0.5 else -mag


def probe_env(rng: random.Random, symbols: Iterable[str], signatures: Mapping[str, tuple]):
    env = {name: draw_value(rng) for name in sorted(symbols)}
    params = {}
    for name in sorted(signatures):
        arity, dmax = signatures[name]
        params[name] = random_poly_param(rng, arity, dmax + 2)
    return env, params


def equivalent(a: Expr, b: Expr, trials: int = PROBE_TRIALS, seed: int = 0) -> bool:
    """Structural zero of the difference, else seeded numeric probing."""
    d = add(a, mul(NEG_ONE, b))
    if isinstance(d, Num):
        return float(d.value) == 0.0
    rng = random.Random(seed)
    names = free_symbols(a) | free_symbols(b)
    sigs = {}
    for e in (a, b):
        for name, (arity, dmax) in par_signatures(e).items():
            cur = sigs.get(name)
            if cur is None or dmax > cur[1]:
                sigs[name] = (arity, dmax)
    for _ in range(trials):
        for attempt in range(10):
            env, params = probe_env(rng, names, sigs)
            try:
                va = evaluate(a, env, params)
                vb = evaluate(b, env, params)
            except EvalError:
                if attempt == 9:
                    raise EvalError("probe domain exhausted after 10 redraws")
                continue
            if abs(va - vb) > PROBE_TOL * (1.0 + abs(va) + abs(vb)):
                return False
            break
    return True


def is_zero_expr(e: Expr, trials: int = PROBE_TRIALS, seed: int = 0) -> bool:
    return equivalent(e, ZERO, trials=trials, seed=seed)


# ---------------------------------------------------------------------------
# serialization: parenthesized prefix text


def to_prefix(e: Expr) -> str:
    if isinstance(e, Num):
        v = e.value
        if isinstance(v, Fraction):
            if v.denominator == 1:
                return str(v.numerator)
            return "%d/%d" % (v.numerator, v.denominator)
        return repr(v)
    if isinstance(e, Sym):
        return e.name
    if isinstance(e, Add):
        return "(+ %s)" % " ".join(to_prefix(t) for t in e.terms)
    if isinstance(e, Mul):
        return "(* %s)" % " ".join(to_prefix(f) for f in e.factors)
    if isinstance(e, Pow):
        ex = e.exp
        exs = str(ex.numerator) if ex.denominator == 1 else "%d/%d" % (ex.numerator, ex.denominator)
        return "(^ %s %s)" % (to_prefix(e.base), exs)
    if isinstance(e, Fun):
        return "(%s %s)" % (e.name, to_prefix(e.arg))
    if isinstance(e, Par):
        ds = ",".join(str(d) for d in e.dorder)
        return "(par %s [%s] %s)" % (e.name, ds, " ".join(to_prefix(a) for a in e.args))
    raise ExprError("cannot serialize %r" % (e,))


_TOKEN_RE = re.compile(
    r"\s*(\(|\)|\[[0-9,]*\]|-?\d+/\d+|-?\d+\.\d+(?:[eE][-+]?\d+)?|-?\d+[eE][-+]?\d+|-?\d+|[A-Za-z_][A-Za-z0-9_]*|\^|\+|\*)"
)


def _tokenize_prefix(text: str):
    pos, tokens = 0, []
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m:
            if text[pos:].strip():
                raise ExprError("bad token at %r" % text[pos:pos + 12])
            break
        tokens.append(m.group(1))
        pos = m.end()
    return tokens


def from_prefix(text: str) -> Expr:
    tokens = _tokenize_prefix(text)
    pos = [0]

    def peek():
        return tokens[pos[0]] if pos[0] < len(tokens) else None

    def take():
        t = peek()
        if t is None:
            raise ExprError("unexpected end of prefix expression")
        pos[0] += 1
        return t

    def parse():
        t = take()
        if t == "(":
            head = take()
            if head == "par":
                name = take()
                dtok = take()
                if not (dtok.startswith("[") and dtok.endswith("]")):
                    raise ExprError("malformed derivative multi-order %r" % dtok)
                dord = [int(x) for x in dtok[1:-1].split(",") if x != ""]
                args = []
                while peek() != ")":
                    if peek() is None:
                        raise ExprError("unbalanced parenthesis")
                    args.append(parse())
                take()
                return Par(name, args, dord)
            args = []
            while peek() != ")":
                if peek() is None:
                    raise ExprError("unbalanced parenthesis")
                args.append(parse())
            take()
            if head == "+":
                return add(*args)
            if head == "*":
                return mul(*args)
            if head == "^":
                if len(args) != 2 or not isinstance(args[1], Num):
                    raise ExprError("malformed power")
                return pow_(args[0], args[1].value)
            if head in Fun.names or head == "sqrt":
                if len(args) != 1:
                    raise ExprError("%s takes one argument" % head)
                return fun(head, args[0])
            raise ExprError("unknown prefix head %r" % head)
        if t == ")":
            raise ExprError("unexpected ')'")
        if re.match(r"^-?\d+/\d+$", t):
            n, d = t.split("/")
            return Num(Fraction(int(n), int(d)))
        if re.match(r"^-?\d+$", t):
            return Num(Fraction(int(t)))
        if re.match(r"^-?\d", t):
            return Num(float(t))
        return Sym(t)

    out = parse()
    if pos[0] != len(tokens):
        raise ExprError("trailing tokens in prefix expression")
    return out


# ---------------------------------------------------------------------------
# serialization: JSON tree


def to_json_obj(e: Expr):
    if isinstance(e, Num):
        v = e.value
        if isinstance(v, Fraction):
            return {"kind": "num", "num": str(v.numerator), "den": str(v.denominator)}
        return {"kind": "num", "float": repr(v)}
    if isinstance(e, Sym):
        return {"kind": "sym", "name": e.name}
    if isinstance(e, Add):
        return {"kind": "add", "terms": [to_json_obj(t) for t in e.terms]}
    if isinstance(e, Mul):
        return {"kind": "mul", "factors": [to_json_obj(f) for f in e.factors]}
    if isinstance(e, Pow):
        return {"kind": "pow", "base": to_json_obj(e.base),
                "num": str(e.exp.numerator), "den": str(e.exp.denominator)}
    if isinstance(e, Fun):
        return {"kind": "fun", "name": e.name, "arg": to_json_obj(e.arg)}
    if isinstance(e, Par):
        return {"kind": "par", "name": e.name, "dorder": list(e.dorder),
                "args": [to_json_obj(a) for a in e.args]}
    raise ExprError("cannot serialize %r" % (e,))


def from_json_obj(obj) -> Expr:
    kind = obj["kind"]
    if kind == "num":
        if "float" in obj:
            return Num(float(obj["float"]))
        return Num(Fraction(int(obj["num"]), int(obj["den"])))
    if kind == "sym":
        return Sym(obj["name"])
    if kind == "add":
        return add(*[from_json_obj(t) for t in obj["terms"]])
    if kind == "mul":
        return mul(*[from_json_obj(f) for f in obj["factors"]])
    if kind == "pow":
        return pow_(from_json_obj(obj["base"]), Fraction(int(obj["num"]), int(obj["den"])))
    if kind == "fun":
        return fun(obj["name"], from_json_obj(obj["arg"]))
    if kind == "par":
        return Par(obj["name"], [from_json_obj(a) for a in obj["args"]], obj["dorder"])
    raise ExprError("unknown JSON node kind %r" % kind)


def to_json(e: Expr) -> str:
    return json.dumps(to_json_obj(e), sort_keys=True, separators=(",", ":"))


def from_json(text: str) -> Expr:
    return from_json_obj(json.loads(text))
