"""Generalized geometric programming on expression DAGs, solved from scratch.

Expressions stay in generalized-posynomial form (sums, products, non-negative
powers over positive leaves); products such as repeated estimation factors are
never expanded into exponentially many monomial terms. All evaluation happens
in log variables, where every node is convex and carries analytic gradients
and Hessians, and the solver is a log-barrier interior-point method with
damped Newton steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

AFFINE = "affine"      # monomial: affine in log variables
CONVEX = "convex"      # generalized posynomial: convex in log variables


class GpError(Exception):
    """Base class for modeling and solver failures."""


class GpModelError(GpError):
    """The expression is not a generalized posynomial / monomial where required."""


# ---------------------------------------------------------------------------
# Expression nodes
# ---------------------------------------------------------------------------

class Expr:
    curvature = CONVEX

    def log_eval(self, y: np.ndarray, order: int, cache: dict):
        """Value (and optionally gradient / Hessian) of log self(exp(y))."""
        key = id(self)
        hit = cache.get(key)
        if hit is not None:
            return hit
        out = self._log_eval(y, order, cache)
        cache[key] = out
        return out

    def _log_eval(self, y, order, cache):
        raise NotImplementedError

    def value(self, x: np.ndarray) -> float:
        """Evaluate in the original positive variables (may overflow for huge x)."""
        raise NotImplementedError

    def dump(self) -> str:
        raise NotImplementedError

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return Sum([self, _coerce(other)])

    __radd__ = __add__

    def __mul__(self, other):
        return Product([self, _coerce(other)])

    __rmul__ = __mul__

    def __pow__(self, exponent):
        return Power(self, float(exponent))

    def __truediv__(self, other):
        return Product([self, Power(_coerce(other), -1.0)])


def _coerce(obj) -> Expr:
    if isinstance(obj, Expr):
        return obj
    if isinstance(obj, (int, float)):
        return Const(float(obj))
    raise GpModelError(f"cannot use {obj!r} in a GP expression")


class Const(Expr):
    curvature = AFFINE

    def __init__(self, value: float):
        if not (value > 0 and math.isfinite(value)):
            raise GpModelError(f"constants must be positive and finite, got {value}")
        self.log_value = math.log(value)

    def _log_eval(self, y, order, cache):
        return self.log_value, None, None

    def value(self, x):
        return math.exp(self.log_value)

    def dump(self):
        return f"(const {math.exp(self.log_value):.12g})"


class Var(Expr):
    curvature = AFFINE

    def __init__(self, index: int, name: str):
        self.index = index
        self.name = name

    def _log_eval(self, y, order, cache):
        if order == 0:
            return y[self.index], None, None
        g = np.zeros_like(y)
        g[self.index] = 1.0
        return y[self.index], g, None

    def value(self, x):
        return float(x[self.index])

    def dump(self):
        return f"(var {self.name})"


class Monomial(Expr):
    curvature = AFFINE

    def __init__(self, coeff: float, exponents: dict[int, float]):
        if not (coeff > 0 and math.isfinite(coeff)):
            raise GpModelError(f"monomial coefficient must be positive, got {coeff}")
        self.log_coeff = math.log(coeff)
        self.exponents = dict(exponents)
        self._idx = np.fromiter(self.exponents.keys(), dtype=int,
                                count=len(self.exponents))
        self._exp = np.fromiter(self.exponents.values(), dtype=float,
                                count=len(self.exponents))

    def _log_eval(self, y, order, cache):
        val = self.log_coeff + float(y[self._idx] @ self._exp)
        if order == 0:
            return val, None, None
        g = np.zeros_like(y)
        g[self._idx] = self._exp
        return val, g, None

    def value(self, x):
        return math.exp(self.log_coeff) * math.prod(
            float(x[i]) ** a for i, a in self.exponents.items())

    def dump(self):
        parts = " ".join(f"(v{i} {a:.12g})" for i, a in sorted(self.exponents.items()))
        return f"(mono {math.exp(self.log_coeff):.12g} {parts})"


class Sum(Expr):
    def __init__(self, terms):
        flat = []
        for t in terms:
            t = _coerce(t)
            if isinstance(t, Sum):
                flat.extend(t.terms)
            else:
                flat.append(t)
        if not flat:
            raise GpModelError("empty sum")
        self.terms = flat

    def _log_eval(self, y, order, cache):
        parts = [t.log_eval(y, order, cache) for t in self.terms]
        logs = np.array([p[0] for p in parts])
        top = float(logs.max())
        w = np.exp(logs - top)
        total = float(w.sum())
        w /= total
        val = top + math.log(total)
        if order == 0:
            return val, None, None
        n = y.size
        g = np.zeros(n)
        for wi, (_, gi, _) in zip(w, parts):
            if gi is not None:
                g += wi * gi
        if order == 1:
            return val, g, None
        h = np.zeros((n, n))
        for wi, (_, gi, hi) in zip(w, parts):
            if hi is not None:
                h += wi * hi
            if gi is not None:
                h += wi * np.outer(gi, gi)
        h -= np.outer(g, g)
        return val, g, h

    def value(self, x):
        return sum(t.value(x) for t in self.terms)

    def dump(self):
        return "(+ " + " ".join(t.dump() for t in self.terms) + ")"


class Product(Expr):
    def __init__(self, factors):
        flat = []
        for f in factors:
            f = _coerce(f)
            if isinstance(f, Product):
                flat.extend(f.factors)
            else:
                flat.append(f)
        if not flat:
            raise GpModelError("empty product")
        self.factors = flat

    @property
    def curvature(self):
        return AFFINE if all(f.curvature == AFFINE for f in self.factors) else CONVEX

    def _log_eval(self, y, order, cache):
        val = 0.0
        g = None
        h = None
        for f in self.factors:
            fv, fg, fh = f.log_eval(y, order, cache)
            val += fv
            if order >= 1 and fg is not None:
                g = fg.copy() if g is None else g + fg
            if order >= 2 and fh is not None:
                h = fh.copy() if h is None else h + fh
        return val, g, h

    def value(self, x):
        return math.prod(f.value(x) for f in self.factors)

    def dump(self):
        return "(* " + " ".join(f.dump() for f in self.factors) + ")"


class Power(Expr):
    def __init__(self, base: Expr, exponent: float):
        base = _coerce(base)
        if base.curvature != AFFINE and exponent < 0:
            raise GpModelError("negative powers are only allowed on monomials")
        self.base = base
        self.exponent = float(exponent)

    @property
    def curvature(self):
        return self.base.curvature

    def _log_eval(self, y, order, cache):
        v, g, h = self.base.log_eval(y, order, cache)
        s = self.exponent
        return s * v, None if g is None else s * g, None if h is None else s * h

    def value(self, x):
        return self.base.value(x) ** self.exponent

    def dump(self):
        return f"(pow {self.exponent:.12g} {self.base.dump()})"


class PosyProductSum(Expr):
    """Fused single-variable family: sum_r c_r x^e_r prod_f (b_f x + 1)^s_rf.

    Covers every estimation-denominator product the SINR constraints need, in
    a handful of vectorized operations instead of a deep node tree. Requires
    b_f > 0 and s_rf >= 0, which keeps the family a generalized posynomial.
    """

    def __init__(self, var: Var, log_coeffs, plain_exps, factor_coeffs, factor_exps):
        self.var = var
        self.log_c = np.asarray(log_coeffs, dtype=float)        # (R,)
        self.e = np.asarray(plain_exps, dtype=float)            # (R,)
        self.b = np.asarray(factor_coeffs, dtype=float)         # (F,)
        self.s = np.asarray(factor_exps, dtype=float)           # (R, F)
        if np.any(self.b <= 0) or np.any(self.s < 0):
            raise GpModelError("factor coefficients must be positive, exponents >= 0")
        if self.s.shape != (self.log_c.size, self.b.size):
            raise GpModelError("factor exponent matrix has the wrong shape")

    def _log_eval(self, y, order, cache):
        t = self.b * math.exp(y[self.var.index])                # (F,)
        log_factors = np.log1p(t)
        logs = self.log_c + self.e * y[self.var.index] + self.s @ log_factors
        top = float(logs.max())
        w = np.exp(logs - top)
        total = float(w.sum())
        val = top + math.log(total)
        if order == 0:
            return val, None, None
        w /= total
        slope = t / (1.0 + t)                                   # per-factor log-slope
        d_rows = self.e + self.s @ slope                        # (R,)
        d1 = float(w @ d_rows)
        n = y.size
        g = np.zeros(n)
        g[self.var.index] = d1
        if order == 1:
            return val, g, None
        curv_rows = self.s @ (slope * (1.0 - slope))
        d2 = float(w @ (curv_rows + d_rows ** 2)) - d1 ** 2
        h = np.zeros((n, n))
        h[self.var.index, self.var.index] = d2
        return val, g, h

    def value(self, x):
        xv = float(x[self.var.index])
        rows = np.exp(self.log_c) * xv ** self.e \
            * np.prod((self.b * xv + 1.0) ** self.s, axis=1)
        return float(rows.sum())

    def dump(self):
        rows = " ".join(
            f"(row {math.exp(c):.12g} {e:.12g} ({' '.join(f'{v:.12g}' for v in srow)}))"
            for c, e, srow in zip(self.log_c, self.e, self.s))
        factors = " ".join(f"{v:.12g}" for v in self.b)
        return f"(ppsum {self.var.dump()} (factors {factors}) {rows})"


# ---------------------------------------------------------------------------
# Problem container and solver
# ---------------------------------------------------------------------------

@dataclass
class GpSolution:
    x: np.ndarray
    names: tuple[str, ...]
    objective: float
    status: str                  # optimal | infeasible | max_iterations
    iterations: int
    kkt_residual: float
    message: str = ""
    interior: np.ndarray | None = None   # a well-centered point, handy as a warm start
    stage_objectives: tuple[float, ...] = ()  # objective after each barrier stage

    def __getitem__(self, name: str) -> float:
        return float(self.x[self.names.index(name)])


@dataclass
class _Constraint:
    lhs: Expr
    rhs: Expr


# Line-search and stage constants for the barrier solver.
ARMIJO_SLOPE = 0.3
BACKTRACK_SHRINK = 0.5
BARRIER_T0 = 1.0
BARRIER_GROWTH = 10.0
_NEWTON_DECREMENT_TOL = 1e-10
_MAX_CENTER_STEPS = 50
_PHASE1_MARGIN = 1e-3
_PHASE1_SKIP = -1e-12


class _BudgetExhausted(Exception):
    pass


class _IterBudget:
    def __init__(self, limit):
        self.limit = limit
        self.used = 0

    def spend(self):
        self.used += 1
        if self.used > self.limit:
            raise _BudgetExhausted


class GpModel:
    """Positive-variable program: monomial objective, posynomial <= monomial."""

    def __init__(self):
        self._vars: list[Var] = []
        self._constraints: list[_Constraint] = []
        self._sense = None
        self._objective: Expr | None = None
        self._compiled = None

    # -- modeling -----------------------------------------------------------
    def variable(self, name: str) -> Var:
        v = Var(len(self._vars), name)
        self._vars.append(v)
        return v

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(v.name for v in self._vars)

    def maximize(self, expr):
        expr = _coerce(expr)
        if expr.curvature != AFFINE:
            raise GpModelError("only a monomial can be maximized")
        self._sense, self._objective = "max", expr

    def minimize(self, expr):
        self._sense, self._objective = "min", _coerce(expr)

    def add_le(self, lhs, rhs):
        lhs, rhs = _coerce(lhs), _coerce(rhs)
        if rhs.curvature != AFFINE:
            raise GpModelError("constraint right-hand side must be a monomial")
        self._constraints.append(_Constraint(lhs, rhs))
        self._compiled = None

    def constraint_margins(self, x: np.ndarray) -> np.ndarray:
        """Log-space slack log(lhs) - log(rhs) per constraint; <= 0 means satisfied."""
        y = np.log(np.asarray(x, dtype=float))
        fvals, _, _ = self._constraint_eval(y, 0)
        return fvals

    def dump(self) -> str:
        lines = ["(gp", "  (vars " + " ".join(self.names) + ")"]
        if self._objective is not None:
            lines.append(f"  ({self._sense} {self._objective.dump()})")
        for c in self._constraints:
            lines.append(f"  (le {c.lhs.dump()} {c.rhs.dump()})")
        return "\n".join(lines) + ")"

    # -- evaluation ----------------------------------------------------------
    def _compile(self):
        """Fold the affine content of every constraint into one matrix.

        An affine expression satisfies F(y) = F(0) + grad(0) . y exactly, so
        monomial-vs-monomial rows reduce to a single matvec and only genuinely
        nonlinear left-hand sides keep walking their node graphs.
        """
        n = len(self._vars)
        zero = np.zeros(n)
        rows, offsets, nonlin = [], [], []
        for i, c in enumerate(self._constraints):
            rv, rg, _ = c.rhs.log_eval(zero, 1, {})
            rg = np.zeros(n) if rg is None else rg
            if c.lhs.curvature == AFFINE:
                lv, lg, _ = c.lhs.log_eval(zero, 1, {})
                lg = np.zeros(n) if lg is None else lg
                rows.append(lg - rg)
                offsets.append(lv - rv)
            else:
                nonlin.append((i, c.lhs, rg, rv))
        aff_idx = np.array([i for i, c in enumerate(self._constraints)
                            if c.lhs.curvature == AFFINE], dtype=int)
        self._compiled = (
            aff_idx,
            np.array(rows).reshape(len(rows), n),
            np.array(offsets),
            nonlin,
        )

    def _constraint_eval(self, y, order):
        if self._compiled is None:
            self._compile()
        aff_idx, aff_rows, aff_off, nonlin = self._compiled
        cache: dict = {}
        n = y.size
        m = len(self._constraints)
        fvals = np.empty(m)
        grads = np.zeros((m, n)) if order >= 1 else None
        hesses = [None] * m if order >= 2 else None
        if aff_idx.size:
            fvals[aff_idx] = aff_rows @ y + aff_off
            if order >= 1:
                grads[aff_idx] = aff_rows
        for i, lhs, rg, rv in nonlin:
            lv, lg, lh = lhs.log_eval(y, order, cache)
            fvals[i] = lv - rv - float(rg @ y)
            if order >= 1:
                grads[i] = lg - rg
            if order >= 2 and lh is not None:
                hesses[i] = lh        # rhs is affine, so it has no Hessian part
        return fvals, grads, hesses

    def _objective_eval(self, y, order):
        sign = -1.0 if self._sense == "max" else 1.0
        v, g, h = self._objective.log_eval(y, order, {})
        n = y.size
        if order == 0:
            return sign * v, None, None
        g = np.zeros(n) if g is None else sign * g
        if order == 1:
            return sign * v, g, None
        h = np.zeros((n, n)) if h is None else sign * h
        return sign * v, g, h

    def _barrier_parts(self, y, order, t, f0_ref=0.0):
        # the reference shift keeps the stage objective near zero, so the
        # line search can still resolve decrements at large t
        f0, g0, h0 = self._objective_eval(y, order)
        fvals, grads, hesses = self._constraint_eval(y, order)
        if np.any(fvals >= 0) or not math.isfinite(f0):
            return math.inf, None, None
        val = t * (f0 - f0_ref) - float(np.sum(np.log(-fvals)))
        if order == 0:
            return val, None, None
        inv = 1.0 / (-fvals)
        grad = t * g0 + grads.T @ inv
        if order == 1:
            return val, grad, None
        hess = t * h0 + grads.T @ (grads * (inv ** 2)[:, None])
        for hi, wi in zip(hesses, inv):
            if hi is not None:
                hess += wi * hi
        return val, grad, hess

    def _kkt_residual(self, y):
        """First-order certificate at y: best non-negative multipliers for the
        near-active constraints are recovered by least squares, then
        stationarity, complementarity and primal feasibility are measured
        directly. Constraints with real slack get zero multipliers, so they
        cannot absorb gradient error at the cost of complementarity."""
        _, g0, _ = self._objective_eval(y, 1)
        fvals, grads, _ = self._constraint_eval(y, 1)
        active = fvals >= -1e-3
        lam = np.zeros(len(fvals))
        if np.any(active):
            lam[active] = _nnls(grads[active].T, -g0)
        scale = 1.0 + float(np.max(np.abs(g0)))
        stationarity = float(np.max(np.abs(g0 + grads.T @ lam))) / scale
        complementarity = float(np.max(lam * (-fvals))) / scale if lam.size else 0.0
        return max(stationarity, complementarity, float(np.max(fvals)))

    # -- solving ------------------------------------------------------------
    def solve(self, tol: float = 1e-9, start=None, max_newton: int = 4000) -> GpSolution:
        """Interior-point solve; deterministic for a given problem and start."""
        if self._objective is None:
            raise GpModelError("objective not set")
        if not self._constraints:
            raise GpModelError("unconstrained GP is unbounded")
        n = len(self._vars)
        if start is None:
            y0 = np.zeros(n)
        elif isinstance(start, dict):
            y0 = np.zeros(n)
            for i, name in enumerate(self.names):
                if name in start:
                    y0[i] = math.log(float(start[name]))
        else:
            y0 = np.log(np.asarray(start, dtype=float))

        budget = _IterBudget(max_newton)
        y, fail = self._phase_one(y0, budget)
        if fail is not None:
            return self._finish(y0 if y is None else y, fail, budget, math.inf)

        m = len(self._constraints)
        t = BARRIER_T0
        kkt = math.inf
        status = "max_iterations"
        interior = None
        stages = []
        try:
            while True:
                ref = self._objective_eval(y, 0)[0]
                y = _newton_center(
                    lambda yy, o: self._barrier_parts(yy, o, t, ref), y, budget)
                stages.append(math.exp(self._objective.log_eval(y, 0, {})[0]))
                if interior is None and m / t <= 3e-2:
                    interior = y.copy()
                # the multiplier-recovery certificate can fire before the
                # duality-gap surrogate m/t has shrunk all the way to tol
                if m / t <= max(tol, 1e-3):
                    kkt = self._kkt_residual(y)
                    if kkt <= tol:
                        status = "optimal"
                        break
                if m / t <= tol and t > 1e16:
                    break
                t *= BARRIER_GROWTH
        except _BudgetExhausted:
            status = "max_iterations"
        return self._finish(y, status, budget, kkt, interior, stages)

    def _phase_one(self, y0, budget):
        """Find a strictly feasible point, or detect infeasibility."""
        n = len(self._vars)
        m = len(self._constraints)
        fvals, _, _ = self._constraint_eval(y0, 0)
        if float(fvals.max()) < _PHASE1_SKIP:
            return y0, None

        def parts(z, order, t, s_ref=0.0):
            y, s = z[:n], z[n]
            fvals, grads, hesses = self._constraint_eval(y, order)
            shifted = fvals - s
            if np.any(shifted >= 0):
                return math.inf, None, None
            val = t * (s - s_ref) - float(np.sum(np.log(-shifted)))
            if order == 0:
                return val, None, None
            inv = 1.0 / (-shifted)
            grad = np.zeros(n + 1)
            grad[:n] = grads.T @ inv
            grad[n] = t - float(inv.sum())
            if order == 1:
                return val, grad, None
            gx = np.hstack([grads, -np.ones((m, 1))])
            hess = gx.T @ (gx * (inv ** 2)[:, None])
            for hi, wi in zip(hesses, inv):
                if hi is not None:
                    hess[:n, :n] += wi * hi
            return val, grad, hess

        def margin(zz):
            return float(self._constraint_eval(zz[:n], 0)[0].max())

        z = np.append(y0, float(fvals.max()) + 1.0)
        t = BARRIER_T0
        try:
            while True:
                ref = z[n]
                z = _newton_center(lambda zz, o: parts(zz, o, t, ref), z, budget,
                                   early_exit=lambda zz: margin(zz) < -_PHASE1_MARGIN)
                if margin(z) < -_PHASE1_MARGIN:
                    return z[:n], None
                if 1.0 / t <= 1e-12:
                    break
                t *= BARRIER_GROWTH
        except _EarlyExit as exc:
            return exc.point[:n], None
        except _BudgetExhausted:
            return z[:n], "max_iterations"
        if margin(z) < -1e-9:
            return z[:n], None
        return None, "infeasible"

    def _finish(self, y, status, budget, kkt, interior=None, stages=()):
        y = np.asarray(y, dtype=float)
        if status == "infeasible":
            obj = math.nan
        else:
            obj = math.exp(self._objective.log_eval(y, 0, {})[0])
        return GpSolution(x=np.exp(y), names=self.names, objective=obj,
                          status=status, iterations=budget.used, kkt_residual=kkt,
                          interior=None if interior is None else np.exp(interior),
                          stage_objectives=tuple(stages))


class _EarlyExit(Exception):
    def __init__(self, point):
        self.point = point


def _newton_center(parts, y, budget, early_exit=None):
    """Damped Newton minimization of one barrier stage.

    The first trial step is scaled by 1/(1 + decrement), which keeps long
    steps inside the barrier domain; Armijo backtracking mops up the rest.
    """
    best_lam = math.inf
    stalled = 0
    for _ in range(_MAX_CENTER_STEPS):
        budget.spend()
        val, grad, hess = parts(y, 2)
        if not math.isfinite(val):
            raise GpError("barrier evaluated outside its domain")
        step = _newton_direction(hess, grad)
        decrement2 = float(-grad @ step)
        if decrement2 / 2.0 <= _NEWTON_DECREMENT_TOL + 8e-15 * abs(val):
            return y
        lam = math.sqrt(max(decrement2, 0.0))
        if lam < 0.9 * best_lam:
            best_lam, stalled = lam, 0
        else:
            stalled += 1
            if stalled >= 6 and lam < 0.1:
                return y    # float-precision plateau near the stage center

        if lam < 0.25:
            # quadratic-convergence region: expected decrease may sit below
            # float resolution of the barrier value, so skip the sufficient-
            # decrease test and only keep the step inside the domain
            cand = y + step
            if not math.isfinite(parts(cand, 0)[0]):
                cand = y + 0.5 * step
                if not math.isfinite(parts(cand, 0)[0]):
                    return y
        else:
            a = 1.0 / (1.0 + lam)
            slope = ARMIJO_SLOPE * float(grad @ step)
            for _ in range(60):
                cand = y + a * step
                cand_val, _, _ = parts(cand, 0)
                if math.isfinite(cand_val) and cand_val <= val + a * slope:
                    break
                a *= BACKTRACK_SHRINK
            else:
                return y    # no float-representable progress left
            if a * lam < 1e-13:
                return y    # progress below float resolution
        y = cand
        if early_exit is not None and early_exit(y):
            raise _EarlyExit(y)
    return y


def _newton_direction(hess, grad):
    """Equilibrated Cholesky solve; barrier Hessians become badly scaled near
    active constraints, so row/column scaling keeps the factorization sane."""
    n = grad.size
    hess = 0.5 * (hess + hess.T)
    d = np.sqrt(np.maximum(np.abs(np.diag(hess)), 1e-300))
    scaled = hess / d[:, None] / d[None, :]
    rhs = grad / d
    ridge = 0.0
    for _ in range(40):
        try:
            chol = np.linalg.cholesky(scaled + ridge * np.eye(n))
            u = np.linalg.solve(chol.T, np.linalg.solve(chol, rhs))
            return -u / d
        except np.linalg.LinAlgError:
            ridge = 1e-14 if ridge == 0.0 else ridge * 100.0
    raise GpError("Newton system could not be factorized")


def _nnls(a: np.ndarray, b: np.ndarray, max_iter: int | None = None) -> np.ndarray:
    """Lawson-Hanson non-negative least squares: min ||a x - b||, x >= 0.

    Deterministic active-set loop; sizes here are tiny (constraint counts).
    """
    n, m = a.shape
    x = np.zeros(m)
    passive = np.zeros(m, dtype=bool)
    resid = b - a @ x
    max_iter = max_iter or 3 * m + 10
    for _ in range(max_iter):
        w = a.T @ resid
        w[passive] = -np.inf
        if not np.any(~passive) or float(w.max()) <= 1e-12 * (1.0 + float(np.abs(b).max())):
            break
        passive[int(np.argmax(w))] = True
        while True:
            idx = np.flatnonzero(passive)
            z, *_ = np.linalg.lstsq(a[:, idx], b, rcond=None)
            if np.all(z > 0):
                x = np.zeros(m)
                x[idx] = z
                break
            bad = z <= 0
            with np.errstate(divide="ignore", invalid="ignore"):
                steps = x[idx] / (x[idx] - z)
            alpha = float(np.min(steps[bad]))
            x[idx] = x[idx] + alpha * (z - x[idx])
            passive[x <= 1e-300] = False
            x[~passive] = 0.0
        resid = b - a @ x
    return x
