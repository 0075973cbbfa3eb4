"""Joint pilot/payload power allocation by successive convex approximation.

Each iteration replaces the weighted-sum-rate objective by its log-linear
tangent surrogate and the coherent-gain posynomials by their best local
monomials, yielding a GP whose solution can only improve the true objective.
A max-slack GP provides the feasible starting point; benchmark schemes reuse
the same machinery with the dispersion penalty removed or the pilots frozen.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import approx, fbl, gp
from .channel import estimation_stats
from .scenario import LargeScaleModel, SystemConfig

MAX_SCA_ITERATIONS = 50
MAX_FEASIBILITY_ROUNDS = 5
FEASIBILITY_MARGIN = 1.0     # slack level that certifies feasibility

MRC = "mrc"
FZF = "fzf"


class SurrogateError(RuntimeError):
    """A surrogate exponent came out non-positive; the tangent objective is invalid."""


@dataclass(frozen=True)
class PowerAllocation:
    """Pilot and payload transmit powers per device (noise-normalized watts)."""

    pilot: np.ndarray
    payload: np.ndarray

    def energy(self, num_devices: int, blocklength: int) -> np.ndarray:
        return num_devices * self.pilot + (blocklength - num_devices) * self.payload


@dataclass
class IterationTrace:
    """Per-iteration record of one SCA run."""

    objective: list[float] = field(default_factory=list)
    sinr: list[np.ndarray] = field(default_factory=list)
    allocations: list[PowerAllocation] = field(default_factory=list)
    gp_status: list[str] = field(default_factory=list)
    carryover_margin: list[float] = field(default_factory=list)
    surrogate_clamped: bool = False

    def rows(self, decoder: str):
        for i, obj in enumerate(self.objective):
            alloc = self.allocations[i]
            yield {
                "decoder": decoder, "iteration": i, "objective": obj,
                "sinr": list(self.sinr[i]), "pilot": list(alloc.pilot),
                "payload": list(alloc.payload),
                "gp_status": self.gp_status[i] if i < len(self.gp_status) else "",
            }


@dataclass
class SolveResult:
    status: str                        # optimal | infeasible | degraded | aborted
    allocation: PowerAllocation | None
    trace: IterationTrace
    sinr: np.ndarray | None
    rates: np.ndarray | None
    weighted_sum_rate: float
    message: str = ""

    @property
    def feasible(self) -> bool:
        return self.status in ("optimal", "degraded") and self.allocation is not None


def sinr_floor(params: fbl.FblParams, rate_req_bps: float, k: int) -> float:
    """Minimum SINR at which the lower-bound rate reaches the requirement."""
    y = rate_req_bps / params.rate_scale
    return 1.0 / fbl.rate_kernel_inverse(y, float(params.alpha[k]))


def sinr_floors(params: fbl.FblParams, rate_req_bps: np.ndarray) -> np.ndarray:
    return np.array([sinr_floor(params, float(rate_req_bps[k]), k)
                     for k in range(params.num_devices)])


def true_sinr(model: LargeScaleModel, alloc: PowerAllocation, n_antennas: int,
              decoder: str) -> np.ndarray:
    stats = estimation_stats(model, alloc.pilot)
    if decoder == MRC:
        return fbl.lb_sinr_mrc(model, stats, alloc.payload, n_antennas)
    if decoder == FZF:
        return fbl.lb_sinr_fzf(model, stats, alloc.payload, n_antennas)
    raise ValueError(f"unknown decoder {decoder!r}")


# ---------------------------------------------------------------------------
# GP construction
# ---------------------------------------------------------------------------

def _surrogate_exponents(chi_hat: np.ndarray, params: fbl.FblParams,
                         weights: np.ndarray) -> tuple[np.ndarray, bool]:
    """Normalized objective exponents from the two log tangents at chi_hat.

    Expansion points below the penalty tangent's domain are clamped up to its
    boundary; the run records that the surrogate lost tightness there.
    """
    k = params.num_devices
    w_hat = np.empty(k)
    clamped = False
    for i in range(k):
        rho, _ = approx.log1p_tangent(float(chi_hat[i]))
        if params.alpha[i] == 0.0:
            pen_slope = 0.0
        else:
            point = float(chi_hat[i])
            if point < approx.PENALTY_TANGENT_MIN:
                point = approx.PENALTY_TANGENT_MIN
                clamped = True
            pen_slope, _ = approx.penalty_tangent(point)
        w_hat[i] = weights[i] * (rho - params.alpha[i] * pen_slope)
        if w_hat[i] <= 0.0:
            raise SurrogateError(
                f"device {i}: surrogate exponent {w_hat[i]:.3e} is non-positive "
                f"(expansion SINR {chi_hat[i]:.3e})")
    return w_hat / w_hat.sum(), clamped


def _mono_from_log(log_coeff: float, exponents: dict) -> gp.Monomial:
    mono = gp.Monomial(1.0, exponents)
    mono.log_coeff = log_coeff
    return mono


class MrcConstraintLhs(gp.Expr):
    """Fused left-hand side chi * scale(pp_k) * (sum_j pd_j cross_j(pp_k) + gain(pp_k)).

    Evaluates the whole generalized posynomial in a few vectorized passes;
    algebraically identical to the generic node tree the tests build.
    """

    curvature = gp.CONVEX

    def __init__(self, chi: gp.Var, pp_k: gp.Var, pd: list[gp.Var],
                 beta_own: np.ndarray, beta_cross: np.ndarray, kdev: int,
                 log_head: float = 0.0):
        self.chi = chi
        self.pp = pp_k
        self.pd_idx = np.array([v.index for v in pd])
        self.log_head = float(log_head)
        self.b = kdev * np.asarray(beta_own, dtype=float)          # (S,)
        # row j < K: cross_j terms; last row: gain terms
        base = np.log(kdev * beta_own ** 2)
        self.c = np.vstack([base[None, :] + np.log(beta_cross.T), base[None, :]])

    def _log_eval(self, y, order, cache):
        t = self.b * math.exp(y[self.pp.index])
        lt = np.log1p(t)
        ln_scale = float(lt.sum())
        o = ln_scale - lt                                          # (S,)
        inner = self.c + o[None, :]                                # (K+1, S)
        top_m = inner.max(axis=1)
        wm = np.exp(inner - top_m[:, None])
        sm = wm.sum(axis=1)
        ln_fam = y[self.pp.index] + top_m + np.log(sm)             # (K+1,)
        rows = ln_fam.copy()
        rows[:-1] += y[self.pd_idx]
        top = float(rows.max())
        wr = np.exp(rows - top)
        sr = float(wr.sum())
        val = self.log_head + y[self.chi.index] + ln_scale + top + math.log(sr)
        if order == 0:
            return val, None, None

        wm /= sm[:, None]
        wr /= sr
        s = t / (1.0 + t)
        s_sum = float(s.sum())
        do = s_sum - s                                             # (S,)
        d2o = float((s * (1.0 - s)).sum()) - s * (1.0 - s)
        u = 1.0 + wm @ do                                          # (K+1,) d ln_fam / d yp
        d2 = wm @ (d2o + do ** 2) - (wm @ do) ** 2                 # (K+1,)

        n = y.size
        g = np.zeros(n)
        g[self.chi.index] = 1.0
        gp_total = float(wr @ u)
        g[self.pp.index] = s_sum + gp_total
        g[self.pd_idx] += wr[:-1]
        if order == 1:
            return val, g, None

        h = np.zeros((n, n))
        ip = self.pp.index
        # log-sum-exp over rows: sum_r w_r (H_r + g_r g_r^T) - G G^T
        h[ip, ip] = float((s * (1.0 - s)).sum()) \
            + float(wr @ (d2 + u ** 2)) - gp_total ** 2
        cross = wr[:-1] * u[:-1] - wr[:-1] * gp_total
        h[ip, self.pd_idx] += cross
        h[self.pd_idx, ip] += cross
        h[np.ix_(self.pd_idx, self.pd_idx)] -= np.outer(wr[:-1], wr[:-1])
        h[self.pd_idx, self.pd_idx] += wr[:-1]
        return val, g, h

    def value(self, x):
        return math.exp(self._log_eval(np.log(np.asarray(x, dtype=float)), 0, {})[0])

    def dump(self):
        return (f"(mrc-lhs {self.chi.dump()} {self.pp.dump()} "
                f"(pd {' '.join(str(i) for i in self.pd_idx)}))")


class FzfConstraintLhs(gp.Expr):
    """Fused left-hand side chi * (|set| prod_i scale_i^2(pp_i)
    + sum_j pd_j resid_j(pp_j) prod_{i!=j} scale_i^2(pp_i))."""

    curvature = gp.CONVEX

    def __init__(self, chi: gp.Var, pp: list[gp.Var], pd: list[gp.Var],
                 beta_set: np.ndarray, kdev: int, log_head: float = 0.0):
        self.chi = chi
        self.pp_idx = np.array([v.index for v in pp])
        self.pd_idx = np.array([v.index for v in pd])
        self.log_head = float(log_head)
        self.beta = np.asarray(beta_set, dtype=float)              # (S, K)
        self.kdev = kdev
        self.size = self.beta.shape[0]

    def _log_eval(self, y, order, cache):
        t = self.kdev * self.beta * np.exp(y[self.pp_idx])[None, :]   # (S, K)
        lt = np.log1p(t)
        ln_v2 = lt.sum(axis=0)                                     # (K,) log scale^2
        v2_total = float(ln_v2.sum())
        inner = np.log(self.beta) + (ln_v2[None, :] - lt)          # (S, K)
        top_m = inner.max(axis=0)
        wm = np.exp(inner - top_m[None, :])
        sm = wm.sum(axis=0)
        ln_mu = top_m + np.log(sm)                                 # (K,)
        rows = np.append(y[self.pd_idx] + ln_mu + (v2_total - ln_v2),
                         math.log(self.size) + v2_total)           # (K+1,)
        top = float(rows.max())
        wr = np.exp(rows - top)
        sr = float(wr.sum())
        val = self.log_head + y[self.chi.index] + top + math.log(sr)
        if order == 0:
            return val, None, None

        wm /= sm[None, :]
        wr /= sr
        s = t / (1.0 + t)
        dv2 = s.sum(axis=0)                                        # (K,)
        d2v2 = (s * (1.0 - s)).sum(axis=0)
        do = dv2[None, :] - s                                      # (S, K)
        dmu = (wm * do).sum(axis=0)                                # (K,)
        d2mu = (wm * ((d2v2[None, :] - s * (1.0 - s)) + do ** 2)).sum(axis=0) - dmu ** 2

        kdev = self.beta.shape[1]
        # row gradients over pilot dims: dv2 everywhere, own pilot uses dmu
        grows = np.tile(dv2, (kdev + 1, 1))                        # (K+1, K)
        grows[np.arange(kdev), np.arange(kdev)] = dmu
        gpilot = wr @ grows                                        # (K,)

        n = y.size
        g = np.zeros(n)
        g[self.chi.index] = 1.0
        g[self.pp_idx] += gpilot
        g[self.pd_idx] += wr[:-1]
        if order == 1:
            return val, g, None

        hrows = np.tile(d2v2, (kdev + 1, 1))
        hrows[np.arange(kdev), np.arange(kdev)] = d2mu
        hpp = (grows.T * wr) @ grows - np.outer(gpilot, gpilot) \
            + np.diag(wr @ hrows)
        hpd_pp = grows[:-1] * wr[:-1, None] - np.outer(wr[:-1], gpilot)
        h = np.zeros((n, n))
        h[np.ix_(self.pp_idx, self.pp_idx)] = hpp
        h[np.ix_(self.pd_idx, self.pp_idx)] = hpd_pp
        h[np.ix_(self.pp_idx, self.pd_idx)] = hpd_pp.T
        h[np.ix_(self.pd_idx, self.pd_idx)] = -np.outer(wr[:-1], wr[:-1])
        h[self.pd_idx, self.pd_idx] += wr[:-1]
        return val, g, h

    def value(self, x):
        return math.exp(self._log_eval(np.log(np.asarray(x, dtype=float)), 0, {})[0])

    def dump(self):
        return (f"(fzf-lhs {self.chi.dump()} "
                f"(pp {' '.join(str(i) for i in self.pp_idx)}) "
                f"(pd {' '.join(str(i) for i in self.pd_idx)}))")


def _mrc_lhs_generic(model: LargeScaleModel, k: int, chi_like: gp.Expr, pp, pd) -> gp.Expr:
    """Node-tree form of the MRC constraint LHS (reference for the fused kernel)."""
    idx = list(model.service_sets[k])
    b = model.beta[idx, k]
    kdev = model.num_devices
    size = len(idx)
    eye = np.eye(size)
    scale = gp.PosyProductSum(pp[k], [0.0], [0.0], kdev * b, np.ones((1, size)))
    gain = gp.PosyProductSum(pp[k], np.log(kdev * b ** 2), np.ones(size),
                             kdev * b, 1.0 - eye)
    terms = []
    for j in range(kdev):
        cross = gp.PosyProductSum(pp[k], np.log(kdev * b ** 2 * model.beta[idx, j]),
                                  np.ones(size), kdev * b, 1.0 - eye)
        terms.append(gp.Product([pd[j], cross]))
    terms.append(gain)
    return gp.Product([chi_like, scale, gp.Sum(terms)])


def _fzf_lhs_generic(model: LargeScaleModel, k: int, chi_like: gp.Expr, pp, pd) -> gp.Expr:
    """Node-tree form of the zero-forcing constraint LHS."""
    idx = list(model.service_sets[k])
    kdev = model.num_devices
    size = len(idx)
    scale_sq = [gp.PosyProductSum(pp[j], [0.0], [0.0],
                                  kdev * model.beta[idx, j], np.ones((1, size)))
                for j in range(kdev)]
    resid = [gp.PosyProductSum(pp[j], np.log(model.beta[idx, j]), np.zeros(size),
                               kdev * model.beta[idx, j], 1.0 - np.eye(size))
             for j in range(kdev)]
    terms = [gp.Product([gp.Const(float(size))] + scale_sq)]
    for j in range(kdev):
        terms.append(gp.Product([pd[j], resid[j]]
                                + [scale_sq[i] for i in range(kdev) if i != j]))
    return gp.Product([chi_like, gp.Sum(terms)])


def _mrc_constraint(m: gp.GpModel, model: LargeScaleModel, k: int,
                    head: gp.Var, log_head: float, pp, pd, fit: approx.MonomialFit,
                    n_antennas: int, fused: bool = True):
    """head * scale * (sum_j pd_j cross_j + gain) <= monomial fit of N gain^2 pd."""
    idx = list(model.service_sets[k])
    if fused:
        lhs: gp.Expr = MrcConstraintLhs(head, pp[k], pd, model.beta[idx, k],
                                        model.beta[idx, :], model.num_devices,
                                        log_head)
    else:
        chi_like = head if log_head == 0.0 else gp.Product(
            [head, gp.Const(math.exp(log_head))])
        lhs = _mrc_lhs_generic(model, k, chi_like, pp, pd)
    rhs = _mono_from_log(math.log(n_antennas) + 2.0 * fit.log_coeff,
                         {pp[k].index: 2.0 * float(fit.exponents[0]),
                          pd[k].index: 1.0})
    m.add_le(lhs, rhs)


def _fzf_constraint(m: gp.GpModel, model: LargeScaleModel, k: int,
                    head: gp.Var, log_head: float, pp, pd, fit: approx.MonomialFit,
                    n_antennas: int, fused: bool = True):
    """head * (|set| prod_j scale_j^2 + sum_j pd_j resid_j prod_{i!=j} scale_i^2)
    <= monomial fit of (N-K) coherent^2 prod_{j!=k} scale_j^2 pd_k."""
    idx = list(model.service_sets[k])
    kdev = model.num_devices
    if fused:
        lhs: gp.Expr = FzfConstraintLhs(head, pp, pd, model.beta[idx, :], kdev,
                                        log_head)
    else:
        chi_like = head if log_head == 0.0 else gp.Product(
            [head, gp.Const(math.exp(log_head))])
        lhs = _fzf_lhs_generic(model, k, chi_like, pp, pd)
    exps = {pp[j].index: float(fit.exponents[j]) for j in range(kdev)}
    exps[pd[k].index] = exps.get(pd[k].index, 0.0) + 1.0
    rhs = _mono_from_log(math.log(n_antennas - kdev) + fit.log_coeff, exps)
    m.add_le(lhs, rhs)


def _gain_fits(model: LargeScaleModel, pilot_hat: np.ndarray, decoder: str):
    if decoder == MRC:
        return [approx.mrc_gain_monomial(model, float(pilot_hat[k]), k)
                for k in range(model.num_devices)]
    return [approx.fzf_gain_monomial(model, pilot_hat, k)
            for k in range(model.num_devices)]


def _add_energy(m: gp.GpModel, model: LargeScaleModel, cfg: SystemConfig, pp, pd):
    kdev = model.num_devices
    for k in range(kdev):
        lhs = gp.Sum([gp.Monomial(float(kdev), {pp[k].index: 1.0}),
                      gp.Monomial(float(cfg.blocklength - kdev), {pd[k].index: 1.0})])
        m.add_le(lhs, gp.Const(float(model.energy[k])))


def _build_step_gp(model: LargeScaleModel, cfg: SystemConfig, decoder: str,
                   pilot_hat: np.ndarray, w_hat: np.ndarray, floors: np.ndarray):
    """The per-iteration GP: tangent objective, fitted SINR constraints, floors, energy."""
    kdev = model.num_devices
    m = gp.GpModel()
    chi = [m.variable(f"chi{k}") for k in range(kdev)]
    pp = [m.variable(f"pp{k}") for k in range(kdev)]
    pd = [m.variable(f"pd{k}") for k in range(kdev)]
    m.maximize(gp.Monomial(1.0, {chi[k].index: float(w_hat[k]) for k in range(kdev)}))
    fits = _gain_fits(model, pilot_hat, decoder)
    for k in range(kdev):
        if decoder == MRC:
            _mrc_constraint(m, model, k, chi[k], 0.0, pp, pd, fits[k],
                            cfg.antennas_per_ap)
        else:
            _fzf_constraint(m, model, k, chi[k], 0.0, pp, pd, fits[k],
                            cfg.antennas_per_ap)
        m.add_le(_mono_from_log(math.log(floors[k]), {chi[k].index: -1.0}), gp.Const(1.0))
    _add_energy(m, model, cfg, pp, pd)
    return m


def _build_feasibility_gp(model: LargeScaleModel, cfg: SystemConfig, decoder: str,
                          pilot_hat: np.ndarray, floors: np.ndarray):
    """Max-slack GP: scale every SINR floor by a common factor and maximize it."""
    kdev = model.num_devices
    m = gp.GpModel()
    phi = m.variable("phi")
    pp = [m.variable(f"pp{k}") for k in range(kdev)]
    pd = [m.variable(f"pd{k}") for k in range(kdev)]
    m.maximize(phi)
    fits = _gain_fits(model, pilot_hat, decoder)
    for k in range(kdev):
        if decoder == MRC:
            _mrc_constraint(m, model, k, phi, math.log(floors[k]), pp, pd,
                            fits[k], cfg.antennas_per_ap)
        else:
            _fzf_constraint(m, model, k, phi, math.log(floors[k]), pp, pd,
                            fits[k], cfg.antennas_per_ap)
    _add_energy(m, model, cfg, pp, pd)
    return m


# ---------------------------------------------------------------------------
# Feasibility initialization and the SCA loop
# ---------------------------------------------------------------------------

def feasibility_init(model: LargeScaleModel, cfg: SystemConfig, decoder: str,
                     floors: np.ndarray) -> tuple[PowerAllocation | None, float]:
    """Find a power allocation meeting every SINR floor, or report infeasible.

    Starts from the equal energy split and re-expands the monomial fits at the
    max-slack optimum a few times, which can only raise the certified slack.
    """
    kdev = model.num_devices
    pilot_hat = model.energy / (2.0 * kdev)
    payload0 = model.energy / (2.0 * (cfg.blocklength - kdev))
    start = {"phi": 1e-3}
    for k in range(kdev):
        start[f"pp{k}"] = 0.9 * pilot_hat[k]
        start[f"pd{k}"] = 0.9 * payload0[k]
    best_phi = -math.inf
    best_alloc = None
    prev_phi = -math.inf
    for _ in range(MAX_FEASIBILITY_ROUNDS):
        m = _build_feasibility_gp(model, cfg, decoder, pilot_hat, floors)
        sol = m.solve(tol=cfg.gp_tolerance, start=start)
        if sol.status == "infeasible":
            break
        phi = sol["phi"]
        alloc = PowerAllocation(
            pilot=np.array([sol[f"pp{k}"] for k in range(kdev)]),
            payload=np.array([sol[f"pd{k}"] for k in range(kdev)]))
        if phi > best_phi:
            best_phi, best_alloc = phi, alloc
        # stop once comfortably feasible, or when re-expansion stalls
        if phi >= 1.05 * FEASIBILITY_MARGIN or phi <= prev_phi * 1.01:
            break
        prev_phi = phi
        pilot_hat = alloc.pilot
        start = {"phi": phi}
        for k in range(kdev):
            start[f"pp{k}"] = alloc.pilot[k]
            start[f"pd{k}"] = alloc.payload[k]
    if best_phi >= FEASIBILITY_MARGIN and best_alloc is not None:
        return best_alloc, best_phi
    return None, best_phi


def _solve_sca(model: LargeScaleModel, cfg: SystemConfig, decoder: str,
               params: fbl.FblParams, start: PowerAllocation | None = None) -> SolveResult:
    rate_req = np.full(model.num_devices, cfg.rate_req_bps)
    floors = sinr_floors(params, rate_req)
    trace = IterationTrace()

    if start is None:
        alloc, phi = feasibility_init(model, cfg, decoder, floors)
        if alloc is None:
            return SolveResult(status="infeasible", allocation=None, trace=trace,
                               sinr=None, rates=None, weighted_sum_rate=0.0,
                               message=f"max floor slack {phi:.4f} < 1")
    else:
        alloc = start

    kdev = model.num_devices
    chi = true_sinr(model, alloc, cfg.antennas_per_ap, decoder)
    if np.any(chi < floors * (1.0 - 1e-9)):
        return SolveResult(status="infeasible", allocation=None, trace=trace,
                           sinr=None, rates=None, weighted_sum_rate=0.0,
                           message="starting point violates an SINR floor")
    obj = fbl.weighted_lb_sum_rate(chi, model.weights, params)
    trace.objective.append(obj)
    trace.sinr.append(chi)
    trace.allocations.append(alloc)
    trace.gp_status.append("init")

    status = "optimal"
    message = ""
    warm = None
    for _ in range(MAX_SCA_ITERATIONS):
        try:
            w_hat, clamped = _surrogate_exponents(chi, params, model.weights)
        except SurrogateError as exc:
            status, message = "aborted", str(exc)
            break
        trace.surrogate_clamped |= clamped
        m = _build_step_gp(model, cfg, decoder, alloc.pilot, w_hat, floors)

        # previous iterate must stay feasible in the refreshed GP
        point = np.concatenate([chi, alloc.pilot, alloc.payload])
        trace.carryover_margin.append(float(m.constraint_margins(point).max()))

        if warm is None:
            warm = {f"chi{k}": chi[k] for k in range(kdev)}
            for k in range(kdev):
                warm[f"pp{k}"] = alloc.pilot[k]
                warm[f"pd{k}"] = alloc.payload[k]
        sol = m.solve(tol=cfg.gp_tolerance, start=warm)
        warm = sol.interior if sol.interior is not None else None
        if sol.status != "optimal":
            status, message = "degraded", f"GP step returned {sol.status}"
            break
        alloc = PowerAllocation(
            pilot=np.array([sol[f"pp{k}"] for k in range(kdev)]),
            payload=np.array([sol[f"pd{k}"] for k in range(kdev)]))
        chi = true_sinr(model, alloc, cfg.antennas_per_ap, decoder)
        obj_new = fbl.weighted_lb_sum_rate(chi, model.weights, params)
        trace.objective.append(obj_new)
        trace.sinr.append(chi)
        trace.allocations.append(alloc)
        trace.gp_status.append(sol.status)
        gain = (obj_new - obj) / obj if obj > 0 else math.inf
        obj = obj_new
        if gain < cfg.sca_tolerance:
            break

    best = int(np.argmax(trace.objective))
    alloc = trace.allocations[best]
    chi = trace.sinr[best]
    rates = np.array([fbl.lb_rate(chi[k], params, k) for k in range(kdev)])
    return SolveResult(status=status, allocation=alloc, trace=trace, sinr=chi,
                       rates=rates,
                       weighted_sum_rate=float(model.weights @ rates),
                       message=message)


def solve_mrc(model: LargeScaleModel, cfg: SystemConfig,
              start: PowerAllocation | None = None) -> SolveResult:
    """Joint pilot/payload allocation for the MRC decoder."""
    return _solve_sca(model, cfg, MRC, fbl.FblParams.from_config(cfg), start)


def solve_fzf(model: LargeScaleModel, cfg: SystemConfig,
              start: PowerAllocation | None = None) -> SolveResult:
    """Joint pilot/payload allocation for the zero-forcing decoder."""
    if cfg.antennas_per_ap <= cfg.num_devices:
        raise ValueError("zero-forcing needs antennas_per_ap > num_devices")
    return _solve_sca(model, cfg, FZF, fbl.FblParams.from_config(cfg), start)


def solve(model: LargeScaleModel, cfg: SystemConfig, decoder: str,
          start: PowerAllocation | None = None) -> SolveResult:
    return solve_mrc(model, cfg, start) if decoder == MRC else solve_fzf(model, cfg, start)


# ---------------------------------------------------------------------------
# Benchmark schemes
# ---------------------------------------------------------------------------

def benchmark_upper_bound(model: LargeScaleModel, cfg: SystemConfig,
                          decoder: str) -> SolveResult:
    """Infinite-blocklength optimization; rates are reported without penalty."""
    params = fbl.FblParams.from_config(cfg).with_zero_dispersion()
    return _solve_sca(model, cfg, decoder, params)


def benchmark_conventional(model: LargeScaleModel, cfg: SystemConfig,
                           decoder: str,
                           upper: SolveResult | None = None) -> SolveResult:
    """Infinite-blocklength allocation re-evaluated under the true penalty.

    The instance counts as infeasible (rate zero) when any device then misses
    its requirement.
    """
    upper = upper if upper is not None else benchmark_upper_bound(model, cfg, decoder)
    if not upper.feasible:
        return SolveResult(status="infeasible", allocation=None, trace=upper.trace,
                           sinr=None, rates=None, weighted_sum_rate=0.0,
                           message="penalty-free stage infeasible")
    params = fbl.FblParams.from_config(cfg)
    chi = true_sinr(model, upper.allocation, cfg.antennas_per_ap, decoder)
    rates = np.array([fbl.lb_rate(chi[k], params, k) for k in range(model.num_devices)])
    if np.any(rates < cfg.rate_req_bps * (1.0 - 1e-9)):
        return SolveResult(status="infeasible", allocation=upper.allocation,
                           trace=upper.trace, sinr=chi, rates=rates,
                           weighted_sum_rate=0.0,
                           message="allocation misses a rate requirement under penalty")
    return SolveResult(status="optimal", allocation=upper.allocation, trace=upper.trace,
                       sinr=chi, rates=rates,
                       weighted_sum_rate=float(model.weights @ rates))


def benchmark_fixed_pilot(model: LargeScaleModel, cfg: SystemConfig,
                          decoder: str) -> SolveResult:
    """Pilot power frozen at energy/blocklength; only payloads are optimized."""
    params = fbl.FblParams.from_config(cfg)
    return _solve_fixed_pilot(model, cfg, decoder, params)


def _fixed_pilot_coeffs(model: LargeScaleModel, cfg: SystemConfig, decoder: str,
                        pilot: np.ndarray):
    """Constant SINR-constraint coefficients once the pilots are frozen:
    sinr = gain * pd_k / (noise + sum_j cross_j pd_j)."""
    stats = estimation_stats(model, pilot)
    kdev = model.num_devices
    gains = np.empty(kdev)
    noises = np.empty(kdev)
    crosses = np.empty((kdev, kdev))
    for k in range(kdev):
        idx = list(model.service_sets[k])
        if decoder == MRC:
            lam = stats.lam[idx, k]
            gains[k] = cfg.antennas_per_ap * lam.sum() ** 2
            noises[k] = lam.sum()
            crosses[k] = (model.beta[idx, :] * lam[:, None]).sum(axis=0)
        else:
            gains[k] = ((cfg.antennas_per_ap - kdev)
                        * np.sqrt(stats.lam[idx, k]).sum() ** 2)
            noises[k] = float(len(idx))
            crosses[k] = stats.err_var[idx, :].sum(axis=0)
    return gains, noises, crosses


def _solve_fixed_pilot(model: LargeScaleModel, cfg: SystemConfig, decoder: str,
                       params: fbl.FblParams) -> SolveResult:
    kdev = model.num_devices
    pilot = model.energy / cfg.blocklength
    pd_max = model.energy / cfg.blocklength      # leftover budget per data symbol
    rate_req = np.full(kdev, cfg.rate_req_bps)
    floors = sinr_floors(params, rate_req)
    gains, noises, crosses = _fixed_pilot_coeffs(model, cfg, decoder, pilot)
    trace = IterationTrace()

    def payload_sinr(payload):
        return gains * payload / (noises + crosses @ payload)

    def build(w_hat, feasibility=False):
        m = gp.GpModel()
        if feasibility:
            phi = m.variable("phi")
            m.maximize(phi)
            chi = None
        else:
            phi = None
            chi = [m.variable(f"chi{k}") for k in range(kdev)]
        pd = [m.variable(f"pd{k}") for k in range(kdev)]
        if not feasibility:
            m.maximize(gp.Monomial(1.0, {chi[k].index: float(w_hat[k])
                                         for k in range(kdev)}))
        for k in range(kdev):
            terms = [gp.Monomial(float(crosses[k, j] / gains[k]), {pd[j].index: 1.0})
                     for j in range(kdev)]
            terms.append(gp.Const(float(noises[k] / gains[k])))
            if feasibility:
                head: gp.Expr = gp.Product([phi, gp.Const(float(floors[k]))])
            else:
                head = chi[k]
            m.add_le(gp.Product([head, gp.Sum(terms)]),
                     gp.Monomial(1.0, {pd[k].index: 1.0}))
            if not feasibility:
                m.add_le(_mono_from_log(math.log(floors[k]), {chi[k].index: -1.0}),
                         gp.Const(1.0))
            m.add_le(pd[k], gp.Const(float(pd_max[k])))
        return m

    # feasibility stage (exact here: constraints carry no monomial fits)
    m = build(None, feasibility=True)
    start = {"phi": 1e-3}
    start.update({f"pd{k}": 0.5 * pd_max[k] for k in range(kdev)})
    sol = m.solve(tol=cfg.gp_tolerance, start=start)
    if sol.status == "infeasible" or sol["phi"] < FEASIBILITY_MARGIN:
        return SolveResult(status="infeasible", allocation=None, trace=trace,
                           sinr=None, rates=None, weighted_sum_rate=0.0,
                           message="fixed-pilot floors unreachable")
    payload = np.array([sol[f"pd{k}"] for k in range(kdev)])
    chi = payload_sinr(payload)
    obj = fbl.weighted_lb_sum_rate(chi, model.weights, params)
    alloc = PowerAllocation(pilot=pilot, payload=payload)
    trace.objective.append(obj)
    trace.sinr.append(chi)
    trace.allocations.append(alloc)
    trace.gp_status.append("init")

    status = "optimal"
    message = ""
    warm = None
    for _ in range(MAX_SCA_ITERATIONS):
        try:
            w_hat, clamped = _surrogate_exponents(chi, params, model.weights)
        except SurrogateError as exc:
            status, message = "aborted", str(exc)
            break
        trace.surrogate_clamped |= clamped
        m = build(w_hat)
        if warm is None:
            warm = {f"chi{k}": chi[k] for k in range(kdev)}
            warm.update({f"pd{k}": payload[k] for k in range(kdev)})
        sol = m.solve(tol=cfg.gp_tolerance, start=warm)
        warm = sol.interior if sol.interior is not None else None
        if sol.status != "optimal":
            status, message = "degraded", f"GP step returned {sol.status}"
            break
        payload = np.array([sol[f"pd{k}"] for k in range(kdev)])
        chi = payload_sinr(payload)
        obj_new = fbl.weighted_lb_sum_rate(chi, model.weights, params)
        alloc = PowerAllocation(pilot=pilot, payload=payload)
        trace.objective.append(obj_new)
        trace.sinr.append(chi)
        trace.allocations.append(alloc)
        trace.gp_status.append(sol.status)
        gain = (obj_new - obj) / obj if obj > 0 else math.inf
        obj = obj_new
        if gain < cfg.sca_tolerance:
            break

    best = int(np.argmax(trace.objective))
    alloc = trace.allocations[best]
    chi = trace.sinr[best]
    rates = np.array([fbl.lb_rate(chi[k], params, k) for k in range(kdev)])
    return SolveResult(status=status, allocation=alloc, trace=trace, sinr=chi,
                       rates=rates, weighted_sum_rate=float(model.weights @ rates),
                       message=message)
