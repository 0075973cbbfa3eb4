import math

import numpy as np
import pytest

from cfurllc.gp import (AFFINE, Const, GpModel, GpModelError, Monomial,
                        PosyProductSum, Power, Product, Sum)


def random_expr(rng, n_vars, model, depth=0):
    """Random generalized-posynomial node tree over the model's variables."""
    choice = rng.integers(0, 6 if depth < 3 else 3)
    if choice == 0:
        return Const(float(10 ** rng.uniform(-1, 1)))
    if choice == 1:
        return model._vars[int(rng.integers(n_vars))]
    if choice == 2:
        exps = {int(i): float(rng.uniform(-2, 2))
                for i in rng.choice(n_vars, size=rng.integers(1, n_vars + 1),
                                    replace=False)}
        return Monomial(float(10 ** rng.uniform(-1, 1)), exps)
    if choice == 3:
        return Sum([random_expr(rng, n_vars, model, depth + 1)
                    for _ in range(rng.integers(2, 4))])
    if choice == 4:
        return Product([random_expr(rng, n_vars, model, depth + 1)
                        for _ in range(rng.integers(2, 4))])
    return Power(random_expr(rng, n_vars, model, depth + 1),
                 float(rng.uniform(0.2, 2.0)))


def fd_check(expr, y, tol_g=1e-6, tol_h=1e-5):
    n = y.size
    eps = 1e-6
    _, g, h = expr.log_eval(y, 2, {})
    g = np.zeros(n) if g is None else g
    h = np.zeros((n, n)) if h is None else h
    for i in range(n):
        up, dn = y.copy(), y.copy()
        up[i] += eps
        dn[i] -= eps
        fd = (expr.log_eval(up, 0, {})[0] - expr.log_eval(dn, 0, {})[0]) / (2 * eps)
        assert abs(g[i] - fd) < tol_g, f"grad[{i}]"
        gu = expr.log_eval(up, 1, {})[1]
        gd = expr.log_eval(dn, 1, {})[1]
        gu = np.zeros(n) if gu is None else gu
        gd = np.zeros(n) if gd is None else gd
        col = (gu - gd) / (2 * eps)
        assert np.max(np.abs(h[:, i] - col)) < tol_h, f"hess[:, {i}]"


# --------------------------------------------------------------------------
# expression algebra
# --------------------------------------------------------------------------

def test_monomial_log_form_is_affine():
    m = GpModel()
    x = m.variable("x")
    y = m.variable("y")
    node = Monomial(3.0, {0: 2.0, 1: -0.5})
    pt = np.array([0.3, -0.7])
    val, g, h = node.log_eval(pt, 2, {})
    assert val == pytest.approx(math.log(3.0) + 2.0 * 0.3 - 0.5 * (-0.7))
    assert np.allclose(g, [2.0, -0.5])
    assert h is None
    assert node.curvature == AFFINE


def test_negative_power_of_posynomial_rejected():
    m = GpModel()
    x = m.variable("x")
    with pytest.raises(GpModelError):
        Power(Sum([x, Const(1.0)]), -1.0)
    # monomials invert fine
    Power(Monomial(2.0, {0: 1.0}), -1.0)


def test_constraint_rhs_must_be_monomial():
    m = GpModel()
    x = m.variable("x")
    with pytest.raises(GpModelError):
        m.add_le(x, Sum([x, Const(1.0)]))


def test_objective_must_be_monomial_for_max():
    m = GpModel()
    x = m.variable("x")
    with pytest.raises(GpModelError):
        m.maximize(Sum([x, Const(1.0)]))


def test_node_derivatives_match_finite_differences(rng):
    for trial in range(40):
        m = GpModel()
        n_vars = int(rng.integers(2, 5))
        for i in range(n_vars):
            m.variable(f"v{i}")
        expr = Sum([random_expr(rng, n_vars, m) for _ in range(2)])
        y = rng.normal(0.0, 0.7, n_vars)
        fd_check(expr, y)


def test_fused_family_matches_generic_tree(rng):
    m = GpModel()
    x = m.variable("x")
    b = np.array([2.0, 0.5, 1.3])
    pps = PosyProductSum(x, np.log([1.5, 0.2]), [1.0, 0.0], b,
                         [[1.0, 1.0, 0.0], [0.5, 0.0, 2.0]])
    factors = [Sum([Monomial(bi, {0: 1.0}), Const(1.0)]) for bi in b]
    generic = Sum([
        Product([Monomial(1.5, {0: 1.0}), factors[0], factors[1]]),
        Product([Const(0.2), Power(factors[0], 0.5), Power(factors[2], 2.0)]),
    ])
    for _ in range(20):
        y = rng.normal(0.0, 1.5, 1)
        v1, g1, h1 = pps.log_eval(y, 2, {})
        v2, g2, h2 = generic.log_eval(y, 2, {})
        assert v1 == pytest.approx(v2, abs=1e-12)
        assert g1[0] == pytest.approx(g2[0], abs=1e-11)
        assert h1[0, 0] == pytest.approx(h2[0, 0], abs=1e-10)
        x_pos = np.exp(y)
        assert pps.value(x_pos) == pytest.approx(generic.value(x_pos), rel=1e-12)


def test_posynomial_boundary_tightness():
    # x + 1/x <= 2 touches exactly at x = 1
    m = GpModel()
    x = m.variable("x")
    m.maximize(x)
    m.add_le(Sum([x, x ** -1.0]), Const(2.0))
    margins = m.constraint_margins(np.array([1.0]))
    assert margins[0] == pytest.approx(0.0, abs=1e-14)


# --------------------------------------------------------------------------
# solver behavior
# --------------------------------------------------------------------------

def test_single_active_constraint():
    m = GpModel()
    chi = m.variable("chi")
    m.maximize(chi)
    m.add_le(chi, Const(5.0))
    sol = m.solve()
    assert sol.status == "optimal"
    assert sol["chi"] == pytest.approx(5.0, rel=1e-7)
    assert sol.kkt_residual < 1e-8


def test_symmetric_posynomial_minimum():
    m = GpModel()
    x = m.variable("x")
    m.minimize(Sum([x, x ** -1.0]))
    m.add_le(x, Const(100.0))
    sol = m.solve()
    assert sol.status == "optimal"
    assert sol["x"] == pytest.approx(1.0, abs=1e-5)
    assert sol.objective == pytest.approx(2.0, rel=1e-9)


def test_infeasible_detection():
    m = GpModel()
    x = m.variable("x")
    m.maximize(x)
    m.add_le(Monomial(3.0, {0: -1.0}), Const(1.0))   # x >= 3
    m.add_le(x, Const(2.0))
    sol = m.solve()
    assert sol.status == "infeasible"
    assert math.isnan(sol.objective)


def test_optimal_solutions_satisfy_all_constraints(rng):
    from cfurllc.cli import random_two_var_problem
    for i in range(20):
        prob = random_two_var_problem(np.random.default_rng(100 + i))
        sol = prob.solve()
        assert sol.status == "optimal"
        assert float(prob.constraint_margins(sol.x).max()) <= 1e-8
        assert sol.kkt_residual < 1e-8


def test_stage_objectives_monotone(rng):
    from cfurllc.cli import random_two_var_problem
    for i in range(10):
        prob = random_two_var_problem(np.random.default_rng(300 + i))
        sol = prob.solve()
        stages = np.array(sol.stage_objectives)
        assert np.all(np.diff(stages) >= -1e-7 * np.abs(stages[:-1]))


def test_grid_oracle_agreement(rng):
    from cfurllc.cli import grid_optimum, random_two_var_problem
    for i in range(12):
        prob = random_two_var_problem(np.random.default_rng(40 + i))
        sol = prob.solve()
        assert sol.status == "optimal"
        ref = grid_optimum(prob)
        assert abs(sol.objective - ref) / ref < 1e-3


def test_scaling_invariance(rng):
    # rebuilding the problem in variables x' = c x returns c times the optimum
    def build(scale):
        sx, sy = scale
        m = GpModel()
        x = m.variable("x")
        y = m.variable("y")
        # objective x^1.2 y^0.7 expressed in scaled variables
        m.maximize(Monomial(sx ** -1.2 * sy ** -0.7, {0: 1.2, 1: 0.7}))
        # x + y <= 5
        m.add_le(Sum([Monomial(1.0 / sx, {0: 1.0}), Monomial(1.0 / sy, {1: 1.0})]),
                 Const(5.0))
        # x * sqrt(y) <= 3
        m.add_le(Monomial(sx ** -1.0 * sy ** -0.5, {0: 1.0, 1: 0.5}), Const(3.0))
        return m

    base = build((1.0, 1.0)).solve()
    for scale in ((7.0, 0.2), (0.01, 3.0)):
        scaled = build(scale).solve()
        assert scaled.status == "optimal"
        assert scaled["x"] == pytest.approx(scale[0] * base["x"], rel=1e-6)
        assert scaled["y"] == pytest.approx(scale[1] * base["y"], rel=1e-6)
        assert scaled.objective == pytest.approx(base.objective, rel=1e-6)


def test_warm_start_agrees_with_cold(rng):
    from cfurllc.cli import random_two_var_problem
    prob = random_two_var_problem(np.random.default_rng(7))
    cold = prob.solve()
    prob2 = random_two_var_problem(np.random.default_rng(7))
    warm = prob2.solve(start={"x": cold["x"] * 0.8, "y": cold["y"] * 0.8})
    assert warm.objective == pytest.approx(cold.objective, rel=1e-7)


def test_dump_is_parenthesized_text():
    m = GpModel()
    x = m.variable("x")
    m.maximize(x)
    m.add_le(Sum([x, x ** -1.0]), Const(2.0))
    text = m.dump()
    assert text.startswith("(gp")
    assert "(vars x)" in text
    assert "(le (+ " in text
