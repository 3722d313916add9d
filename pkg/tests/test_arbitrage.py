from __future__ import annotations

from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robustdp.arbitrage import (
    alpha_from_points,
    check_na_global,
    check_na_node,
    check_sna,
    compute_alpha,
    geometry_from_points,
    node_geometry,
    project_to_D,
    verify_certificate,
)
from robustdp.exceptions import PreconditionError
from robustdp.market_model import MarketModel, nonpolar_mask

from _instances import from_doc, one_sided


def _geom(points):
    pts = np.asarray(points, dtype=float)
    return geometry_from_points("n", tuple(f"c{j}" for j in range(len(pts))), pts)


def _scaled(model: MarketModel, factor: float) -> MarketModel:
    doc = model.to_dict()
    for n in doc["nodes"]:
        n["prices"] = [factor * p for p in n["prices"]]
    return MarketModel.from_dict(doc)


# geometry


def test_bin1_geometry(bin1):
    g = node_geometry(bin1, nonpolar_mask(bin1), "root")
    assert sorted(g.support_points.ravel().tolist()) == [-0.5, 1.0]
    assert g.dim == 1
    assert abs(abs(g.d_basis[0, 0]) - 1.0) < 1e-12


def test_zero_increment_has_trivial_span(flat_tree):
    g = node_geometry(flat_tree, nonpolar_mask(flat_tree), "root")
    assert g.dim == 0
    assert g.d_basis.shape == (1, 0)


def test_collinear_points_span_a_line():
    g = _geom([[1.0, 0.0], [-1.0, 0.0]])
    assert g.dim == 1
    assert np.allclose(np.abs(g.d_basis[:, 0]), [1.0, 0.0])


def test_project_to_trivial_space_is_zero():
    g = _geom([[0.0]])
    assert project_to_D(g, np.array([5.0])).tolist() == [0.0]


def test_project_onto_axis_keeps_payoffs():
    g = _geom([[1.0, 0.0], [-2.0, 0.0], [0.5, 0.0]])
    h = np.array([3.0, 7.0])
    p = project_to_D(g, h)
    assert np.allclose(p, [3.0, 0.0])
    assert np.allclose(g.support_points @ p, g.support_points @ h, atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.tuples(st.floats(-3, 3), st.floats(-3, 3)), min_size=1, max_size=5),
    st.tuples(st.floats(-10, 10), st.floats(-10, 10)),
)
def test_projection_is_idempotent_and_contracting(points, h):
    g = _geom(points)
    h = np.asarray(h)
    p = project_to_D(g, h)
    assert np.allclose(project_to_D(g, p), p, atol=1e-9)
    assert np.linalg.norm(p) <= np.linalg.norm(h) + 1e-9
    assert np.allclose(g.support_points @ p, g.support_points @ h, atol=1e-8 * (1 + np.abs(h).sum()))


# node verdicts


def test_bin1_has_no_arbitrage(bin1):
    v = check_na_node(bin1, nonpolar_mask(bin1), "root")
    assert v.holds
    assert v.certificate is None


def test_one_sided_support_is_an_arbitrage():
    m = one_sided()
    v = check_na_node(m, nonpolar_mask(m), "root")
    assert not v.holds
    assert v.certificate.tolist() == [1.0]
    assert verify_certificate(v.certificate, np.array([[1.0], [0.0]]))


def test_zero_increment_has_no_arbitrage(flat_tree):
    v = check_na_node(flat_tree, nonpolar_mask(flat_tree), "root")
    assert v.holds


def test_certificate_recheck_is_exact():
    Y = np.array([[1.0], [0.0]])
    assert verify_certificate(np.array([1.0]), Y)
    assert not verify_certificate(np.array([-1.0]), Y)
    assert not verify_certificate(np.array([0.0]), Y)


# margins


def test_trivial_space_gives_alpha_one(flat_tree):
    m = compute_alpha(flat_tree, nonpolar_mask(flat_tree), "root")
    assert m.alpha == 1.0 and m.n0 == 1


def test_bin1_alpha_is_one_half(bin1):
    m = compute_alpha(bin1, nonpolar_mask(bin1), "root")
    assert m.n0 == 2
    assert m.alpha == 0.5 and m.alpha_cert == 0.5 and m.exact


def test_alpha_on_failing_node_is_a_precondition_error():
    m = one_sided()
    with pytest.raises(PreconditionError):
        compute_alpha(m, nonpolar_mask(m), "root")


def test_alpha_margin_property_on_the_sphere(bin2):
    # every unit h loses at least alpha with probability above alpha under some vertex
    rep = check_na_global(bin2)
    for node, r in rep.nodes.items():
        a = r.verdict.margin.alpha
        Y = r.geometry.support_points
        P = bin2.vertices(node)
        for h in (1.0, -1.0):
            mass = P @ ((h * Y[:, 0]) < -a + 1e-12)
            assert mass.max() > a - 1e-12


def test_two_dimensional_alpha_is_certified():
    g = _geom([[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]])
    P = np.array([[1 / 3, 1 / 3, 1 / 3]])
    m = alpha_from_points(g, P, directions=2000, seed=1)
    assert not m.exact and m.certified
    assert 0 < m.alpha_cert <= m.alpha


# global reports


def test_bin2_margins(bin2):
    rep = check_na_global(bin2)
    assert rep.na_qT and rep.sna
    alphas = {n: r.verdict.margin.alpha for n, r in rep.nodes.items()}
    # at d (S = 1/2) the increments are +1/2 and -1/4
    assert alphas == {"root": 0.5, "u": 0.5, "d": 0.25}


def test_replacing_a_polytope_by_a_point_mass_creates_arbitrage(bin2):
    rep = check_na_global(bin2.with_priors({"u": [[1.0, 0.0]]}))
    assert not rep.na_qT
    assert list(rep.failing_nodes()) == ["u"]
    assert rep.nodes["u"].verdict.certificate.tolist() == [1.0]


def test_flat_tree_passes(flat_tree):
    assert check_na_global(flat_tree).na_qT


def test_degenerate_vertex_breaks_strong_but_not_quasi_sure_na(bin1):
    m = bin1.with_priors({"root": [[0.4, 0.6], [0.6, 0.4], [1.0, 0.0]]})
    rep = check_na_global(m)
    assert rep.na_qT
    assert rep.sna is False
    assert rep.sna_report.failures[("root", 2)].tolist() == [1.0]


def test_single_prior_sna_equals_na(bin1):
    m = bin1.with_priors({"root": [[0.5, 0.5]]})
    rep = check_na_global(m)
    assert rep.sna == rep.na_qT is True
    assert check_sna(one_sided()).sna is False


def test_report_serializes(bin1):
    doc = check_na_global(bin1).to_dict()
    assert doc["global"] == {"na_qT": True, "sna": True}
    assert doc["nodes"][0]["alpha"] == 0.5


# invariances


def test_redundant_vertex_does_not_change_verdict(bin1):
    m = bin1.with_priors({"root": [[0.4, 0.6], [0.6, 0.4], [0.5, 0.5]]})
    assert check_na_global(m).na_qT == check_na_global(bin1).na_qT


@pytest.mark.parametrize("factor", [0.01, 3.0, 1e4])
def test_scaling_does_not_change_verdict(factor):
    for m in (one_sided(), from_doc([("root", None, 1.0), ("u", "root", 1.3), ("d", "root", 0.8)], {"root": [[0.5, 0.5]]})):
        assert check_na_global(_scaled(m, factor)).na_qT == check_na_global(m).na_qT


def _two_asset(points, A=None):
    pts = np.asarray(points, dtype=float)
    if A is not None:
        pts = pts @ np.asarray(A).T
    base = np.array([10.0, 10.0])
    nodes = [("root", None, base.tolist())] + [
        (f"c{j}", "root", (base + p).tolist()) for j, p in enumerate(pts)
    ]
    J = len(pts)
    return from_doc(nodes, {"root": [[1.0 / J] * J]}, d=2)


@settings(max_examples=40, deadline=None)
@given(
    st.lists(st.tuples(st.integers(-4, 4), st.integers(-4, 4)), min_size=2, max_size=5),
    st.tuples(st.integers(-3, 3), st.integers(-3, 3), st.integers(-3, 3), st.integers(-3, 3)),
)
def test_linear_change_of_prices_preserves_verdict(points, a):
    A = np.array([[a[0], a[1]], [a[2], a[3]]], dtype=float)
    if abs(np.linalg.det(A)) < 0.5:
        A = np.array([[2.0, 1.0], [1.0, 1.0]])
    base = check_na_global(_two_asset(points), with_sna=False).na_qT
    moved = check_na_global(_two_asset(points, A), with_sna=False).na_qT
    assert base == moved


def test_failing_certificate_inequalities_hold_exactly():
    m = _two_asset([[1, 0], [0, 1], [1, 1]])
    rep = check_na_global(m)
    assert not rep.na_qT
    h = rep.nodes["root"].verdict.certificate
    Y = rep.nodes["root"].geometry.support_points
    gains = [sum(Fraction(float(a)) * Fraction(float(b)) for a, b in zip(h, y)) for y in Y]
    assert all(g >= -Fraction(1, 10**9) for g in gains)
    assert any(g > Fraction(1, 10**9) for g in gains)
