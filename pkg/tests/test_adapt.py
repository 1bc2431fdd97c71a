import numpy as np
import pytest

from meshfit import (AdaptivityPlan, FitConfig, QualityMetric, SolverControls,
                     apply_edge_constraints, compute_face_errors,
                     face_arc_length, face_error, generate_cartesian,
                     mark_interface_faces, run_rp_adaptivity,
                     solve_r_adaptivity)
from meshfit.adapt import (apply_refinement, derefinement_pass,
                           edge_touching_elevation, mark_for_refinement,
                           propagate_orders, try_derefine)
from meshfit.levelset import ANALYTIC_LEVELSETS, AnalyticLevelSet

from conftest import meshes_identical


def _const_field(c):
    return AnalyticLevelSet("const",
                            lambda x, y: np.full_like(x, c),
                            lambda x, y: (np.zeros_like(x), np.zeros_like(y)))


def _linear_field(a, b, c):
    return AnalyticLevelSet("linear",
                            lambda x, y: a * x + b * y + c,
                            lambda x, y: (np.full_like(x, a),
                                          np.full_like(y, b)))


# ---------------------------------------------------------------------------
# face error measures

def test_face_error_constant_field():
    m = generate_cartesian(1, 1, 1)
    m.marked_faces = {m.edge_id(0, 1)}  # the bottom edge, length 1
    face = next(iter(m.marked_faces))
    # e_f = integral of sigma^2 over the face
    assert np.isclose(face_error(m, _const_field(2.0), face), 4.0, atol=1e-12)
    assert np.isclose(face_arc_length(m, _const_field(2.0), face), 1.0,
                      atol=1e-13)


def test_face_error_linear_field():
    m = generate_cartesian(2, 2, 1)
    field = _linear_field(0.0, 1.0, -0.1)  # sigma = y - 0.1
    bottom = m.edge_id(0, 1)
    # on y = 0 the residual is 0.1 along a length-0.5 face
    assert np.isclose(face_error(m, field, bottom), 0.01 * 0.5, atol=1e-14)
    mid = m.edge_id(3, 4)  # a face on y = 0.5
    assert np.isclose(face_error(m, field, mid), 0.16 * 0.5, atol=1e-14)


def test_face_error_zero_on_contour():
    m = generate_cartesian(4, 4, 2)
    plane = ANALYTIC_LEVELSETS["plane"]()
    mark_interface_faces(m, plane)
    for face in m.marked_faces:
        assert face_error(m, plane, face) < 1e-28


def test_arc_length_of_curved_face():
    # bend the shared face of a 2x1 mesh into a parabolic arc and compare
    # against dense numerical integration of the true arc length
    m = generate_cartesian(2, 1, 2)
    k = m.edge_id(1, 4)
    dm = m.dof_map()
    ids = dm.edge_node_ids(k, m)
    t = dm.extract(m)
    mid = np.argmin(np.abs(t[ids] - [0.5, 0.5]).sum(axis=1))
    t[ids[mid]] += [0.08, 0.0]
    dm.scatter(m, t)
    apply_edge_constraints(m)
    measured = face_arc_length(m, _const_field(0.0), k)
    # the face runs x(s) = 0.5 + 0.08 * 4 s (1 - s), y(s) = s
    s = np.linspace(0.0, 1.0, 20001)
    xs = 0.5 + 0.32 * s * (1 - s)
    exact = np.hypot(np.diff(xs), np.diff(s)).sum()
    assert np.isclose(measured, exact, rtol=1e-8)


def test_compute_face_errors_report():
    m = generate_cartesian(4, 4, 1)
    circle = ANALYTIC_LEVELSETS["circle"]()
    mark_interface_faces(m, circle)
    rep = compute_face_errors(m, circle)
    assert set(rep.faces) == m.marked_faces
    assert np.isclose(rep.total_error, rep.errors.sum(), atol=1e-15)
    assert np.isclose(rep.max_error, rep.errors.max(), atol=1e-15)
    for k, err in zip(rep.faces, rep.errors):
        assert np.isclose(rep.error_of(k), err, atol=1e-15)
        assert np.isclose(err, face_error(m, circle, k), atol=1e-15)
    ids = m.dof_map().marked_node_ids(m)
    direct = np.abs(circle.values(m.dof_map().extract(m)[ids])).max()
    assert np.isclose(rep.node_sigma_max, direct, atol=1e-15)


# ---------------------------------------------------------------------------
# marking and refinement

def test_mark_absolute_and_relative():
    m = generate_cartesian(4, 4, 1)
    circle = ANALYTIC_LEVELSETS["circle"]()
    mark_interface_faces(m, circle)
    rep = compute_face_errors(m, circle)
    plan_abs = AdaptivityPlan(p_init=1, p_max=3, refine_kind="absolute",
                              refine_threshold=rep.max_error)
    # strict comparison: faces attaining the max are not marked
    some = mark_for_refinement(rep, plan_abs)
    assert len(some) < len(rep.faces)
    assert all(rep.error_of(f) < rep.max_error for f in some)
    plan_all = AdaptivityPlan(p_init=1, p_max=3, refine_kind="absolute",
                              refine_threshold=0.0)
    marked_all = mark_for_refinement(rep, plan_all)
    assert set(marked_all) == m.marked_faces
    plan_rel = AdaptivityPlan(p_init=1, p_max=3, refine_kind="relative",
                              refine_threshold=1.0)
    only_max = mark_for_refinement(rep, plan_rel)
    assert all(np.isclose(rep.error_of(f), rep.max_error) for f in only_max)


def test_apply_refinement_both_sides():
    m = generate_cartesian(4, 4, 1)
    circle = ANALYTIC_LEVELSETS["circle"]()
    mark_interface_faces(m, circle)
    plan = AdaptivityPlan(p_init=1, p_max=3, refine_step=2)
    changed = apply_refinement(m, sorted(m.marked_faces), plan)
    for k in m.marked_faces:
        for side in m.edges[k].sides:
            assert m.elements[side.element].order == 3
            assert side.element in changed
    # capped at p_max on a second application
    changed2 = apply_refinement(m, sorted(m.marked_faces), plan)
    assert changed2 == set()


def test_propagate_orders_ladders():
    # a 3x1 strip with orders [4, 1, 1] must become [4, 3, 2] under dp = 1
    m = generate_cartesian(3, 1, 1)
    m.set_order(0, 4)
    apply_edge_constraints(m)
    changed = propagate_orders(m, 1)
    assert [el.order for el in m.elements] == [4, 3, 2]
    assert changed == {1, 2}
    # dp = 2 from the same start: [4, 2, 1], element 2 untouched
    m2 = generate_cartesian(3, 1, 1)
    m2.set_order(0, 4)
    apply_edge_constraints(m2)
    propagate_orders(m2, 2)
    assert [el.order for el in m2.elements] == [4, 2, 1]
    # already-compatible mesh is a no-op
    assert propagate_orders(m2, 2) == set()


def test_refinement_preserves_face_error():
    # pure order raising cannot move the geometry, so the integrated face
    # error is unchanged while the new nodes initially sit off the contour
    circle = ANALYTIC_LEVELSETS["circle"]()
    m = generate_cartesian(4, 4, 1)
    mark_interface_faces(m, circle)
    fit = FitConfig(metric=QualityMetric("mu2"),
                    controls=SolverControls(fit_tol=1e-7))
    solve_r_adaptivity(fit.problem(m, circle))
    before = compute_face_errors(m, circle)
    plan = AdaptivityPlan(p_init=1, p_max=3, refine_step=2)
    apply_refinement(m, sorted(m.marked_faces), plan)
    apply_edge_constraints(m)
    after = compute_face_errors(m, circle)
    assert np.isclose(after.total_error, before.total_error, rtol=1e-10)
    assert after.node_sigma_max > 10 * before.node_sigma_max


# ---------------------------------------------------------------------------
# derefinement

def _fitted_refined_circle():
    circle = ANALYTIC_LEVELSETS["circle"]()
    m = generate_cartesian(4, 4, 1)
    mark_interface_faces(m, circle)
    fit = FitConfig(metric=QualityMetric("mu2"),
                    controls=SolverControls(fit_tol=1e-7))
    plan = AdaptivityPlan(p_init=1, p_max=3, refine_step=2)
    apply_refinement(m, sorted(m.marked_faces), plan)
    apply_edge_constraints(m)
    solve_r_adaptivity(fit.problem(m, circle))
    return m, circle


def test_try_derefine_rejection_leaves_mesh_untouched():
    m, circle = _fitted_refined_circle()
    snapshot = m.copy()
    # an impossible criterion rejects every candidate order
    plan = AdaptivityPlan(p_init=1, p_max=3, refine_step=2,
                          deref_kind="ref", deref_threshold=0.0)
    face = sorted(m.marked_faces)[0]
    assert try_derefine(m, circle, plan, face) is None
    assert meshes_identical(m, snapshot)


def test_try_derefine_acceptance_lowers_orders():
    m, circle = _fitted_refined_circle()
    # generous size tolerance accepts the lowest candidate order
    plan = AdaptivityPlan(p_init=1, p_max=3, refine_step=2,
                          deref_kind="size", deref_threshold=0.9)
    face = sorted(m.marked_faces)[0]
    p_hat = try_derefine(m, circle, plan, face)
    assert p_hat is not None and p_hat < 3
    assert m.edge_order(face) == p_hat
    assert any(m.elements[s.element].order == p_hat
               for s in m.edges[face].sides)
    assert m.min_det() > 0.0
    # conformity was restored after the projection
    dm = m.dof_map()
    t = dm.extract(m)
    assert np.all(np.isfinite(t))


def test_derefinement_pass_reports_lowered_faces():
    m, circle = _fitted_refined_circle()
    plan = AdaptivityPlan(p_init=1, p_max=3, refine_step=2,
                          deref_kind="size", deref_threshold=0.9)
    lowered = derefinement_pass(m, circle, plan)
    assert lowered
    for face, p_hat in lowered.items():
        assert p_hat < 3
        # later acceptances may lower a shared element further
        assert m.edge_order(face) <= p_hat
    assert m.min_det() > 0.0


def test_deref_requires_multi_step_plans():
    # with refine_step = 1 the adaptive driver never derefines, matching the
    # single-increment schedule where refinement is already minimal
    circle = ANALYTIC_LEVELSETS["circle"]()
    m = generate_cartesian(4, 4, 1)
    plan = AdaptivityPlan(p_init=1, p_max=2, refine_step=1,
                          deref_kind="size", deref_threshold=0.9,
                          fit_tol=1e-6)
    res = run_rp_adaptivity(m, circle, FitConfig(metric=QualityMetric("mu2")),
                            plan)
    assert not any(r.phase == "derefine" for r in res.records)


# ---------------------------------------------------------------------------
# plan validation and the driver

def test_plan_validation():
    with pytest.raises(ValueError):
        AdaptivityPlan(p_init=3, p_max=1).validate()
    with pytest.raises(ValueError):
        AdaptivityPlan(p_init=1, p_max=3, refine_step=0).validate()
    with pytest.raises(ValueError):
        AdaptivityPlan(p_init=1, p_max=3, refine_kind="sometimes").validate()
    with pytest.raises(ValueError):
        AdaptivityPlan(p_init=1, p_max=3, deref_kind="magic").validate()
    with pytest.raises(ValueError):
        AdaptivityPlan(p_init=1, p_max=3, fit_tol=0.0).validate()
    plan = AdaptivityPlan(p_init=1, p_max=3, refine_step=2)
    plan.validate()
    assert plan.neighbor_limit == 3  # defaults to p_max: no constraint
    assert plan.outer_cap == 2
    assert AdaptivityPlan(p_init=1, p_max=4, refine_step=1).outer_cap == 4


def test_driver_requires_uniform_initial_order():
    circle = ANALYTIC_LEVELSETS["circle"]()
    m = generate_cartesian(3, 3, 1)
    m.set_order(0, 2)
    apply_edge_constraints(m)
    with pytest.raises(ValueError):
        run_rp_adaptivity(m, circle, FitConfig(), AdaptivityPlan(p_init=1,
                                                                 p_max=3))


def test_driver_exits_when_nothing_to_refine():
    # plane interface aligned with mesh edges: zero error, no refinement
    plane = ANALYTIC_LEVELSETS["plane"]()
    m = generate_cartesian(4, 4, 1)
    plan = AdaptivityPlan(p_init=1, p_max=3, refine_step=2,
                          refine_kind="absolute", refine_threshold=1e-14,
                          fit_tol=1e-7)
    res = run_rp_adaptivity(m, plane, FitConfig(metric=QualityMetric("mu2")),
                            plan)
    assert res.exit_reason == "no faces refined"
    assert res.mesh.order_histogram() == {1: 16}
    assert res.final.dofs == 25


def test_driver_refines_to_p_max_on_circle():
    circle = ANALYTIC_LEVELSETS["circle"]()
    m = generate_cartesian(4, 4, 1)
    plan = AdaptivityPlan(p_init=1, p_max=3, refine_step=2,
                          refine_kind="absolute", refine_threshold=1e-14,
                          fit_tol=1e-7)
    res = run_rp_adaptivity(m, circle, FitConfig(metric=QualityMetric("mu2")),
                            plan)
    assert res.exit_reason == "interface at p_max"
    assert res.outer_iterations <= plan.outer_cap
    hist = res.mesh.order_histogram()
    assert hist.get(3, 0) > 0 and hist.get(1, 0) > 0
    assert res.mesh.min_det() > 0.0
    # records carry the full phase history
    phases = [r.phase for r in res.records]
    assert phases[0] == "initial" and phases[-1] == "final"
    assert "refine" in phases and "fit" in phases


def test_driver_respects_neighbor_limit():
    circle = ANALYTIC_LEVELSETS["circle"]()
    m = generate_cartesian(4, 4, 1)
    plan = AdaptivityPlan(p_init=1, p_max=3, refine_step=2,
                          max_neighbor_diff=1, refine_kind="absolute",
                          refine_threshold=1e-14, fit_tol=1e-7)
    res = run_rp_adaptivity(m, circle, FitConfig(metric=QualityMetric("mu2")),
                            plan)
    worst = 0
    for rec in res.mesh.edges:
        if len(rec.sides) == 2:
            a, b = (res.mesh.elements[s.element].order for s in rec.sides)
            worst = max(worst, abs(a - b))
    assert worst <= 1
    hist = res.mesh.order_histogram()
    assert hist.get(2, 0) > 0  # the transition jacket exists


def test_edge_touching_elevation():
    # element 8 of a 3x3 grid touches the marked cross at one vertex only
    m = generate_cartesian(3, 3, 1)
    center = 4
    m.set_order(center, 3)
    apply_edge_constraints(m)
    m.marked_faces = {k for k, rec in enumerate(m.edges)
                      if any(s.element == center for s in rec.sides)}
    raised = edge_touching_elevation(m)
    # the four diagonal neighbors touch two marked faces at a shared vertex
    assert raised == {0, 2, 6, 8}
    for e in raised:
        # raised to the highest order adjacent to the touched faces
        assert m.elements[e].order == 3
