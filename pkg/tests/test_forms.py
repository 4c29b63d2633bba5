import math

import numpy as np
import pytest
import scipy.sparse as sp

from hidg.dgspace import DGSpace, FieldKind, l2_project
from hidg.forms import (
    REGIMES,
    AssemblyError,
    KernelMass,
    ProblemCoefficients,
    StabilizationConfig,
    assemble_A1,
    assemble_A1_divergence_form,
    assemble_kernel_mass,
    assemble_load,
    assemble_masses,
    assemble_penalties,
    assemble_system,
    edge_C11,
    edge_C22,
    edge_fluxes,
    stabilization_C11,
    stabilization_C22,
)
from hidg.mesh import Mesh, build_uniform_triangulation, import_mesh, refine_uniform

GRID = [(n, p) for n in (1, 2, 4) for p in (1, 2, 3)]


def dense(a):
    return a.toarray() if sp.issparse(a) else np.asarray(a)


def anisotropic_A(x, y):
    out = np.zeros(np.shape(x) + (2, 2))
    out[..., 0, 0] = 2.0 + x
    out[..., 1, 1] = 1.5 + y * y
    out[..., 0, 1] = out[..., 1, 0] = 0.3 * np.sin(x + y)
    return out


# --- stabilization coefficients ------------------------------------------


def test_c11_exponent_zero_is_zeta():
    space = DGSpace(build_uniform_triangulation(3), 2)
    cfg = StabilizationConfig(zeta=2.5, alpha_exp=0.0)
    np.testing.assert_allclose(edge_C11(space, cfg), 2.5)


def test_c11_inverse_h_p1():
    space = DGSpace(build_uniform_triangulation(4), 1)
    cfg = StabilizationConfig(alpha_exp=-1.0)
    e = int(np.flatnonzero(space.mesh.interior)[0])
    assert stabilization_C11(e, cfg, space) == pytest.approx(1.0 / space.mesh.mesh_size, rel=1e-14)


def test_c11_inverse_h_p2_quarter():
    # a single right triangle with legs 1/4 has h = longest side; build legs so that h = 1/4
    s = 0.25 / math.sqrt(2)
    mesh = _single_triangle(s)
    space = DGSpace(mesh, 2)
    assert mesh.mesh_size == pytest.approx(0.25)
    cfg = StabilizationConfig(alpha_exp=-1.0)
    assert stabilization_C11(0, cfg, space) == pytest.approx(16.0, rel=1e-13)


def _single_triangle(leg):
    from hidg.mesh import _from_connectivity

    return _from_connectivity(np.array([[0.0, 0.0], [leg, 0.0], [0.0, leg]]), np.array([[0, 1, 2]]))


def test_c22_cases():
    space = DGSpace(build_uniform_triangulation(2), 1)
    np.testing.assert_array_equal(edge_C22(space, StabilizationConfig(kappa=0.0)), 0.0)
    np.testing.assert_allclose(edge_C22(space, StabilizationConfig(kappa=1.0, beta_exp=0.0)), 1.0)
    # h = 1/8 on every element of a uniform mesh whose longest side is 1/8
    mesh = _scaled_uniform(2, 1.0 / 8 / math.sqrt(2) * 2)
    space = DGSpace(mesh, 1)
    assert mesh.mesh_size == pytest.approx(1.0 / 8)
    e = int(np.flatnonzero(mesh.interior)[0])
    assert stabilization_C22(e, StabilizationConfig(kappa=3.0, beta_exp=1.0), space) == pytest.approx(3.0 / 8)


def _scaled_uniform(n, side):
    base = build_uniform_triangulation(n)
    from hidg.mesh import _from_connectivity

    return _from_connectivity(base.vertices * side, base.elements)


def test_c11_scaling_under_refinement():
    mesh = build_uniform_triangulation(2)
    fine = refine_uniform(mesh)
    c0 = StabilizationConfig(alpha_exp=0.0)
    c1 = StabilizationConfig(alpha_exp=-1.0)
    s, sf = DGSpace(mesh, 2), DGSpace(fine, 2)
    np.testing.assert_allclose(edge_C11(sf, c0), edge_C11(s, c0).max())
    np.testing.assert_allclose(edge_C11(sf, c1), 2 * edge_C11(s, c1).max(), rtol=1e-13)


def test_config_validation():
    with pytest.raises(ValueError):
        StabilizationConfig(zeta=0.0)
    with pytest.raises(ValueError):
        StabilizationConfig(kappa=-1.0)
    with pytest.raises(ValueError):
        StabilizationConfig(alpha_exp=0.5)
    with pytest.raises(ValueError):
        StabilizationConfig(beta_exp=2.0)
    with pytest.raises(ValueError):
        StabilizationConfig.from_regime("c11-huge")


def test_mu_recomputed_from_fields():
    cfg = StabilizationConfig(kappa=0.0, alpha_exp=-0.5, beta_exp=0.0)
    assert cfg.beta_hat == 1.0
    assert (cfg.mu_upper, cfg.mu_lower) == (1.0, 0.5)
    cfg = StabilizationConfig(kappa=2.0, alpha_exp=-0.5, beta_exp=0.25)
    assert (cfg.mu_upper, cfg.mu_lower) == (0.5, 0.25)


# --- masses ----------------------------------------------------------------


@pytest.mark.parametrize("n,p", GRID)
def test_mass_matrices(spaces, n, p):
    space = spaces(n, p)
    Ms, Mv, A2 = assemble_masses(space, ProblemCoefficients())
    np.testing.assert_allclose(dense(Ms), np.eye(space.n_scalar), atol=1e-12)
    np.testing.assert_allclose(dense(A2), dense(Mv), atol=1e-12)
    assert np.linalg.eigvalsh(dense(Mv)).min() > 0.5


def test_weighted_mass_ellipticity(rng):
    space = DGSpace(build_uniform_triangulation(3), 2)
    coeffs = ProblemCoefficients(A=anisotropic_A, alpha_ellipticity=1.2)
    _, Mv, A2 = assemble_masses(space, coeffs)
    A2d = dense(A2)
    np.testing.assert_allclose(A2d, A2d.T, atol=1e-12)
    for _ in range(20):
        w = rng.standard_normal(space.n_vector)
        assert w @ A2 @ w >= 1.2 * (w @ Mv @ w) - 1e-10


def test_ellipticity_violation_reports_location():
    space = DGSpace(build_uniform_triangulation(2), 1)
    coeffs = ProblemCoefficients(A=anisotropic_A, alpha_ellipticity=1.9)
    with pytest.raises(AssemblyError, match=r"ellipticity violated at \("):
        assemble_masses(space, coeffs)


# --- coupling form -----------------------------------------------------------


@pytest.mark.parametrize("n,p", GRID)
def test_A1_adjoint_identity(spaces, n, p):
    space = spaces(n, p)
    cfg = StabilizationConfig(C12=(0.3, -0.4))
    diff = assemble_A1(space, cfg) - assemble_A1_divergence_form(space, cfg)
    assert abs(diff).max() <= 1e-10


def test_A1_adjoint_identity_perturbed_mesh(tmp_path):
    base = build_uniform_triangulation(4)
    rng = np.random.default_rng(7)
    v = base.vertices.copy()
    inside = (v > 0).all(1) & (v < 1).all(1)
    v[inside] += rng.uniform(-0.05, 0.05, size=(inside.sum(), 2))
    from hidg.mesh import _from_connectivity

    space = DGSpace(_from_connectivity(v, base.elements), 3)
    cfg = StabilizationConfig()
    assert abs(assemble_A1(space, cfg) - assemble_A1_divergence_form(space, cfg)).max() <= 1e-10


def test_A1_continuous_linear_and_constant():
    # v = x(1 - x) is not linear; use v = 2x + 3y, p = (1, -2): all jumps vanish inside
    space = DGSpace(build_uniform_triangulation(4), 2)
    cfg = StabilizationConfig()
    A1 = assemble_A1(space, cfg)
    v = l2_project(space, lambda x, y: 2 * x + 3 * y).values
    pvec = l2_project(space, lambda x, y: np.stack([np.ones_like(x), -2 * np.ones_like(x)], -1)).values
    # interior terms vanish; the boundary keeps -int {{p}}.[[v]] = -int v p.n
    expected_volume = (2 * 1 + 3 * -2) * 1.0
    mesh = space.mesh
    bnd = mesh.boundary
    mid = mesh.vertices[mesh.edge_vertices[bnd]].mean(axis=1)
    vb = 2 * mid[:, 0] + 3 * mid[:, 1]
    pn = mesh.edge_normal[bnd] @ np.array([1.0, -2.0])
    boundary = -np.sum(vb * pn * mesh.edge_length[bnd])
    assert v @ (A1 @ pvec) == pytest.approx(expected_volume + boundary, abs=1e-12)


def test_A1_single_element_boundary_terms():
    mesh = _single_triangle(1.0)
    space = DGSpace(mesh, 1)
    A1 = dense(assemble_A1(space, StabilizationConfig()))
    # brute force: sum_K int p.grad v - int_boundary v p.n
    vol = np.einsum("q,qic,qj->icj", space.qweights[0], space.grads[0], space.values[0])
    ref = np.zeros((space.m, 2, space.m))
    ref += vol
    for e in range(3):
        n = mesh.edge_normal[e]
        tr = space.trace_left[e]
        ref -= np.einsum("q,qi,c,qj->icj", space.edge_weights[e], tr, n, tr)
    np.testing.assert_allclose(A1, ref.reshape(space.m, 2 * space.m), atol=1e-13)


# --- penalties ---------------------------------------------------------------


@pytest.mark.parametrize("n,p", GRID)
@pytest.mark.parametrize("regime", ["c11-one-c22-one", "c11-inv-h-c22-h"])
def test_penalties_symmetric_psd(spaces, n, p, regime, rng):
    space = spaces(n, p)
    J, J1 = assemble_penalties(space, StabilizationConfig.from_regime(regime))
    for M in (J, J1):
        assert abs(M - M.T).max() <= 1e-12
        for _ in range(5):
            x = rng.standard_normal(M.shape[0])
            assert x @ M @ x >= -1e-12


def test_J1_vanishes_without_kappa():
    space = DGSpace(build_uniform_triangulation(2), 2)
    _, J1 = assemble_penalties(space, StabilizationConfig(kappa=0.0))
    assert J1.count_nonzero() == 0


def test_unit_jump_penalty():
    space = DGSpace(build_uniform_triangulation(1), 1)
    mesh = space.mesh
    cfg = StabilizationConfig(zeta=1.7)
    J, _ = assemble_penalties(space, cfg)
    e = int(np.flatnonzero(mesh.interior)[0])
    left = mesh.edge_left[e]
    v = l2_project(space, lambda x, y: np.ones_like(x)).values
    v[space.scalar_dofs(1 - left)] = 0.0
    # interior jump 1 on the diagonal plus the boundary sides of the left element (trace 1)
    bnd_left = mesh.boundary & (mesh.edge_left == left)
    expected = 1.7 * (mesh.edge_length[e] + mesh.edge_length[bnd_left].sum())
    assert v @ J @ v == pytest.approx(expected, rel=1e-12)
    # the interior edge alone: subtract the boundary part
    Jin = _interior_J(space, cfg)
    assert v @ Jin @ v == pytest.approx(1.7 * mesh.edge_length[e], rel=1e-12)


def _interior_J(space, cfg):
    J, _ = assemble_penalties(space, cfg)
    v_all = np.eye(space.n_scalar)
    mesh = space.mesh
    # boundary contribution, built directly from traces
    Jb = np.zeros((space.n_scalar, space.n_scalar))
    c11 = edge_C11(space, cfg)
    for e in np.flatnonzero(mesh.boundary):
        dofs = space.scalar_dofs(mesh.edge_left[e])
        tr = space.trace_left[e]
        Jb[dofs, dofs] += c11[e] * np.einsum("q,qi,qj->ij", space.edge_weights[e], tr, tr)
    return dense(J) - Jb @ v_all


def test_continuous_function_has_no_interior_penalty():
    space = DGSpace(build_uniform_triangulation(4), 2)
    cfg = StabilizationConfig(alpha_exp=-1.0)
    v = l2_project(space, lambda x, y: x * (1 - x) + y * (1 - y)).values
    assert abs(v @ _interior_J(space, cfg) @ v) <= 1e-12
    # vanishing on the boundary as well: the full J(v, v) is zero
    w = l2_project(space, lambda x, y: x * (1 - x) * y * (1 - y)).values
    # degree 4 is not in V_h for p = 2; use p = 4
    space4 = DGSpace(build_uniform_triangulation(2), 4)
    w = l2_project(space4, lambda x, y: x * (1 - x) * y * (1 - y)).values
    J4, _ = assemble_penalties(space4, cfg)
    assert abs(w @ J4 @ w) <= 1e-12


def test_numerical_fluxes_consistent():
    space = DGSpace(build_uniform_triangulation(4), 2)
    cfg = StabilizationConfig.from_regime("c11-inv-h-c22-one")
    ufun = lambda x, y: x * x - y  # noqa: E731
    sfun = lambda x, y: np.stack([y, x * y], axis=-1)  # noqa: E731
    u = l2_project(space, ufun).values
    s = l2_project(space, sfun).values
    u_hat, s_hat = edge_fluxes(space, cfg, u, s)
    inner = space.mesh.interior
    pts = space.edge_points[inner]
    np.testing.assert_allclose(u_hat[inner], ufun(pts[..., 0], pts[..., 1]), atol=1e-12)
    np.testing.assert_allclose(s_hat[inner], sfun(pts[..., 0], pts[..., 1]), atol=1e-12)
    assert np.all(u_hat[space.mesh.boundary] == 0.0)


# --- kernel and load -----------------------------------------------------------


def test_kernel_mass_examples():
    space = DGSpace(build_uniform_triangulation(2), 2)
    coeffs = ProblemCoefficients(kernel_scalar=np.exp)
    _, Mv, _ = assemble_masses(space, coeffs)
    np.testing.assert_allclose(dense(assemble_kernel_mass(space, coeffs, 0.4, 0.4)), dense(Mv), atol=1e-12)
    np.testing.assert_allclose(dense(assemble_kernel_mass(space, coeffs, 1.5, 0.5)), math.e * dense(Mv), atol=1e-12)
    km = KernelMass(space, coeffs, Mv)
    np.testing.assert_allclose(dense(km(1.5, 0.5)), math.e * dense(Mv), atol=1e-12)
    zero = ProblemCoefficients()
    assert abs(assemble_kernel_mass(space, zero, 1.0, 0.2)).max() == 0.0
    assert abs(KernelMass(space, zero, Mv)(1.0, 0.2)).max() == 0.0


def test_kernel_mass_matrix_valued_cache():
    space = DGSpace(build_uniform_triangulation(2), 1)

    def B(x, y, t, s):
        out = np.zeros(np.shape(x) + (2, 2))
        out[..., 0, 0] = np.exp(-(t - s)) * (1 + x)
        out[..., 1, 1] = np.exp(-(t - s))
        return out

    coeffs = ProblemCoefficients(B=B, B_stationary=True)
    km = KernelMass(space, coeffs)
    a = km(0.7, 0.2)
    assert km(1.7, 1.2) is a
    np.testing.assert_allclose(dense(a), dense(assemble_kernel_mass(space, coeffs, 0.5, 0.0)), atol=1e-14)


def test_load_vectors():
    space = DGSpace(build_uniform_triangulation(3), 2)
    assert np.all(assemble_load(space, ProblemCoefficients(), 0.3) == 0.0)
    ones = ProblemCoefficients(f=lambda x, y, t: np.ones_like(x))
    L = assemble_load(space, ones, 0.0)
    c = l2_project(space, lambda x, y: np.ones_like(x)).values
    assert L @ c == pytest.approx(1.0, abs=1e-12)
    j = 7
    el, loc = divmod(j, space.m)

    def phi_j(x, y, t):
        out = np.zeros_like(x)
        out[el] = space.values[el, :, loc]
        return out

    L = assemble_load(space, ProblemCoefficients(f=phi_j), 0.0)
    Ms, _, _ = assemble_masses(space, ProblemCoefficients())
    np.testing.assert_allclose(L, dense(Ms)[:, j], atol=1e-12)


def test_assemble_system_shapes(spaces):
    space = spaces(2, 2)
    mats = assemble_system(space, ProblemCoefficients(), StabilizationConfig())
    ns, nv = space.n_scalar, space.n_vector
    assert mats.M_scalar.shape == (ns, ns)
    assert mats.A1.shape == (ns, nv)
    assert mats.J1.shape == (nv, nv)


# --- predicted rates ------------------------------------------------------------


@pytest.mark.parametrize(
    "regime, u_off, flux_off",
    [
        ("c11-one-c22-zero", 0.5, 0.0),
        ("c11-inv-h-c22-zero", 1.0, 0.0),
        ("c11-one-c22-one", 1.0, 0.5),
        ("c11-inv-h-c22-one", 0.5, 0.0),
        ("c11-one-c22-h", 0.5, 0.0),
        ("c11-inv-h-c22-h", 1.0, 0.0),
    ],
)
@pytest.mark.parametrize("p", [1, 2, 3])
def test_rate_exponents(regime, u_off, flux_off, p):
    rates = StabilizationConfig.from_regime(regime).rates(p)
    assert rates.u_order == p + u_off
    assert rates.flux_order == p + flux_off


def test_all_regimes_valid():
    for name in REGIMES:
        cfg = StabilizationConfig.from_regime(name)
        assert -1 <= cfg.alpha_exp <= 0 <= cfg.beta_exp <= 1
