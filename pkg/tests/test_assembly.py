import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from oedheat.assembly import (AssemblyError, assemble_all, boundary_mass_matrix, dump_coo,
                              eval_diffusion, extension_matrix, lump, mass_matrix,
                              observation_matrix, source_submesh, stiffness_matrix)
from oedheat.mesh import DomainSpec, Rectangle, build_mesh

from conftest import small_spec

REF_V = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
REF_T = np.array([[0, 1, 2]])


def test_reference_element_stiffness():
    K = stiffness_matrix(REF_V, REF_T).toarray()
    assert np.allclose(K, [[1, -0.5, -0.5], [-0.5, 0.5, 0], [-0.5, 0, 0.5]], atol=1e-15)


def test_reference_element_mass():
    M = mass_matrix(REF_V, REF_T).toarray()
    assert np.allclose(M, (np.ones((3, 3)) + np.eye(3)) / 24)
    assert np.allclose(lump(sp.csr_matrix(M)).diagonal(), 1 / 6)


def test_diffusion_values():
    assert eval_diffusion([0.3, -0.2]) == 1.0
    assert eval_diffusion([0.0, 1.0]) == 7.0
    assert eval_diffusion([0.0, 0.5]) == pytest.approx(1.28125)
    assert np.allclose(eval_diffusion(np.array([[0, 0], [0, 1]])), [1, 7])


def test_degenerate_element_raises():
    with pytest.raises(AssemblyError):
        mass_matrix(np.array([[0, 0], [1, 0], [2, 0.0]]), REF_T)


@pytest.fixture(scope="module")
def mesh():
    return build_mesh(small_spec(0.2))


def test_global_properties(mesh):
    M = mass_matrix(mesh.vertices, mesh.triangles)
    K = stiffness_matrix(mesh.vertices, mesh.triangles, eval_diffusion)
    assert M.sum() == pytest.approx(mesh.areas().sum())
    assert abs(K - K.T).max() < 1e-13
    assert np.abs(K @ np.ones(mesh.n)).max() < 1e-12
    ev = np.linalg.eigvalsh(K.toarray())
    assert ev.min() > -1e-12 and np.sum(ev < 1e-10) == 1


def test_stiffness_reproduces_dirichlet_energy(mesh):
    # u linear -> grad u constant, energy = |grad u|^2 * area
    u = 2 * mesh.vertices[:, 0] - mesh.vertices[:, 1]
    K = stiffness_matrix(mesh.vertices, mesh.triangles)
    assert u @ K @ u == pytest.approx(5 * mesh.areas().sum())


def test_midpoint_rule_exact_for_quadratic():
    v = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    K = stiffness_matrix(v, REF_T, lambda x: x[..., 0] ** 2, rule="midpoint").toarray()
    # integral of x^2 over the reference triangle = 1/12, area 1/2 -> mean 1/6
    K1 = stiffness_matrix(v, REF_T).toarray()
    assert np.allclose(K, K1 / 6)
    with pytest.raises(ValueError):
        stiffness_matrix(v, REF_T, lambda x: 1.0 + 0 * x[..., 0], rule="gauss9")


def test_boundary_mass_perimeter(mesh):
    _, tris, edges = source_submesh(mesh)
    verts = mesh.vertices[mesh.source_vertex_set]
    B = boundary_mass_matrix(verts, edges)
    assert B.sum() == pytest.approx(5.0)  # perimeter of [-1,-0.5] x [-1,1]
    assert len(tris) == len(mesh.source_triangles)


def test_observation_reproduces_linear_fields(mesh):
    spec = small_spec(0.2)
    O = observation_matrix(mesh, spec.sensors)
    u = 3 * mesh.vertices[:, 0] + mesh.vertices[:, 1] - 1
    expect = 3 * spec.sensors[:, 0] + spec.sensors[:, 1] - 1
    assert np.allclose(O @ u, expect)
    assert np.allclose(O.sum(axis=1), 1)
    with pytest.raises(AssemblyError):
        observation_matrix(mesh, [[0.3, 0.0]])


def test_sensor_on_vertex_is_unit_row(mesh):
    O = observation_matrix(mesh, mesh.vertices[[5]])
    row = O.toarray().ravel()
    assert row[5] == pytest.approx(1.0) and np.sum(np.abs(row) > 1e-12) == 1


def test_extension(mesh):
    E = extension_matrix(mesh)
    s = np.arange(mesh.n_source, dtype=float)
    u = E @ s
    assert np.array_equal(u[mesh.source_vertex_set], s)
    assert np.count_nonzero(u) == mesh.n_source - 1


def test_assemble_all_shapes(mesh):
    spec = small_spec(0.2)
    ops = assemble_all(mesh, spec.sensors)
    assert (ops.n, ops.m, ops.n_source) == (mesh.n, 16, mesh.n_source)


def test_dump_coo(tmp_path):
    A = sp.csr_matrix(np.array([[1.5, 0], [0, -2.0]]))
    dump_coo(A, tmp_path / "a.txt")
    rows = np.loadtxt(tmp_path / "a.txt")
    B = sp.coo_matrix((rows[:, 2], (rows[:, 0].astype(int), rows[:, 1].astype(int))), shape=(2, 2))
    assert np.array_equal(B.toarray(), A.toarray())


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=6, max_size=6))
def test_element_matrices_invariant_under_affine_maps(c):
    v = np.array(c).reshape(3, 2)
    area = 0.5 * ((v[1, 0] - v[0, 0]) * (v[2, 1] - v[0, 1]) - (v[1, 1] - v[0, 1]) * (v[2, 0] - v[0, 0]))
    if area < 1e-3:
        return
    K = stiffness_matrix(v, REF_T).toarray()
    M = mass_matrix(v, REF_T).toarray()
    assert np.allclose(K @ np.ones(3), 0, atol=1e-9 * np.abs(K).max())
    assert np.linalg.eigvalsh(K).min() > -1e-9 * np.abs(K).max()
    assert M.sum() == pytest.approx(area)
    # translation leaves everything unchanged
    K2 = stiffness_matrix(v + 3.0, REF_T).toarray()
    assert np.allclose(K, K2, atol=1e-9 * np.abs(K).max())


def test_unit_square_mesh_total_mass():
    m = build_mesh(DomainSpec(bounds=Rectangle(0, 1, 0, 1), mesh_size=0.25))
    assert lump(mass_matrix(m.vertices, m.triangles)).diagonal().sum() == pytest.approx(1.0)
