import numpy as np
import pytest

from oedheat.assembly import assemble_all, eval_diffusion
from oedheat.heat import HeatWorkspace, TimeGrid
from oedheat.lowrank import LowRankFactor
from oedheat.mesh import Circle, DomainSpec, Rectangle, build_mesh
from oedheat.prior import build_prior


def small_spec(mesh_size=0.25, nx=4, ny=4):
    xs = np.linspace(-0.2, 0.8, nx)
    ys = np.linspace(-0.8, 0.8, ny)
    sensors = np.array([(x, y) for y in ys for x in xs])
    return DomainSpec(bounds=Rectangle(-1, 1, -1, 1), holes=[Circle((0.3, 0.0), 0.12)],
                      source_region=Rectangle(-1, -0.5, -1, 1), sensors=sensors,
                      mesh_size=mesh_size)


class Small:
    """Coarse heat problem shared by several test modules."""

    def __init__(self, mesh_size=0.25, T=0.2, dt=0.02, nx=4, ny=4):
        self.spec = small_spec(mesh_size, nx, ny)
        self.mesh = build_mesh(self.spec)
        self.ops = assemble_all(self.mesh, self.spec.sensors, eval_diffusion)
        self.ws = HeatWorkspace(self.ops, TimeGrid(T, dt))
        self.prior = build_prior(self.mesh)
        self.F = np.asarray(self.ws.apply_F(np.eye(self.ws.n_source)))


@pytest.fixture(scope="session")
def small():
    return Small()


def synthetic_factor(seed, m=8, scale=1.0, rank=None):
    """Random low-rank factor with SPD ``C`` (the canonical synthetic family)."""
    rng = np.random.default_rng(seed)
    rank = m if rank is None else rank
    R = scale * rng.standard_normal((rank, m))
    A = rng.standard_normal((rank, rank))
    C = A @ A.T / rank
    Q = np.linalg.qr(rng.standard_normal((rank + 4, rank)))[0]
    return LowRankFactor(Q=Q, R=R, C=C, sigma=np.ones(rank), trace_prior=float(np.trace(C)) + 1.0)
