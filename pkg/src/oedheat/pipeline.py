"""End-to-end workflow behind the CLI: factorise, sweep, reconstruct, variance."""
from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from . import bayes
from .assembly import assemble_all, eval_diffusion
from .config import RunConfig
from .heat import HeatWorkspace, TimeGrid, export_field_csv
from .lowrank import CacheError, LowRankFactor, PreconditionedMap, load_factor, randomized_factorize, save_factor
from .mesh import build_mesh
from .oed import ContinuationParams, objective_J, p_continuation, solve_relaxed
from .prior import build_prior

log = logging.getLogger(__name__)

# sub-stream ids so that each purpose draws from an independent generator
SKETCH, PRIOR_SAMPLES, NOISE, RANDOM_DESIGNS, RECON_DESIGNS = range(1, 6)

SWEEP_HEADER = ["targets", "randommax", "randommin", "w", "w1"]


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: Exception):
        super().__init__(f"{stage} failed: {exc}")
        self.stage = stage


def substream(seed: int, purpose: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, purpose, *extra]))


def fmt(x) -> str:
    return repr(float(x))


@dataclass
class Problem:
    cfg: RunConfig

    @cached_property
    def sensors(self):
        return self.cfg.domain.sensor_points()

    @cached_property
    def mesh(self):
        return build_mesh(self.cfg.domain.spec())

    @cached_property
    def ops(self):
        return assemble_all(self.mesh, self.sensors, eval_diffusion, self.cfg.fem.quadrature)

    @cached_property
    def ws(self):
        return HeatWorkspace(self.ops, TimeGrid(self.cfg.fem.T, self.cfg.fem.dt))

    @cached_property
    def prior(self):
        p = self.cfg.prior
        return build_prior(self.mesh, p.alpha, np.sqrt(p.alpha) / p.robin_divisor, p.dense_limit)

    @property
    def source_vertices(self):
        return self.mesh.vertices[self.mesh.source_vertex_set]


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage name
        raise StageError(name, exc) from exc


def out_dir(cfg: RunConfig, out=None) -> Path:
    d = Path(out if out is not None else cfg.output)
    d.mkdir(parents=True, exist_ok=True)
    return d


def factorize(cfg: RunConfig, out=None, problem: Problem | None = None):
    """Build or load the low-rank factor; returns ``(factor, header, cache_hit)``."""
    d = out_dir(cfg, out) / "factor"
    h = cfg.factor_hash()
    if cfg.cache and (d / "header.json").exists():
        try:
            factor, head = load_factor(d)
            if head.get("config_hash") == h:
                log.info("factor cache hit (%s)", h[:12])
                return factor, head, True
            log.info("factor cache stale; rebuilding")
        except CacheError as exc:
            log.warning("discarding factor cache: %s", exc)
    pb = problem or Problem(cfg)
    _stage("mesh", lambda: pb.mesh)
    _stage("assembly", lambda: pb.ops)
    _stage("heat workspace", lambda: pb.ws)
    _stage("prior", lambda: pb.prior)
    noise = _stage("noise calibration", bayes.calibrate_noise, pb.ws, pb.prior, cfg.noise.samples,
                   cfg.noise.level, substream(cfg.seed, PRIOR_SAMPLES))
    fmap = PreconditionedMap.from_problem(pb.ws, pb.prior, noise.sigma2)
    lr = cfg.lowrank
    factor = _stage("factorization", randomized_factorize, fmap, lr.ratio_threshold, lr.oversample,
                    lr.power_iters, substream(cfg.seed, SKETCH), lr.cap, lr.block, pb.prior)
    head = {"config_hash": h, "seed": cfg.seed, "sigma2": noise.sigma2,
            "ratio_threshold": lr.ratio_threshold, "n_source": pb.prior.n,
            "n_full": pb.mesh.n}
    save_factor(factor, d, head)
    _, head = load_factor(d)
    return factor, head, False


def _sweep_row(args):
    lr, m0, cont, count, seed = args
    rel = solve_relaxed(lr, m0, cont.grad_tol, cont.relaxed_max_iter)
    params = ContinuationParams(cont.delta, cont.p_min, cont.binariness_tol, cont.tol_class,
                                cont.grad_tol, cont.max_iter)
    design = p_continuation(rel.w, lr, m0, params)
    base = bayes.random_baseline(lr, m0, count, substream(seed, RANDOM_DESIGNS, m0))
    return m0, rel, design, base


def write_design(path, sensors, w) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["k", "x", "y", "w"])
        for k, ((x, y), wk) in enumerate(zip(sensors, w)):
            wr.writerow([k, fmt(x), fmt(y), fmt(wk)])


def read_design(path) -> np.ndarray:
    with open(path, newline="") as f:
        return np.array([float(r["w"]) for r in csv.DictReader(f)])


def sweep(cfg: RunConfig, out=None, factor: LowRankFactor | None = None) -> list[dict]:
    """Relaxed bound, binary design and random baseline for every ``m0``; writes Aoptimalities.csv."""
    d = out_dir(cfg, out)
    if factor is None:
        factor, _, _ = factorize(cfg, d)
    sensors = cfg.domain.sensor_points()
    cont = cfg.continuation
    tasks = [(factor, m0, cont, cfg.sweep.random_count, cfg.seed)
             for m0 in range(1, cfg.sweep.m0_max + 1)]
    if cfg.sweep.jobs > 1:
        with ProcessPoolExecutor(cfg.sweep.jobs) as pool:
            results = list(pool.map(_sweep_row, tasks))
    else:
        results = [_sweep_row(t) for t in tasks]

    # design-independent shift tr(C0) - tr(C); dropping it leaves comparisons unchanged
    shift = 0.0 if cfg.sweep.include_constant else factor.trace_prior - float(np.trace(factor.C))
    rows, log_lines = [], []
    for m0, rel, design, base in results:
        rows.append({"targets": m0, "randommax": base.max - shift, "randommin": base.min - shift,
                     "w": design.J - shift, "w1": rel.J - shift})
        write_design(d / "designs" / f"optimal_m0_{m0:03d}.csv", sensors, design.w)
        write_design(d / "designs" / f"random_m0_{m0:03d}.csv", sensors, base.best)
        flag = "" if rel.converged else " RELAXED-NOT-CONVERGED"
        flag += " FORCED-ROUNDING" if design.meta["forced_rounding"] else ""
        log_lines.append(
            f"m0={m0} relaxed_iters={rel.iterations} dominant={design.meta['n_dominant']} "
            f"redundant={design.meta['n_redundant']} p=[{', '.join(f'{p:.6g}' for p in design.meta['p_trajectory'])}] "
            f"inner_iters={design.meta['inner_iterations']}{flag}")
    with open(d / "Aoptimalities.csv", "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(SWEEP_HEADER)
        for r in rows:
            wr.writerow([r["targets"]] + [fmt(r[k]) for k in SWEEP_HEADER[1:]])
    (d / "sweep_log.txt").write_text("\n".join(log_lines) + "\n")
    return rows


def read_sweep(path) -> list[dict]:
    with open(path, newline="") as f:
        return [{"targets": int(r["targets"]), **{k: float(r[k]) for k in SWEEP_HEADER[1:]}}
                for r in csv.DictReader(f)]


def true_source(problem: Problem) -> np.ndarray:
    return bayes.eval_test_source(problem.source_vertices)


def _design_paths(d: Path, m0: int):
    return d / "designs" / f"optimal_m0_{m0:03d}.csv", d / "designs" / f"random_m0_{m0:03d}.csv"


def reconstruct(cfg: RunConfig, m0: int | None = None, out=None) -> dict:
    """MAP reconstructions of the test source with the optimal and best random designs."""
    d = out_dir(cfg, out)
    m0 = m0 or cfg.reconstruct.m0 or cfg.sweep.m0_max
    opt_path, rnd_path = _design_paths(d, m0)
    if not opt_path.exists() or not rnd_path.exists():
        raise FileNotFoundError(f"no designs for m0={m0} in {d}; run `oedheat sweep` first")
    w_opt, w_rnd = read_design(opt_path), read_design(rnd_path)
    factor, head, _ = factorize(cfg, d)
    pb = Problem(cfg)
    noise = bayes.NoiseModel(head["sigma2"])
    F = bayes.dense_forward(pb.ws) if cfg.reconstruct.method == "dense" else None
    s_true = true_source(pb)
    M = pb.prior.mass_consistent

    def run(w, rng):
        g = bayes.synth_data(pb.ws, w, s_true, noise, rng)
        rec = bayes.reconstruct_map(pb.ws, pb.prior, w, g, noise, cfg.reconstruct.method, F=F)
        return rec, bayes.relative_error(rec.s, s_true, M), bayes.relative_error(rec.s, s_true)

    rec_opt, e_opt, c_opt = run(w_opt, substream(cfg.seed, NOISE, m0, 0))
    rec_rnd, e_rnd, c_rnd = run(w_rnd, substream(cfg.seed, NOISE, m0, 0))
    verts = pb.source_vertices
    export_field_csv(d / "fields" / f"map_optimal_m0_{m0:03d}.csv", rec_opt.s, verts)
    export_field_csv(d / "fields" / f"map_random_m0_{m0:03d}.csv", rec_rnd.s, verts)
    export_field_csv(d / "fields" / "true_source.csv", s_true, verts)

    # repeated noise draws: optimal design vs fresh random designs of equal budget
    # (same noise draw for both sides; several random designs per draw)
    seeds = cfg.reconstruct.noise_seeds
    per = cfg.reconstruct.random_per_seed
    errs_opt, errs_rnd = [], []
    for i in range(seeds):
        errs_opt.append(run(w_opt, substream(cfg.seed, NOISE, m0, i + 1))[1])
        drng = substream(cfg.seed, RECON_DESIGNS, m0, i)
        e_r = [run(bayes.random_design(len(w_opt), int(w_opt.sum()), drng),
                   substream(cfg.seed, NOISE, m0, i + 1))[1] for _ in range(per)]
        errs_rnd.append(float(np.mean(e_r)))
    report = {
        "m0": m0, "sigma2": noise.sigma2,
        "J_optimal": objective_J(w_opt, factor), "J_best_random": objective_J(w_rnd, factor),
        "rel_error_L2_optimal": e_opt, "rel_error_L2_best_random": e_rnd,
        "rel_error_coeff_optimal": c_opt, "rel_error_coeff_best_random": c_rnd,
        "map_residual_optimal": rec_opt.residual, "map_residual_best_random": rec_rnd.residual,
        "noise_seeds": seeds, "random_designs_per_seed": per,
        "mean_rel_error_L2_optimal": float(np.mean(errs_opt)) if seeds else float("nan"),
        "mean_rel_error_L2_random": float(np.mean(errs_rnd)) if seeds else float("nan"),
    }
    (d / f"reconstruct_m0_{m0:03d}.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    return report


def variance(cfg: RunConfig, m0: int | None = None, out=None, zero_design: bool = False) -> dict:
    """Posterior pointwise variance field for the optimal design (or the prior, ``zero_design``)."""
    d = out_dir(cfg, out)
    factor, _, _ = factorize(cfg, d)
    pb = Problem(cfg)
    m0 = m0 or cfg.reconstruct.m0 or cfg.sweep.m0_max
    if zero_design:
        w = np.zeros(factor.m)
        name = "variance_prior.csv"
    else:
        opt_path, _ = _design_paths(d, m0)
        if not opt_path.exists():
            raise FileNotFoundError(f"no design for m0={m0} in {d}; run `oedheat sweep` first")
        w = read_design(opt_path)
        name = f"variance_m0_{m0:03d}.csv"
    c = bayes.variance_field(pb.prior, factor, w)
    export_field_csv(d / "fields" / name, c, pb.source_vertices)
    write_design(d / "fields" / name.replace("variance", "sensors"), cfg.domain.sensor_points(), w)
    J = objective_J(w, factor)
    integral = float(pb.prior.mass @ c)
    return {"m0": 0 if zero_design else m0, "J": J, "mass_weighted_sum": integral,
            "trace_identity_rel_error": abs(integral - J) / J, "file": str(d / "fields" / name)}
