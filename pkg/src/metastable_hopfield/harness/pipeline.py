"""Per-instance analysis, n-sweeps and the oracle suite.

Every public function takes an :class:`ExperimentConfig` plus a system size
and returns plain JSON-serialisable dictionaries; the CLI only formats them.
"""
from __future__ import annotations

import itertools
import logging
import math
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy

from .. import __version__
from ..asymptotics import (AssumptionFailure, CriticalPoint, find_critical_points, find_gate, harmonic_diagnostic,
                           variational_upper_bound, lift_point, minimum_eigendata, prefactor_cn,
                           quadratic_dirichlet_of_g, saddle_eigendata, asymptotic_capacity)
from ..chain import SPIN_LIMIT, LatticeChain, SpinChain, detailed_balance_residual, lump_check
from ..disorder import ensemble_from_table, fixed_type_table, sample_patterns
from ..ldp import RateModel
from ..mc import refuse_if_too_long, simulate_hits
from ..model import HopfieldModel, hopfield_potential
from ..potential import (BoundaryProblem, capacity, capacity_forms, mean_hitting, path_closed_form,
                         solve_harmonic)
from .config import ConfigError, ExperimentConfig

log = logging.getLogger(__name__)

VARIANTS = [dict(mode=m, el_norm=e, gate_dir=g)
            for m, e, g in itertools.product(("exact", "paper"), ("step", "unit"), ("w", "v1"))]


def variant_name(v: dict) -> str:
    return f"{v['mode']}/{v['el_norm']}/{v['gate_dir']}"


def environment_stamp(cfg: ExperimentConfig) -> dict:
    return {"package_version": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version(), "disorder_seed": cfg.raw["disorder"]["seed"],
            "mc_seed": cfg.raw["mc"]["seed"]}


@dataclass
class Instance:
    """Lazily built objects for one (config, n)."""

    cfg: ExperimentConfig
    n: int
    cache: object = None

    @cached_property
    def model(self) -> HopfieldModel:
        return self.cfg.model(self.n)

    @cached_property
    def rate(self) -> RateModel:
        if self.cfg.raw["disorder"]["rate_probabilities"] == "annealed":
            if self.cfg.raw["disorder"]["patterns"] is None:
                raise ConfigError(f"{self.cfg.source}: annealed rate needs [disorder] patterns")
            return RateModel.annealed(self.cfg.distributions(), self.cfg.beta, self.model.potential)
        return RateModel.quenched(self.model)

    @cached_property
    def chain(self) -> LatticeChain:
        return LatticeChain(self.model, int(self.cfg.raw["solver"]["state_budget"]))

    @cached_property
    def critical_points(self) -> list:
        a = self.cfg.raw["asymptotics"]
        return find_critical_points(self.rate, n_grid=int(a["multistart"]))

    @cached_property
    def m(self) -> CriticalPoint:
        minima = [c for c in self.critical_points if c.kind == "minimum"]
        if not minima:
            raise AssumptionFailure("no local minimum of the rate function found")
        sel = self.cfg.raw["asymptotics"]["start_minimum"]
        if sel == "shallowest":
            top = max(c.value for c in minima)
            tied = [c for c in minima if c.value >= top - 1e-9]
            return min(tied, key=lambda c: tuple(c.x))
        target = np.asarray(sel, float)
        if target.shape != (self.rate.p,):
            raise ConfigError(f"{self.cfg.source}: start_minimum needs {self.rate.p} coordinates")
        return min(minima, key=lambda c: float(np.linalg.norm(c.x - target)))

    @cached_property
    def gate(self):
        h = float(self.cfg.raw["asymptotics"]["grid_step"]) or None
        return find_gate(self.critical_points, self.rate, self.m, h=h)

    @cached_property
    def boundary(self) -> tuple[np.ndarray, np.ndarray]:
        b = self.cfg.raw["boundary"]
        ch = self.chain
        if b["A"] is not None:
            pts_A, pts_B = b["A"], b["B"]
        else:
            pts_A, pts_B = [self.m.x], [c.x for c in self.gate.M]
        A = np.zeros(ch.lattice.size, bool)
        B = np.zeros(ch.lattice.size, bool)
        for x in pts_A:
            A |= self._fiber(x)
        for x in pts_B:
            B |= self._fiber(x)
        if (A & B).any():
            raise ConfigError(f"{self.cfg.source}: boundary sets A and B overlap ({int((A & B).sum())} states)")
        return A, B

    def _fiber(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, float))
        if x.shape != (self.model.table.p,):
            raise ConfigError(f"{self.cfg.source}: boundary point {x.tolist()} has the wrong dimension")
        return self.chain.nearest_fiber(x)

    @cached_property
    def solution(self):
        s = self.cfg.raw["solver"]
        A, B = self.boundary
        try:
            problem = BoundaryProblem(self.chain.graph(), A, B)
        except ValueError as exc:
            raise ConfigError(f"{self.cfg.source}: {exc}") from None
        return solve_harmonic(problem, method=s["method"], prune=bool(s["prune"]),
                              log_prune_threshold=math.log(float(s["prune_threshold"])),
                              cg_tol=float(s["cg_tol"]), cache=self.cache)

    @cached_property
    def hitting(self):
        return mean_hitting(self.solution)

    def saddles(self, mode, el_norm, gate_dir) -> list:
        out = []
        for z in self.gate.Z:
            lz = self._lift(tuple(z.x))
            out.append(saddle_eigendata(lz.center, self.chain, self.rate, mode, el_norm, gate_dir, toward=self.m.x))
        return out

    _lifts: dict = field(default_factory=dict)

    def _lift(self, x):
        if x not in self._lifts:
            self._lifts[x] = lift_point(np.array(x), self.chain, self.rate)
        return self._lifts[x]


# ---------------------------------------------------------------------------
# Subcommand bodies
# ---------------------------------------------------------------------------

def rate_surface(cfg: ExperimentConfig, n: int, step: float = 0.02) -> tuple[list, list]:
    """Header and rows (x_1..x_p, I, finite) on a regular grid over the feasible hull."""
    inst = Instance(cfg, n)
    rate = inst.rate
    R = rate.support_function(np.eye(rate.p))
    axes = [np.arange(-math.floor(r / step), math.floor(r / step) + 1) * step for r in R]
    X = np.array(np.meshgrid(*axes, indexing="ij")).reshape(rate.p, -1).T
    vals, _ = rate.free_energy_batch(X)
    ok = rate.feasible(X)
    I = np.where(ok, vals + rate.c, np.inf)
    header = [f"x{i + 1}" for i in range(rate.p)] + ["I", "finite"]
    rows = [list(map(float, x)) + [float(v) if np.isfinite(v) else "inf", int(f)] for x, v, f in zip(X, I, ok)]
    return header, rows


def critical_points_report(cfg: ExperimentConfig, n: int) -> dict:
    inst = Instance(cfg, n)
    return {"n": n, "critical_points": [c.as_dict() for c in inst.critical_points],
            "global_minimum": inst.rate.x_min.tolist()}


def gate_report(cfg: ExperimentConfig, n: int) -> dict:
    inst = Instance(cfg, n)
    return {"n": n, "gate": inst.gate.as_dict()}


def capacity_report(cfg: ExperimentConfig, n: int, cache=None, inst: Instance | None = None) -> dict:
    inst = inst or Instance(cfg, n, cache)
    sol = inst.solution
    forms = capacity_forms(sol)
    A, B = inst.boundary
    st = sol.stats
    return {"n": n, "states": int(inst.chain.lattice.size), "A_size": int(A.sum()), "B_size": int(B.sum()),
            "log_capacity": capacity(sol), "capacity_forms": forms.__dict__ | {"max_rel_spread": forms.max_rel_spread},
            "solver": {"method": st.method, "iterations": st.iterations, "residual": st.residual,
                       "pruned": st.pruned, "cache_hit": st.cache_hit, "flags": list(st.flags)}}


def asymptotics_report(cfg: ExperimentConfig, n: int, cache=None, inst: Instance | None = None,
                       with_exact: bool = True) -> dict:
    """Variational bound, asymptotic capacity and exit-time prediction for every variant."""
    inst = inst or Instance(cfg, n, cache)
    a = cfg.raw["asymptotics"]
    chosen = dict(mode=a["mode"], el_norm=a["el_norm"], gate_dir=a["gate_dir"])
    gate = inst.gate
    out = {"n": n, "gate": gate.as_dict(), "selected": variant_name(chosen), "variants": {}}
    lm = inst._lift(tuple(inst.m.x))
    out["lift_m"] = lm.as_dict()
    out["lift_z"] = [inst._lift(tuple(z.x)).as_dict() for z in gate.Z]
    if with_exact:
        hr = inst.hitting
        out["log_capacity_exact"] = hr.log_capacity
        out["log_hitting_exact"] = hr.log_mean
        out["log_valley_exact"] = hr.log_valley_mass
    for v in VARIANTS:
        name = variant_name(v)
        rec = {}
        try:
            sds = inst.saddles(**v)
            rec["log_variational_bound"] = variational_upper_bound(sds, n)
            rec["log_asymptotic_capacity"] = asymptotic_capacity(sds, n)
            md = minimum_eigendata(lm.center, inst.chain, inst.rate, v["mode"])
            pf = prefactor_cn(md, sds, inst.rate, n, inst.m.value, gate.gate_value)
            rec["prefactor"] = pf.as_dict()
            if v == chosen:
                rec["saddles"] = [s.as_dict() for s in sds]
                rec["minimum"] = md.as_dict()
                rec["log_quadratic_dirichlet_g"] = float(np.logaddexp.reduce(
                    [quadratic_dirichlet_of_g(s, inst.chain) for s in sds]))
                diag = [harmonic_diagnostic(s, inst.chain) for s in sds]
                rec["harmonic_diagnostic"] = [d.as_dict() for d in diag]
            if with_exact:
                rec["ratio_capacity"] = math.exp(hr.log_capacity - rec["log_asymptotic_capacity"])
                rec["ratio_bound"] = math.exp(rec["log_variational_bound"] - hr.log_capacity)
                rec["ratio_prediction"] = math.exp(pf.log_prediction - hr.log_mean)
                rec["ratio_valley"] = math.exp(pf.log_valley_asymptotic - hr.log_valley_mass)
        except (AssumptionFailure, ValueError, np.linalg.LinAlgError, OverflowError) as exc:
            rec["error"] = f"{type(exc).__name__}: {exc}"
        out["variants"][name] = rec
    return out


def hit_time_report(cfg: ExperimentConfig, n: int, cache=None, inst: Instance | None = None) -> dict:
    inst = inst or Instance(cfg, n, cache)
    hr = inst.hitting
    A, B = inst.boundary
    out = {"n": n, "log_hitting_exact": hr.log_mean, "hitting_exact": hr.mean,
           "log_capacity": hr.log_capacity, "log_valley_mass": hr.log_valley_mass}
    mc = cfg.raw["mc"]
    K = int(mc["trajectories"])
    if K > 0:
        refuse_if_too_long(hr.mean, K, float(mc["step_budget"]))
        res = simulate_hits(inst.chain.graph(), B, nu=hr.nu, trajectories=K, seed=int(mc["seed"]),
                            max_steps=int(min(float(mc["step_budget"]), 1e12)))
        out["mc"] = res.as_dict()
        out["mc_deviation_in_stderr"] = (res.mean - hr.mean) / res.stderr
        out["_samples"] = res.samples
    return out


def mirror_additivity(inst: Instance, types) -> dict:
    """Compare the full capacity with twice the capacity on one mirror half.

    The half keeps states whose plus-count of ``types[0]`` is at least that
    of ``types[1]``. Edges leaving the half become holding, and the mirror
    plane itself stays in the half, so for a mirror-symmetric chain
    cap(full) = 2 cap(half) exactly.
    """
    i, j = types
    lat = inst.chain.lattice
    table = inst.model.table
    if table.counts[i] != table.counts[j]:
        raise ConfigError(f"{inst.cfg.source}: mirror types {i}, {j} have different counts")
    K = lat.counts.copy()
    K[:, [i, j]] = K[:, [j, i]]
    lw = inst.chain.measure.log_weights
    if np.max(np.abs(lw[lat.index(K)] - lw)) > 1e-9 * max(1.0, np.max(np.abs(lw))):
        raise ConfigError(f"{inst.cfg.source}: the model is not symmetric under exchanging types {i} and {j}")
    A, B = inst.boundary
    half = lat.counts[:, i] >= lat.counts[:, j]
    s = inst.cfg.raw["solver"]
    sol = solve_harmonic(BoundaryProblem(inst.chain.graph().restrict(half), A[half], B[half]),
                         method=s["method"], prune=bool(s["prune"]),
                         log_prune_threshold=math.log(float(s["prune_threshold"])), cg_tol=float(s["cg_tol"]))
    lhalf = capacity(sol)
    a = inst.cfg.raw["asymptotics"]
    sds = inst.saddles(a["mode"], a["el_norm"], a["gate_dir"])
    lsum = asymptotic_capacity(sds, inst.n)
    out = {"types": [i, j], "log_capacity_half": lhalf, "log_asymptotic_sum": lsum,
           "saddles": len(sds), "half_states": int(half.sum()),
           "ratio_full_to_twice_half": math.exp(inst.hitting.log_capacity - lhalf - math.log(2)),
           "ratio_sum_to_twice_half": math.exp(lsum - lhalf - math.log(2))}
    half_sd = [sd for sd in sds if sd.counts[i] >= sd.counts[j] - 1e-9]
    if half_sd:
        out["ratio_half_to_single_saddle"] = math.exp(lhalf - asymptotic_capacity(half_sd[:1], inst.n))
    return out


def run_instance(cfg: ExperimentConfig, n: int, cache=None) -> dict:
    """Full per-(model, n) report: gate, exact numbers, asymptotics and optional MC."""
    inst = Instance(cfg, n, cache)
    rep = {"n": n, "states": int(inst.chain.lattice.size), "types": inst.model.table.types.tolist(),
           "counts": inst.model.table.counts.tolist()}
    rep["capacity"] = capacity_report(cfg, n, inst=inst)
    rep["asymptotics"] = asymptotics_report(cfg, n, inst=inst)
    ht = hit_time_report(cfg, n, inst=inst)
    ht.pop("_samples", None)
    rep["hit_time"] = ht
    mt = cfg.raw["asymptotics"]["mirror_types"]
    if mt:
        rep["mirror"] = mirror_additivity(inst, mt)
    return rep


def _run_instance_star(args):
    cfg, n, cache_dir = args
    from .cache import NpzCache
    return run_instance(cfg, n, NpzCache(cache_dir) if cache_dir else None)


def _trend_ok(ratios: list, ns: list) -> bool:
    """|ratio - 1| non-increasing over n >= 100 and within 15% at the largest n."""
    pts = [abs(r - 1) for r, n in zip(ratios, ns) if n >= 100]
    if not pts or not all(np.isfinite(pts)):
        return False
    return all(b <= a + 1e-12 for a, b in zip(pts, pts[1:])) and pts[-1] <= 0.15


SWEEP_COLUMNS = ["n", "states", "log_capacity_exact", "log_variational_bound", "log_asymptotic_capacity",
                 "ratio_capacity", "hitting_exact", "log_prediction", "ratio_prediction", "ratio_valley",
                 "harmonic_scaled_error", "max_principle_holds", "mc_mean", "mc_stderr",
                 "ratio_full_to_twice_half", "ratio_sum_to_twice_half"] + \
                [f"ratio[{variant_name(v)}]" for v in VARIANTS]


def sweep(cfg: ExperimentConfig, cache=None, cache_dir: str | None = None, workers: int = 1) -> tuple[dict, list]:
    """Run every n of the config; returns the JSON report and CSV rows (SWEEP_COLUMNS)."""
    ns = cfg.n_values
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            reports = list(pool.map(_run_instance_star, [(cfg, n, cache_dir) for n in ns]))
    else:
        reports = [run_instance(cfg, n, cache) for n in ns]
    sel = reports[0]["asymptotics"]["selected"] if reports else None
    rows = []
    for r in reports:
        a = r["asymptotics"]
        s = a["variants"][sel]
        diag = s.get("harmonic_diagnostic", [{}])
        mc = r["hit_time"].get("mc", {})
        rows.append([r["n"], r["states"], a["log_capacity_exact"], s.get("log_variational_bound"),
                     s.get("log_asymptotic_capacity"), s.get("ratio_capacity"), r["hit_time"]["hitting_exact"],
                     s.get("prefactor", {}).get("log_prediction"), s.get("ratio_prediction"), s.get("ratio_valley"),
                     max(d.get("scaled_error", float("nan")) for d in diag),
                     int(all(d.get("max_principle", {}).get("holds", False) for d in diag)),
                     mc.get("mean"), mc.get("stderr"),
                     r.get("mirror", {}).get("ratio_full_to_twice_half"),
                     r.get("mirror", {}).get("ratio_sum_to_twice_half")] +
                    [a["variants"][variant_name(v)].get("ratio_capacity") for v in VARIANTS])
    convergent = []
    for v in VARIANTS:
        name = variant_name(v)
        ratios = [r["asymptotics"]["variants"][name].get("ratio_capacity", float("nan")) for r in reports]
        if _trend_ok(ratios, ns):
            convergent.append(name)
    summary = {"n_values": ns, "convergent_configurations": convergent,
               "selected_configuration": convergent[0] if len(convergent) == 1 else None,
               "configured": sel}
    return {"summary": summary, "instances": reports}, rows


# ---------------------------------------------------------------------------
# Oracle suite
# ---------------------------------------------------------------------------

def _check(value, threshold, name) -> dict:
    ok = bool(np.isfinite(value) and value <= threshold)
    return {"name": name, "value": float(value), "threshold": threshold, "pass": ok}


def _rel(a, b) -> float:
    return abs(a - b) / max(abs(b), 1e-300)


def verify(cfg: ExperimentConfig, n: int) -> dict:
    """Lumping, detailed balance, stochasticity and birth-death closed forms."""
    model = cfg.model(n)
    ch = LatticeChain(model, int(cfg.raw["solver"]["state_budget"]))
    g = ch.graph()
    checks = [_check(detailed_balance_residual(g), 1e-12, "lattice detailed balance"),
              _check(np.max(np.abs(g.out_rates() + g.holding() - 1.0)), 1e-14, "lattice row sums"),
              _check(max(0.0, -float(g.holding().min())), 0.0, "lattice holding non-negative")]
    lat = ch.lattice
    A = np.all(lat.counts == 0, axis=1)
    B = np.all(lat.counts == model.table.counts, axis=1)
    sol = solve_harmonic(BoundaryProblem(g, A, B), prune=False)
    hr = mean_hitting(sol)
    if n <= SPIN_LIMIT:
        d = cfg.raw["disorder"]
        ens = (sample_patterns(cfg.distributions(), n, int(d["seed"])) if d["patterns"] is not None
               else ensemble_from_table(model.table))
        spin = SpinChain(ens, model)
        gs = spin.graph()
        lc = lump_check(ch, spin)
        checks += [_check(lc["rate_rel_err"], 1e-12, "lumped rates vs spin pushforward"),
                   _check(lc["weight_rel_err"], 1e-12, "lumped weights vs spin pushforward"),
                   _check(detailed_balance_residual(gs), 1e-12, "spin detailed balance"),
                   _check(np.max(np.abs(gs.out_rates() + gs.holding() - 1.0)), 1e-14, "spin row sums")]
        idx = spin.lattice_index(lat)
        ssol = solve_harmonic(BoundaryProblem(gs, A[idx], B[idx]), prune=False)
        shr = mean_hitting(ssol)
        checks += [_check(_rel(math.exp(shr.log_capacity - hr.log_capacity), 1.0), 1e-9, "spin vs lumped capacity"),
                   _check(_rel(math.exp(shr.log_mean - hr.log_mean), 1.0), 1e-9, "spin vs lumped hitting time")]
    # birth-death oracle on the single-type model with the same beta
    pot = model.potential if model.table.p == 1 else hopfield_potential(1)
    cw = LatticeChain(HopfieldModel(fixed_type_table([(1,)], [n]), pot, cfg.beta))
    gc = cw.graph()
    lcap_cf, lphi_cf = path_closed_form(gc, 0, n)
    Acw = np.zeros(n + 1, bool)
    Acw[0] = True
    Bcw = np.zeros(n + 1, bool)
    Bcw[n] = True
    csol = solve_harmonic(BoundaryProblem(gc, Acw, Bcw), prune=False)
    inner = np.isfinite(lphi_cf)
    checks += [_check(_rel(math.exp(capacity(csol) - lcap_cf), 1.0), 1e-8, "birth-death capacity closed form"),
               _check(float(np.max(np.abs(np.expm1(csol.log_phi[inner] - lphi_cf[inner])))), 1e-8,
                      "birth-death Phi closed form")]
    return {"n": n, "checks": checks, "all_pass": all(c["pass"] for c in checks)}
