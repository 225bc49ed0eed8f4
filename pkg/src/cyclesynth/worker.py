"""Continuous parameter search: GP surrogate with an upper-confidence rule.

The Worker receives a structure, derives its continuous decision
variables, and maximizes decoded performance inside the unit box via
exact Gaussian-process regression and UCB acquisition.  Infeasible
evaluations feed a fixed penalty back into the GP so the search is
steered away from, but still informed by, failed regions.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from . import decoder, grammar
from .seeding import substream

PENALTY = -1.0            # objective value assigned to infeasible points
UCB_KAPPA = 2.0
LENGTHSCALE = 0.2         # per-dimension, in normalized coordinates
JITTER_MIN = 1e-8
JITTER_MAX = 1e-2
N_ACQ_STARTS = 256
N_ACQ_REFINE = 8


@dataclass(frozen=True)
class WorkerBudget:
    n_init: int = 20
    n_iter: int = 40


@dataclass
class GpModel:
    """Exact GP regression with a squared-exponential kernel."""

    x: np.ndarray
    y: np.ndarray
    sigma_f: float
    lengthscale: float
    jitter: float
    chol: np.ndarray
    alpha: np.ndarray
    mean: float = 0.0


def _kernel(a: np.ndarray, b: np.ndarray, sigma_f: float,
            ell: float) -> np.ndarray:
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
    return sigma_f ** 2 * np.exp(-0.5 * d2 / ell ** 2)


def gp_fit(x: np.ndarray, y: np.ndarray,
           lengthscale: float = LENGTHSCALE) -> GpModel:
    """Fit on points in the unit box; escalates jitter until Cholesky works.

    With no data the prior is returned: zero mean, sigma_f everywhere.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if y.size == 0:
        return GpModel(np.empty((0, x.shape[1] if x.size else 1)), y, 1.0,
                       lengthscale, JITTER_MIN, np.empty((0, 0)),
                       np.empty(0), 0.0)
    sigma_f = float(np.std(y))
    if sigma_f < 1e-12:
        sigma_f = 1.0
    k = _kernel(x, x, sigma_f, lengthscale)
    jitter = JITTER_MIN
    while True:
        try:
            chol = np.linalg.cholesky(k + jitter * np.eye(len(x)))
            break
        except np.linalg.LinAlgError:
            jitter *= 10.0
            if jitter > JITTER_MAX:
                raise
    mean = float(np.mean(y))
    alpha = np.linalg.solve(chol.T, np.linalg.solve(chol, y - mean))
    return GpModel(x, y, sigma_f, lengthscale, jitter, chol, alpha, mean)


def gp_predict(model: GpModel, xq: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    xq = np.atleast_2d(np.asarray(xq, dtype=float))
    if model.y.size == 0:
        return (np.full(len(xq), model.mean),
                np.full(len(xq), model.sigma_f))
    ks = _kernel(xq, model.x, model.sigma_f, model.lengthscale)
    mu = model.mean + ks @ model.alpha
    v = np.linalg.solve(model.chol, ks.T)
    var = model.sigma_f ** 2 - (v ** 2).sum(axis=0)
    return mu, np.sqrt(np.clip(var, 0.0, None))


def ucb(model: GpModel, xq: np.ndarray,
        kappa: float = UCB_KAPPA) -> np.ndarray:
    mu, sigma = gp_predict(model, xq)
    return mu + kappa * sigma


def propose_next(model: GpModel, dim: int,
                 rng: np.random.Generator) -> np.ndarray:
    """Maximize the acquisition: Sobol multistart plus coordinate descent."""
    sob = qmc.Sobol(dim, scramble=True, seed=rng)
    cands = sob.random(N_ACQ_STARTS)
    scores = ucb(model, cands)
    order = np.argsort(-scores, kind="stable")[:N_ACQ_REFINE]
    best_x, best_s = None, -np.inf
    for k in order:
        x = cands[k].copy()
        s = float(scores[k])
        step = 0.1
        while step > 1e-3:
            improved = False
            for d in range(dim):
                for sign in (+1.0, -1.0):
                    cand = x.copy()
                    cand[d] = min(max(cand[d] + sign * step, 0.0), 1.0)
                    sc = float(ucb(model, cand[None, :])[0])
                    if sc > s:
                        x, s = cand, sc
                        improved = True
            if not improved:
                step *= 0.5
        if s > best_s:
            best_x, best_s = x, s
    return best_x


@dataclass
class Evaluation:
    index: int
    x: np.ndarray
    params: dict[str, float]
    objective: float
    feasible: bool
    performance: float


@dataclass
class WorkerResult:
    best_params: dict[str, float]
    best_performance: float
    feasible: bool
    n_evals: int
    history: list[Evaluation] = field(default_factory=list)
    cache_hit: bool = False


def maximize(objective, dim: int, budget: WorkerBudget, seed: int,
             tag: str = "worker") -> tuple[np.ndarray, float, list]:
    """Generic UCB loop; objective maps the unit box to a scalar."""
    rng = substream(seed, tag, "init")
    acq_rng = substream(seed, tag, "acq")
    sob = qmc.Sobol(dim, scramble=True, seed=rng)
    xs = [sob.random(1)[0] for _ in range(budget.n_init)]
    ys = [float(objective(x)) for x in xs]
    for _ in range(budget.n_iter):
        model = gp_fit(np.array(xs), np.array(ys))
        x_next = propose_next(model, dim, acq_rng)
        xs.append(x_next)
        ys.append(float(objective(x_next)))
    k = int(np.argmax(ys))
    return xs[k], ys[k], list(zip(xs, ys))


def _denorm(x: np.ndarray, specs: list[decoder.ParamSpec]) -> dict[str, float]:
    return {s.name: s.lo + float(xi) * (s.hi - s.lo)
            for xi, s in zip(x, specs)}


def penalized_objective(system: decoder.CycleSystem,
                        specs: list[decoder.ParamSpec]):
    """Decoded performance with a fixed penalty for infeasible points."""

    def evaluate(x: np.ndarray) -> tuple[float, bool, float, dict[str, float]]:
        params = _denorm(x, specs)
        sol = decoder.hybrid_solve(
            lambda v: system.residuals(v, params), system.initial_guess(params))
        if sol.status != decoder.STATUS_CONVERGED:
            return PENALTY, False, 0.0, params
        note = [False]
        system.residuals(sol.x, params, note)
        p_ = sol.x[:system.n_ports] * decoder.P_SCALE
        h_ = sol.x[system.n_ports:2 * system.n_ports] * decoder.H_SCALE
        m_ = sol.x[2 * system.n_ports:] * decoder.M_SCALE
        if note[0] or decoder._physical_checks(system, p_, h_, m_):
            return PENALTY, False, 0.0, params
        perf, _w, _qi, _qo = decoder._performance(system, p_, h_, m_)
        if perf <= decoder.PERF_EPS:
            return PENALTY, False, 0.0, params
        return perf, True, perf, params

    return evaluate


def optimize_parameters(graph: grammar.CycleGraph,
                        bc: decoder.BoundaryConditions,
                        fluid=None,
                        budget: WorkerBudget | None = None,
                        seed: int = 0,
                        eta: decoder.Efficiencies | None = None,
                        cache: "WorkerCache | None" = None) -> WorkerResult:
    """Best continuous parameters for one structure, cached by shape."""
    budget = budget or WorkerBudget()
    if cache is not None:
        hit = cache.get(graph, bc)
        if hit is not None:
            hit.cache_hit = True
            return hit
    try:
        system = decoder.CycleSystem(graph, bc,
                                     fluid or _default_fluid(), eta)
    except decoder.DecodeError:
        result = WorkerResult({}, PENALTY, False, 0)
        if cache is not None:
            cache.put(graph, bc, result)
        return result
    specs = system.parameter_space()
    evaluate = penalized_objective(system, specs)
    history: list[Evaluation] = []

    if not specs:
        obj, feas, perf, params = evaluate(np.empty(0))
        result = WorkerResult(params, perf if feas else PENALTY, feas, 1)
        if cache is not None:
            cache.put(graph, bc, result)
        return result

    def objective(x: np.ndarray) -> float:
        obj, feas, perf, params = evaluate(x)
        history.append(Evaluation(len(history), x.copy(), params,
                                  obj, feas, perf))
        return obj

    maximize(objective, len(specs), budget, seed)
    feas_evals = [e for e in history if e.feasible]
    if feas_evals:
        best = max(feas_evals, key=lambda e: e.performance)
        result = WorkerResult(best.params, best.performance, True,
                              len(history), history)
    else:
        result = WorkerResult({}, PENALTY, False, len(history), history)
    if cache is not None:
        cache.put(graph, bc, result)
    return result


def _default_fluid():
    from .fluids import AnalyticFluid
    return AnalyticFluid()


def export_evaluations_csv(result: WorkerResult, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["index", "objective", "feasible", "performance",
                     "params_json"])
        for e in result.history:
            wr.writerow([e.index, f"{e.objective:.10f}", int(e.feasible),
                         f"{e.performance:.10f}", json.dumps(e.params)])


class WorkerCache:
    """Keyed by canonical structure plus boundary conditions.

    Optionally persists as append-only JSON lines, so interrupted runs
    resume without re-evaluating known structures.
    """

    def __init__(self, path=None) -> None:
        self.path = path
        self._store: dict[str, WorkerResult] = {}
        if path is not None:
            try:
                with open(path) as fh:
                    for line in fh:
                        doc = json.loads(line)
                        self._store[doc["key"]] = WorkerResult(
                            doc["best_params"], doc["best_performance"],
                            doc["feasible"], doc["n_evals"])
            except FileNotFoundError:
                pass

    @staticmethod
    def key_for(graph: grammar.CycleGraph,
                bc: decoder.BoundaryConditions) -> str:
        return (f"{grammar.canonical_hex(graph)}|{bc.mode}"
                f"|{bc.t_source:.6f}|{bc.t_sink:.6f}|{bc.dt_approach:.6f}"
                f"|{bc.p_lo:.6f}|{bc.p_hi:.6f}")

    def __len__(self) -> int:
        return len(self._store)

    def get(self, graph, bc) -> WorkerResult | None:
        return self._store.get(self.key_for(graph, bc))

    def put(self, graph, bc, result: WorkerResult) -> None:
        key = self.key_for(graph, bc)
        if key in self._store:
            return
        self._store[key] = result
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps({
                    "key": key,
                    "best_params": result.best_params,
                    "best_performance": result.best_performance,
                    "feasible": result.feasible,
                    "n_evals": result.n_evals,
                }) + "\n")
