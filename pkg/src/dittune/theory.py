"""Numerical checks of the scale-factor recovery analysis.

Setting: a one-layer generator ``G(s) = f(W s + b)`` produces rows
``a_i = G(eps_i)`` of ``A``; target data is ``y = (A + Z) gamma_star`` with
``Z`` entries ``N(0, eta^2)``. Fitting ``gamma`` by least squares should land
within ``4 * sqrt(2) * eta / sqrt(V_min)`` (relative) of ``gamma_star``, where
``V_min = min_i Var[f(X_i)]``, ``X_i ~ N(b_i, ||w_i||^2)``.

Seeds: a master seed feeds ``numpy.random.SeedSequence``; the instance
(W, b, gamma_star) uses child 0 and trial ``k`` uses child ``k + 1`` of
``SeedSequence(master).spawn(trials + 1)``. Results are gathered by trial index.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy import stats

ACTIVATIONS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "tanh": np.tanh,
    "sigmoid": lambda x: 1.0 / (1.0 + np.exp(-x)),
    "relu": lambda x: np.maximum(x, 0.0),
    "identity": lambda x: x,
    # degenerate hook for bound-undefined tests
    "constant": lambda x: np.ones_like(x),
}

BOUND_CONSTANT = 4 * math.sqrt(2)
VMIN_FLOOR = 1e-6


class VacuousBound(ValueError):
    pass


@dataclass
class TheoryConfig:
    D: int = 8
    m: int | None = None
    eta: float = 0.01
    f: str = "tanh"
    C: float = 4.0
    w_kind: str = "orthogonal"   # orthogonal rows keep coordinates of W eps independent
    row_norm_range: tuple[float, float] = (0.5, 1.5)
    b_scale: float = 0.5
    n_mc: int = 100_000

    def __post_init__(self):
        if self.D < 2:
            raise ValueError("D must be >= 2")
        if self.f not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.f!r}")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if self.w_kind not in ("orthogonal", "gaussian"):
            raise ValueError(f"unknown w_kind {self.w_kind!r}")
        if self.m is None:
            self.m = min_samples(self.D, self.C)

    def to_dict(self) -> dict:
        return asdict(self)


def min_samples(D: int, C: float = 4.0) -> int:
    return int(math.ceil(C * D * D * math.log(D)))


@dataclass
class TheoryInstance:
    D: int
    m: int
    W: np.ndarray
    b: np.ndarray
    f: str
    gamma_star: np.ndarray
    eta: float

    def __post_init__(self):
        norms = np.linalg.norm(self.W, axis=1)
        if np.any(norms == 0):
            raise ValueError("W has a zero row")


def make_instance(cfg: TheoryConfig, rng: np.random.Generator) -> TheoryInstance:
    D = cfg.D
    lo, hi = cfg.row_norm_range
    if cfg.w_kind == "orthogonal":
        q, r = np.linalg.qr(rng.standard_normal((D, D)))
        q = q * np.sign(np.diag(r))
        W = rng.uniform(lo, hi, D)[:, None] * q
    else:
        W = rng.standard_normal((D, D)) / math.sqrt(D)
    b = cfg.b_scale * rng.standard_normal(D)
    gamma_star = rng.standard_normal(D)
    return TheoryInstance(D, cfg.m, W, b, cfg.f, gamma_star, cfg.eta)


def generate_instance(inst: TheoryInstance, rng: np.random.Generator):
    """Draw ``(A, Z, y)``: ``A = f(E W^T + B)``, ``Z ~ N(0, eta^2)``, ``y = (A + Z) gamma_star``."""
    f = ACTIVATIONS[inst.f]
    E = rng.standard_normal((inst.m, inst.D))
    A = f(E @ inst.W.T + inst.b[None, :])
    Z = inst.eta * rng.standard_normal((inst.m, inst.D)) if inst.eta > 0 else np.zeros_like(A)
    y = (A + Z) @ inst.gamma_star
    return A, Z, y


@dataclass
class VminEstimate:
    v_min: float
    u_max: float
    variances: np.ndarray
    second_moments: np.ndarray
    means: np.ndarray
    bound_defined: bool


def estimate_vmin(W: np.ndarray, b: np.ndarray, f: str, n_mc: int = 100_000,
                  rng: np.random.Generator | None = None) -> VminEstimate:
    """Monte-Carlo ``V_min = min_i Var f(X_i)`` and ``U_max = max_i E f(X_i)^2``."""
    if n_mc < 10_000:
        raise ValueError("n_mc must be >= 1e4")
    norms = np.linalg.norm(W, axis=1)
    if np.any(norms == 0):
        raise ValueError("W has a zero (degenerate) row")
    rng = rng or np.random.default_rng(0)
    fn = ACTIVATIONS[f]
    X = b[None, :] + norms[None, :] * rng.standard_normal((n_mc, len(b)))
    FX = fn(X)
    var = FX.var(axis=0, ddof=1)
    m2 = (FX ** 2).mean(axis=0)
    v_min = float(var.min())
    return VminEstimate(v_min, float(m2.max()), var, m2, FX.mean(axis=0), v_min > VMIN_FLOOR)


def gauss_hermite_moments(mu: float, sigma: float, f: str, n: int = 80) -> tuple[float, float]:
    """(E f(X), Var f(X)) for ``X ~ N(mu, sigma^2)`` by Gauss-Hermite quadrature."""
    x, w = np.polynomial.hermite_e.hermegauss(n)
    w = w / w.sum()
    vals = ACTIVATIONS[f](mu + sigma * x)
    mean = float(w @ vals)
    return mean, float(w @ (vals - mean) ** 2)


class IllConditioned(np.linalg.LinAlgError):
    pass


def recover_gamma(A: np.ndarray, y: np.ndarray, method: str = "normal_equations", *,
                  lr: float | None = None, max_iters: int = 200_000, tol: float = 1e-10,
                  gamma0: np.ndarray | None = None) -> np.ndarray:
    """Minimise ``||A gamma - y||^2``.

    ``gradient_descent`` runs plain GD from ``gamma0`` (zeros by default) with
    step ``1 / lambda_max(2 A^T A)`` unless ``lr`` is given, stopping when the
    gradient norm drops below ``tol``.
    """
    m, D = A.shape
    if m < D:
        raise ValueError("need m >= D")
    if method == "normal_equations":
        G = A.T @ A
        if np.linalg.cond(G) > 1e12:
            raise IllConditioned("A^T A is ill-conditioned (rank deficient A)")
        return np.linalg.solve(G, A.T @ y)
    if method != "gradient_descent":
        raise ValueError(f"unknown method {method!r}")
    L = 2 * np.linalg.norm(A, 2) ** 2
    step = lr if lr is not None else 1.0 / L
    g = np.zeros(D) if gamma0 is None else np.array(gamma0, dtype=float)
    for _ in range(max_iters):
        grad = 2 * A.T @ (A @ g - y)
        if np.linalg.norm(grad) < tol:
            return g
        g = g - step * grad
    raise RuntimeError(f"gradient descent did not reach gradient norm {tol} in {max_iters} iterations")


@dataclass
class TrialResult:
    trial: int
    gamma_hat: np.ndarray
    rel_err: float
    bound: float
    v_min_estimate: float
    success: bool


@dataclass
class SuiteReport:
    config: dict
    v_min: float
    u_max: float
    bound: float
    trials: list[TrialResult]
    success_rate: float
    median_rel_err: float
    psi2_proxy: str = "eta = std of N(0, eta^2) noise entries"

    def summary(self) -> dict:
        return {"config": self.config, "v_min": self.v_min, "u_max": self.u_max, "bound": self.bound,
                "success_rate": self.success_rate, "median_rel_err": self.median_rel_err,
                "max_rel_err": max(t.rel_err for t in self.trials), "n_trials": len(self.trials),
                "psi2_proxy": self.psi2_proxy}

    def csv_rows(self) -> list[dict]:
        c = self.config
        return [{"trial": t.trial, "D": c["D"], "m": c["m"], "eta": c["eta"], "rel_err": t.rel_err,
                 "bound": t.bound, "success": int(t.success)} for t in self.trials]


def run_recovery_suite(D: int = 8, m: int | None = None, eta: float = 0.01, f: str = "tanh",
                       trials: int = 100, seed: int = 0, *, C: float = 4.0,
                       method: str = "normal_equations", n_mc: int = 100_000,
                       enforce_sample_size: bool = True, **cfg_kwargs) -> SuiteReport:
    cfg = TheoryConfig(D=D, m=m, eta=eta, f=f, C=C, n_mc=n_mc, **cfg_kwargs)
    if enforce_sample_size and cfg.m < C * D * D * math.log(D):
        raise ValueError(f"m={cfg.m} below C*D^2*log D = {C * D * D * math.log(D):.1f}")
    seeds = np.random.SeedSequence(seed).spawn(trials + 1)
    inst_rng = np.random.default_rng(seeds[0])
    inst = make_instance(cfg, inst_rng)
    est = estimate_vmin(inst.W, inst.b, f, n_mc, inst_rng)
    if est.v_min < VMIN_FLOOR:
        raise VacuousBound(f"V_min={est.v_min:.3g} below {VMIN_FLOOR}: the bound is vacuous")
    bound = BOUND_CONSTANT * eta / math.sqrt(est.v_min)
    results = []
    gnorm = np.linalg.norm(inst.gamma_star)
    for k in range(trials):
        A, _, y = generate_instance(inst, np.random.default_rng(seeds[k + 1]))
        g = recover_gamma(A, y, method)
        rel = float(np.linalg.norm(g - inst.gamma_star) / gnorm)
        # eta = 0 makes the bound 0; success then means exact recovery up to round-off
        ok = rel < bound if eta > 0 else rel < 1e-8
        results.append(TrialResult(k, g, rel, bound, est.v_min, bool(ok)))
    rels = [r.rel_err for r in results]
    return SuiteReport(cfg.to_dict(), est.v_min, est.u_max, bound, results,
                       float(np.mean([r.success for r in results])), float(np.median(rels)))


@dataclass
class SweepReport:
    axis: str
    values: list[float]
    median_rel_err: list[float]
    spearman: float


def sweep(axis: str, values, *, D: int = 8, eta: float = 0.01, m: int | None = None,
          f: str = "tanh", trials: int = 50, seed: int = 0, **kw) -> SweepReport:
    """Median rel_err along ``m`` or ``eta`` (same instance seed for every point)."""
    med = []
    for v in values:
        if axis == "m":
            rep = run_recovery_suite(D, int(v), eta, f, trials, seed, **kw)
        elif axis == "eta":
            rep = run_recovery_suite(D, m, float(v), f, trials, seed, **kw)
        else:
            raise ValueError("axis must be 'm' or 'eta'")
        med.append(rep.median_rel_err)
    rho = float(stats.spearmanr(values, med).statistic) if len(values) > 1 else 0.0
    return SweepReport(axis, [float(v) for v in values], med, rho)


def power_iteration(A: np.ndarray, rng: np.random.Generator, max_iters: int = 1000,
                    tol: float = 1e-10) -> float:
    """Largest singular value of ``A`` via power iteration on ``A^T A``."""
    v = rng.standard_normal(A.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(max_iters):
        w = A.T @ (A @ v)
        new = math.sqrt(np.linalg.norm(w))
        v = w / np.linalg.norm(w)
        if abs(new - sigma) <= tol * new:
            return new
        sigma = new
    raise RuntimeError(f"power iteration did not converge in {max_iters} iterations")


def random_unit_vectors(n: int, D: int, rng: np.random.Generator) -> np.ndarray:
    G = rng.standard_normal((n, D))
    return G / np.linalg.norm(G, axis=1, keepdims=True)


@dataclass
class LemmaReport:
    D: int
    m: int
    v_min: float
    u_max: float
    moment_sandwich: dict = field(default_factory=dict)
    spectral: dict = field(default_factory=dict)
    restricted_eigen: dict = field(default_factory=dict)
    noise_bound: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(d.get("pass", False) for d in
                   (self.moment_sandwich, self.spectral, self.restricted_eigen, self.noise_bound))

    def to_dict(self) -> dict:
        return {"D": self.D, "m": self.m, "v_min": self.v_min, "u_max": self.u_max,
                "moment_sandwich": self.moment_sandwich, "spectral": self.spectral,
                "restricted_eigen": self.restricted_eigen, "noise_bound": self.noise_bound,
                "passed": self.passed}


def run_lemma_suite(cfg: TheoryConfig, seed: int = 0, *, n_gammas: int = 20,
                    n_sphere: int = 10_000, noise_trials: int = 1000) -> LemmaReport:
    """Empirical checks of the four supporting bounds.

    (a) ``V_min <= E[(sum gamma_i f(X_i))^2] <= (D+1) U_max`` for unit gamma, with
        3-standard-error Monte-Carlo slack;
    (b) spectral norm ``||A||_2 / sqrt(m)`` by power iteration, reported as
        ``C_spec = ||A||_2 / sqrt(m D)``;
    (c) ``min`` over ``n_sphere`` random unit gamma of ``||A gamma|| / sqrt(m)``
        exceeds ``sqrt(V_min / 2)``;
    (d) ``||Z gamma|| / sqrt(m) <= 2 eta ||gamma||`` in at least 99% of trials.
    """
    root = np.random.SeedSequence(seed).spawn(5)
    rng_inst, rng_a, rng_b, rng_c, rng_d = (np.random.default_rng(s) for s in root)
    inst = make_instance(cfg, rng_inst)
    est = estimate_vmin(inst.W, inst.b, cfg.f, cfg.n_mc, rng_inst)
    D, m = cfg.D, cfg.m
    fn = ACTIVATIONS[cfg.f]
    rep = LemmaReport(D, m, est.v_min, est.u_max)

    # (a) independent X_i ~ N(b_i, ||w_i||^2)
    norms = np.linalg.norm(inst.W, axis=1)
    FX = fn(inst.b[None, :] + norms[None, :] * rng_a.standard_normal((cfg.n_mc, D)))
    gammas = random_unit_vectors(n_gammas, D, rng_a)
    S2 = (FX @ gammas.T) ** 2
    means = S2.mean(axis=0)
    ses = S2.std(axis=0, ddof=1) / math.sqrt(cfg.n_mc)
    lower, upper = est.v_min, (D + 1) * est.u_max
    ok_a = bool(np.all(means + 3 * ses >= lower) and np.all(means - 3 * ses <= upper))
    rep.moment_sandwich = {"lower": lower, "upper": upper, "min_moment": float(means.min()),
                           "max_moment": float(means.max()), "pass": ok_a}

    # (b), (c) on one draw of A
    E = rng_b.standard_normal((m, D))
    A = fn(E @ inst.W.T + inst.b[None, :])
    sigma_max = power_iteration(A, rng_b)
    exact = float(np.linalg.norm(A, 2))
    c_spec = sigma_max / math.sqrt(m * D)
    rep.spectral = {"sigma_max_over_sqrt_m": sigma_max / math.sqrt(m), "C_spec": c_spec,
                    "svd_agreement": abs(sigma_max - exact) / exact,
                    "pass": abs(sigma_max - exact) <= 1e-6 * exact}

    U = random_unit_vectors(n_sphere, D, rng_c)
    vals = np.linalg.norm(A @ U.T, axis=0) / math.sqrt(m)
    threshold = math.sqrt(est.v_min / 2)
    sigma_min = float(np.linalg.svd(A, compute_uv=False)[-1] / math.sqrt(m))
    rep.restricted_eigen = {"sampled_min": float(vals.min()), "threshold": threshold,
                            "exact_min": sigma_min, "pass": bool(vals.min() > threshold)}

    # (d)
    hits = 0
    for _ in range(noise_trials):
        Z = cfg.eta * rng_d.standard_normal((m, D))
        g = rng_d.standard_normal(D)
        hits += np.linalg.norm(Z @ g) / math.sqrt(m) <= 2 * cfg.eta * np.linalg.norm(g)
    frac = hits / noise_trials
    rep.noise_bound = {"fraction": frac, "required": 0.99, "pass": bool(frac >= 0.99)}
    return rep


def brute_force_min(A: np.ndarray, n: int, rng: np.random.Generator) -> float:
    """Random-search minimum of ``||A gamma|| / sqrt(m)`` over ``n`` unit vectors (chunked)."""
    best = math.inf
    for start in range(0, n, 20_000):
        U = random_unit_vectors(min(20_000, n - start), A.shape[1], rng)
        best = min(best, float((np.linalg.norm(A @ U.T, axis=0)).min()))
    return best / math.sqrt(A.shape[0])
