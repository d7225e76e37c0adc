"""Synthetic grouped datasets.

``simulate_surrogate``
    many small experiments whose treatment law drifts along a reflected
    random walk in Beta-parameter space, with a discretized Gaussian
    confounder shared by treatment and outcome.
``simulate_weak_linear_iv``
    linear-Gaussian design with a scalar first-stage coefficient ``pi``.
``simulate_discrete``
    i.i.d. draws from an :class:`~npjive.oracle.OracleModel` table.

Every draw comes from a generator keyed by ``(seed, purpose, cell)`` so cells
can be generated independently and results are reproducible.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.special import ndtri

from .grouped import GroupedSample, cell_rng
from .oracle import OracleModel

_WALK, _CELL, _TARGET = 0x3A1C, 0xCE11, 0x7A46


class InvalidConfig(ValueError):
    pass


H_STAR = {
    "identity": lambda x: x,
    "zero": lambda x: np.zeros_like(x),
    "square": lambda x: x ** 2,
    "sin": lambda x: np.sin(2 * x),
}


def reflect(v, lo: float, hi: float):
    """Fold ``v`` into ``[lo, hi]`` by mirror reflection at both ends.

    ``hi - |((v - lo) mod 2L) - L|`` with ``L = hi - lo``; the identity on
    ``[lo, hi]``.
    """
    L = hi - lo
    r = np.mod(np.asarray(v, dtype=np.float64) - lo, 2 * L)
    return np.clip(hi - np.abs(r - L), lo, hi)


def confounder_levels(sigma_u: float, M: int) -> np.ndarray:
    """``M`` equiprobable quantile midpoints of ``N(0, sigma_u^2)``, exactly symmetric."""
    v = sigma_u * ndtri((np.arange(M) + 0.5) / M)
    return 0.5 * (v - v[::-1])


@dataclass(frozen=True)
class SurrogateDgpConfig:
    K: int = 1000
    n: int = 30
    sigma_u: float = 0.2
    M: int = 10
    walk_sd: float = 0.5
    bounds: tuple = (1.0, 8.0)
    sigma_eps: float = 0.3
    conf_coef: float = 3.0
    a_new: float = 2.0
    b_new: float = 3.5
    n_new: int = 50000
    h_star: str = "identity"
    seed: int = 0

    def __post_init__(self):
        lo, hi = (float(b) for b in self.bounds)
        object.__setattr__(self, "bounds", (lo, hi))
        if min(self.sigma_u, self.walk_sd, self.sigma_eps) <= 0:
            raise InvalidConfig("standard deviations must be positive")
        if not lo < hi:
            raise InvalidConfig("bounds need lo < hi")
        if min(self.K, self.n, self.n_new, self.M) < 1:
            raise InvalidConfig("K, n, n_new and M must be at least 1")
        if self.a_new <= 0 or self.b_new <= 0:
            raise InvalidConfig("target Beta parameters must be positive")
        if not callable(self.h_star) and self.h_star not in H_STAR:
            raise InvalidConfig(f"unknown structural function {self.h_star!r}")

    @property
    def h(self):
        return self.h_star if callable(self.h_star) else H_STAR[self.h_star]

    @classmethod
    def from_dict(cls, d: dict) -> SurrogateDgpConfig:
        names = {f.name for f in fields(cls)}
        extra = set(d) - names - {"kind"}
        if extra:
            raise InvalidConfig(f"unknown surrogate config keys: {sorted(extra)}")
        kw = {k: v for k, v in d.items() if k in names}
        if "bounds" in kw:
            kw["bounds"] = tuple(kw["bounds"])
        return cls(**kw)

    @classmethod
    def from_json(cls, path) -> SurrogateDgpConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bounds"] = list(self.bounds)
        if callable(self.h_star):
            d["h_star"] = getattr(self.h_star, "__name__", "callable")
        return d


@dataclass(frozen=True, eq=False)
class Simulation:
    """Simulated sample with its target draws; unpacks as ``(sample, target_x, psi_true)``."""

    sample: GroupedSample
    target_x: np.ndarray
    psi_true: float
    cell_params: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    def __iter__(self):
        return iter((self.sample, self.target_x, self.psi_true))


def surrogate_walk(config: SurrogateDgpConfig) -> np.ndarray:
    """``(K, 2)`` Beta parameters along the reflected random walk."""
    lo, hi = config.bounds
    rng = cell_rng(config.seed, _WALK)
    start = rng.uniform(lo, hi, size=2)
    steps = rng.normal(0.0, config.walk_sd, size=(config.K - 1, 2))
    out = np.empty((config.K, 2))
    out[0] = start
    for k in range(1, config.K):
        out[k] = reflect(out[k - 1] + steps[k - 1], lo, hi)
    return out


def surrogate_treatments(rng, a, b, n, levels):
    """``n`` draws of ``Beta(a, b) + U`` and the confounder values ``U``."""
    u = levels[rng.integers(0, len(levels), size=n)]
    return rng.beta(a, b, size=n) + u, u


def simulate_surrogate(config: SurrogateDgpConfig) -> Simulation:
    """Grouped sample from the drifting-experiments design.

    Treatments ``X = Beta(a_k, b_k) + U``; outcomes
    ``Y = h*(X) + conf_coef * U + N(0, sigma_eps^2)``.  The target sample is
    ``Beta(a_new, b_new) + U`` and ``psi_true`` is the mean of ``h*`` over it.
    """
    params = surrogate_walk(config)
    levels = confounder_levels(config.sigma_u, config.M)
    h = config.h
    K, n = config.K, config.n
    x = np.empty(K * n)
    y = np.empty(K * n)
    for k in range(K):
        rng = cell_rng(config.seed, _CELL, k)
        xk, uk = surrogate_treatments(rng, params[k, 0], params[k, 1], n, levels)
        x[k * n:(k + 1) * n] = xk
        y[k * n:(k + 1) * n] = h(xk) + config.conf_coef * uk + rng.normal(0.0, config.sigma_eps, size=n)
    trng = cell_rng(config.seed, _TARGET)
    target_x, _ = surrogate_treatments(trng, config.a_new, config.b_new, config.n_new, levels)
    psi_true = float(np.mean(h(target_x)))
    sample = GroupedSample(x[:, None], y, np.repeat(np.arange(K), n), K, seed=config.seed)
    meta = {"confounder_sd": float(np.sqrt(np.mean(levels ** 2))), "confounder_levels": levels.tolist()}
    return Simulation(sample, target_x[:, None], psi_true, params, meta)


def cell_mean_structural(config: SurrogateDgpConfig, params, fn, draws: int = 2000, seed: int = 0):
    """Monte Carlo ``E[fn(X) | Z = k]`` for every cell using fresh treatment draws."""
    levels = confounder_levels(config.sigma_u, config.M)
    out = np.empty(len(params))
    for k, (a, b) in enumerate(params):
        xk, _ = surrogate_treatments(cell_rng(seed, 0x401D, k), a, b, draws, levels)
        out[k] = np.mean(fn(xk))
    return out


def simulate_weak_linear_iv(K: int, n: int, pi: float, sigma_v: float = 1.0, b: float = 1.0,
                            seed: int = 0, n_new: int = 10000, target_levels: str = "uniform",
                            rho_uv: float = 0.5) -> Simulation:
    """Linear design ``X = pi * z_k + U``, ``Y = b * X + V`` with ``corr(U, V) = rho_uv``.

    ``z_k`` are standardized level scores.  The target treatment law draws
    ``z`` uniformly over all levels (``uniform``) or over the upper half
    (``upper``); ``psi_true = b * pi * mean(z_target)`` exactly.
    """
    if K < 2 or n < 1 or not np.isfinite(pi) or sigma_v <= 0 or n_new < 1:
        raise InvalidConfig("need K >= 2, n >= 1, finite pi, sigma_v > 0 and n_new >= 1")
    if target_levels not in ("uniform", "upper"):
        raise InvalidConfig(f"unknown target_levels {target_levels!r}")
    z = np.arange(K, dtype=np.float64)
    z = (z - z.mean()) / z.std()
    x = np.empty(K * n)
    y = np.empty(K * n)
    c = np.sqrt(1.0 - rho_uv ** 2)
    for k in range(K):
        rng = cell_rng(seed, _CELL, k)
        u = rng.standard_normal(n)
        v = sigma_v * (rho_uv * u + c * rng.standard_normal(n))
        xk = pi * z[k] + u
        x[k * n:(k + 1) * n] = xk
        y[k * n:(k + 1) * n] = b * xk + v
    pool = z if target_levels == "uniform" else z[K // 2:]
    trng = cell_rng(seed, _TARGET)
    target_x = pi * pool[trng.integers(0, len(pool), size=n_new)] + trng.standard_normal(n_new)
    psi_true = float(b * pi * pool.mean())
    if abs(psi_true) < 1e-14:
        psi_true = 0.0
    sample = GroupedSample(x[:, None], y, np.repeat(np.arange(K), n), K, seed=seed)
    return Simulation(sample, target_x[:, None], psi_true, z[:, None],
                      {"rho_uv": rho_uv, "q_norm": 1.0 / abs(pi) if pi else float("inf")})


def simulate_discrete(model: OracleModel, n_per_cell, seed: int = 0) -> GroupedSample:
    """Draw ``(X, Y)`` i.i.d. from ``model.Pxy[k]`` in each cell."""
    n = np.broadcast_to(np.asarray(n_per_cell, dtype=np.int64), (model.K,))
    if np.any(n < 1):
        raise InvalidConfig("each cell needs at least one unit")
    m, L = model.m, model.L
    xs = model.xs if model.xs.ndim == 2 else model.xs[:, None]
    xi, yi = [], []
    for k in range(model.K):
        p = model.Pxy[k].ravel()
        idx = cell_rng(seed, _CELL, k).choice(m * L, size=int(n[k]), p=p / p.sum())
        xi.append(idx // L)
        yi.append(idx % L)
    xi = np.concatenate(xi)
    yi = np.concatenate(yi)
    return GroupedSample(xs[xi], model.ys[yi], np.repeat(np.arange(model.K), n), model.K, seed=seed)
