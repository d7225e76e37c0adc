"""Exact population quantities for fully discrete models.

A model is a table ``Pxy[k, j, l] = P(X = xs[j], Y = ys[l] | Z = k)`` with
cell weights ``w``.  All inverse problems are solved in orthonormal
coordinates, where the operator ``T[k, j] = P(X = x_j | Z = k)`` becomes

    Tt = diag(sqrt(w)) @ T @ diag(1 / sqrt(pi)),

so that the weighted adjoint is a plain transpose and minimum-norm solutions
are SVD pseudoinverse solutions.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

RANK_TOL = 1e-11


class OracleError(ValueError):
    pass


class UnreachableSupportPoint(OracleError):
    pass


class InconsistentSystem(OracleError):
    pass


class ModelMismatch(OracleError):
    pass


class SupportMismatch(OracleError):
    pass


class ZeroPi(OracleError):
    pass


@dataclass(frozen=True, eq=False)
class OracleModel:
    """Discrete joint law of ``(X, Y)`` given each instrument level.

    Parameters
    ----------
    xs : (m,) or (m, d) array
        Treatment support points.
    ys : (L,) array
        Outcome support values.
    Pxy : (K, m, L) array
        Conditional probabilities; each ``Pxy[k]`` sums to one.
    w : (K,) array
        Cell weights ``n_k / N``.
    pstar : (m,) array
        Target distribution of ``X`` defining ``psi(h) = sum_j pstar_j h_j``.
    n : (K,) int array, optional
        Cell sizes, needed only for the single-split variance.
    """

    xs: np.ndarray
    ys: np.ndarray
    Pxy: np.ndarray
    w: np.ndarray
    pstar: np.ndarray
    n: np.ndarray | None = None

    def __post_init__(self):
        P = np.asarray(self.Pxy, dtype=np.float64)
        if P.ndim != 3:
            raise OracleError("Pxy must have shape (K, m, L)")
        K, m, L = P.shape
        xs = np.asarray(self.xs, dtype=np.float64)
        ys = np.asarray(self.ys, dtype=np.float64)
        w = np.asarray(self.w, dtype=np.float64)
        pstar = np.asarray(self.pstar, dtype=np.float64)
        if len(xs) != m or ys.shape != (L,) or w.shape != (K,) or pstar.shape != (m,):
            raise OracleError("support, weight or target sizes do not match Pxy")
        if np.any(P < 0) or np.any(np.abs(P.sum(axis=(1, 2)) - 1) > 1e-12):
            raise OracleError("each Pxy[k] must be a probability table")
        if np.any(w <= 0) or abs(w.sum() - 1) > 1e-12:
            raise OracleError("weights must be positive and sum to 1")
        if np.any(pstar < 0) or abs(pstar.sum() - 1) > 1e-12:
            raise OracleError("pstar must be a probability vector")
        pi = w @ P.sum(axis=2)
        if np.any(pi <= 0):
            raise UnreachableSupportPoint(f"support points never reached: {np.flatnonzero(pi <= 0).tolist()}")
        for name, val in (("xs", xs), ("ys", ys), ("Pxy", P), ("w", w), ("pstar", pstar)):
            object.__setattr__(self, name, val)
        if self.n is not None:
            n = np.asarray(self.n, dtype=np.int64)
            if n.shape != (K,) or np.any(n < 1):
                raise OracleError("n must hold one positive count per cell")
            object.__setattr__(self, "n", n)

    @property
    def K(self) -> int:
        return self.Pxy.shape[0]

    @property
    def m(self) -> int:
        return self.Pxy.shape[1]

    @property
    def L(self) -> int:
        return self.Pxy.shape[2]

    @property
    def T(self) -> np.ndarray:
        """``T[k, j] = P(X = x_j | Z = k)``."""
        return self.Pxy.sum(axis=2)

    @property
    def pi(self) -> np.ndarray:
        """Pooled marginal of ``X``."""
        return self.w @ self.T

    @property
    def mu(self) -> np.ndarray:
        """``E[Y | Z = k]``."""
        return self.Pxy.sum(axis=1) @ self.ys

    @property
    def alpha(self) -> np.ndarray:
        """Riesz representer of ``psi`` in ``L2(pi)``: the density ratio ``pstar / pi``."""
        return self.pstar / self.pi

    def apply_T(self, h) -> np.ndarray:
        return self.T @ np.asarray(h, dtype=np.float64)

    def apply_T_adj(self, q) -> np.ndarray:
        """Adjoint ``(T* q)_j = sum_k w_k q_k T_kj / pi_j``."""
        return (self.w * np.asarray(q, dtype=np.float64)) @ self.T / self.pi

    def inner_x(self, a, b) -> float:
        return float(np.sum(self.pi * np.asarray(a) * np.asarray(b)))

    def inner_z(self, a, b) -> float:
        return float(np.sum(self.w * np.asarray(a) * np.asarray(b)))

    def psi(self, h) -> float:
        return float(self.pstar @ np.asarray(h, dtype=np.float64))

    def tilde_operator(self) -> np.ndarray:
        return np.sqrt(self.w)[:, None] * self.T / np.sqrt(self.pi)[None, :]

    def same_support(self, other: OracleModel) -> bool:
        return (self.Pxy.shape == other.Pxy.shape and np.array_equal(self.xs, other.xs)
                and np.array_equal(self.ys, other.ys) and np.allclose(self.w, other.w, atol=0, rtol=1e-14)
                and np.array_equal(self.pstar, other.pstar))

    def mixture(self, other: OracleModel, t: float) -> OracleModel:
        """``(1 - t) * self + t * other`` on the same supports."""
        if not self.same_support(other):
            raise SupportMismatch("models differ in supports, weights or target")
        P = (1 - t) * self.Pxy + t * other.Pxy
        return OracleModel(self.xs, self.ys, P / P.sum(axis=(1, 2), keepdims=True), self.w,
                           self.pstar, self.n)

    # ---- construction and (de)serialization ----

    @classmethod
    def from_conditional_means(cls, T, w, cond_mean, pstar, xs=None, spread: float = 1.0,
                               n=None) -> OracleModel:
        """Build ``Pxy`` with ``Y = cond_mean[k, j] +/- spread`` (probability 1/2 each).

        ``cond_mean`` may be ``(m,)`` (no confounding) or ``(K, m)``.
        """
        T = np.atleast_2d(np.asarray(T, dtype=np.float64))
        K, m = T.shape
        g = np.broadcast_to(np.asarray(cond_mean, dtype=np.float64), (K, m))
        vals = np.stack([g - spread, g + spread], axis=-1) if spread > 0 else g[..., None]
        ys, inv = np.unique(np.round(vals, 14), return_inverse=True)
        inv = inv.reshape(vals.shape)
        P = np.zeros((K, m, len(ys)))
        share = 1.0 / vals.shape[-1]
        for k in range(K):
            for j in range(m):
                for idx in inv[k, j]:
                    P[k, j, idx] += T[k, j] * share
        xs = np.arange(m, dtype=np.float64) if xs is None else xs
        return cls(xs, ys, P, w, pstar, n)

    @classmethod
    def from_dict(cls, data: dict) -> OracleModel:
        if "Pxy" in data:
            return cls(data["xs"], data["ys"], data["Pxy"], data["w"], data["pstar"], data.get("n"))
        if "T" in data and "cond_mean" in data:
            return cls.from_conditional_means(data["T"], data["w"], data["cond_mean"], data["pstar"],
                                              xs=data.get("xs"), spread=data.get("spread", 1.0),
                                              n=data.get("n"))
        raise OracleError("model needs either Pxy or (T, cond_mean)")

    @classmethod
    def from_json(cls, path) -> OracleModel:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        out = {"xs": self.xs.tolist(), "ys": self.ys.tolist(), "Pxy": self.Pxy.tolist(),
               "w": self.w.tolist(), "pstar": self.pstar.tolist()}
        if self.n is not None:
            out["n"] = self.n.tolist()
        return out


@dataclass(frozen=True, eq=False)
class OracleSolution:
    h_K: np.ndarray
    q_K: np.ndarray
    beta_K: np.ndarray
    r_K: np.ndarray
    rho_K: np.ndarray
    alpha: np.ndarray
    proj_alpha: np.ndarray
    psi_K: float
    sigma2: float
    sigma2_star: float
    sigma2_diamond: float | None
    surjective: bool
    rank: int
    residual: float
    consistent: bool
    gap: float | None = None
    extras: dict = field(default_factory=dict)

    @property
    def proj_alpha_perp(self) -> np.ndarray:
        return self.alpha - self.proj_alpha

    def to_dict(self) -> dict:
        out = {}
        for k, v in asdict(self).items():
            out[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return out

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


@dataclass(frozen=True, eq=False)
class _Svd:
    U: np.ndarray
    s: np.ndarray
    V: np.ndarray  # columns span the row space

    @property
    def rank(self) -> int:
        return len(self.s)


def _svd(Tt) -> _Svd:
    U, s, Vt = np.linalg.svd(Tt, full_matrices=False)
    r = int(np.sum(s > RANK_TOL * s[0])) if s.size and s[0] > 0 else 0
    return _Svd(U[:, :r], s[:r], Vt[:r].T)


def pinv_tilde(Tt) -> np.ndarray:
    """Truncated pseudoinverse of the orthonormal-coordinate operator."""
    d = _svd(Tt)
    return d.V @ (d.U / d.s).T


def rank_by_projection(Tt, tol: float = 1e-9) -> int:
    """Row rank by sequential Gram-Schmidt residuals (independent of the SVD)."""
    basis = []
    scale = max(np.linalg.norm(Tt, axis=1).max(), 1e-300)
    for row in Tt:
        v = row.astype(np.float64).copy()
        for _ in range(2):
            for b in basis:
                v -= (b @ v) * b
        nv = np.linalg.norm(v)
        if nv > tol * scale:
            basis.append(v / nv)
    return len(basis)


def _cond_moments(model: OracleModel):
    """Per-(k, j) conditional mean and second moment of ``Y`` (0 where T_kj = 0)."""
    T = model.T
    with np.errstate(invalid="ignore", divide="ignore"):
        ey = np.where(T > 0, model.Pxy @ model.ys / T, 0.0)
        ey2 = np.where(T > 0, model.Pxy @ model.ys ** 2 / T, 0.0)
    return T, ey, ey2


def _resid_moments(model: OracleModel, h):
    """Per-cell ``E[Y - h(X)]`` and ``E[(Y - h(X))^2]``."""
    T, ey, ey2 = _cond_moments(model)
    h = np.asarray(h)[None, :]
    m1 = np.sum(T * (ey - h), axis=1)
    m2 = np.sum(T * (ey2 - 2 * h * ey + h ** 2), axis=1)
    return m1, m2


def solve(model: OracleModel) -> OracleSolution:
    """Minimum-norm primal and dual solutions and variance functionals."""
    w, pi = model.w, model.pi
    sw, sp = np.sqrt(w), np.sqrt(pi)
    Tt = model.tilde_operator()
    d = _svd(Tt)
    Ut, Vr, s = d.U, d.V, d.s

    mu_t = sw * model.mu
    h_t = Vr @ ((Ut.T @ mu_t) / s)
    residual = float(np.linalg.norm(Tt @ h_t - mu_t))
    consistent = residual <= 1e-10 * (1 + np.linalg.norm(mu_t))

    a_t = sp * model.alpha
    coef = Vr.T @ a_t
    pa_t = Vr @ coef
    q_t = Ut @ (coef / s)
    beta_t = Vr @ (coef / s ** 2)
    rho_t = Vr @ ((Vr.T @ h_t) / s ** 2)

    h = h_t / sp
    q = q_t / sw
    rho = rho_t / sp
    r = model.T @ rho
    pa = pa_t / sp
    beta = beta_t / sp
    perp = model.alpha - pa

    m1, m2 = _resid_moments(model, h)
    var_eps = m2 - m1 ** 2
    sigma2 = float(np.sum(w * q ** 2 * var_eps))
    sigma2_star = float(np.sum(w * _eif_second_moment(model, q, h, perp, r)))

    sigma2_diamond = None
    if model.n is not None:
        N = float(model.n.sum())
        T = model.T
        var_beta = T @ beta ** 2 - (T @ beta) ** 2
        sigma2_diamond = sigma2 + (2.0 / N) * float(np.sum(var_beta * var_eps))

    rank = d.rank
    return OracleSolution(
        h_K=h, q_K=q, beta_K=beta, r_K=r, rho_K=rho, alpha=model.alpha.copy(), proj_alpha=pa,
        psi_K=model.psi(h), sigma2=sigma2, sigma2_star=sigma2_star,
        sigma2_diamond=sigma2_diamond, surjective=rank == model.K, rank=rank,
        residual=residual, consistent=bool(consistent),
        extras={"rank_projection": rank_by_projection(Tt), "singular_values": s.tolist()},
    )


def _eif_second_moment(model, q, h, perp, r):
    """Per-cell ``E[phi*^2 | Z = k]`` with ``phi* = q(z)(y - h(x)) + perp(x)(r(z) - h(x))``."""
    T, ey, ey2 = _cond_moments(model)
    hh = h[None, :]
    c = perp[None, :] * (r[:, None] - hh)  # non-Y part of phi*, per (k, j)
    qq = q[:, None]
    # E[(qq*(Y - h) + c)^2 | k, j]
    e2 = qq ** 2 * (ey2 - 2 * hh * ey + hh ** 2) + 2 * qq * c * (ey - hh) + c ** 2
    return np.sum(T * e2, axis=1)


def eif_mean(model: OracleModel, sol: OracleSolution | None = None, corrected: bool = True) -> float:
    """``sum_k w_k E_model[phi(O_k)]`` with nuisances taken from ``sol``."""
    sol = solve(model) if sol is None else sol
    T, ey, _ = _cond_moments(model)
    per_j = sol.q_K[:, None] * (ey - sol.h_K[None, :])
    if corrected:
        per_j = per_j + sol.proj_alpha_perp[None, :] * (sol.r_K[:, None] - sol.h_K[None, :])
    return float(model.w @ np.sum(T * per_j, axis=1))


def projection_onto_identified(model: OracleModel, g) -> np.ndarray:
    """Orthogonal projection in ``L2(pi)`` onto the closure of range(T*)."""
    sp = np.sqrt(model.pi)
    Vr = _svd(model.tilde_operator()).V
    return (Vr @ (Vr.T @ (sp * np.asarray(g, dtype=np.float64)))) / sp


def gap(model: OracleModel, h_star, tol: float = 1e-10) -> dict:
    """Identification gap ``<alpha - Pi alpha, Pi h* - h*>`` and the direct difference.

    Raises
    ------
    ModelMismatch
        If ``T h* != mu``.
    """
    h_star = np.asarray(h_star, dtype=np.float64)
    if h_star.shape != (model.m,):
        raise ModelMismatch("h_star has the wrong length")
    if np.max(np.abs(model.apply_T(h_star) - model.mu)) > 1e-10 * (1 + np.abs(model.mu).max()):
        raise ModelMismatch("h_star does not solve T h = mu for this model")
    sol = solve(model)
    ph = projection_onto_identified(model, h_star)
    value = model.inner_x(sol.proj_alpha_perp, ph - h_star)
    direct = model.psi(sol.h_K) - model.psi(h_star)
    if abs(value - direct) > tol * max(1.0, abs(direct)):
        raise AssertionError(f"gap identity violated: {value} vs {direct}")
    return {"gap": value, "direct": direct, "psi_K": model.psi(sol.h_K), "psi": model.psi(h_star)}


def _check_pair(model, model_bar):
    if not model.same_support(model_bar):
        raise SupportMismatch("models differ in supports, weights or target")


def von_mises_residual(model: OracleModel, model_bar: OracleModel) -> tuple[float, float]:
    """Both sides of the second-order expansion of the approximating functional.

    ``lhs = Psi(Pbar) - Psi(P) + sum_k w_k E_P[phibar*(O_k)]`` and
    ``rhs = -<qbar - q, T(hbar - h)>_Z + <perp_bar - perp, T*(rbar - r) - (hbar - h)>_X``,
    with ``T``, ``T*`` and the inner products taken under ``model``.
    """
    _check_pair(model, model_bar)
    s, sb = solve(model), solve(model_bar)
    lhs = sb.psi_K - s.psi_K + eif_mean(model, sb, corrected=True)
    dh = sb.h_K - s.h_K
    rhs = (-model.inner_z(sb.q_K - s.q_K, model.apply_T(dh))
           + model.inner_x(sb.proj_alpha_perp - s.proj_alpha_perp,
                           model.apply_T_adj(sb.r_K - s.r_K) - dh))
    return float(lhs), float(rhs)


def perturbation_residual(model: OracleModel, model_bar: OracleModel) -> tuple[float, float]:
    """Expansion with the uncorrected score ``q(z)(y - h(x))``.

    ``rhs = -<qbar - q, T(hbar - h)>_Z + <alpha - Pi alpha, hbar - h>_X``.
    """
    _check_pair(model, model_bar)
    s, sb = solve(model), solve(model_bar)
    lhs = sb.psi_K - s.psi_K + eif_mean(model, sb, corrected=False)
    dh = sb.h_K - s.h_K
    rhs = -model.inner_z(sb.q_K - s.q_K, model.apply_T(dh)) + model.inner_x(s.proj_alpha_perp, dh)
    return float(lhs), float(rhs)


def population_risk(model: OracleModel, h) -> float:
    """``sum_k w_k (mu_k - (T h)_k)^2`` for ``h`` given on the support."""
    return float(np.sum(model.w * (model.mu - model.apply_T(h)) ** 2))


def identity_checks(model: OracleModel, h_star=None, n_random: int = 100, seed: int = 0) -> dict:
    """Numerical residuals of the structural identities on one model."""
    rng = np.random.default_rng(seed)
    sol = solve(model)
    T = model.T
    H = rng.standard_normal((n_random, model.m))
    Q = rng.standard_normal((n_random, model.K))
    adj = max(abs(model.inner_z(T @ h, q) - model.inner_x(h, model.apply_T_adj(q))) for h, q in zip(H, Q))
    Tt = model.tilde_operator()
    P = pinv_tilde(Tt)
    pinv1 = float(np.abs(Tt @ P @ Tt - Tt).max())
    pinv2 = float(np.abs(P @ Tt @ P - P).max() / max(1.0, np.abs(P).max()))
    hs = sol.h_K if h_star is None else np.asarray(h_star, dtype=np.float64)
    dual_q = abs(sol.psi_K - model.inner_z(sol.q_K, model.mu))
    dual_pa = abs(sol.psi_K - model.inner_x(sol.proj_alpha, hs))
    out = {
        "adjointness": adj,
        "pinv_TPT": pinv1,
        "pinv_PTP": pinv2,
        "dual_q_mu": dual_q,
        "dual_proj_alpha_h": dual_pa,
        "eif_mean": abs(eif_mean(model, sol)),
        "adjoint_q_proj_alpha": float(np.abs(model.apply_T_adj(sol.q_K) - sol.proj_alpha).max()),
        "normal_beta": _rel(model.apply_T_adj(T @ sol.beta_K), sol.proj_alpha, sol.beta_K),
        "normal_rho": _rel(model.apply_T_adj(T @ sol.rho_K), sol.h_K, sol.rho_K),
        "rank_agreement": int(sol.rank == sol.extras["rank_projection"]),
        "consistent": sol.consistent,
    }
    if h_star is not None:
        g = gap(model, hs)
        out["gap_identity"] = abs(g["gap"] - g["direct"])
    return out


def _rel(lhs, rhs, x):
    """Residual of ``lhs = rhs`` relative to the size of the solution ``x``."""
    return float(np.abs(lhs - rhs).max() / max(1.0, np.abs(rhs).max(), np.abs(x).max()))


def weak_iv_oracle(pi: float) -> float:
    """Norm of the dual solution in the linear-Gaussian design: ``1 / |pi|``."""
    pi = float(pi)
    if pi == 0 or not np.isfinite(pi):
        raise ZeroPi("first-stage coefficient must be finite and nonzero")
    return 1.0 / abs(pi)


def random_model(rng: np.random.Generator, K: int | None = None, m: int | None = None,
                 L: int | None = None) -> tuple[OracleModel, np.ndarray]:
    """Random model with a consistent structural equation ``T h* = mu``.

    Returns the model and a structural function ``h*``.  With ``K <= m`` the
    rows of ``T`` are generic (full row rank) and the outcome table is
    confounded; with ``K > m`` the outcome depends on ``X`` only.
    """
    K = int(rng.integers(1, 7)) if K is None else K
    m = int(rng.integers(2, 9)) if m is None else m
    L = int(rng.integers(2, 5)) if L is None else L
    T = rng.dirichlet(np.ones(m), size=K)
    w = rng.dirichlet(np.ones(K))
    pstar = rng.dirichlet(np.ones(m))
    ys = np.sort(rng.standard_normal(L) * 2)
    ys += np.arange(L) * 1e-3  # keep values distinct
    # per-(k, j) outcome distributions over ys
    Q = rng.dirichlet(np.ones(L), size=(K, m))
    if K > m:
        Q = np.broadcast_to(Q[:1], (K, m, L)).copy()
    P = T[:, :, None] * Q
    model = OracleModel(np.arange(m, dtype=np.float64), ys, P, w, pstar)
    if K > m:
        h_star = Q[0] @ ys
    else:
        # mu lies in range(T) generically; any solution serves as h*
        h_star = solve(model).h_K + _null_component(model, rng)
    return model, h_star


def _null_component(model, rng):
    """Random element of the null space of ``T`` (in original coordinates)."""
    Tt = model.tilde_operator()
    _, s, Vt = np.linalg.svd(Tt, full_matrices=True)
    r = int(np.sum(s > RANK_TOL * s[0]))
    null = Vt[r:].T
    if null.shape[1] == 0:
        return np.zeros(model.m)
    return (null @ rng.standard_normal(null.shape[1])) / np.sqrt(model.pi)


def orc_a() -> tuple[OracleModel, np.ndarray]:
    """Two cells, binary treatment, structural values ``(0, 2)``."""
    T = [[0.5, 0.5], [0.2, 0.8]]
    model = OracleModel.from_conditional_means(T, [0.5, 0.5], [0.0, 2.0], [0.5, 0.5], spread=1.0)
    return model, np.array([0.0, 2.0])


def orc_b() -> tuple[OracleModel, np.ndarray]:
    """One cell, binary treatment, ``psi(h) = h(1)``, structural values ``(1, 3)``."""
    model = OracleModel.from_conditional_means([[0.5, 0.5]], [1.0], [1.0, 3.0], [0.0, 1.0], spread=1.0)
    return model, np.array([1.0, 3.0])


def identity_model(K: int = 3) -> tuple[OracleModel, np.ndarray]:
    """Invertible operator ``T = I`` with uniform weights."""
    g = np.arange(1.0, K + 1.0)
    model = OracleModel.from_conditional_means(np.eye(K), np.full(K, 1.0 / K), g, np.full(K, 1.0 / K))
    return model, g
