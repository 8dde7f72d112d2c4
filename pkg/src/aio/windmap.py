"""Stationary wind map: one zero-mean GP per world-frame wind component.

Two regression modes share the RBF kernel:

* ``exact``: full GP posterior, O(K^3) fit, O(K) mean query.
* ``sparse``: Titsias' collapsed variational bound with M inducing inputs,
  O(K M^2) per bound evaluation, O(M) mean query.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.linalg import LinAlgError, cho_factor, cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize

logger = logging.getLogger(__name__)

MAP_FORMAT_VERSION = 1
JITTER = 1e-8
MAX_EXACT_POINTS = 5000


@dataclass
class KernelParams:
    """RBF kernel: ``variance * exp(-|p - p'|^2 / (2 lengthscale^2))``.

    ``lengthscale`` may be a scalar (isotropic) or a 3-vector (per axis).
    ``noise_variance`` is the observation noise of the wind samples.
    """

    variance: float = 1.0
    lengthscale: float | list = 1.0
    noise_variance: float = 0.1

    def __post_init__(self):
        ls = np.asarray(self.lengthscale, dtype=float)
        if self.variance <= 0 or self.noise_variance <= 0 or np.any(ls <= 0):
            raise ValueError("kernel parameters must be strictly positive")

    @property
    def ard(self):
        return np.ndim(self.lengthscale) > 0

    def to_vector(self):
        """Log-parameters ``[log variance, log lengthscale(s), log noise]``."""
        return np.concatenate(
            [[np.log(self.variance)], np.log(np.atleast_1d(self.lengthscale)), [np.log(self.noise_variance)]]
        )

    @classmethod
    def from_vector(cls, theta, ard):
        ls = np.exp(theta[1:-1])
        return cls(float(np.exp(theta[0])), ls.tolist() if ard else float(ls[0]), float(np.exp(theta[-1])))

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["lengthscale"] = np.asarray(self.lengthscale, dtype=float).tolist()
        return d


def _sqdist(X1, X2, ls):
    A = np.atleast_2d(X1) / ls
    B = np.atleast_2d(X2) / ls
    d = np.sum(A * A, 1)[:, None] + np.sum(B * B, 1)[None, :] - 2.0 * A @ B.T
    return np.maximum(d, 0.0)


def rbf_kernel(params: KernelParams, X1, X2=None):
    """Covariance matrix between point sets (or a scalar for two points)."""
    X1 = np.asarray(X1, dtype=float)
    scalar = X1.ndim == 1 and (X2 is None or np.ndim(X2) == 1)
    X2 = X1 if X2 is None else np.asarray(X2, dtype=float)
    ls = np.asarray(params.lengthscale, dtype=float)
    K = params.variance * np.exp(-0.5 * _sqdist(X1, X2, ls))
    return float(K[0, 0]) if scalar else K


def _chol(K, variance, what):
    """Cholesky with escalating jitter; returns (L, jitter_used)."""
    jitter = 0.0
    for attempt in range(8):
        try:
            return cholesky(K + jitter * np.eye(K.shape[0]), lower=True), jitter
        except LinAlgError:
            jitter = variance * 10.0 ** (-8 + attempt)
            logger.warning("%s not positive definite; adding jitter %.3g", what, jitter)
    raise LinAlgError(f"{what}: Cholesky failed even with jitter {jitter:.3g}")


# ---------------------------------------------------------------------------
# exact GP


def log_marginal_likelihood(theta, X, y, ard=False):
    """Exact-GP log evidence and its gradient w.r.t. the log-parameters."""
    params = KernelParams.from_vector(theta, ard)
    n = X.shape[0]
    ls = np.asarray(params.lengthscale, dtype=float)
    Kc = np.exp(-0.5 * _sqdist(X, X, ls))
    K = params.variance * (Kc + JITTER * np.eye(n)) + params.noise_variance * np.eye(n)
    cf = cho_factor(K, lower=True)
    alpha = cho_solve(cf, y)
    lml = -0.5 * y @ alpha - np.sum(np.log(np.diag(cf[0]))) - 0.5 * n * np.log(2 * np.pi)
    W = np.outer(alpha, alpha) - cho_solve(cf, np.eye(n))
    grads = [0.5 * np.sum(W * (params.variance * (Kc + JITTER * np.eye(n))))]
    Kf = params.variance * Kc
    if ard:
        for d in range(X.shape[1]):
            D2 = (X[:, d][:, None] - X[:, d][None, :]) ** 2 / ls[d] ** 2
            grads.append(0.5 * np.sum(W * Kf * D2))
    else:
        grads.append(0.5 * np.sum(W * Kf * _sqdist(X, X, ls)))
    grads.append(0.5 * params.noise_variance * np.trace(W))
    return float(lml), np.array(grads)


@dataclass
class GPAxis:
    """Posterior of one wind component.

    The mean at ``p`` is ``k(p, Z) @ weights``; the latent variance is
    ``variance - k(p, Z) @ var_matrix @ k(p, Z)``.
    """

    mode: str
    params: KernelParams
    Z: np.ndarray
    weights: np.ndarray
    var_matrix: np.ndarray
    q_mean: np.ndarray | None = None
    q_cov: np.ndarray | None = None
    y: np.ndarray | None = None
    jitter_added: float = 0.0
    objective_history: list = field(default_factory=list)

    def kvec(self, P):
        return rbf_kernel(self.params, np.atleast_2d(P), self.Z)

    def mean(self, P):
        return self.kvec(P) @ self.weights

    def variance(self, P):
        k = self.kvec(P)
        v = self.params.variance - np.einsum("ij,jk,ik->i", k, self.var_matrix, k)
        return np.maximum(v, 0.0)

    def mean_gradient(self, p):
        """Analytic gradient of the posterior mean at a single point."""
        p = np.asarray(p, dtype=float)
        k = self.kvec(p)[0]
        ls2 = np.asarray(self.params.lengthscale, dtype=float) ** 2
        return -((k * self.weights) @ ((p - self.Z) / ls2))


def fit_exact_axis(X, y, params: KernelParams) -> GPAxis:
    n = X.shape[0]
    if n > MAX_EXACT_POINTS:
        raise ValueError(f"exact GP limited to {MAX_EXACT_POINTS} points, got {n}")
    K = rbf_kernel(params, X, X) + (params.noise_variance + JITTER * params.variance) * np.eye(n)
    L, jit = _chol(K, params.variance, "exact Gram matrix")
    alpha = cho_solve((L, True), y)
    Linv = solve_triangular(L, np.eye(n), lower=True)
    return GPAxis(
        mode="exact", params=params, Z=X.copy(), weights=alpha, var_matrix=Linv.T @ Linv,
        y=y.copy(), jitter_added=jit,
    )


def optimize_exact_params(X, y, init: KernelParams, maxiter=200):
    """Maximise the log evidence over the log-parameters (L-BFGS)."""
    ard = init.ard
    hist = []

    def f(theta):
        val, g = log_marginal_likelihood(theta, X, y, ard)
        return -val, -g

    res = minimize(f, init.to_vector(), jac=True, method="L-BFGS-B",
                   bounds=_log_bounds(init), options={"maxiter": maxiter},
                   callback=lambda th: hist.append(-f(th)[0]))
    return KernelParams.from_vector(res.x, ard), hist


def _log_bounds(params):
    n_ls = np.atleast_1d(params.lengthscale).size
    return [(np.log(1e-4), np.log(1e4))] + [(np.log(1e-2), np.log(1e3))] * n_ls + [(np.log(1e-6), np.log(1e2))]


# ---------------------------------------------------------------------------
# sparse GP (collapsed variational bound)


def _sparse_factors(X, y, Z, params):
    s = params.noise_variance
    sf2 = params.variance
    ls = np.asarray(params.lengthscale, dtype=float)
    M = Z.shape[0]
    Kmm = sf2 * np.exp(-0.5 * _sqdist(Z, Z, ls))
    A = Kmm + JITTER * sf2 * np.eye(M)
    B = sf2 * np.exp(-0.5 * _sqdist(Z, X, ls))
    L = cholesky(A, lower=True)
    Al = solve_triangular(L, B, lower=True) / np.sqrt(s)
    Bm = np.eye(M) + Al @ Al.T
    LB = cholesky(Bm, lower=True)
    return dict(s=s, sf2=sf2, ls=ls, Kmm=Kmm, A=A, B=B, L=L, Al=Al, Bm=Bm, LB=LB)


def elbo(X, y, Z, params: KernelParams):
    """Collapsed lower bound on the log evidence."""
    f = _sparse_factors(X, y, Z, params)
    n = X.shape[0]
    s = f["s"]
    cvec = solve_triangular(f["LB"], f["Al"] @ y, lower=True)
    val = -0.5 * n * np.log(2 * np.pi) - 0.5 * n * np.log(s)
    val -= np.sum(np.log(np.diag(f["LB"])))
    val -= 0.5 / s * (y @ y - cvec @ cvec)
    val -= 0.5 / s * (n * f["sf2"] - s * np.sum(f["Al"] ** 2))
    return float(val)


def elbo_and_grad(theta, X, y, M, ard=False):
    """Bound and gradient w.r.t. ``[log-params, Z.ravel()]``."""
    n_hyp = 3 if not ard else 5
    params = KernelParams.from_vector(theta[:n_hyp], ard)
    Z = theta[n_hyp:].reshape(M, X.shape[1])
    f = _sparse_factors(X, y, Z, params)
    n = X.shape[0]
    s, sf2, ls = f["s"], f["sf2"], f["ls"]
    A, B, L, LB = f["A"], f["B"], f["L"], f["LB"]

    Linv = solve_triangular(L, np.eye(M), lower=True)
    Ainv = Linv.T @ Linv
    LBinv = solve_triangular(LB, np.eye(M), lower=True)
    Cinv = Linv.T @ (LBinv.T @ LBinv) @ Linv / s
    c = B @ y
    u = Cinv @ c
    AinvB = Ainv @ B
    trQ = s * np.sum(f["Al"] ** 2)

    cvec = LBinv @ (f["Al"] @ y)
    val = -0.5 * n * np.log(2 * np.pi) - 0.5 * n * np.log(s) - np.sum(np.log(np.diag(LB)))
    val -= 0.5 / s * (y @ y - cvec @ cvec)
    val -= 0.5 / s * (n * sf2 - trQ)

    G_A = -0.5 * s * Cinv + 0.5 * Ainv - 0.5 * np.outer(u, u) - 0.5 / s * AinvB @ AinvB.T
    G_B = -Cinv @ B + (np.outer(u, y) - np.outer(u, u @ B)) / s + AinvB / s
    dF_ds = (
        -0.5 * np.sum(Cinv * A)
        - 0.5 * (n - M) / s
        + 0.5 * (y @ y - c @ u) / s**2
        - 0.5 * u @ A @ u / s
        + 0.5 * n * sf2 / s**2
        - 0.5 * trQ / s**2
    )

    Kmm = f["Kmm"]
    grads = [np.sum(G_A * A) + np.sum(G_B * B) - 0.5 * n * sf2 / s]
    if ard:
        for d in range(Z.shape[1]):
            Dmm = (Z[:, d][:, None] - Z[:, d][None, :]) ** 2 / ls[d] ** 2
            Dmn = (Z[:, d][:, None] - X[:, d][None, :]) ** 2 / ls[d] ** 2
            grads.append(np.sum(G_A * Kmm * Dmm) + np.sum(G_B * B * Dmn))
    else:
        grads.append(np.sum(G_A * Kmm * _sqdist(Z, Z, ls)) + np.sum(G_B * B * _sqdist(Z, X, ls)))
    grads.append(s * dF_ds)

    ls2 = ls**2
    GA_sym = (G_A + G_A.T) * Kmm
    WB = G_B * B
    gZ = -(WB.sum(1)[:, None] * Z - WB @ X) / ls2
    gZ -= (GA_sym.sum(1)[:, None] * Z - GA_sym @ Z) / ls2
    return float(val), np.concatenate([np.array(grads), gZ.ravel()])


def kmeans_inducing(X, M, seed=0):
    if M == X.shape[0]:
        return X.copy()
    centroids, _ = kmeans2(X, M, seed=np.random.default_rng(seed), minit="++")
    return centroids


def sparse_posterior(X, y, Z, params: KernelParams) -> GPAxis:
    f = _sparse_factors(X, y, Z, params)
    s, A, L, LB = f["s"], f["A"], f["L"], f["LB"]
    M = Z.shape[0]
    Linv = solve_triangular(L, np.eye(M), lower=True)
    LBinv = solve_triangular(LB, np.eye(M), lower=True)
    Cinv = Linv.T @ (LBinv.T @ LBinv) @ Linv / s
    u = Cinv @ (f["B"] @ y)
    q_mean = A @ u
    q_cov = s * A @ Cinv @ A
    q_cov = 0.5 * (q_cov + q_cov.T)
    Ainv = Linv.T @ Linv
    return GPAxis(
        mode="sparse", params=params, Z=Z.copy(), weights=u, var_matrix=Ainv - s * Cinv,
        q_mean=q_mean, q_cov=q_cov,
    )


def fit_sparse_axis(X, y, params: KernelParams, M=20, Z=None, optimize=True,
                    optimize_inducing=True, maxiter=300, seed=0) -> GPAxis:
    """Sparse GP for one output; optionally maximises the bound (L-BFGS-B)."""
    K = X.shape[0]
    if not 1 <= M <= K:
        raise ValueError(f"need 1 <= M <= K, got M={M}, K={K}")
    Z = kmeans_inducing(X, M, seed) if Z is None else np.asarray(Z, dtype=float)
    hist = []
    if optimize:
        ard = params.ard
        n_hyp = 5 if ard else 3
        theta0 = np.concatenate([params.to_vector(), Z.ravel()])
        bounds = _log_bounds(params) + [(None, None)] * Z.size

        def neg(theta):
            if not optimize_inducing:
                theta = np.concatenate([theta, Z.ravel()])
            val, g = elbo_and_grad(theta, X, y, M, ard)
            if not np.isfinite(val):
                raise FloatingPointError(f"non-finite ELBO at log-params {theta[:n_hyp]}")
            g = g if optimize_inducing else g[:n_hyp]
            return -val, -g

        x0 = theta0 if optimize_inducing else theta0[:n_hyp]
        bnds = bounds if optimize_inducing else bounds[:n_hyp]
        hist.append(-neg(x0)[0])
        res = minimize(neg, x0, jac=True, method="L-BFGS-B", bounds=bnds,
                       options={"maxiter": maxiter}, callback=lambda th: hist.append(-neg(th)[0]))
        theta = res.x if optimize_inducing else np.concatenate([res.x, Z.ravel()])
        params = KernelParams.from_vector(theta[:n_hyp], ard)
        Z = theta[n_hyp:].reshape(M, X.shape[1])
    axis = sparse_posterior(X, y, Z, params)
    axis.objective_history = hist
    return axis


# ---------------------------------------------------------------------------
# map


@dataclass
class WindDataset:
    positions: np.ndarray
    winds: np.ndarray
    rate: float = 1.0

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=float))
        self.winds = np.atleast_2d(np.asarray(self.winds, dtype=float))
        if self.positions.shape[0] < 1 or self.positions.shape != self.winds.shape:
            raise ValueError("wind dataset needs K >= 1 matching position/wind rows")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("wind dataset positions must be finite")

    def __len__(self):
        return self.positions.shape[0]

    @classmethod
    def from_csv(cls, path):
        """Read ``t, p_x, p_y, p_z, w_x, w_y, w_z`` rows (``#`` lines ignored)."""
        with open(path) as fh:
            lines = [ln for ln in fh if ln.strip() and not ln.startswith("#")]
        if not lines:
            raise ValueError(f"{path}: no header")
        header = [h.strip() for h in lines[0].split(",")]
        want = ["p_x", "p_y", "p_z", "w_x", "w_y", "w_z"]
        missing = [c for c in want if c not in header]
        if missing:
            raise ValueError(f"{path}: missing columns {missing}")
        data = np.loadtxt(lines[1:], delimiter=",", ndmin=2)
        cols = [header.index(c) for c in want]
        return cls(positions=data[:, cols[:3]], winds=data[:, cols[3:]])


def default_params(y):
    var = max(float(np.var(y) + np.mean(y) ** 2), 0.05)
    return KernelParams(variance=var, lengthscale=1.0, noise_variance=0.1 * var)


class WindMap:
    """Three independent per-axis GPs; immutable after fitting."""

    def __init__(self, axes):
        if len(axes) != 3:
            raise ValueError("a wind map has exactly three axes")
        self.axes = list(axes)

    @property
    def mode(self):
        return self.axes[0].mode

    def query(self, p):
        """Mean wind (3,) and diagonal covariance (3, 3) at a single point."""
        p = np.asarray(p, dtype=float)
        mean = np.array([ax.mean(p)[0] for ax in self.axes])
        var = np.array([ax.variance(p)[0] for ax in self.axes])
        return mean, np.diag(var)

    def query_many(self, P):
        P = np.atleast_2d(P)
        return (np.column_stack([ax.mean(P) for ax in self.axes]),
                np.column_stack([ax.variance(P) for ax in self.axes]))

    def noise_covariance(self):
        """Diagonal covariance of the wind samples around the latent field."""
        return np.diag([ax.params.noise_variance for ax in self.axes])

    def mean_jacobian(self, p):
        """3x3 Jacobian of the mean wind w.r.t. position."""
        return np.vstack([ax.mean_gradient(p) for ax in self.axes])

    def to_dict(self):
        axes = []
        for ax in self.axes:
            d = {"params": ax.params.to_dict(), "inducing": ax.Z.tolist()}
            if ax.mode == "sparse":
                d["q_mean"] = ax.q_mean.tolist()
                d["q_cov"] = ax.q_cov.ravel().tolist()
            else:
                d["targets"] = ax.y.tolist()
            axes.append(d)
        return {"format": "aio-windmap", "format_version": MAP_FORMAT_VERSION, "mode": self.mode, "axes": axes}

    @classmethod
    def from_dict(cls, d):
        if d.get("format_version") != MAP_FORMAT_VERSION:
            raise ValueError(f"unsupported wind map format version {d.get('format_version')}")
        axes = []
        for a in d["axes"]:
            params = KernelParams(**a["params"])
            Z = np.asarray(a["inducing"], dtype=float)
            if d["mode"] == "exact":
                axes.append(fit_exact_axis(Z, np.asarray(a["targets"], dtype=float), params))
                continue
            M = Z.shape[0]
            A = rbf_kernel(params, Z, Z) + JITTER * params.variance * np.eye(M)
            cf = cho_factor(A, lower=True)
            Ainv = cho_solve(cf, np.eye(M))
            m = np.asarray(a["q_mean"], dtype=float)
            S = np.asarray(a["q_cov"], dtype=float).reshape(M, M)
            axes.append(GPAxis(mode="sparse", params=params, Z=Z, weights=Ainv @ m,
                               var_matrix=Ainv - Ainv @ S @ Ainv, q_mean=m, q_cov=S))
        return cls(axes)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def fit_exact(dataset: WindDataset, params=None, optimize=False) -> WindMap:
    """Exact GP per axis. ``params`` is one KernelParams or a list of three."""
    axes = []
    for i in range(3):
        y = dataset.winds[:, i]
        p = _axis_params(params, i, y)
        if optimize:
            p, _ = optimize_exact_params(dataset.positions, y, p)
        axes.append(fit_exact_axis(dataset.positions, y, p))
    return WindMap(axes)


def fit_sparse(dataset: WindDataset, params=None, M=20, optimize=True, inducing=None,
               optimize_inducing=True, maxiter=300, seed=0) -> WindMap:
    """Sparse GP per axis with M inducing inputs (k-means initialised)."""
    axes = []
    for i in range(3):
        y = dataset.winds[:, i]
        p = _axis_params(params, i, y)
        axes.append(
            fit_sparse_axis(dataset.positions, y, p, M=M, Z=inducing, optimize=optimize,
                            optimize_inducing=optimize_inducing, maxiter=maxiter, seed=seed + i)
        )
    return WindMap(axes)


def _axis_params(params, i, y):
    if params is None:
        return default_params(y)
    if isinstance(params, KernelParams):
        return params
    return params[i]
