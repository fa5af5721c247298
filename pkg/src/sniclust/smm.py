"""Student's-t mixture clustering with MAP-EM under Dirichlet/NIW priors,
plus the nonlinear projection head that feeds it.

The mixture is handled through the Gaussian-scale-mixture view of the t
density: the E-step produces responsibilities and per-point scale
expectations, and the M-step applies conjugate MAP updates (Dirichlet mode
for the weights, NIW mode for means/covariances) with the degrees of freedom
solved from the standard stationarity condition by bracketed root finding.
All density work happens in log space.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.optimize import brentq
from scipy.special import digamma, gammaln, multigammaln

from . import autograd as ag
from .autograd import ParamSet, Tensor
from .datagen import as_rng

RIDGE = 1e-6
EMPTY_COMPONENT_FRACTION = 1e-8


# -- projection head ------------------------------------------------------------

@dataclass
class ProjectionState:
    """Linear map + batch norm running statistics (train/eval modes)."""

    params: ParamSet
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-12

    @property
    def out_dim(self) -> int:
        return self.params["proj_w"].shape[1]


def init_projection(in_dim: int, out_dim: int = 32, seed=0) -> ProjectionState:
    rng = as_rng(seed)
    scale = np.sqrt(6.0 / (in_dim + out_dim))
    ps = ParamSet()
    ps.add("proj_w", rng.uniform(-scale, scale, size=(in_dim, out_dim)))
    ps.add("bn_gamma", np.ones(out_dim))
    ps.add("bn_beta", np.zeros(out_dim))
    return ProjectionState(params=ps, running_mean=np.zeros(out_dim),
                           running_var=np.ones(out_dim))


def project(e, state: ProjectionState, mode: str = "train") -> Tensor:
    """SELU(BN(W_p e)): batch statistics in train mode (updating the running
    estimates), running statistics in eval mode."""
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    e = e if isinstance(e, Tensor) else Tensor(e)
    pre = ag.matmul(e, state.params["proj_w"])
    if mode == "train":
        if pre.shape[0] < 2:
            raise ValueError("train-mode projection needs a batch of at least 2")
        mean = ag.tmean(pre, axis=0, keepdims=True)
        centered = ag.add(pre, ag.mul(mean, -1.0))
        var = ag.tmean(ag.mul(centered, centered), axis=0, keepdims=True)
        state.running_mean = ((1 - state.momentum) * state.running_mean
                              + state.momentum * mean.data[0])
        state.running_var = ((1 - state.momentum) * state.running_var
                             + state.momentum * var.data[0])
        normed = ag.mul(centered, ag.power(ag.add(var, state.eps), -0.5))
    else:
        centered = ag.add(pre, Tensor(-state.running_mean))
        normed = ag.mul(centered, Tensor(1.0 / np.sqrt(state.running_var + state.eps)))
    scaled = ag.add(ag.mul(normed, state.params["bn_gamma"]), state.params["bn_beta"])
    return ag.selu(scaled)


# -- mixture parameters ------------------------------------------------------------

@dataclass
class SmmParams:
    """Per component: weight, mean, covariance (SPD), degrees of freedom."""

    weights: np.ndarray      # (K,)
    means: np.ndarray        # (K, D)
    covs: np.ndarray         # (K, D, D)
    dofs: np.ndarray         # (K,)

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def validate(self, v_min: float = 1.0, v_max: float = 200.0) -> None:
        if not np.allclose(self.weights.sum(), 1.0, atol=1e-9) or np.any(self.weights < 0):
            raise ValueError("weights must be a probability vector")
        for k in range(self.n_components):
            np.linalg.cholesky(self.covs[k])
        if np.any(self.dofs < v_min) or np.any(self.dofs > v_max):
            raise ValueError("degrees of freedom out of range")


@dataclass
class SmmPriors:
    """Dirichlet concentration and NIW hyperparameters."""

    alpha0: float = 2.0
    kappa0: float = 0.01
    m0: np.ndarray | None = None       # default: mean of the data
    s0: np.ndarray | None = None       # default: 0.1 * diag(cov(Z)) * D
    rho0: float | None = None          # default: D + 2

    def resolved(self, z: np.ndarray) -> "SmmPriors":
        d = z.shape[1]
        m0 = np.mean(z, axis=0) if self.m0 is None else np.asarray(self.m0, dtype=np.float64)
        if self.s0 is None:
            var = np.var(z, axis=0)
            s0 = 0.1 * np.diag(np.maximum(var, 1e-12)) * d
        else:
            s0 = np.asarray(self.s0, dtype=np.float64)
        rho0 = float(d + 2) if self.rho0 is None else float(self.rho0)
        return SmmPriors(alpha0=self.alpha0, kappa0=self.kappa0, m0=m0, s0=s0, rho0=rho0)

    def validate(self, d: int) -> None:
        if self.alpha0 <= 0:
            raise ValueError("alpha0 must be > 0")
        if self.kappa0 <= 0:
            raise ValueError("kappa0 must be > 0")
        if self.s0 is not None:
            np.linalg.cholesky(np.asarray(self.s0))
        if self.rho0 is not None and self.rho0 <= d - 1:
            raise ValueError("rho0 must exceed D - 1")


@dataclass
class EStepStats:
    """Expected memberships and scale factors from one E-step."""

    resp: np.ndarray     # (N, K), rows sum to 1
    scales: np.ndarray   # (N, K), positive
    log_q: np.ndarray    # (N, K), log(pi_k) + log t_k(z_i)


# -- densities -----------------------------------------------------------------------

def _chol_logdet(chol: np.ndarray) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(chol))))


def log_t_density(z: np.ndarray, mean: np.ndarray, cov: np.ndarray,
                  dof: float) -> np.ndarray:
    """Multivariate Student-t log density, one value per row of z."""
    d = z.shape[1]
    chol = np.linalg.cholesky(cov)
    y = solve_triangular(chol, (z - mean).T, lower=True).T
    maha = np.sum(y * y, axis=1)
    return (gammaln(0.5 * (dof + d)) - gammaln(0.5 * dof)
            - 0.5 * d * np.log(dof * np.pi) - 0.5 * _chol_logdet(chol)
            - 0.5 * (dof + d) * np.log1p(maha / dof))


def log_component_scores(z: np.ndarray, params: SmmParams) -> np.ndarray:
    """(N, K) matrix of log(pi_k) + log t_k(z_i)."""
    cols = [np.log(params.weights[k]) + log_t_density(z, params.means[k],
                                                      params.covs[k], params.dofs[k])
            for k in range(params.n_components)]
    return np.stack(cols, axis=1)


def smm_pdf(z: np.ndarray, params: SmmParams) -> np.ndarray:
    """Mixture density per row of z (computed in log space)."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    log_q = log_component_scores(z, params)
    m = log_q.max(axis=1, keepdims=True)
    return np.exp(m[:, 0] + np.log(np.sum(np.exp(log_q - m), axis=1)))


def mahalanobis_sq(z: np.ndarray, params: SmmParams) -> np.ndarray:
    """(N, K) squared Mahalanobis distances to each component."""
    out = np.empty((z.shape[0], params.n_components))
    for k in range(params.n_components):
        chol = np.linalg.cholesky(params.covs[k])
        y = np.linalg.solve(chol, (z - params.means[k]).T).T
        out[:, k] = np.sum(y * y, axis=1)
    return out


# -- EM ---------------------------------------------------------------------------------

def e_step(z: np.ndarray, params: SmmParams) -> EStepStats:
    """Responsibilities and scale expectations under the current parameters."""
    d = z.shape[1]
    log_q = log_component_scores(z, params)
    shift = log_q.max(axis=1, keepdims=True)
    w = np.exp(log_q - shift)
    resp = w / w.sum(axis=1, keepdims=True)
    maha = mahalanobis_sq(z, params)
    scales = (params.dofs[None, :] + d) / (params.dofs[None, :] + maha)
    return EStepStats(resp=resp, scales=scales, log_q=log_q)


def _solve_dof(resp_k: np.ndarray, scales_k: np.ndarray, dof_old: float, d: int,
               v_min: float, v_max: float) -> float:
    """Root of the degrees-of-freedom stationarity condition on [v_min, v_max]."""
    n_k = resp_k.sum()
    if n_k <= 0:
        return dof_old
    avg = float(np.sum(resp_k * (np.log(scales_k) - scales_k)) / n_k)
    const = 1.0 + avg + digamma(0.5 * (dof_old + d)) - np.log(0.5 * (dof_old + d))

    def f(v: float) -> float:
        return np.log(0.5 * v) - digamma(0.5 * v) + const

    # f is decreasing in v; clamp when no sign change inside the bracket
    if f(v_min) < 0:
        return v_min
    if f(v_max) > 0:
        return v_max
    return float(brentq(f, v_min, v_max, xtol=1e-10, rtol=1e-12))


def m_step(z: np.ndarray, stats: EStepStats, priors: SmmPriors,
           dofs_old: np.ndarray | None = None, v_min: float = 1.0,
           v_max: float = 200.0, update_dofs: bool = True,
           ridge: float = RIDGE) -> SmmParams:
    """Conjugate MAP updates; expects priors already resolved against z."""
    n, d = z.shape
    resp, scales = stats.resp, stats.scales
    k_comp = resp.shape[1]
    if dofs_old is None:
        dofs_old = np.full(k_comp, 10.0)
    n_k = resp.sum(axis=0)                               # (K,)
    weights = (n_k + priors.alpha0 - 1.0)
    weights = weights / weights.sum()
    rs = resp * scales                                   # (N, K)
    s_k = rs.sum(axis=0)
    means = np.empty((k_comp, d))
    covs = np.empty((k_comp, d, d))
    dofs = np.empty(k_comp)
    for k in range(k_comp):
        means[k] = (priors.kappa0 * priors.m0 + rs[:, k] @ z) / (priors.kappa0 + s_k[k])
        dev = z - means[k]
        scatter = (rs[:, k][:, None] * dev).T @ dev
        md = means[k] - priors.m0
        num = priors.s0 + priors.kappa0 * np.outer(md, md) + scatter
        covs[k] = num / (priors.rho0 + n_k[k] + d + 2.0)
        covs[k] += ridge * np.eye(d)
        if update_dofs:
            dofs[k] = _solve_dof(resp[:, k], scales[:, k], dofs_old[k], d, v_min, v_max)
        else:
            dofs[k] = dofs_old[k]
    return SmmParams(weights=weights, means=means, covs=covs, dofs=dofs)


def log_dirichlet_pdf(weights: np.ndarray, alpha0: float) -> float:
    k = len(weights)
    return float((alpha0 - 1.0) * np.sum(np.log(weights))
                 + gammaln(k * alpha0) - k * gammaln(alpha0))


def log_niw_pdf(mean: np.ndarray, cov: np.ndarray, priors: SmmPriors) -> float:
    """Normal-inverse-Wishart log density at (mean, cov)."""
    d = len(mean)
    rho0 = priors.rho0
    chol = np.linalg.cholesky(cov)
    logdet_cov = _chol_logdet(chol)
    sign, logdet_s0 = np.linalg.slogdet(priors.s0)
    inv_cov = np.linalg.inv(cov)
    md = mean - priors.m0
    log_norm = (0.5 * rho0 * logdet_s0 - 0.5 * rho0 * d * np.log(2.0)
                - multigammaln(0.5 * rho0, d)
                + 0.5 * d * np.log(priors.kappa0 / (2.0 * np.pi)))
    quad = -0.5 * np.trace(priors.s0 @ inv_cov) - 0.5 * priors.kappa0 * md @ inv_cov @ md
    return float(log_norm - 0.5 * (rho0 + d + 2.0) * logdet_cov + quad)


def log_posterior(z: np.ndarray, params: SmmParams, priors: SmmPriors) -> float:
    """Observed-data log likelihood plus log priors (the MAP objective)."""
    log_q = log_component_scores(z, params)
    shift = log_q.max(axis=1, keepdims=True)
    ll = float(np.sum(shift[:, 0] + np.log(np.sum(np.exp(log_q - shift), axis=1))))
    lp = log_dirichlet_pdf(params.weights, priors.alpha0)
    for k in range(params.n_components):
        lp += log_niw_pdf(params.means[k], params.covs[k], priors)
    return ll + lp


def kmeans_pp_centers(z: np.ndarray, k: int, rng) -> np.ndarray:
    """Standard k-means++ seeding (centers only)."""
    n = len(z)
    centers = np.empty((k, z.shape[1]))
    centers[0] = z[rng.integers(n)]
    d2 = np.sum((z - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[i] = z[rng.integers(n)]
            continue
        probs = d2 / total
        centers[i] = z[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, np.sum((z - centers[i]) ** 2, axis=1))
    return centers


def init_smm(z: np.ndarray, k: int, seed, v_init: float = 10.0) -> SmmParams:
    """k-means++ means, shared global covariance, uniform weights."""
    rng = as_rng(seed)
    means = kmeans_pp_centers(z, k, rng)
    cov = np.cov(z, rowvar=False)
    cov = np.atleast_2d(cov) + RIDGE * np.eye(z.shape[1])
    return SmmParams(weights=np.full(k, 1.0 / k), means=means,
                     covs=np.repeat(cov[None], k, axis=0),
                     dofs=np.full(k, v_init))


@dataclass
class FitResult:
    params: SmmParams
    stats: EStepStats
    objective_trace: list[float] = field(default_factory=list)
    n_iter: int = 0
    converged: bool = False


def fit_map_em(z: np.ndarray, k: int, priors: SmmPriors | None = None,
               seed=0, max_iter: int = 200, tol: float = 1e-6,
               v_min: float = 1.0, v_max: float = 200.0,
               init_params: SmmParams | None = None) -> FitResult:
    """Alternate E and M steps until the MAP objective stalls.

    Components that lose essentially all responsibility are re-seeded at the
    point with the lowest current mixture density.
    """
    z = np.asarray(z, dtype=np.float64)
    n, d = z.shape
    if k > n:
        raise ValueError("need at least as many points as components")
    priors = (priors or SmmPriors()).resolved(z)
    priors.validate(d)
    params = init_params if init_params is not None else init_smm(z, k, seed)
    trace: list[float] = []
    stats = e_step(z, params)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        # empty-component rescue before the M-step
        n_k = stats.resp.sum(axis=0)
        for comp in np.nonzero(n_k < EMPTY_COMPONENT_FRACTION * n)[0]:
            dens = smm_pdf(z, params)
            params.means[comp] = z[int(np.argmin(dens))]
            stats = e_step(z, params)
        params = m_step(z, stats, priors, dofs_old=params.dofs,
                        v_min=v_min, v_max=v_max)
        stats = e_step(z, params)
        trace.append(log_posterior(z, params, priors))
        if len(trace) >= 2 and abs(trace[-1] - trace[-2]) < tol:
            converged = True
            break
    return FitResult(params=params, stats=stats, objective_trace=trace,
                     n_iter=it, converged=converged)


# -- autodiff bridge ---------------------------------------------------------------

LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class SmmRaw:
    """Unconstrained reparameterization of the mixture for gradient steps.

    weights via softmax of logits; covariance via the Cholesky factor of the
    precision matrix (strictly-lower part free, log-diagonal); degrees of
    freedom via a sigmoid map onto [v_min, v_max].
    """

    params: ParamSet
    v_min: float
    v_max: float

    @property
    def n_components(self) -> int:
        return self.params["means"].shape[0]

    @property
    def dim(self) -> int:
        return self.params["means"].shape[1]


def smm_to_raw(params: SmmParams, v_min: float = 1.0, v_max: float = 200.0) -> SmmRaw:
    k, d = params.means.shape
    tril = np.zeros((k, d, d))
    logdiag = np.zeros((k, d))
    for i in range(k):
        prec = np.linalg.inv(params.covs[i])
        prec = 0.5 * (prec + prec.T)
        a = np.linalg.cholesky(prec)
        tril[i] = np.tril(a, -1)
        logdiag[i] = np.log(np.diag(a))
    frac = np.clip((params.dofs - v_min) / (v_max - v_min), 1e-9, 1.0 - 1e-9)
    ps = ParamSet()
    ps.add("logits", np.log(params.weights))
    ps.add("means", params.means.copy())
    ps.add("prec_tril", tril)
    ps.add("prec_logdiag", logdiag)
    ps.add("dof_raw", np.log(frac / (1.0 - frac)))
    return SmmRaw(params=ps, v_min=v_min, v_max=v_max)


def raw_to_smm(raw: SmmRaw) -> SmmParams:
    k, d = raw.params["means"].shape
    logits = raw.params["logits"].data
    weights = np.exp(logits - logits.max())
    weights = weights / weights.sum()
    covs = np.empty((k, d, d))
    for i in range(k):
        a = np.tril(raw.params["prec_tril"].data[i], -1) + np.diag(
            np.exp(raw.params["prec_logdiag"].data[i]))
        a_inv = np.linalg.inv(a)
        covs[i] = a_inv.T @ a_inv
        covs[i] = 0.5 * (covs[i] + covs[i].T)
    frac = 1.0 / (1.0 + np.exp(-raw.params["dof_raw"].data))
    dofs = raw.v_min + (raw.v_max - raw.v_min) * frac
    return SmmParams(weights=weights, means=raw.params["means"].data.copy(),
                     covs=covs, dofs=dofs)


def log_scores_tensor(z: Tensor, raw: SmmRaw) -> Tensor:
    """(N, K) tensor of log(pi_k) + log t_k(z_i), differentiable in z and in
    the raw mixture parameters."""
    k, d = raw.n_components, raw.dim
    log_pi = ag.add(raw.params["logits"],
                    ag.mul(ag.logsumexp(raw.params["logits"], axis=0, keepdims=True), -1.0))
    strict = Tensor(np.tril(np.ones((d, d)), -1))
    diag_mask = Tensor(np.eye(d))
    a = ag.add(ag.mul(raw.params["prec_tril"], strict),
               ag.mul(diag_mask, ag.reshape(ag.exp(raw.params["prec_logdiag"]), (k, 1, d))))
    # y_{ikd} = z_i - mu_k ; maha_{ik} = || y_{ik} @ A_k ||^2
    zs = ag.reshape(z, (z.shape[0], 1, 1, d))
    mu = ag.reshape(raw.params["means"], (1, k, 1, d))
    y = ag.add(zs, ag.mul(mu, -1.0))                       # (N, K, 1, D)
    u = ag.matmul(y, a)                                    # (N, K, 1, D)
    maha = ag.reshape(ag.tsum(ag.mul(u, u), axis=3), (z.shape[0], k))
    half_logdet_prec = ag.tsum(raw.params["prec_logdiag"], axis=1)  # (K,)
    frac = ag.sigmoid(raw.params["dof_raw"])
    dof = ag.add(ag.mul(frac, raw.v_max - raw.v_min), raw.v_min)    # (K,)
    half_dpd = ag.mul(ag.add(dof, float(d)), 0.5)
    log_norm = ag.add(ag.add(ag.gammaln(half_dpd),
                             ag.mul(ag.gammaln(ag.mul(dof, 0.5)), -1.0)),
                      ag.add(ag.mul(ag.log(dof), -0.5 * d), half_logdet_prec))
    log_norm = ag.add(log_norm, -0.5 * d * np.log(np.pi))
    ratio = ag.mul(ag.mul(maha, ag.reshape(ag.power(dof, -1.0), (1, k))), 1.0)
    log_kernel = ag.mul(ag.log(ag.add(ratio, 1.0)), -1.0)
    log_kernel = ag.mul(ag.mul(log_kernel, ag.reshape(half_dpd, (1, k))), 1.0)
    return ag.add(ag.add(ag.reshape(log_norm, (1, k)), log_kernel),
                  ag.reshape(log_pi, (1, k)))


# -- checkpoint -------------------------------------------------------------------------

def save_smm(path, params: SmmParams) -> None:
    from .io import write_float64_block
    k, d = params.means.shape
    with open(path, "wb") as fh:
        fh.write(f"SMM1 {k} {d}\n".encode("ascii"))
        chols = np.stack([np.linalg.cholesky(params.covs[i]) for i in range(k)])
        write_float64_block(fh, [params.weights, params.means, chols, params.dofs])


def load_smm(path) -> SmmParams:
    from .io import FormatError, read_float64_block
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").strip().split()
        if len(header) != 3 or header[0] != "SMM1":
            raise FormatError(f"{path}: bad SMM1 header")
        k, d = int(header[1]), int(header[2])
        weights, means, chols, dofs = read_float64_block(
            fh, [(k,), (k, d), (k, d, d), (k,)])
    covs = np.stack([chols[i] @ chols[i].T for i in range(k)])
    return SmmParams(weights=weights, means=means, covs=covs, dofs=dofs)
