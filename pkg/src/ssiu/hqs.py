"""Classical half-quadratic-splitting solver for structurally constrained sparse coding.

Solves

    min_alpha ||y - H Phi alpha||_2^2 + lam ||z||_1 + gamma ||alpha - beta||_1 + eta ||z - alpha||_2

with the alternating updates

    z     <- S_tau1(alpha)
    beta  <- S_tau2(alpha)
    v     <- w1 z + w2 K^T (y - K alpha) / c + alpha          (K = H Phi)
    alpha <- S_tau3(v - beta) + beta

This is the image-space template that the network stages unfold. Everything here
is plain numpy and pure.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np


class NumericalFailure(RuntimeError):
    """Raised when an iterate becomes non-finite or a solver fails to converge."""

    def __init__(self, message: str, iteration: Optional[int] = None):
        super().__init__(message if iteration is None else f"{message} (iteration {iteration})")
        self.iteration = iteration


def soft_threshold(x, tau: float) -> np.ndarray:
    if tau < 0:
        raise ValueError(f"soft-threshold level must be non-negative, got {tau}")
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.maximum(np.abs(x) - tau, 0.0)


@dataclass(frozen=True)
class HQSProblem:
    y: np.ndarray
    H: np.ndarray
    Phi: np.ndarray
    lambda_: float = 0.1
    gamma: float = 0.0
    eta: float = 1.0

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        H = np.atleast_2d(np.asarray(self.H, dtype=np.float64))
        Phi = np.atleast_2d(np.asarray(self.Phi, dtype=np.float64))
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "Phi", Phi)
        if H.shape[0] != y.shape[0]:
            raise ValueError(f"H has {H.shape[0]} rows but y has length {y.shape[0]}")
        if H.shape[1] != Phi.shape[0]:
            raise ValueError(f"H is {H.shape} but Phi is {Phi.shape}; H @ Phi is undefined")
        if self.lambda_ < 0 or self.gamma < 0:
            raise ValueError("lambda_ and gamma must be non-negative")
        if not self.eta > 0:
            raise ValueError("eta must be positive")

    @property
    def K(self) -> np.ndarray:
        return self.H @ self.Phi

    @property
    def n_atoms(self) -> int:
        return self.Phi.shape[1]


BetaEstimator = Callable[[np.ndarray, "HQSParams"], np.ndarray]


def beta_soft_threshold(alpha: np.ndarray, params: "HQSParams") -> np.ndarray:
    return soft_threshold(alpha, params.tau2)


def beta_zero(alpha: np.ndarray, params: "HQSParams") -> np.ndarray:
    return np.zeros_like(alpha)


def beta_constant(beta0) -> BetaEstimator:
    beta0 = np.asarray(beta0, dtype=np.float64)

    def rule(alpha, params):
        return np.broadcast_to(beta0, alpha.shape).copy()

    return rule


@dataclass(frozen=True)
class HQSParams:
    tau1: float
    tau2: float
    tau3: float
    c: float
    omega1: float = 0.5
    omega2: float = 1.0
    beta_estimator: BetaEstimator = field(default=beta_soft_threshold, compare=False)
    max_iters: int = 500
    tol: float = 1e-8

    def __post_init__(self):
        if min(self.tau1, self.tau2, self.tau3) < 0:
            raise ValueError("thresholds must be non-negative")
        if not self.c > 0:
            raise ValueError("c must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be a positive integer")
        if not self.tol > 0:
            raise ValueError("tol must be positive")

    @classmethod
    def default(cls, problem: HQSProblem, **overrides) -> "HQSParams":
        """Data-scaled defaults: thresholds at 1% of ||K^T y||_inf, c at 1.05 sigma_max(K)^2."""
        K = problem.K
        tau = 0.01 * float(np.max(np.abs(K.T @ problem.y))) if K.size else 0.0
        kwargs = dict(tau1=tau, tau2=tau, tau3=tau, c=1.05 * spectral_norm_sq(K))
        kwargs.update(overrides)
        return cls(**kwargs)


@dataclass(frozen=True)
class HQSState:
    alpha: np.ndarray
    beta: np.ndarray
    z: np.ndarray
    v: np.ndarray
    iteration: int = 0
    objective: float = float("nan")

    def __post_init__(self):
        d = np.shape(self.alpha)[0]
        for name in ("beta", "z", "v"):
            if np.shape(getattr(self, name)) != (d,):
                raise ValueError(f"{name} must have length {d}")


def spectral_norm_sq(K: np.ndarray, n_iter: int = 50, seed: int = 0) -> float:
    """Largest eigenvalue of K^T K by power iteration."""
    if K.size == 0:
        return 0.0
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(K.shape[1])
    x /= np.linalg.norm(x)
    sigma2 = 0.0
    for _ in range(n_iter):
        x = K.T @ (K @ x)
        sigma2 = float(np.linalg.norm(x))
        if sigma2 == 0.0:
            return 0.0
        x /= sigma2
    return sigma2


def _check_len(name, vec, d):
    vec = np.asarray(vec, dtype=np.float64).reshape(-1)
    if vec.shape[0] != d:
        raise ValueError(f"{name} has length {vec.shape[0]}, expected {d}")
    return vec


def objective(problem: HQSProblem, alpha, beta, z) -> float:
    d = problem.n_atoms
    alpha = _check_len("alpha", alpha, d)
    beta = _check_len("beta", beta, d)
    z = _check_len("z", z, d)
    r = problem.y - problem.K @ alpha
    return float(
        r @ r
        + problem.lambda_ * np.abs(z).sum()
        + problem.gamma * np.abs(alpha - beta).sum()
        + problem.eta * np.linalg.norm(z - alpha)
    )


def initial_state(problem: HQSProblem, alpha0) -> HQSState:
    alpha0 = _check_len("alpha0", alpha0, problem.n_atoms)
    zeros = np.zeros_like(alpha0)
    return HQSState(
        alpha=alpha0.copy(),
        beta=zeros.copy(),
        z=zeros.copy(),
        v=zeros.copy(),
        iteration=0,
        objective=objective(problem, alpha0, alpha0, alpha0),
    )


def hqs_step(problem: HQSProblem, params: HQSParams, state: HQSState, K: Optional[np.ndarray] = None) -> HQSState:
    if K is None:
        K = problem.K
    alpha = _check_len("state.alpha", state.alpha, problem.n_atoms)
    z = soft_threshold(alpha, params.tau1)
    beta = np.asarray(params.beta_estimator(alpha, params), dtype=np.float64)
    v = params.omega1 * z + params.omega2 * (K.T @ (problem.y - K @ alpha)) / params.c + alpha
    alpha_new = soft_threshold(v - beta, params.tau3) + beta
    return HQSState(
        alpha=alpha_new,
        beta=beta,
        z=z,
        v=v,
        iteration=state.iteration + 1,
        objective=objective(problem, alpha_new, beta, z),
    )


def hqs_solve(problem: HQSProblem, params: HQSParams, alpha0) -> tuple[HQSState, list[float]]:
    """Iterate `hqs_step` until max_iters or ||alpha' - alpha||_2 < tol.

    Returns the final state and the per-iteration objective values.
    """
    K = problem.K
    state = initial_state(problem, alpha0)
    trace: list[float] = []
    for _ in range(params.max_iters):
        new = hqs_step(problem, params, state, K=K)
        if not (np.all(np.isfinite(new.alpha)) and np.isfinite(new.objective)):
            raise NumericalFailure("non-finite iterate in hqs_solve", iteration=new.iteration)
        trace.append(new.objective)
        delta = np.linalg.norm(new.alpha - state.alpha)
        state = new
        if delta < params.tol:
            break
    return state, trace


def lasso_params(problem: HQSProblem, **overrides) -> HQSParams:
    """Parameters under which `hqs_solve` reduces to ISTA on ||y - K a||^2 + lambda_ ||a||_1."""
    c = 1.05 * spectral_norm_sq(problem.K)
    kwargs = dict(
        tau1=0.0,
        tau2=0.0,
        tau3=problem.lambda_ / (2.0 * c),
        c=c,
        omega1=0.0,
        omega2=1.0,
        beta_estimator=beta_zero,
    )
    kwargs.update(overrides)
    return HQSParams(**kwargs)


def _lasso_gap(K, y, alpha, lam):
    r = y - K @ alpha
    primal = r @ r + lam * np.abs(alpha).sum()
    # dual of 0.5||r||^2 + (lam/2)||a||_1, scaled by 2
    mu = lam / 2.0
    corr = np.max(np.abs(K.T @ r)) if K.size else 0.0
    scale = max(1.0, corr / mu)
    theta = r / scale
    dual = y @ y - (y - theta) @ (y - theta)
    return primal - dual


def lasso_cd_oracle(K, y, lam: float, tol: float = 1e-10, max_sweeps: int = 200_000) -> np.ndarray:
    """Cyclic coordinate descent for min ||y - K a||_2^2 + lam ||a||_1.

    Stops when the duality gap is below `tol` (for lam > 0) or the gradient
    vanishes to `tol` (lam == 0).
    """
    if lam < 0:
        raise ValueError("lam must be non-negative")
    K = np.asarray(K, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    d = K.shape[1]
    col_sq = (K**2).sum(axis=0)
    alpha = np.zeros(d)
    r = y.copy()
    for sweep in range(max_sweeps):
        for j in range(d):
            if col_sq[j] == 0.0:
                continue
            old = alpha[j]
            rho = K[:, j] @ r + col_sq[j] * old
            new = np.sign(rho) * max(abs(rho) - lam / 2.0, 0.0) / col_sq[j]
            if new != old:
                r -= K[:, j] * (new - old)
                alpha[j] = new
        if sweep % 10 == 9 or sweep == 0:
            if lam > 0:
                if _lasso_gap(K, y, alpha, lam) <= tol:
                    return alpha
            elif np.max(np.abs(K.T @ (y - K @ alpha))) <= tol:
                return alpha
    raise NumericalFailure("coordinate descent did not reach the requested tolerance", iteration=max_sweeps)


def random_instance(seed: int, m: int = 16, n: int = 24, d: int = 32, lam: float = 0.5) -> HQSProblem:
    """Seeded synthetic instance: Gaussian H and unit-norm dictionary atoms, sparse ground truth."""
    rng = np.random.default_rng(seed)
    H = rng.standard_normal((m, n)) / np.sqrt(m)
    Phi = rng.standard_normal((n, d))
    Phi /= np.linalg.norm(Phi, axis=0, keepdims=True)
    truth = np.zeros(d)
    support = rng.choice(d, size=max(1, d // 8), replace=False)
    truth[support] = rng.standard_normal(support.size) * 2.0
    y = H @ Phi @ truth + 0.01 * rng.standard_normal(m)
    return HQSProblem(y=y, H=H, Phi=Phi, lambda_=lam, gamma=0.0, eta=1.0)


def run_oracle_suite(seed: int = 0, n_instances: int = 20, atol: float = 1e-4):
    """hqs_solve vs lasso_cd_oracle on seeded instances; yields one result dict per instance."""
    for i in range(n_instances):
        inst_seed = seed + i
        problem = random_instance(inst_seed)
        params = lasso_params(problem, max_iters=200_000, tol=1e-13)
        state, trace = hqs_solve(problem, params, np.zeros(problem.n_atoms))
        ref = lasso_cd_oracle(problem.K, problem.y, problem.lambda_)
        err = float(np.max(np.abs(state.alpha - ref)))
        yield {
            "seed": inst_seed,
            "iterations": state.iteration,
            "objective": trace[-1] if trace else state.objective,
            "max_abs_err": err,
            "finite": bool(np.all(np.isfinite(trace))),
            "passed": err <= atol and bool(np.all(np.isfinite(trace))),
        }


__all__ = [
    "HQSParams",
    "HQSProblem",
    "HQSState",
    "NumericalFailure",
    "beta_constant",
    "beta_soft_threshold",
    "beta_zero",
    "hqs_solve",
    "hqs_step",
    "initial_state",
    "lasso_cd_oracle",
    "lasso_params",
    "objective",
    "random_instance",
    "run_oracle_suite",
    "soft_threshold",
    "spectral_norm_sq",
]
