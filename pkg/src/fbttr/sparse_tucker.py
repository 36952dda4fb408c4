"""Sparse Tucker decomposition of a sample-contracted covariance tensor.

The decomposition targets the cross-covariance C between a samples-first
predictor tensor X and a response matrix Y.  A target reconstruction SNR
(in dB) controls core shrinkage through a bisection-derived soft threshold,
and a percentage threshold tau rejects low-contribution components per
mode.  A small BIC-scored grid search over (SNR, tau) extracts one
maximally correlated latent block together with its unit-norm score
vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .tensor import (
    as_matrix,
    as_tensor,
    cross_covariance,
    frobenius_norm,
    multilinear_product,
    unfold,
    vec,
)

DEFAULT_RANK_CAP = 10

__all__ = [
    "DecompositionError",
    "AceError",
    "HyperGrid",
    "SparseTuckerResult",
    "AceResult",
    "hooi_init",
    "lambda_from_snr",
    "soft_threshold",
    "prune",
    "f_mpstd",
    "f_mpstd_cov",
    "bic_score",
    "collapse_response_mode",
    "finalize_block",
    "ace",
]


class DecompositionError(ValueError):
    """A decomposition could not be computed (degenerate or invalid input)."""


class AceError(RuntimeError):
    """Block extraction failed for every hyperparameter candidate."""


@dataclass
class HyperGrid:
    """Grid of candidate target SNRs (dB) and pruning thresholds tau."""

    snr_values: tuple = tuple(float(s) for s in range(1, 51))
    tau_values: tuple = tuple(float(t) for t in range(90, 101))

    def __post_init__(self):
        self.snr_values = tuple(float(s) for s in self.snr_values)
        self.tau_values = tuple(float(t) for t in self.tau_values)
        for name, vals in (("snr_values", self.snr_values), ("tau_values", self.tau_values)):
            if not vals:
                raise ValueError(f"{name} must be nonempty")
            if any(b <= a for a, b in zip(vals, vals[1:])):
                raise ValueError(f"{name} must be strictly increasing")


@dataclass
class SparseTuckerResult:
    """Core, response loadings q and orthonormal mode factors of one decomposition.

    ``core`` has shape (R_1, R_2, ..., R_N) where mode 1 is the response
    mode (paired with ``q``, an M x R_1 matrix) and ``factors[n-2]`` is the
    I_n x R_n loading matrix of mode n.
    """

    core: np.ndarray
    q: np.ndarray
    factors: list
    snr: float
    tau: float
    converged: bool = True

    @property
    def ranks(self) -> tuple:
        return tuple(self.core.shape)

    def factor_map(self, transpose: bool = False) -> dict:
        all_mats = [self.q] + list(self.factors)
        return {n + 1: (m.T if transpose else m) for n, m in enumerate(all_mats)}

    def reconstruct(self) -> np.ndarray:
        return multilinear_product(self.core, self.factor_map())


@dataclass
class AceResult:
    """One extracted block: maximally correlated latent component of (X, Y).

    ``t`` is the unit-norm sample score vector, ``block_core`` the
    projection of X onto (t, factors), and ``score_core`` the core of the
    linear map that reproduces t from the factor-projected X, scaled so no
    separate normalisation constant is needed.
    """

    block_core: np.ndarray
    q: np.ndarray
    t: np.ndarray
    factors: list
    snr_star: float
    tau_star: float
    bic: float
    score_core: np.ndarray = None

    @property
    def ranks(self) -> tuple:
        return tuple(self.block_core.shape)


def _fix_signs(u: np.ndarray) -> np.ndarray:
    # deterministic sign convention: largest-magnitude entry positive
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs


def _leading_vectors(m: np.ndarray, r: int) -> np.ndarray:
    u, _, _ = np.linalg.svd(m, full_matrices=False)
    return _fix_signs(u[:, :r])


def _project_core(c: np.ndarray, mats: list) -> np.ndarray:
    return multilinear_product(c, {n + 1: m.T for n, m in enumerate(mats)})


def _others_projection(c: np.ndarray, mats: list, skip: int) -> np.ndarray:
    return multilinear_product(c, {n + 1: m.T for n, m in enumerate(mats) if n != skip})


def hooi_init(c, max_ranks) -> SparseTuckerResult:
    """Orthogonal Tucker factors of ``c`` by higher-order orthogonal iteration.

    Factors start from the leading left singular vectors of each mode
    unfolding and are refined by alternating optimisation until the core
    norm changes by less than 1e-8 or 100 sweeps elapse.
    """
    c = as_tensor(c)
    ranks = [int(r) for r in max_ranks]
    if len(ranks) != c.ndim:
        raise DecompositionError(f"need {c.ndim} ranks, got {len(ranks)}")
    total = int(np.prod(c.shape))
    for n, (ext, r) in enumerate(zip(c.shape, ranks)):
        if r < 1:
            raise DecompositionError("all ranks must be >= 1")
        if r > ext:
            raise DecompositionError(f"rank {r} exceeds extent {ext}")
        # a mode factor cannot have more independent columns than the
        # mode unfolding has columns
        ranks[n] = min(r, total // ext)
    if frobenius_norm(c) == 0.0:
        raise DecompositionError("cannot decompose an all-zero tensor")

    mats = [_leading_vectors(unfold(c, n + 1), ranks[n]) for n in range(c.ndim)]
    prev_norm = None
    for _ in range(100):
        for n in range(c.ndim):
            proj = _others_projection(c, mats, skip=n)
            mats[n] = _leading_vectors(unfold(proj, n + 1), ranks[n])
        core_norm = frobenius_norm(_project_core(c, mats))
        if prev_norm is not None and abs(core_norm - prev_norm) < 1e-8:
            break
        prev_norm = core_norm
    core = _project_core(c, mats)
    return SparseTuckerResult(core=core, q=mats[0], factors=mats[1:], snr=math.inf, tau=100.0)


def lambda_from_snr(c, core, target_snr: float) -> float:
    """Soft-threshold level hitting a target reconstruction SNR, by bisection.

    Assumes ``core`` is the orthogonal projection of ``c`` onto orthonormal
    factors, so shrinking the core by lam changes the squared residual by
    sum(min(|g|, lam)^2).  Returns 0 when even the unshrunk core cannot
    reach the target.
    """
    if not math.isfinite(target_snr) or target_snr <= 0:
        raise ValueError(f"target SNR must be finite and positive, got {target_snr}")
    c = as_tensor(c)
    core = as_tensor(core)
    g = np.abs(core.ravel())
    c_sq = float(np.dot(c.ravel(), c.ravel()))
    if c_sq == 0.0:
        raise ValueError("reference tensor is all zero")
    base = max(c_sq - float(np.dot(g, g)), 0.0)

    def snr_at(lam: float) -> float:
        clipped = np.minimum(g, lam)
        resid = base + float(np.dot(clipped, clipped))
        if resid <= 0.0:
            return math.inf
        return 10.0 * math.log10(c_sq / resid)

    if snr_at(0.0) <= target_snr:
        return 0.0
    lo, hi = 0.0, float(g.max())
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        s = snr_at(mid)
        if abs(s - target_snr) <= 0.1:
            return mid
        if s > target_snr:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def soft_threshold(core, lam: float) -> np.ndarray:
    """Elementwise shrinkage sgn(g) * max(|g| - lam, 0)."""
    if lam < 0:
        raise ValueError(f"shrinkage level must be >= 0, got {lam}")
    core = as_tensor(core)
    return np.sign(core) * np.maximum(np.abs(core) - lam, 0.0)


def _retained_indices(core: np.ndarray, mode: int, tau: float) -> np.ndarray:
    g = np.abs(unfold(core, mode))
    contrib = g.sum(axis=1)
    total = contrib.sum()
    threshold = (100.0 - tau) / 100.0
    if total > 0:
        keep = np.where(contrib / total > threshold)[0]
    else:
        keep = np.array([], dtype=int)
    if keep.size == 0:
        keep = np.array([int(np.argmax(contrib))])
    return keep


def prune(result: SparseTuckerResult, tau: float) -> SparseTuckerResult:
    """Drop components contributing no more than (100 - tau)% of mode energy.

    Contributions are absolute row sums of each mode unfolding of the core.
    At least the single highest-contribution component per mode is always
    retained, so the result never loses a mode entirely.
    """
    if not 0.0 <= tau <= 100.0:
        raise ValueError(f"tau must lie in [0, 100], got {tau}")
    core = result.core
    keep_sets = [_retained_indices(core, n + 1, tau) for n in range(core.ndim)]
    for n, keep in enumerate(keep_sets):
        core = np.take(core, keep, axis=n)
    q = result.q[:, keep_sets[0]]
    factors = [f[:, keep_sets[n + 1]] for n, f in enumerate(result.factors)]
    return replace(result, core=np.ascontiguousarray(core), q=q, factors=factors)


def _hooi_refresh(c: np.ndarray, result: SparseTuckerResult) -> SparseTuckerResult:
    # one alternating pass at the current (possibly pruned) ranks
    ranks = result.ranks
    mats = [result.q] + list(result.factors)
    for n in range(c.ndim):
        proj = _others_projection(c, mats, skip=n)
        mats[n] = _leading_vectors(unfold(proj, n + 1), ranks[n])
    core = _project_core(c, mats)
    return replace(result, core=core, q=mats[0], factors=mats[1:])


def f_mpstd_cov(
    c,
    snr: float,
    tau: float,
    rank_cap: int = DEFAULT_RANK_CAP,
    max_sweeps: int = 200,
    tol: float = 1e-6,
    init: SparseTuckerResult = None,
) -> SparseTuckerResult:
    """Sparse Tucker decomposition of a covariance tensor ``c``.

    Starts from HOOI at full ranks capped at ``rank_cap`` per mode, then
    alternates SNR-derived soft thresholding of the core with tau pruning
    and an orthogonal factor refresh until the sparse core stabilises
    (relative change below ``tol``) or ``max_sweeps`` elapse.  A
    non-converged run returns the last iterate with ``converged=False``.
    """
    c = as_tensor(c)
    if max_sweeps < 1:
        raise ValueError("max_sweeps must be >= 1")
    if init is None:
        ranks = [min(ext, rank_cap) for ext in c.shape]
        res = hooi_init(c, ranks)
    else:
        res = replace(init)
    res = replace(res, snr=float(snr), tau=float(tau))
    prev_core = None
    for _ in range(max_sweeps):
        lam = lambda_from_snr(c, res.core, snr)
        sparse = replace(res, core=soft_threshold(res.core, lam))
        pruned = prune(sparse, tau)
        if prev_core is not None and prev_core.shape == pruned.core.shape:
            denom = frobenius_norm(prev_core)
            delta = frobenius_norm(pruned.core - prev_core)
            if delta <= tol * denom or (denom == 0.0 and delta == 0.0):
                return replace(pruned, converged=True)
        prev_core = pruned.core
        res = _hooi_refresh(c, pruned)
    return replace(pruned, converged=False)


def f_mpstd(x, y, snr: float, tau: float, **kwargs) -> SparseTuckerResult:
    """Sparse Tucker decomposition of the cross-covariance of (x, y)."""
    return f_mpstd_cov(cross_covariance(x, y), snr, tau, **kwargs)


def bic_score(c, result: SparseTuckerResult) -> float:
    """Information criterion: log residual over core size plus a sparsity penalty.

    The penalty weighs the count of nonzero core entries by log(s)/s where
    s is the total core entry count; the residual is floored at 1e-12 so a
    perfect reconstruction stays finite.
    """
    c = as_tensor(c)
    resid = frobenius_norm(c - result.reconstruct())
    s = result.core.size
    df = int(np.count_nonzero(result.core))
    return math.log(max(resid, 1e-12) / s) + (math.log(s) / s) * df


def collapse_response_mode(res: SparseTuckerResult) -> SparseTuckerResult:
    """Keep the dominant response-mode component so the block maps to a
    single score/loading pair."""
    if res.core.shape[0] == 1:
        return res
    contrib = np.abs(unfold(res.core, 1)).sum(axis=1)
    keep = int(np.argmax(contrib))
    core = np.ascontiguousarray(res.core[keep:keep + 1])
    return replace(res, core=core, q=res.q[:, keep:keep + 1])


def finalize_block(x, res: SparseTuckerResult):
    """Score vector, block core and score map of a response-collapsed decomposition.

    Returns (t, block_core, score_core) where t is the unit-norm score,
    block_core the projection of x onto (t, factors), and score_core the
    core whose vectorisation maps the factor-projected x onto t exactly.
    """
    proj = multilinear_product(x, {n + 2: f.T for n, f in enumerate(res.factors)})
    t_raw = unfold(proj, 1) @ vec(res.core)
    rho = float(np.linalg.norm(t_raw))
    if rho == 0.0 or not math.isfinite(rho):
        raise AceError("degenerate score direction (zero projection)")
    t = (t_raw / rho).reshape(-1, 1)
    factor_map = {1: t.T}
    factor_map.update({n + 2: f.T for n, f in enumerate(res.factors)})
    block_core = multilinear_product(x, factor_map)
    return t, block_core, res.core / rho


def ace(x, y, grid: HyperGrid = None, rank_cap: int = DEFAULT_RANK_CAP) -> AceResult:
    """Extract one maximally correlated block with automatic (SNR, tau) selection.

    Every grid cell is scored by :func:`bic_score`; per SNR the best tau is
    chosen first, then the best SNR, with ties broken toward the smaller
    value in both loops.  The winning decomposition yields the unit-norm
    score vector t and the block core, the projection of x onto
    (t, factors).
    """
    x = as_tensor(x, min_order=2)
    y = as_matrix(y)
    grid = grid or HyperGrid()
    c = cross_covariance(x, y)
    try:
        ranks = [min(ext, rank_cap) for ext in c.shape]
        init = hooi_init(c, ranks)
    except DecompositionError as e:
        raise AceError(f"initial decomposition failed: {e}") from e

    best = None  # (bic, snr, tau, result)
    for snr in grid.snr_values:
        snr_best = None
        for tau in grid.tau_values:
            try:
                res = f_mpstd_cov(c, snr, tau, rank_cap=rank_cap, init=init)
            except (DecompositionError, ValueError):
                continue
            b = bic_score(c, res)
            if snr_best is None or b < snr_best[0]:
                snr_best = (b, snr, tau, res)
        if snr_best is not None and (best is None or snr_best[0] < best[0]):
            best = snr_best
    if best is None:
        raise AceError("every (SNR, tau) candidate failed to decompose")

    bic, snr_star, tau_star, res = best
    res = collapse_response_mode(res)
    t, block_core, score_core = finalize_block(x, res)
    return AceResult(
        block_core=block_core,
        q=res.q,
        t=t,
        factors=list(res.factors),
        snr_star=snr_star,
        tau_star=tau_star,
        bic=bic,
        score_core=score_core,
    )
