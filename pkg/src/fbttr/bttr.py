"""Deflation-based block-term tensor regression.

Training alternates block extraction on the predictor/response residuals
with rank-one response deflation: each block contributes a unit score
vector t_k, a response loading q_k and a coefficient d_k = u_k' t_k, and
is subtracted from both residuals before the next extraction.  Prediction
is two matrix products, y_hat = unfold(x, 1) @ W @ Z, where the columns of
W are built so that on the training tensor they reproduce the extracted
score vectors exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .sparse_tucker import AceError, HyperGrid, ace
from .tensor import (
    as_matrix,
    as_tensor,
    frobenius_norm,
    kron_factors,
    multilinear_product,
    unfold,
    vec,
)

__all__ = [
    "FitError",
    "FitConfig",
    "NormStats",
    "Block",
    "BttrModel",
    "fit",
    "predict",
    "residual_trace",
    "select_k_cv",
    "materialize_predictor",
]


class FitError(RuntimeError):
    """Model fitting could not produce a single block."""


@dataclass
class FitConfig:
    """Training knobs: block budget, residual stop threshold, hyperparameter grid."""

    max_blocks: int = 5
    epsilon: float = 1e-8
    grid: HyperGrid = field(default_factory=HyperGrid)
    rank_cap: int = 10

    def __post_init__(self):
        if self.max_blocks < 1:
            raise ValueError(f"max_blocks must be >= 1, got {self.max_blocks}")
        if not (self.epsilon > 0):
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")


@dataclass
class NormStats:
    """Per-feature and per-response z-score statistics from the training split."""

    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray

    @classmethod
    def from_training(cls, x, y, scale_y: bool = True) -> "NormStats":
        x = as_tensor(x, min_order=2)
        y = as_matrix(y)
        x_std = x.std(axis=0)
        y_std = y.std(axis=0) if scale_y else np.ones(y.shape[1])
        y_mean = y.mean(axis=0) if scale_y else np.zeros(y.shape[1])
        return cls(
            x_mean=x.mean(axis=0),
            x_std=np.where(x_std > 0, x_std, 1.0),
            y_mean=y_mean,
            y_std=np.where(y_std > 0, y_std, 1.0),
        )

    def apply_x(self, x) -> np.ndarray:
        return (as_tensor(x, min_order=2) - self.x_mean) / self.x_std

    def apply_y(self, y) -> np.ndarray:
        return (as_matrix(y) - self.y_mean) / self.y_std

    def invert_y(self, scores) -> np.ndarray:
        return as_matrix(scores) * self.y_std + self.y_mean


@dataclass
class Block:
    """One extracted component.

    ``core`` is the block projection of the predictor residual (mode-1
    extent 1), ``score_core`` the scaled core whose vectorisation maps the
    factor-projected residual onto the unit score vector, ``q`` the unit
    response loading and ``d`` the regression coefficient.  ``t`` keeps the
    training score for diagnostics; a block aggregated from several parties
    carries no t.
    """

    core: np.ndarray
    factors: list
    q: np.ndarray
    d: float
    score_core: np.ndarray
    t: Optional[np.ndarray] = None

    @property
    def feature_ranks(self) -> tuple:
        return tuple(f.shape[1] for f in self.factors)


@dataclass
class BttrModel:
    blocks: list
    w: np.ndarray
    z: np.ndarray
    input_shape: tuple
    normalization: Optional[NormStats] = None
    trace: Optional[list] = None

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    @property
    def n_responses(self) -> int:
        return self.z.shape[1]

    def predict(self, x_test) -> np.ndarray:
        return predict(self, x_test)


def materialize_predictor(blocks, input_shape) -> tuple:
    """Build the prediction matrices (W, Z) from a block sequence.

    Column k of W maps the unfolded predictor onto score k.  The raw score
    map of block k is exact on the residual E_k it was extracted from, so
    earlier blocks' deflation loadings are projected back out to make the
    map exact on the original tensor:

        w_k = raw_k - sum_{j<k} (g_j' raw_k) w_j,   g_j = kron(P_j) vec(core_j)

    Row k of Z is d_k q_k'.
    """
    d_total = int(np.prod(input_shape))
    k = len(blocks)
    m = blocks[0].q.shape[0] if k else 0
    w = np.zeros((d_total, k))
    z = np.zeros((k, m))
    loadings = np.zeros((d_total, k))
    for i, b in enumerate(blocks):
        kron = kron_factors(b.factors)
        raw = kron @ vec(b.score_core)
        loadings[:, i] = kron @ vec(b.core)
        col = raw.copy()
        for j in range(i):
            col -= float(loadings[:, j] @ raw) * w[:, j]
        w[:, i] = col
        z[i, :] = b.d * b.q.ravel()
    return w, z


def _deflation_map(block: Block) -> dict:
    fmap = {1: block.t}
    fmap.update({n + 2: f for n, f in enumerate(block.factors)})
    return fmap


def fit(x, y, cfg: FitConfig, normalization: Optional[NormStats] = None,
        keep_trace: bool = True) -> BttrModel:
    """Fit a block-term tensor regression on (x, y).

    Extracts up to ``cfg.max_blocks`` blocks, stopping early once either
    residual norm falls to ``cfg.epsilon``; at least one block is always
    extracted.  A failed extraction on the first block raises
    :class:`FitError`; on a later block it truncates the model.

    ``x`` and ``y`` are used as given; callers that z-score their data can
    pass the statistics in ``normalization`` so they travel with the model.
    """
    x = as_tensor(x, min_order=2)
    y = as_matrix(y)
    if y.shape[0] != x.shape[0]:
        raise ValueError(f"sample count mismatch: x has {x.shape[0]}, y has {y.shape[0]}")
    if not np.isfinite(y).all():
        raise ValueError("response contains non-finite values")
    if not np.isfinite(x).all():
        raise ValueError("predictor contains non-finite values")

    e = x.copy()
    f = y.copy()
    blocks = []
    trace = [(frobenius_norm(e), frobenius_norm(f))]
    for k in range(cfg.max_blocks):
        if k > 0 and (trace[-1][0] <= cfg.epsilon or trace[-1][1] <= cfg.epsilon):
            break
        try:
            a = ace(e, f, cfg.grid, rank_cap=cfg.rank_cap)
        except AceError as err:
            if k == 0:
                raise FitError(f"no block could be extracted: {err}") from err
            break
        q = a.q / np.linalg.norm(a.q)
        u = f @ q
        d = float((u.T @ a.t).item())
        block = Block(core=a.block_core, factors=a.factors, q=q, d=d,
                      score_core=a.score_core, t=a.t)
        e = e - multilinear_product(block.core, _deflation_map(block))
        f = f - d * (block.t @ q.T)
        blocks.append(block)
        trace.append((frobenius_norm(e), frobenius_norm(f)))

    w, z = materialize_predictor(blocks, x.shape[1:])
    return BttrModel(
        blocks=blocks,
        w=w,
        z=z,
        input_shape=tuple(x.shape[1:]),
        normalization=normalization,
        trace=trace if keep_trace else None,
    )


def predict(model: BttrModel, x_test) -> np.ndarray:
    """Predicted responses, one row per test sample.

    ``x_test`` must already be in the model's training feature space, i.e.
    normalized with the model's statistics when the training data was.
    """
    x_test = as_tensor(x_test, min_order=2)
    if tuple(x_test.shape[1:]) != tuple(model.input_shape):
        raise ValueError(
            f"test tensor feature shape {x_test.shape[1:]} does not match model {model.input_shape}"
        )
    return unfold(x_test, 1) @ model.w @ model.z


def residual_trace(model: BttrModel):
    """Per-block (E, F) residual norms, initial state first."""
    if model.trace is None:
        raise ValueError("model was fitted without trace retention")
    return list(model.trace)


def _prefix_scores(model: BttrModel, x, k: int) -> np.ndarray:
    return unfold(as_tensor(x, min_order=2), 1) @ model.w[:, :k] @ model.z[:k, :]


def select_k_cv(x, y, cfg: FitConfig, folds: int, task: str = "regression") -> int:
    """Pick the block count by contiguous-fold cross-validation.

    Folds are contiguous sample ranges (the data may be a time series, so
    no shuffling).  Scores are mean Pearson correlation per response for
    regression and ROC-AUC for binary tasks; ties go to the smaller K.
    """
    from .metrics import pearson_r, roc_auc

    x = as_tensor(x, min_order=2)
    y = as_matrix(y)
    n = x.shape[0]
    if folds < 2:
        raise ValueError(f"folds must be >= 2, got {folds}")
    if n < folds:
        raise ValueError(f"need at least {folds} samples, got {n}")

    fold_indices = np.array_split(np.arange(n), folds)
    scores = np.full((folds, cfg.max_blocks), -np.inf)
    for fi, val_idx in enumerate(fold_indices):
        train_idx = np.setdiff1d(np.arange(n), val_idx)
        model = fit(x[train_idx], y[train_idx], cfg, keep_trace=False)
        for k in range(1, cfg.max_blocks + 1):
            pred = _prefix_scores(model, x[val_idx], min(k, model.n_blocks))
            try:
                if task == "binary":
                    scores[fi, k - 1] = roc_auc(pred[:, 0], y[val_idx, 0])
                else:
                    cols = [pearson_r(pred[:, m], y[val_idx, m]) for m in range(y.shape[1])]
                    scores[fi, k - 1] = float(np.mean(cols))
            except ValueError:
                continue
    mean_scores = scores.mean(axis=0)
    if not np.isfinite(mean_scores).any():
        raise FitError("no fold produced a valid validation score")
    best = float(np.max(mean_scores))
    for k in range(cfg.max_blocks):
        if mean_scores[k] >= best - 1e-12:
            return k + 1
    return int(np.argmax(mean_scores)) + 1
