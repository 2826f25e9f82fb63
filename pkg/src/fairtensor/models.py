"""Training and prediction for the six recommender variants.

Tensor kinds factor the full user x curator x topic tensor; matrix kinds
slice it by topic and factor each N x M slice independently:

=====  ======  =========================================================
kind   solver  objective
=====  ======  =========================================================
OTC    ALS     masked ridge loss
RTC    GD      masked ridge loss + parity penalty on group score means
FT     GD      masked ridge loss + orthogonality penalty, group one-hot
               features frozen into the last two curator-factor columns
OMC    ALS     per-topic matrix analogue of OTC
RMC    GD      per-topic matrix analogue of RTC
FM     GD      per-topic matrix analogue of FT
=====  ======  =========================================================

The parity penalty is (gamma/2) * (mean0 - mean1)^2 where mean_g is the mean
predicted score over the training cells whose curator belongs to group g.
The orthogonality penalty is (mu/2) * ||S^T U_ns||_F^2 on the non-sensitive
curator-factor columns; after descent those columns are also projected onto
the orthogonal complement of span(S) exactly.  Fairness-aware kinds predict
from the non-sensitive columns only; all other kinds use every column.

Gradient descent is full batch with a constant step size.  Training is
deterministic given (data, config, seed); trained models are immutable.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import SensitiveMap
from .errors import ConfigError
from .tensor_core import (
    FactorModel,
    ObservationTensor,
    _scatter_rows,
    cp_entries,
    cp_entry,
    masked_gradient,
    masked_loss,
    scatter_cell_gradient,
)

__all__ = [
    "MODEL_KINDS",
    "TENSOR_KINDS",
    "MATRIX_KINDS",
    "FAIR_KINDS",
    "TrainConfig",
    "MatrixSlice",
    "TrainedModel",
    "train_otc",
    "train_rtc",
    "train_ft",
    "train_matrix",
    "train_model",
    "predict",
    "predict_cells",
    "score_curators",
    "top_k",
    "parity_penalty",
    "ortho_penalty",
    "remove_span_component",
    "save_checkpoint",
    "load_checkpoint",
]

TENSOR_KINDS = ("OTC", "RTC", "FT")
MATRIX_KINDS = ("OMC", "RMC", "FM")
MODEL_KINDS = TENSOR_KINDS + MATRIX_KINDS
FAIR_KINDS = ("FT", "FM")
GROUP_AWARE_KINDS = ("RTC", "RMC", "FT", "FM")

_INIT_SCALE = 0.1  # i.i.d. uniform [0, 0.1) init suits implicit 0/1 ratings
_MIN_RIDGE = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and model-size settings shared by all six kinds.

    ``parity_weight`` only matters for RTC/RMC, ``ortho_weight`` only for
    FT/FM.  With ``extra_sensitive_cols`` the fairness-aware kinds append the
    two sensitive columns on top of ``rank`` instead of reserving the last
    two of it.
    """

    rank: int = 20
    lam: float = 0.01
    parity_weight: float = 1000.0
    ortho_weight: float = 1.0
    learning_rate: float = 0.002
    max_iters: int = 500
    tol: float = 1e-5
    seed: int = 0
    extra_sensitive_cols: bool = False

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError("rank must be >= 1")
        for name in ("lam", "parity_weight", "ortho_weight", "tol"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be finite and >= 0")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.max_iters < 1:
            raise ConfigError("max_iters must be >= 1")

    def fair_layout(self) -> tuple[int, tuple[int, ...]]:
        """(total columns, sensitive column indices) for FT/FM."""
        total = self.rank + 2 if self.extra_sensitive_cols else self.rank
        if total - 2 < 1:
            raise ConfigError(
                "fairness-aware kinds need rank >= 3 (two sensitive columns "
                "plus at least one free column)"
            )
        return total, (total - 2, total - 1)


@dataclass(frozen=True)
class MatrixSlice:
    """Per-topic factor pair for the matrix kinds."""

    u_users: np.ndarray
    u_curators: np.ndarray
    sensitive_cols: tuple[int, ...] = ()

    def __post_init__(self):
        u = np.asarray(self.u_users, dtype=np.float64)
        v = np.asarray(self.u_curators, dtype=np.float64)
        if u.ndim != 2 or v.ndim != 2 or u.shape[1] != v.shape[1]:
            raise ValueError("slice factors must be 2-D with equal column count")
        object.__setattr__(self, "u_users", u)
        object.__setattr__(self, "u_curators", v)
        object.__setattr__(self, "sensitive_cols", tuple(sorted(int(c) for c in self.sensitive_cols)))

    @property
    def rank(self) -> int:
        return int(self.u_users.shape[1])

    @property
    def nonsensitive_cols(self) -> tuple[int, ...]:
        return tuple(c for c in range(self.rank) if c not in self.sensitive_cols)


@dataclass(frozen=True)
class TrainedModel:
    """Immutable result of one training run.

    Tensor kinds carry one :class:`FactorModel` and a loss trace whose first
    element is the loss at initialisation.  Matrix kinds carry one
    :class:`MatrixSlice` and one trace per topic (empty slices get a zero
    factor pair and an empty trace).
    """

    kind: str
    shape: tuple[int, int, int]
    config: TrainConfig
    factors: FactorModel | None = None
    slices: tuple[MatrixSlice, ...] | None = None
    loss_trace: tuple[float, ...] | None = None
    slice_traces: tuple[tuple[float, ...], ...] | None = None

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.kind in TENSOR_KINDS:
            if self.factors is None or self.loss_trace is None:
                raise ValueError("tensor kinds need factors and a loss trace")
        else:
            if self.slices is None or self.slice_traces is None:
                raise ValueError("matrix kinds need slices and slice traces")
            if len(self.slices) != self.shape[2]:
                raise ValueError("one slice per topic required")

    @property
    def is_fair(self) -> bool:
        return self.kind in FAIR_KINDS


# ---------------------------------------------------------------------------
# shared optimisation machinery


def _check_nonempty(train: ObservationTensor) -> None:
    if train.n_entries == 0:
        raise ConfigError("training set is empty")


def _check_sensitive(train: ObservationTensor, smap: SensitiveMap, where: str) -> None:
    if smap.n_curators != train.n_curators:
        raise ConfigError("sensitive map does not cover every curator")
    groups = smap.groups[train.curators]
    if not np.any(groups == 0) or not np.any(groups == 1):
        raise ConfigError(f"one group has no training cells {where}")


def _effective_ridge(lam: float) -> float:
    if lam > 0:
        return lam
    warnings.warn(
        f"lam=0 makes the ALS normal equations singular; substituting {_MIN_RIDGE}",
        RuntimeWarning,
        stacklevel=3,
    )
    return _MIN_RIDGE


def _converged(prev: float, cur: float, tol: float) -> bool:
    return abs(prev - cur) <= tol * max(abs(prev), 1e-12)


def _descend(
    params: list[np.ndarray],
    loss_fn: Callable[[list[np.ndarray]], float],
    grad_fn: Callable[[list[np.ndarray]], list[np.ndarray]],
    cfg: TrainConfig,
    after_step: Callable[[list[np.ndarray]], None] | None = None,
) -> tuple[list[np.ndarray], list[float]]:
    """Full-batch constant-step gradient descent with a relative-change stop."""
    trace = [loss_fn(params)]
    for _ in range(cfg.max_iters):
        grads = grad_fn(params)
        params = [p - cfg.learning_rate * g for p, g in zip(params, grads)]
        if after_step is not None:
            after_step(params)
        trace.append(loss_fn(params))
        if not math.isfinite(trace[-1]):
            raise ConfigError(
                "gradient descent diverged (non-finite loss); lower "
                "learning_rate or the penalty weight"
            )
        if _converged(trace[-2], trace[-1], cfg.tol):
            break
    return params, trace


def _als_rows(
    target_idx: np.ndarray,
    design: np.ndarray,
    values: np.ndarray,
    n_rows: int,
    ridge: float,
) -> np.ndarray:
    """Exact per-row ridge solve: rows without observations become zero."""
    rank = design.shape[1]
    out = np.zeros((n_rows, rank))
    order = np.argsort(target_idx, kind="stable")
    sorted_idx = target_idx[order]
    starts = np.searchsorted(sorted_idx, np.arange(n_rows + 1))
    eye = ridge * np.eye(rank)
    for row in range(n_rows):
        seg = order[starts[row]:starts[row + 1]]
        if seg.size == 0:
            continue
        z = design[seg]
        out[row] = np.linalg.solve(z.T @ z + eye, z.T @ values[seg])
    return out


def parity_penalty(
    model: FactorModel,
    obs: ObservationTensor,
    groups: np.ndarray,
    weight: float,
) -> tuple[float, tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Statistical-parity penalty and its gradient for the tensor kinds.

    Value is (weight/2) * d^2 with d the difference between the mean
    predicted score of group-0 and group-1 training cells.  The gradient is
    the usual score scatter with per-cell weights weight*d*(+1/n0 | -1/n1).
    """
    cell_groups = groups[obs.curators]
    is0 = cell_groups == 0
    n0 = int(is0.sum())
    n1 = obs.n_entries - n0
    if n0 == 0 or n1 == 0:
        raise ConfigError("parity penalty undefined: one group has no training cells")
    preds = cp_entries(model, obs.users, obs.curators, obs.topics)
    d = float(preds[is0].mean() - preds[~is0].mean())
    w = np.where(is0, weight * d / n0, -weight * d / n1)
    return 0.5 * weight * d * d, scatter_cell_gradient(model, obs, w)


def ortho_penalty(
    u_curators: np.ndarray,
    s: np.ndarray,
    ns_cols: Sequence[int],
    weight: float,
) -> tuple[float, np.ndarray]:
    """Penalty (weight/2) * ||S^T U_ns||_F^2 and its curator-factor gradient.

    The gradient lives on the non-sensitive columns only; sensitive columns
    (frozen to S) get an exact zero block.

    Stability: under constant-step descent this term alone contracts only
    when learning_rate * weight * max(group size) < 2, since the per-column
    Hessian is weight * S S^T.
    """
    cols = np.asarray(list(ns_cols), dtype=np.int64)
    u_ns = u_curators[:, cols]
    m = s.T @ u_ns
    grad = np.zeros_like(u_curators)
    grad[:, cols] = weight * (s @ m)
    return 0.5 * weight * float(np.sum(m * m)), grad


def remove_span_component(u: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Project the columns of ``u`` onto the orthogonal complement of span(s)."""
    coef = np.linalg.solve(s.T @ s, s.T @ u)
    return u - s @ coef


# ---------------------------------------------------------------------------
# tensor kinds


def _init_factors(rng: np.random.Generator, shape: tuple[int, int, int], rank: int):
    return [rng.uniform(0.0, _INIT_SCALE, size=(n, rank)) for n in shape]


def train_otc(train: ObservationTensor, cfg: TrainConfig) -> TrainedModel:
    """Ordinary tensor completion: alternating least squares.

    Each sweep solves every row of every mode exactly (normal equations with
    a ridge), so the loss trace is non-increasing up to numerical noise.
    """
    _check_nonempty(train)
    ridge = _effective_ridge(cfg.lam)
    rng = np.random.default_rng(cfg.seed)
    u1, u2, u3 = _init_factors(rng, train.shape, cfg.rank)

    def loss() -> float:
        return masked_loss(FactorModel(u1, u2, u3), train, ridge)

    trace = [loss()]
    for _ in range(cfg.max_iters):
        u1 = _als_rows(train.users, u2[train.curators] * u3[train.topics],
                       train.values, train.n_users, ridge)
        u2 = _als_rows(train.curators, u1[train.users] * u3[train.topics],
                       train.values, train.n_curators, ridge)
        u3 = _als_rows(train.topics, u1[train.users] * u2[train.curators],
                       train.values, train.n_topics, ridge)
        trace.append(loss())
        if _converged(trace[-2], trace[-1], cfg.tol):
            break
    return TrainedModel(
        kind="OTC",
        shape=train.shape,
        config=cfg,
        factors=FactorModel(u1, u2, u3),
        loss_trace=tuple(trace),
    )


def train_rtc(
    train: ObservationTensor, sensitive: SensitiveMap, cfg: TrainConfig
) -> TrainedModel:
    """Regularised tensor completion: gradient descent with a parity penalty."""
    _check_nonempty(train)
    _check_sensitive(train, sensitive, "for the parity penalty")
    rng = np.random.default_rng(cfg.seed)
    params = _init_factors(rng, train.shape, cfg.rank)
    groups = sensitive.groups

    def loss_fn(p):
        model = FactorModel(*p)
        value, _ = parity_penalty(model, train, groups, cfg.parity_weight)
        return masked_loss(model, train, cfg.lam) + value

    def grad_fn(p):
        model = FactorModel(*p)
        g = masked_gradient(model, train, cfg.lam)
        _, gp = parity_penalty(model, train, groups, cfg.parity_weight)
        return [a + b for a, b in zip(g, gp)]

    params, trace = _descend(params, loss_fn, grad_fn, cfg)
    return TrainedModel(
        kind="RTC",
        shape=train.shape,
        config=cfg,
        factors=FactorModel(*params),
        loss_trace=tuple(trace),
    )


def train_ft(
    train: ObservationTensor, sensitive: SensitiveMap, cfg: TrainConfig
) -> TrainedModel:
    """Fair tensor model: frozen sensitive columns, orthogonality penalty,
    and one exact projection after descent.

    The curator factor's last two columns hold the group one-hot features and
    are never updated; all other parameters descend on the masked loss plus
    the orthogonality penalty.  After convergence the non-sensitive curator
    columns are projected onto the orthogonal complement of the features, so
    the fair prediction (non-sensitive columns only) is exactly decoupled
    from the group indicators.
    """
    _check_nonempty(train)
    _check_sensitive(train, sensitive, "for the fairness features")
    total, sens_cols = cfg.fair_layout()
    ns_cols = tuple(c for c in range(total) if c not in sens_cols)
    s = sensitive.matrix

    rng = np.random.default_rng(cfg.seed)
    params = _init_factors(rng, train.shape, total)
    params[1][:, sens_cols] = s
    trainable = (None, ns_cols, None)

    def loss_fn(p):
        model = FactorModel(*p)
        value, _ = ortho_penalty(p[1], s, ns_cols, cfg.ortho_weight)
        return masked_loss(model, train, cfg.lam) + value

    def grad_fn(p):
        model = FactorModel(*p)
        g1, g2, g3 = masked_gradient(model, train, cfg.lam, trainable)
        _, go = ortho_penalty(p[1], s, ns_cols, cfg.ortho_weight)
        return [g1, g2 + go, g3]

    def check_frozen(p):
        assert np.array_equal(p[1][:, sens_cols], s), "sensitive columns drifted"

    params, trace = _descend(params, loss_fn, grad_fn, cfg, after_step=check_frozen)
    u2 = params[1].copy()
    u2[:, ns_cols] = remove_span_component(u2[:, ns_cols], s)
    return TrainedModel(
        kind="FT",
        shape=train.shape,
        config=cfg,
        factors=FactorModel(params[0], u2, params[2], sensitive_cols=sens_cols),
        loss_trace=tuple(trace),
    )


# ---------------------------------------------------------------------------
# matrix kinds: one independent N x M problem per topic


def _matrix_predictions(u1, u2, users, curators) -> np.ndarray:
    return np.einsum("er,er->e", u1[users], u2[curators])


def _matrix_loss(u1, u2, users, curators, values, lam) -> float:
    resid = values - _matrix_predictions(u1, u2, users, curators)
    reg = float(np.sum(u1 * u1)) + float(np.sum(u2 * u2))
    return 0.5 * float(np.dot(resid, resid)) + 0.5 * lam * reg


def _matrix_scatter(u1, u2, users, curators, weights) -> tuple[np.ndarray, np.ndarray]:
    w = weights[:, None]
    g1 = _scatter_rows(users, w * u2[curators], u1.shape[0])
    g2 = _scatter_rows(curators, w * u1[users], u2.shape[0])
    return g1, g2


def _matrix_parity(u1, u2, users, curators, groups, weight):
    cell_groups = groups[curators]
    is0 = cell_groups == 0
    n0 = int(is0.sum())
    n1 = curators.size - n0
    if n0 == 0 or n1 == 0:
        raise ConfigError("parity penalty undefined: one group has no training cells")
    preds = _matrix_predictions(u1, u2, users, curators)
    d = float(preds[is0].mean() - preds[~is0].mean())
    w = np.where(is0, weight * d / n0, -weight * d / n1)
    return 0.5 * weight * d * d, _matrix_scatter(u1, u2, users, curators, w)


def _train_matrix_slice(
    kind: str,
    users: np.ndarray,
    curators: np.ndarray,
    values: np.ndarray,
    n_users: int,
    n_curators: int,
    sensitive: SensitiveMap | None,
    cfg: TrainConfig,
    rng: np.random.Generator,
    topic: int,
) -> tuple[MatrixSlice, tuple[float, ...]]:
    """Train one nonempty topic slice with the matrix analogue of its kind."""
    if kind == "FM":
        total, sens_cols = cfg.fair_layout()
    else:
        total, sens_cols = cfg.rank, ()
    ns_cols = tuple(c for c in range(total) if c not in sens_cols)

    u1 = rng.uniform(0.0, _INIT_SCALE, size=(n_users, total))
    u2 = rng.uniform(0.0, _INIT_SCALE, size=(n_curators, total))

    if kind == "OMC":
        ridge = _effective_ridge(cfg.lam)
        trace = [_matrix_loss(u1, u2, users, curators, values, ridge)]
        for _ in range(cfg.max_iters):
            u1 = _als_rows(users, u2[curators], values, n_users, ridge)
            u2 = _als_rows(curators, u1[users], values, n_curators, ridge)
            trace.append(_matrix_loss(u1, u2, users, curators, values, ridge))
            if _converged(trace[-2], trace[-1], cfg.tol):
                break
        return MatrixSlice(u1, u2), tuple(trace)

    if kind == "RMC":
        assert sensitive is not None
        groups = sensitive.groups
        try:
            _matrix_parity(u1, u2, users, curators, groups, cfg.parity_weight)
        except ConfigError as exc:
            raise ConfigError(f"topic {topic}: {exc}") from None

        def loss_fn(p):
            value, _ = _matrix_parity(p[0], p[1], users, curators, groups, cfg.parity_weight)
            return _matrix_loss(p[0], p[1], users, curators, values, cfg.lam) + value

        def grad_fn(p):
            resid = _matrix_predictions(p[0], p[1], users, curators) - values
            g1, g2 = _matrix_scatter(p[0], p[1], users, curators, resid)
            _, (p1, p2) = _matrix_parity(p[0], p[1], users, curators, groups, cfg.parity_weight)
            return [g1 + cfg.lam * p[0] + p1, g2 + cfg.lam * p[1] + p2]

        (u1, u2), trace = _descend([u1, u2], loss_fn, grad_fn, cfg)
        return MatrixSlice(u1, u2), tuple(trace)

    # FM: frozen sensitive columns + orthogonality penalty + exact projection
    assert sensitive is not None
    s = sensitive.matrix
    ns_arr = np.asarray(ns_cols, dtype=np.int64)
    u2[:, sens_cols] = s
    keep = np.zeros(total, dtype=bool)
    keep[ns_arr] = True

    def loss_fn(p):
        value, _ = ortho_penalty(p[1], s, ns_cols, cfg.ortho_weight)
        return _matrix_loss(p[0], p[1], users, curators, values, cfg.lam) + value

    def grad_fn(p):
        resid = _matrix_predictions(p[0], p[1], users, curators) - values
        g1, g2 = _matrix_scatter(p[0], p[1], users, curators, resid)
        g2 = g2 + cfg.lam * p[1]
        g2[:, ~keep] = 0.0
        _, go = ortho_penalty(p[1], s, ns_cols, cfg.ortho_weight)
        return [g1 + cfg.lam * p[0], g2 + go]

    def check_frozen(p):
        assert np.array_equal(p[1][:, sens_cols], s), "sensitive columns drifted"

    (u1, u2), trace = _descend([u1, u2], loss_fn, grad_fn, cfg, after_step=check_frozen)
    u2 = u2.copy()
    u2[:, ns_arr] = remove_span_component(u2[:, ns_arr], s)
    return MatrixSlice(u1, u2, sensitive_cols=sens_cols), tuple(trace)


def train_matrix(
    kind: str,
    train: ObservationTensor,
    sensitive: SensitiveMap | None,
    cfg: TrainConfig,
) -> TrainedModel:
    """Train one of the matrix kinds, one independent problem per topic.

    Topics without training entries get zero factors (all-zero predictions)
    and an empty loss trace.
    """
    if kind not in MATRIX_KINDS:
        raise ValueError(f"not a matrix kind: {kind!r}")
    _check_nonempty(train)
    if kind in GROUP_AWARE_KINDS:
        if sensitive is None:
            raise ConfigError(f"{kind} requires a sensitive map")
        if sensitive.n_curators != train.n_curators:
            raise ConfigError("sensitive map does not cover every curator")

    if kind == "FM":
        total, sens_cols = cfg.fair_layout()
    else:
        total, sens_cols = cfg.rank, ()

    rng = np.random.default_rng(cfg.seed)
    slices: list[MatrixSlice] = []
    traces: list[tuple[float, ...]] = []
    for topic in range(train.n_topics):
        mask = train.topics == topic
        if not np.any(mask):
            u1 = np.zeros((train.n_users, total))
            u2 = np.zeros((train.n_curators, total))
            if kind == "FM":
                u2[:, sens_cols] = sensitive.matrix
            slices.append(MatrixSlice(u1, u2, sensitive_cols=sens_cols))
            traces.append(())
            continue
        sl, trace = _train_matrix_slice(
            kind,
            train.users[mask],
            train.curators[mask],
            train.values[mask],
            train.n_users,
            train.n_curators,
            sensitive,
            cfg,
            rng,
            topic,
        )
        slices.append(sl)
        traces.append(trace)
    return TrainedModel(
        kind=kind,
        shape=train.shape,
        config=cfg,
        slices=tuple(slices),
        slice_traces=tuple(traces),
    )


def train_model(
    kind: str,
    train: ObservationTensor,
    cfg: TrainConfig,
    sensitive: SensitiveMap | None = None,
) -> TrainedModel:
    """Dispatch to the right trainer for ``kind``."""
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    if kind in GROUP_AWARE_KINDS and sensitive is None:
        raise ConfigError(f"{kind} requires a sensitive map")
    if kind == "OTC":
        return train_otc(train, cfg)
    if kind == "RTC":
        return train_rtc(train, sensitive, cfg)
    if kind == "FT":
        return train_ft(train, sensitive, cfg)
    return train_matrix(kind, train, sensitive, cfg)


# ---------------------------------------------------------------------------
# prediction


def _predict_cols(model: TrainedModel, factors) -> tuple[int, ...] | None:
    # fairness-aware kinds reconstruct from the non-sensitive columns only
    if model.is_fair:
        return factors.nonsensitive_cols
    return None


def predict(model: TrainedModel, i: int, j: int, k: int) -> float:
    """Predicted score of one (user, curator, topic) cell."""
    n, m, kk = model.shape
    for idx, bound, label in ((i, n, "user"), (j, m, "curator"), (k, kk, "topic")):
        if not 0 <= idx < bound:
            raise IndexError(f"{label} index {idx} out of range [0, {bound})")
    if model.factors is not None:
        return cp_entry(model.factors, i, j, k, _predict_cols(model, model.factors))
    sl = model.slices[k]
    cols = _predict_cols(model, sl)
    u = sl.u_users[i] if cols is None else sl.u_users[i, list(cols)]
    v = sl.u_curators[j] if cols is None else sl.u_curators[j, list(cols)]
    return float(np.dot(u, v))


def predict_cells(
    model: TrainedModel,
    users: np.ndarray,
    curators: np.ndarray,
    topics: np.ndarray,
) -> np.ndarray:
    """Vectorised :func:`predict` over parallel index arrays."""
    users = np.asarray(users, dtype=np.int64)
    curators = np.asarray(curators, dtype=np.int64)
    topics = np.asarray(topics, dtype=np.int64)
    if model.factors is not None:
        return cp_entries(
            model.factors, users, curators, topics, _predict_cols(model, model.factors)
        )
    out = np.empty(users.size)
    for topic in np.unique(topics):
        sl = model.slices[topic]
        cols = _predict_cols(model, sl)
        u1, u2 = sl.u_users, sl.u_curators
        if cols is not None:
            idx = np.asarray(cols, dtype=np.int64)
            u1, u2 = u1[:, idx], u2[:, idx]
        mask = topics == topic
        out[mask] = np.einsum("er,er->e", u1[users[mask]], u2[curators[mask]])
    return out


def score_curators(model: TrainedModel, user: int, topic: int) -> np.ndarray:
    """Predicted scores of every curator for one (user, topic) pair."""
    n, _, kk = model.shape
    if not 0 <= user < n:
        raise IndexError(f"user index {user} out of range [0, {n})")
    if not 0 <= topic < kk:
        raise IndexError(f"topic index {topic} out of range [0, {kk})")
    if model.factors is not None:
        f = model.factors
        cols = _predict_cols(model, f)
        if cols is None:
            return f.u_curators @ (f.u_users[user] * f.u_topics[topic])
        idx = np.asarray(cols, dtype=np.int64)
        return f.u_curators[:, idx] @ (f.u_users[user, idx] * f.u_topics[topic, idx])
    sl = model.slices[topic]
    cols = _predict_cols(model, sl)
    if cols is None:
        return sl.u_curators @ sl.u_users[user]
    idx = np.asarray(cols, dtype=np.int64)
    return sl.u_curators[:, idx] @ sl.u_users[user, idx]


def top_k(
    model: TrainedModel,
    user: int,
    topic: int,
    k_items: int,
    exclude: Sequence[int] = (),
) -> list[int]:
    """Top curators for a (user, topic) pair by descending predicted score.

    Ties break toward the lower curator index; curators in ``exclude``
    (typically the pair's training positives) are omitted.  The list length
    is min(k_items, number of non-excluded curators).
    """
    if k_items < 1:
        raise ValueError("k_items must be >= 1")
    scores = score_curators(model, user, topic)
    m = scores.size
    candidates = np.setdiff1d(np.arange(m), np.asarray(list(exclude), dtype=np.int64))
    if candidates.size == 0:
        return []
    order = np.lexsort((candidates, -scores[candidates]))
    return [int(c) for c in candidates[order[:k_items]]]


# ---------------------------------------------------------------------------
# checkpoints


def _encode_matrix(arr: np.ndarray) -> dict:
    return {"shape": list(arr.shape), "data": [float(x) for x in arr.ravel()]}


def _decode_matrix(obj: dict) -> np.ndarray:
    return np.asarray(obj["data"], dtype=np.float64).reshape(obj["shape"])


def save_checkpoint(model: TrainedModel, path: str | Path) -> None:
    """Serialise a trained model to JSON (bit-exact float round trip)."""
    doc: dict = {
        "kind": model.kind,
        "dimensions": {
            "n_users": model.shape[0],
            "n_curators": model.shape[1],
            "n_topics": model.shape[2],
        },
        "config": asdict(model.config),
        "loss_trace": list(model.loss_trace) if model.loss_trace is not None else None,
        "slice_traces": [list(t) for t in model.slice_traces]
        if model.slice_traces is not None
        else None,
    }
    if model.factors is not None:
        f = model.factors
        doc["factors"] = {
            "u_users": _encode_matrix(f.u_users),
            "u_curators": _encode_matrix(f.u_curators),
            "u_topics": _encode_matrix(f.u_topics),
            "sensitive_cols": list(f.sensitive_cols),
        }
        doc["slices"] = None
    else:
        doc["factors"] = None
        doc["slices"] = [
            {
                "u_users": _encode_matrix(sl.u_users),
                "u_curators": _encode_matrix(sl.u_curators),
                "sensitive_cols": list(sl.sensitive_cols),
            }
            for sl in model.slices
        ]
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> TrainedModel:
    """Rebuild a trained model from :func:`save_checkpoint` output."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    dims = doc["dimensions"]
    shape = (dims["n_users"], dims["n_curators"], dims["n_topics"])
    cfg = TrainConfig(**doc["config"])
    factors = None
    slices = None
    if doc.get("factors") is not None:
        f = doc["factors"]
        factors = FactorModel(
            _decode_matrix(f["u_users"]),
            _decode_matrix(f["u_curators"]),
            _decode_matrix(f["u_topics"]),
            sensitive_cols=tuple(f["sensitive_cols"]),
        )
    else:
        slices = tuple(
            MatrixSlice(
                _decode_matrix(sl["u_users"]),
                _decode_matrix(sl["u_curators"]),
                sensitive_cols=tuple(sl["sensitive_cols"]),
            )
            for sl in doc["slices"]
        )
    return TrainedModel(
        kind=doc["kind"],
        shape=shape,
        config=cfg,
        factors=factors,
        slices=slices,
        loss_trace=tuple(doc["loss_trace"]) if doc.get("loss_trace") is not None else None,
        slice_traces=tuple(tuple(t) for t in doc["slice_traces"])
        if doc.get("slice_traces") is not None
        else None,
    )
