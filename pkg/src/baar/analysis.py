"""Diagnostics over trained or random retention models.

Singular-value spectra, numerical rank, gradient saliency, combined
bidirectional heatmaps, shapelet-region score statistics, and wall-clock
scaling of the retention forms. Everything here returns plain numbers or
numpy arrays; exports write CSV matrices and a JSON report.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .model import BaarModel, ModelOutput
from .positional import build_decay_matrix, default_gammas
from .retention import RetentionLayer
from .training import pretrain_loss, token_targets

TOKEN_STRIDE = 4


# ---------------------------------------------------------------------------
# spectra
# ---------------------------------------------------------------------------


@dataclass
class SpectrumReport:
    singular_values: np.ndarray
    normalized_cumulative: np.ndarray
    numerical_rank: int

    def cumulative_at(self, k: int) -> float:
        """Share of the singular-value mass held by the top ``k`` values."""
        if not 1 <= k <= len(self.singular_values):
            raise ValueError(f"k must lie in [1, {len(self.singular_values)}], got {k}")
        return float(self.normalized_cumulative[k - 1])


def jacobi_singular_values(M, tol: float = 1e-15, max_sweeps: int = 100) -> np.ndarray:
    """Singular values by one-sided (Hestenes) Jacobi rotations, descending.

    Columns are rotated pairwise until every pair is orthogonal to ``tol``
    relative to their norms; the singular values are then the column norms.
    """
    A = np.array(M, dtype=np.float64)
    if A.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {A.shape}")
    if A.shape[0] < A.shape[1]:
        A = A.T.copy()
    n = A.shape[1]
    for _ in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                ap, aq = A[:, p], A[:, q]
                alpha = ap @ ap
                beta = aq @ aq
                gamma = ap @ aq
                if alpha == 0.0 or beta == 0.0 or abs(gamma) <= tol * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                new_p = c * ap - s * aq
                A[:, q] = s * ap + c * aq
                A[:, p] = new_p
        if not rotated:
            break
    sv = np.sqrt(np.einsum("ij,ij->j", A, A))
    return np.sort(sv)[::-1]


def svd_spectrum(M, tol: float = 1e-8) -> SpectrumReport:
    """Spectrum of a square matrix with rank counted as ``sigma_i > tol * sigma_1``.

    A zero matrix has rank 0 and a cumulative curve of all ones.
    """
    A = np.asarray(M, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"svd_spectrum needs a square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError("svd_spectrum got non-finite entries")
    sv = jacobi_singular_values(A)
    total = sv.sum()
    if total == 0.0:
        return SpectrumReport(sv, np.ones_like(sv), 0)
    cum = np.cumsum(sv) / total
    cum[-1] = 1.0
    rank = int(np.sum(sv > tol * sv[0]))
    return SpectrumReport(sv, np.minimum(cum, 1.0), rank)


def random_retention_matrices(
    rng: np.random.Generator,
    n: int = 16,
    head_dim: int = 8,
    d_model: int = 16,
    gamma: float | None = None,
    positions=None,
) -> dict[str, np.ndarray]:
    """One matched draw of forward, backward and bidirectional retention matrices.

    The three share the same input rows and projections and differ only in
    the decay mask, so their spectra are directly comparable. Also returns
    the raw bilinear scores ``QKᵀ`` (no mask).
    """
    gamma = default_gammas(1)[0] if gamma is None else gamma
    pos = np.arange(n, dtype=np.float64) if positions is None else np.asarray(positions, dtype=np.float64)
    X = rng.normal(size=(n, d_model))
    wq = rng.normal(size=(d_model, head_dim)) / np.sqrt(d_model)
    wk = rng.normal(size=(d_model, head_dim)) / np.sqrt(d_model)
    scores = (X @ wq) @ (X @ wk).T
    return {
        "scores": scores,
        "forward": scores * build_decay_matrix(pos, gamma, "forward"),
        "backward": scores * build_decay_matrix(pos, gamma, "backward"),
        "bidirectional": scores * build_decay_matrix(pos, gamma, "bidirectional"),
    }


# ---------------------------------------------------------------------------
# saliency
# ---------------------------------------------------------------------------


@dataclass
class SaliencyMap:
    values: np.ndarray
    shapelet_mean: float
    background_mean: float

    @property
    def localized(self) -> bool:
        return self.shapelet_mean > self.background_mean


def token_slots_for_span(span, n_tokens: int, stride: int = TOKEN_STRIDE) -> np.ndarray:
    """Slots (1..N, after ``[SOS]`` at 0) whose raw window overlaps ``[start, end)``."""
    start, end = int(span[0]), int(span[1])
    n = np.arange(n_tokens)
    hit = (n * stride < end) & ((n + 1) * stride > start)
    return n[hit] + 1


def _region_means(row_scores: np.ndarray, span, stride: int) -> tuple[float, float]:
    n_tokens = row_scores.shape[0] - 2
    inside = token_slots_for_span(span, n_tokens, stride)
    mask = np.zeros(row_scores.shape[0], dtype=bool)
    mask[inside] = True
    background = ~mask
    background[0] = background[-1] = False
    bg = float(row_scores[background].mean()) if background.any() else 0.0
    sh = float(row_scores[mask].mean()) if mask.any() else 0.0
    return sh, bg


def saliency(
    model: BaarModel,
    inputs,
    target=None,
    spans=None,
    layer: int | None = None,
    timestamps=None,
    stride: int = TOKEN_STRIDE,
    objective: str = "prediction",
) -> list[SaliencyMap]:
    """Absolute gradient of a loss with respect to one layer's hidden rows.

    ``objective='prediction'`` (default) differentiates the next/previous
    token prediction loss, whose target is the sequence itself: pooled token
    windows for continuous input, the codes for discrete input. ``target``
    may override it. The default layer is the final one (the N x d output
    embedding), where every row carries its own prediction error.

    ``objective='head'`` differentiates the attached head's loss instead;
    ``target`` is then a class index or value per sequence and the default
    layer is L-1, the rows the final backward layer summarizes into
    ``[SOS]``. (Under an ``[SOS]`` readout the head gradient at layer L is
    nonzero only on row 0, so it cannot localize anything.)

    ``layer`` counts the embeddings as 0 and layer outputs as 1..L. Returns
    one map per sequence, each of shape (N+2, d_model).
    """
    if objective not in ("prediction", "head"):
        raise ValueError(f"objective must be 'prediction' or 'head', got {objective!r}")
    if objective == "head":
        if model.head_config is None:
            raise RuntimeError("head saliency needs a model with an attached head")
        if target is None:
            raise ValueError("head saliency needs a target per sequence")
    L = model.config.n_layers
    if layer is None:
        layer = L if objective == "prediction" else L - 1
    if not 0 <= layer <= L:
        raise ValueError(f"layer must lie in [0, {L}], got {layer}")
    model.zero_grad()
    out, _ = model.encode(inputs, timestamps)
    rows = out.embeddings if layer == 0 else out.hidden_per_layer[layer - 1]
    if objective == "prediction":
        if target is None:
            x = np.asarray(inputs)
            target = token_targets(x) if model.config.mode == "continuous" and model.config.tokenizer else x
        target = np.asarray(target)
        if target.ndim < 2 or target.shape[:2] != (out.prev_token_logits.shape[0], out.prev_token_logits.shape[1] - 2):
            raise ValueError(f"prediction target must be one row per token, got shape {target.shape}; pass objective='head' for labels")
        kind = "mse" if model.config.mode == "continuous" else "cross_entropy"
        loss = pretrain_loss(out, target, "next_previous", kind)
    else:
        target = np.atleast_1d(np.asarray(target))
        logits = model.head_logits(out)
        if model.head_config.task == "classification":
            loss = T.cross_entropy(logits, target.astype(np.int64))
        else:
            pred = T.reshape(logits, (logits.shape[0],)) if logits.shape[-1] == 1 else logits
            loss = T.mse_loss(pred, target)
    T.backward(loss)
    grad = rows.grad
    model.zero_grad()
    if grad is None:
        grad = np.zeros(rows.shape, dtype=rows.dtype)
    values = np.abs(np.asarray(grad, dtype=np.float64))
    maps = []
    for b in range(values.shape[0]):
        if spans is None:
            sh = bg = float("nan")
        else:
            sh, bg = _region_means(values[b].mean(axis=-1), spans[b], stride)
        maps.append(SaliencyMap(values[b], sh, bg))
    return maps


def saliency_localization_rate(maps: list[SaliencyMap]) -> float:
    """Fraction of sequences whose shapelet rows out-score their background."""
    if not maps:
        raise ValueError("no saliency maps given")
    return float(np.mean([m.localized for m in maps]))


# ---------------------------------------------------------------------------
# heatmaps and region statistics
# ---------------------------------------------------------------------------


def combined_bidirectional_heatmap(out: ModelOutput, index: int = 0) -> np.ndarray:
    """Head-mean retention of layer L-1 plus head-mean retention of layer L.

    Layer L-1 runs forward (lower triangle) and layer L backward (upper
    triangle), so the sum covers both sides of every token. Requires a
    forward pass with ``capture=True``.
    """
    mats = out.retention_matrices_per_layer
    if not mats:
        raise ValueError("retention matrices were not captured; rerun the model with capture=True")
    if len(mats) < 2:
        raise ValueError("the combined heatmap needs at least two layers")
    return mats[-2][index].mean(axis=0) + mats[-1][index].mean(axis=0)


@dataclass
class RegionStats:
    shapelet_mean: float
    background_mean: float
    shapelet_scores: np.ndarray = field(repr=False)
    background_scores: np.ndarray = field(repr=False)


def region_score_stats(heatmap: np.ndarray, span, stride: int = TOKEN_STRIDE) -> RegionStats:
    """Scores each real token slot receives (column mean of |H| over real rows), split by region.

    Background is every real token slot outside the shapelet span.
    """
    H = np.abs(np.asarray(heatmap, dtype=np.float64))
    if H.ndim != 2 or H.shape[0] != H.shape[1] or H.shape[0] < 3:
        raise ValueError(f"expected an (N+2, N+2) heatmap, got shape {H.shape}")
    received = H[1:-1].mean(axis=0)
    n_tokens = H.shape[0] - 2
    inside = token_slots_for_span(span, n_tokens, stride)
    mask = np.zeros(H.shape[0], dtype=bool)
    mask[inside] = True
    background = ~mask
    background[0] = background[-1] = False
    sh, bg = received[mask], received[background]
    return RegionStats(
        float(sh.mean()) if sh.size else 0.0,
        float(bg.mean()) if bg.size else 0.0,
        sh,
        bg,
    )


# ---------------------------------------------------------------------------
# complexity
# ---------------------------------------------------------------------------


@dataclass
class BenchRow:
    n: int
    seconds: float


@dataclass
class BenchResult:
    mode: str
    rows: list[BenchRow]
    linear_r2: float
    quadratic_r2: float

    def to_dict(self) -> dict:
        return asdict(self)


def fit_r2(x, y, power: int = 1) -> float:
    """R² of the least-squares fit ``y ≈ a * x**power + c``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    A = np.stack([x**power, np.ones_like(x)], axis=1)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0.0:
        return 1.0
    return 1.0 - float((resid**2).sum()) / ss_tot


def benchmark_forms(
    lengths,
    mode: str = "recurrent",
    repeats: int = 3,
    d_model: int = 16,
    n_heads: int = 1,
    seed: int = 0,
    chunk_size: int = 64,
) -> BenchResult:
    """Forward wall time of one retention layer per sequence length.

    Each length reports the fastest of ``repeats`` runs, which damps
    scheduler noise on shared machines.
    """
    if mode not in ("recurrent", "parallel", "chunkwise"):
        raise ValueError(f"unknown benchmark mode {mode!r}")
    lengths = [int(n) for n in lengths]
    if not lengths or min(lengths) < 1:
        raise ValueError("benchmark lengths must be positive")
    if repeats < 1:
        raise ValueError("repeats must be at least 1")
    rng = np.random.default_rng(seed)
    layer = RetentionLayer(d_model, n_heads, "forward", rng=rng, dtype=np.float32)
    rows = []
    with T.no_grad():
        for n in lengths:
            x = T.tensor(rng.normal(size=(1, n, d_model)).astype(np.float32))
            pos = np.arange(n, dtype=np.float64)
            best = np.inf
            for _ in range(repeats):
                t0 = time.perf_counter()
                layer.forward(x, pos, form=mode, chunk_size=chunk_size)
                best = min(best, time.perf_counter() - t0)
            rows.append(BenchRow(n, best))
    ns = [r.n for r in rows]
    ts = [r.seconds for r in rows]
    return BenchResult(mode, rows, fit_r2(ns, ts, 1), fit_r2(ns, ts, 2))


# ---------------------------------------------------------------------------
# exports
# ---------------------------------------------------------------------------


def slot_names(n_tokens: int) -> list[str]:
    return ["SOS"] + [f"t{i}" for i in range(n_tokens)] + ["EOS"]


def write_matrix_csv(path, M: np.ndarray, names: list[str] | None = None) -> Path:
    """Square matrix to CSV with token-slot names on both axes."""
    M = np.asarray(M)
    names = slot_names(M.shape[0] - 2) if names is None else names
    if len(names) != M.shape[0] or M.shape[0] != M.shape[1]:
        raise ValueError(f"matrix shape {M.shape} does not match {len(names)} slot names")
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([""] + names)
        for name, row in zip(names, M):
            w.writerow([name] + [repr(float(v)) for v in row])
    return path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    if hasattr(obj, "__dataclass_fields__"):
        return _jsonable(asdict(obj))
    return obj


def write_report(path, report: dict) -> Path:
    """JSON report with sorted keys; NaN and infinities become null."""
    path = Path(path)
    path.write_text(json.dumps(_jsonable(report), indent=2, sort_keys=True) + "\n")
    return path
