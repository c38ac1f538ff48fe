"""Direction-tagged retention: parallel, recurrent and chunkwise kernels plus the block.

Kernels operate on per-head tensors laid out (B, H, N, head_dim) with
positions (B or 1, N). All three forms compute ``(Q̂ K̂ᵀ ⊙ D) V`` with
identical results; they differ only in memory and time behaviour.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .positional import (
    DecaySpec,
    RotarySpec,
    apply_rotation,
    build_decay_matrix,
    check_positions,
    decay_powers,
    default_gammas,
)
from .tensor import Tensor

FORMS = ("parallel", "recurrent", "chunkwise")


@dataclass
class RetentionState:
    """Recurrent state ``S`` (B, H, head_dim, head_dim) and the last position folded in."""

    S: Tensor
    last_position: np.ndarray


@dataclass
class RetentionHead:
    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray
    gamma: float


def _canonical_positions(positions, n: int) -> np.ndarray:
    p = check_positions(positions)
    if p.ndim == 1:
        p = p[None]
    if p.shape[-1] != n:
        raise ValueError(f"got {p.shape[-1]} positions for a sequence of {n} tokens")
    return p


def decay_tensor(positions, gammas, direction: str) -> np.ndarray:
    """Stack per-head decay matrices into (B, H, N, N)."""
    p = check_positions(positions)
    if p.ndim == 1:
        p = p[None]
    return np.stack([build_decay_matrix(p, g, direction) for g in gammas], axis=1)


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------


def parallel_kernel(q: Tensor, k: Tensor, v: Tensor, decay: np.ndarray) -> tuple[Tensor, Tensor]:
    """Return ``(R V, R)`` with ``R = (q kᵀ) ⊙ decay``."""
    r = T.matmul(q, k.T) * decay.astype(q.dtype, copy=False)
    return T.matmul(r, v), r


def recurrent_kernel(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    positions,
    gammas,
    direction: str = "forward",
    state: RetentionState | None = None,
) -> tuple[Tensor, RetentionState]:
    """Token-by-token recurrence ``S_n = k̂_nᵀ v_n + gamma**gap * S_prev``, ``y_n = q̂_n S_n``.

    The backward direction walks from the last token to the first.
    """
    if direction not in ("forward", "backward"):
        raise ValueError(f"recurrent retention needs forward or backward direction, got {direction!r}")
    n_tok = q.shape[-2]
    p = _canonical_positions(positions, n_tok)
    order = range(n_tok) if direction == "forward" else range(n_tok - 1, -1, -1)
    S = state.S if state is not None else None
    prev = state.last_position if state is not None else None
    outs = [None] * n_tok
    for n in order:
        kv = T.matmul(k[:, :, n : n + 1, :].T, v[:, :, n : n + 1, :])
        if S is None:
            S = kv
        else:
            fac = decay_powers(gammas, np.abs(p[:, n] - prev))[..., None, None]
            S = kv + S * fac.astype(q.dtype)
        prev = p[:, n]
        outs[n] = T.matmul(q[:, :, n : n + 1, :], S)
    return T.concat(outs, axis=2), RetentionState(S, prev)


def chunkwise_kernel(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    positions,
    gammas,
    direction: str = "forward",
    chunk_size: int = 64,
) -> Tensor:
    """Parallel retention inside chunks, a carried state across chunk borders."""
    if chunk_size < 1:
        raise ValueError(f"chunk_size must be >= 1, got {chunk_size}")
    if direction not in ("forward", "backward"):
        raise ValueError(f"chunkwise retention needs forward or backward direction, got {direction!r}")
    n_tok = q.shape[-2]
    p = _canonical_positions(positions, n_tok)
    if direction == "backward":
        # mirror: reversed tokens with negated, reversed timestamps run forward
        flip = (slice(None), slice(None), slice(None, None, -1))
        y = _forward_chunks(q[flip], k[flip], v[flip], -p[:, ::-1], gammas, chunk_size)
        return y[flip]
    return _forward_chunks(q, k, v, p, gammas, chunk_size)


def _forward_chunks(q, k, v, p, gammas, chunk_size):
    dtype = q.dtype
    n_tok = q.shape[-2]
    S = None
    prev_end = None
    outs = []
    for s in range(0, n_tok, chunk_size):
        e = min(s + chunk_size, n_tok)
        qc, kc, vc = q[:, :, s:e, :], k[:, :, s:e, :], v[:, :, s:e, :]
        pc = p[:, s:e]
        y, _ = parallel_kernel(qc, kc, vc, decay_tensor(pc, gammas, "forward"))
        if S is not None:
            into = decay_powers(gammas, pc - prev_end[:, None])[..., None].astype(dtype)
            y = y + T.matmul(qc, S) * into
        outs.append(y)
        to_end = decay_powers(gammas, pc[:, -1:] - pc)[..., None].astype(dtype)
        kv = T.matmul((kc * to_end).T, vc)
        if S is None:
            S = kv
        else:
            carry = decay_powers(gammas, pc[:, -1] - prev_end)[..., None, None].astype(dtype)
            S = S * carry + kv
        prev_end = pc[:, -1]
    return outs[0] if len(outs) == 1 else T.concat(outs, axis=2)


# ---------------------------------------------------------------------------
# retention block
# ---------------------------------------------------------------------------


class RetentionLayer:
    """Pre-norm multi-head retention followed by a GELU feed-forward, both residual."""

    def __init__(
        self,
        d_model: int,
        n_heads: int,
        direction: str = "forward",
        ffn_dim: int | None = None,
        gammas=None,
        rotary_base: float = 10000.0,
        use_rotary: bool = True,
        decay: DecaySpec | None = None,
        rng: np.random.Generator | None = None,
        dtype=np.float64,
        init_std: float = 0.02,
    ):
        if d_model % n_heads:
            raise ValueError(f"d_model {d_model} is not divisible by {n_heads} heads")
        self.d_model = d_model
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        if decay is None:
            decay = DecaySpec(tuple(gammas) if gammas is not None else default_gammas(n_heads), direction)
        elif decay.direction != direction:
            raise ValueError(f"decay direction {decay.direction!r} does not match layer direction {direction!r}")
        if len(decay.gammas) != n_heads:
            raise ValueError(f"need one gamma per head: {len(decay.gammas)} for {n_heads} heads")
        self.decay = decay
        self.rotary = RotarySpec(self.head_dim, rotary_base)
        self.use_rotary = use_rotary
        ffn_dim = ffn_dim or 2 * d_model
        rng = rng if rng is not None else np.random.default_rng(0)

        def gauss(*shape):
            return T.parameter(rng.normal(0.0, init_std, size=shape), dtype=dtype)

        def const(value, n):
            return T.parameter(np.full(n, value), dtype=dtype)

        self.params = {
            "ln1.weight": const(1.0, d_model),
            "ln1.bias": const(0.0, d_model),
            "wq": gauss(d_model, d_model),
            "wk": gauss(d_model, d_model),
            "wv": gauss(d_model, d_model),
            "wo": gauss(d_model, d_model),
            "ln2.weight": const(1.0, d_model),
            "ln2.bias": const(0.0, d_model),
            "ffn.w1": gauss(d_model, ffn_dim),
            "ffn.b1": const(0.0, ffn_dim),
            "ffn.w2": gauss(ffn_dim, d_model),
            "ffn.b2": const(0.0, d_model),
        }

    @property
    def direction(self) -> str:
        return self.decay.direction

    @property
    def gammas(self) -> tuple[float, ...]:
        return self.decay.gammas

    @property
    def heads(self) -> list[RetentionHead]:
        hd = self.head_dim
        p = self.params
        return [
            RetentionHead(
                p["wq"].data[:, h * hd : (h + 1) * hd],
                p["wk"].data[:, h * hd : (h + 1) * hd],
                p["wv"].data[:, h * hd : (h + 1) * hd],
                self.gammas[h],
            )
            for h in range(self.n_heads)
        ]

    def _split_heads(self, x: Tensor) -> Tensor:
        B, N, _ = x.shape
        return x.reshape(B, N, self.n_heads, self.head_dim).transpose((0, 2, 1, 3))

    def project(self, h: Tensor, positions, rotary_positions=None) -> tuple[Tensor, Tensor, Tensor]:
        """Rotated per-head queries and keys and plain values, each (B, H, N, head_dim)."""
        p = self.params
        q = self._split_heads(h @ p["wq"])
        k = self._split_heads(h @ p["wk"])
        v = self._split_heads(h @ p["wv"])
        if self.use_rotary:
            rp = positions if rotary_positions is None else rotary_positions
            q = apply_rotation(q, rp, self.rotary, sign=1)
            k = apply_rotation(k, rp, self.rotary, sign=1)
        return q, k, v

    def forward(
        self,
        x: Tensor,
        positions,
        form: str = "parallel",
        chunk_size: int | None = None,
        capture: bool = False,
        rotary_positions=None,
        state: RetentionState | None = None,
    ):
        """Run the block on ``x`` (N, d) or (B, N, d).

        Returns ``(y, aux)``: ``aux`` is the per-head retention matrix array
        when ``capture`` is set (parallel form), the final ``RetentionState``
        for the recurrent form, and ``None`` otherwise.
        """
        if form not in FORMS:
            raise ValueError(f"unknown retention form {form!r}")
        unbatched = x.ndim == 2
        if unbatched:
            x = x.reshape(1, *x.shape)
        if x.shape[-1] != self.d_model:
            raise ValueError(f"input width {x.shape[-1]} != d_model {self.d_model}")
        n_tok = x.shape[1]
        pos = _canonical_positions(positions, n_tok)
        rpos = pos if rotary_positions is None else _canonical_positions(rotary_positions, n_tok)
        p = self.params

        h = T.layer_norm(x, p["ln1.weight"], p["ln1.bias"])
        q, k, v = self.project(h, pos, rpos)
        aux = None
        if form == "parallel" or self.direction == "bidirectional":
            if form != "parallel":
                raise ValueError("bidirectional retention only has a parallel form")
            o, r = parallel_kernel(q, k, v, decay_tensor(pos, self.gammas, self.direction))
            if capture:
                aux = r.data if not unbatched else r.data[0]
        elif form == "recurrent":
            o, aux = recurrent_kernel(q, k, v, pos, self.gammas, self.direction, state)
        else:
            o = chunkwise_kernel(q, k, v, pos, self.gammas, self.direction, chunk_size or n_tok)
        B = x.shape[0]
        o = o.transpose((0, 2, 1, 3)).reshape(B, n_tok, self.d_model)
        x = x + o @ p["wo"]
        f = T.layer_norm(x, p["ln2.weight"], p["ln2.bias"])
        f = T.gelu(f @ p["ffn.w1"] + p["ffn.b1"]) @ p["ffn.w2"] + p["ffn.b2"]
        y = x + f
        if unbatched:
            y = y.reshape(n_tok, self.d_model)
        return y, aux

    def retention_matrices(self, x: Tensor, positions, rotary_positions=None) -> np.ndarray:
        """Per-head retention matrices for input ``x`` without running the rest of the block."""
        unbatched = x.ndim == 2
        with T.no_grad():
            if unbatched:
                x = x.reshape(1, *x.shape)
            pos = _canonical_positions(positions, x.shape[1])
            h = T.layer_norm(x, self.params["ln1.weight"], self.params["ln1.bias"])
            q, k, _ = self.project(h, pos, rotary_positions)
            r = T.matmul(q, k.T).data * decay_tensor(pos, self.gammas, self.direction)
        return r[0] if unbatched else r


def retention_parallel(X: Tensor, layer: RetentionLayer, positions):
    """Block output and per-head retention matrices, parallel form."""
    return layer.forward(X, positions, form="parallel", capture=True)


def retention_recurrent(X: Tensor, layer: RetentionLayer, positions, state: RetentionState | None = None):
    """Block output and final recurrent state."""
    if layer.direction == "bidirectional":
        raise ValueError("bidirectional retention has no recurrent form")
    return layer.forward(X, positions, form="recurrent", state=state)


def retention_chunkwise(X: Tensor, layer: RetentionLayer, positions, chunk_size: int) -> Tensor:
    if chunk_size < 1:
        raise ValueError(f"chunk_size must be >= 1, got {chunk_size}")
    if layer.direction == "bidirectional":
        raise ValueError("bidirectional retention has no chunkwise form")
    return layer.forward(X, positions, form="chunkwise", chunk_size=chunk_size)[0]


# ---------------------------------------------------------------------------
# softmax attention baselines
# ---------------------------------------------------------------------------


@dataclass
class AttentionParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor

    @classmethod
    def init(cls, d_model: int, d_head: int, rng: np.random.Generator, std: float = 0.02, dtype=np.float64):
        return cls(*(T.parameter(rng.normal(0.0, std, size=(d_model, d_head)), dtype=dtype) for _ in range(3)))


def causal_attention(X: Tensor, params: AttentionParams, masked: bool = True) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention; ``masked`` applies the lower-triangular causal mask.

    Returns the output and the attention matrix.
    """
    q, k, v = X @ params.wq, X @ params.wk, X @ params.wv
    scores = T.scale(T.matmul(q, k.T), 1.0 / np.sqrt(q.shape[-1]))
    if masked:
        n = X.shape[-2]
        mask = np.where(np.tril(np.ones((n, n), dtype=bool)), 0.0, -np.inf).astype(X.dtype)
        scores = scores + mask
    attn = T.softmax_rows(scores)
    return T.matmul(attn, v), attn


def bilinear_scores(X: Tensor, wq: Tensor, wk: Tensor) -> np.ndarray:
    """Unnormalised ``Q Kᵀ`` for rank analysis."""
    with T.no_grad():
        return ((X @ wq) @ (X @ wk).T).data
