"""End-to-end alternating retention model and its checkpoint format.

Layout: convolution-subsampling tokenizer (continuous mode) or code
embedding (discrete mode), learned ``[SOS]``/``[EOS]`` rows, ``L`` retention
layers alternating forward/backward, and one output projection shared by the
next-token (layer L-1) and previous-token (layer L) predictions.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .positional import check_positions, default_gammas
from .retention import RetentionLayer
from .tensor import Tensor

REPR_MODES = ("sos", "eos", "sos_plus_eos", "mean")
REPR_LAYERS = ("last", "last_two")
_REPR_ALIASES = {"sos_eos": "sos_plus_eos"}

CHECKPOINT_MAGIC = b"BAARCKPT"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    feature_dim: int = 1
    vocab_size: int | None = None
    ffn_dim: int | None = None
    chunk_size: int | None = None
    rotary_base: float = 10000.0
    gammas: tuple[float, ...] | None = None
    use_rotary: bool = True
    rotary_timestamps: bool = True
    tokenizer: bool = True
    init_std: float = 0.02
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if self.n_layers < 2 or self.n_layers % 2:
            raise ValueError(f"n_layers must be a positive even number, got {self.n_layers}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} must equal n_heads x head_dim")
        if self.head_dim % 2:
            raise ValueError(f"head_dim {self.head_dim} must be even for rotary pairs")
        if self.gammas is not None:
            self.gammas = tuple(float(g) for g in self.gammas)
            if len(self.gammas) != self.n_heads:
                raise ValueError("need one decay gamma per head")
        if self.vocab_size is not None and self.vocab_size < 2:
            raise ValueError("vocab_size must be at least 2")
        if self.chunk_size is not None and self.chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def mode(self) -> str:
        return "discrete" if self.vocab_size is not None else "continuous"

    @property
    def out_dim(self) -> int:
        return self.vocab_size if self.vocab_size is not None else self.feature_dim

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TokenSequence:
    """Embedded rows ``[SOS], x_1..x_N, [EOS]`` with their timestamps."""

    embeddings: Tensor
    positions: np.ndarray
    rotary_positions: np.ndarray
    sos_index: int = 0

    @property
    def eos_index(self) -> int:
        return self.embeddings.shape[-2] - 1

    @property
    def n_tokens(self) -> int:
        return self.embeddings.shape[-2] - 2


@dataclass
class ModelOutput:
    hidden_per_layer: list[Tensor]
    next_token_logits: Tensor
    prev_token_logits: Tensor
    embeddings: Tensor
    positions: np.ndarray
    retention_matrices_per_layer: list[np.ndarray] | None = None

    @property
    def n_layers(self) -> int:
        return len(self.hidden_per_layer)


@dataclass
class HeadConfig:
    task: str = "classification"
    n_outputs: int = 2
    repr_mode: str = "sos"
    repr_layers: str = "last"


class BaarModel:
    def __init__(self, config: ModelConfig):
        self.config = config
        self.head_config: HeadConfig | None = None
        cfg = config
        rng = np.random.default_rng(cfg.seed)
        dt = cfg.np_dtype
        d, V = cfg.d_model, cfg.feature_dim

        def normal(std, *shape):
            return T.parameter(rng.normal(0.0, std, size=shape), dtype=dt)

        def zeros(*shape):
            return T.parameter(np.zeros(shape), dtype=dt)

        def ones(*shape):
            return T.parameter(np.ones(shape), dtype=dt)

        p: dict[str, Tensor] = {}
        if cfg.mode == "continuous":
            if cfg.tokenizer:
                p["tok.conv1.weight"] = normal(1.0 / np.sqrt(3 * V), V, V, 3)
                p["tok.conv1.bias"] = zeros(V)
                p["tok.conv2.weight"] = normal(1.0 / np.sqrt(3 * V), V, V, 3)
                p["tok.conv2.bias"] = zeros(V)
            p["in_proj.weight"] = normal(1.0 / np.sqrt(V), V, d)
            p["in_proj.bias"] = zeros(d)
        else:
            p["embed.weight"] = normal(cfg.init_std, cfg.vocab_size, d)
        p["sos"] = normal(cfg.init_std, d)
        p["eos"] = normal(cfg.init_std, d)

        gammas = cfg.gammas or default_gammas(cfg.n_heads)
        self.layers: list[RetentionLayer] = []
        for i in range(cfg.n_layers):
            layer = RetentionLayer(
                d,
                cfg.n_heads,
                direction="forward" if i % 2 == 0 else "backward",
                ffn_dim=cfg.ffn_dim,
                gammas=gammas,
                rotary_base=cfg.rotary_base,
                use_rotary=cfg.use_rotary,
                rng=rng,
                dtype=dt,
                init_std=cfg.init_std,
            )
            self.layers.append(layer)
            for name, t in layer.params.items():
                p[f"layers.{i}.{name}"] = t
        p["out_norm.weight"] = ones(d)
        p["out_norm.bias"] = zeros(d)
        p["out_proj.weight"] = normal(1.0 / np.sqrt(d), d, cfg.out_dim)
        p["out_proj.bias"] = zeros(cfg.out_dim)
        self.params = p

    # -- parameters --------------------------------------------------------
    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def n_parameters(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)}")
        for k, t in self.params.items():
            arr = np.asarray(state[k], dtype=t.dtype)
            if arr.shape != t.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {t.shape}")
            t.data = arr.copy()

    def attach_head(
        self,
        n_outputs: int,
        task: str = "classification",
        repr_mode: str = "sos",
        repr_layers: str = "last",
    ) -> None:
        """Add (or replace) a linear head on the sequence representation."""
        repr_mode = _REPR_ALIASES.get(repr_mode, repr_mode)
        if repr_mode not in REPR_MODES:
            raise ValueError(f"unknown representation mode {repr_mode!r}")
        if repr_layers not in REPR_LAYERS:
            raise ValueError(f"unknown representation layers {repr_layers!r}")
        if task not in ("classification", "regression", "multilabel"):
            raise ValueError(f"unknown task {task!r}")
        width = self.config.d_model * (2 if repr_mode == "sos_plus_eos" else 1)
        rng = np.random.default_rng(self.config.seed + 7919)
        dt = self.config.np_dtype
        self.params["head.weight"] = T.parameter(rng.normal(0.0, 1.0 / np.sqrt(width), (width, n_outputs)), dtype=dt)
        self.params["head.bias"] = T.parameter(np.zeros(n_outputs), dtype=dt)
        self.head_config = HeadConfig(task, n_outputs, repr_mode, repr_layers)

    # -- pipeline ------------------------------------------------------------
    def tokenize(self, x) -> Tensor:
        """Two stride-2 convolutions: (B, T, V) -> (B, ceil(T/4), V)."""
        x = x if isinstance(x, Tensor) else T.tensor(np.asarray(x, dtype=self.config.np_dtype))
        if x.shape[-2] < 4:
            raise ValueError(f"tokenizer needs at least 4 timesteps, got {x.shape[-2]}")
        if not self.config.tokenizer:
            return x
        p = self.params
        h = T.gelu(T.conv1d(x, p["tok.conv1.weight"], p["tok.conv1.bias"]))
        return T.conv1d(h, p["tok.conv2.weight"], p["tok.conv2.bias"])

    def embed(self, tokens, timestamps=None, input_mask=None) -> TokenSequence:
        """Project tokens to d_model and add ``[SOS]``/``[EOS]`` rows.

        ``tokens`` is (B, N, V) in continuous mode or integer codes (B, N) in
        discrete mode. ``input_mask`` (B, N), when given, zeroes the embedded
        rows it flags.
        """
        cfg = self.config
        p = self.params
        if cfg.mode == "discrete":
            codes = np.asarray(tokens)
            if codes.ndim == 1:
                codes = codes[None]
            x = T.embedding(p["embed.weight"], codes)
        else:
            x = tokens if isinstance(tokens, Tensor) else T.tensor(np.asarray(tokens, dtype=cfg.np_dtype))
            if x.ndim == 2:
                x = x.reshape(1, *x.shape)
            x = x @ p["in_proj.weight"] + p["in_proj.bias"]
        if input_mask is not None:
            keep = 1.0 - np.asarray(input_mask, dtype=cfg.np_dtype)[..., None]
            x = x * keep
        B, N, d = x.shape
        sos = T.reshape(p["sos"], (1, 1, d)) * np.ones((B, 1, 1), dtype=cfg.np_dtype)
        eos = T.reshape(p["eos"], (1, 1, d)) * np.ones((B, 1, 1), dtype=cfg.np_dtype)
        emb = T.concat([sos, x, eos], axis=1)

        if timestamps is None:
            pos = np.arange(N, dtype=np.float64)[None]
        else:
            pos = check_positions(timestamps)
            if pos.ndim == 1:
                pos = pos[None]
            if pos.shape[-1] != N:
                raise ValueError(f"{pos.shape[-1]} timestamps for {N} tokens")
        full = np.concatenate([pos.min(axis=1, keepdims=True) - 1, pos, pos.max(axis=1, keepdims=True) + 1], axis=1)
        if cfg.rotary_timestamps:
            rot = full
        else:
            rot = np.arange(-1, N + 1, dtype=np.float64)[None]
        return TokenSequence(emb, full, rot)

    def forward(self, seq: TokenSequence, form: str | None = None, capture: bool = False) -> ModelOutput:
        """Run the alternating stack.

        Odd layers (1-indexed) are forward retention, even layers backward.
        ``capture`` forces the parallel form and keeps each layer's
        per-head retention matrices.
        """
        cfg = self.config
        if form is None:
            form = "chunkwise" if cfg.chunk_size and not capture else "parallel"
        if capture:
            form = "parallel"
        h = seq.embeddings
        hidden, mats = [], []
        for layer in self.layers:
            h, aux = layer.forward(
                h,
                seq.positions,
                form=form,
                chunk_size=cfg.chunk_size,
                capture=capture,
                rotary_positions=seq.rotary_positions,
            )
            hidden.append(h)
            if capture:
                mats.append(aux)
        p = self.params

        def project(hs):
            z = T.layer_norm(hs, p["out_norm.weight"], p["out_norm.bias"])
            return z @ p["out_proj.weight"] + p["out_proj.bias"]

        return ModelOutput(
            hidden_per_layer=hidden,
            next_token_logits=project(hidden[-2]),
            prev_token_logits=project(hidden[-1]),
            embeddings=seq.embeddings,
            positions=seq.positions,
            retention_matrices_per_layer=mats if capture else None,
        )

    def encode(self, inputs, timestamps=None, form: str | None = None, capture: bool = False, input_mask=None):
        """Raw inputs to ``(ModelOutput, tokens)``; tokens are the embedded units."""
        if self.config.mode == "continuous":
            x = inputs if isinstance(inputs, Tensor) else T.tensor(np.asarray(inputs, dtype=self.config.np_dtype))
            if x.ndim == 2:
                x = x.reshape(1, *x.shape)
            tokens = self.tokenize(x)
        else:
            tokens = np.asarray(inputs)
            if tokens.ndim == 1:
                tokens = tokens[None]
        seq = self.embed(tokens, timestamps, input_mask=input_mask)
        return self.forward(seq, form=form, capture=capture), tokens

    def __call__(self, inputs, timestamps=None, **kw) -> ModelOutput:
        return self.encode(inputs, timestamps, **kw)[0]

    def head_logits(self, out: ModelOutput) -> Tensor:
        if self.head_config is None:
            raise RuntimeError("model has no prediction head; call attach_head first")
        hc = self.head_config
        rep = sequence_representation(out, hc.repr_mode, hc.repr_layers)
        return rep @ self.params["head.weight"] + self.params["head.bias"]


def sequence_representation(out: ModelOutput, mode: str = "sos", layers: str = "last") -> Tensor:
    """Pool hidden states into one vector per sequence, shape (B, width).

    ``layers='last_two'`` averages the pooled vectors of layers L-1 and L,
    so widths stay d_model (or 2*d_model for ``sos_plus_eos``).
    """
    mode = _REPR_ALIASES.get(mode, mode)
    if mode not in REPR_MODES:
        raise ValueError(f"unknown representation mode {mode!r}")
    if layers not in REPR_LAYERS:
        raise ValueError(f"unknown representation layers {layers!r}")

    def pool(h: Tensor) -> Tensor:
        if mode == "sos":
            return h[:, 0, :]
        if mode == "eos":
            return h[:, -1, :]
        if mode == "sos_plus_eos":
            return T.concat([h[:, 0, :], h[:, -1, :]], axis=-1)
        return T.mean(h, axis=1)

    last = pool(out.hidden_per_layer[-1])
    if layers == "last":
        return last
    return T.scale(last + pool(out.hidden_per_layer[-2]), 0.5)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------
#
#   magic   8 bytes   b"BAARCKPT"
#   version uint32 LE
#   hlen    uint64 LE
#   header  hlen bytes of UTF-8 JSON (sorted keys):
#           {"config": {...}, "head": {...}|null, "extra": {...},
#            "tensors": [{"name", "dtype", "shape", "offset", "nbytes"}, ...]}
#   payload concatenated little-endian C-order tensor buffers


def save_checkpoint(path, model: BaarModel, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, blobs, offset = [], [], 0
    for name, t in model.params.items():
        arr = np.ascontiguousarray(t.data, dtype=t.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        entries.append(
            {"name": name, "dtype": arr.dtype.name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)
    cfg = asdict(model.config)
    if cfg["gammas"] is not None:
        cfg["gammas"] = list(cfg["gammas"])
    header = {
        "config": cfg,
        "head": asdict(model.head_config) if model.head_config else None,
        "extra": extra or {},
        "tensors": entries,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        for raw in blobs:
            f.write(raw)
    return path


class CheckpointError(ValueError):
    pass


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Header dict and named arrays of a checkpoint file."""
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(data) < 20:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    (version,) = struct.unpack_from("<I", data, 8)
    if version > CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version} is newer than supported {CHECKPOINT_VERSION}")
    (hlen,) = struct.unpack_from("<Q", data, 12)
    start = 20
    try:
        header = json.loads(data[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable checkpoint header ({e})") from None
    base = start + hlen
    arrays = {}
    for e in header["tensors"]:
        if base + e["offset"] + e["nbytes"] > len(data):
            raise CheckpointError(f"{path}: truncated payload for tensor {e['name']!r}")
        buf = data[base + e["offset"] : base + e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"]).newbyteorder("<")).reshape(e["shape"]).copy()
    return header, arrays


def load_checkpoint(path) -> BaarModel:
    header, arrays = read_checkpoint(path)
    cfg = dict(header["config"])
    if cfg.get("gammas") is not None:
        cfg["gammas"] = tuple(cfg["gammas"])
    model = BaarModel(ModelConfig.from_dict(cfg))
    head = header.get("head")
    if head:
        model.attach_head(head["n_outputs"], head["task"], head["repr_mode"], head["repr_layers"])
    model.load_state_dict(arrays)
    return model


def checkpoint_extra(path) -> dict:
    return read_checkpoint(path)[0].get("extra", {})


__all__ = [
    "ModelConfig",
    "TokenSequence",
    "ModelOutput",
    "HeadConfig",
    "BaarModel",
    "sequence_representation",
    "save_checkpoint",
    "load_checkpoint",
    "read_checkpoint",
    "checkpoint_extra",
    "CheckpointError",
    "REPR_MODES",
    "REPR_LAYERS",
]
