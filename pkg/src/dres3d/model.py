"""DetailBase: token queries refined against superpoint features.

Each decoder layer runs cross-attention (queries over visual superpoint
features), self-attention over the queries, then a feed-forward block. Every
sub-block is pre-normalized with a residual connection. Mask logits for a
query snapshot are its inner products with the superpoint features.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .annotation import AnnotatedDescription
from .autograd import Tensor, no_grad
from .core import PhraseMaskSet
from .exceptions import (
    FileUnreadable,
    IndexOutOfRange,
    MalformedRecord,
    NonFiniteActivation,
    ShapeMismatch,
)
from .superpoint import SuperpointPartition, broadcast_mask

CHECKPOINT_FORMAT = "dres3d-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    d: int = 32
    e: int = 32
    c: int = 16
    n_layers: int = 6
    heads: int = 4
    ffn_hidden: int | None = None  # defaults to 4 * d
    binarize_threshold: float = 0.0
    norm_eps: float = 1e-5

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.heads < 1 or self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.ffn_hidden is None:
            object.__setattr__(self, "ffn_hidden", 4 * self.d)

    @property
    def head_dim(self) -> int:
        return self.d // self.heads


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, h = cfg.d, cfg.ffn_hidden
    shapes = {"W1": (cfg.c, d), "W2": (cfg.c, d), "W3": (cfg.e, d)}
    for i in range(cfg.n_layers):
        for block in ("cross", "self"):
            p = f"layers.{i}.{block}"
            shapes[f"{p}.norm.weight"] = (d,)
            shapes[f"{p}.norm.bias"] = (d,)
            for proj in ("q", "k", "v", "out"):
                shapes[f"{p}.{proj}.weight"] = (d, d)
                shapes[f"{p}.{proj}.bias"] = (d,)
        p = f"layers.{i}.ffn"
        shapes[f"{p}.norm.weight"] = (d,)
        shapes[f"{p}.norm.bias"] = (d,)
        shapes[f"{p}.fc1.weight"] = (d, h)
        shapes[f"{p}.fc1.bias"] = (h,)
        shapes[f"{p}.fc2.weight"] = (h, d)
        shapes[f"{p}.fc2.bias"] = (d,)
    shapes["score.fc1.weight"] = (d, d)
    shapes["score.fc1.bias"] = (d,)
    shapes["score.fc2.weight"] = (d, 1)
    shapes["score.fc2.bias"] = (1,)
    return shapes


@dataclass
class ModelState:
    """Named parameter arrays plus the config that fixes their shapes."""

    config: ModelConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> ModelState:
        return ModelState(self.config, {k: v.copy() for k, v in self.params.items()})

    def n_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    def check(self) -> None:
        shapes = parameter_shapes(self.config)
        if list(shapes) != list(self.params):
            raise ShapeMismatch("parameter names do not match the config")
        for name, shape in shapes.items():
            if self.params[name].shape != shape:
                raise ShapeMismatch(f"{name}: {self.params[name].shape} != {shape}")
            if not np.isfinite(self.params[name]).all():
                raise NonFiniteActivation(f"{name} has non-finite entries")


def init_state(cfg: ModelConfig, seed: int = 0) -> ModelState:
    """Weights uniform in +-1/sqrt(fan_in); biases 0; norm scales 1."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith("norm.weight"):
            params[name] = np.ones(shape)
        elif name.endswith("bias"):
            params[name] = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            params[name] = rng.uniform(-bound, bound, size=shape)
    return ModelState(cfg, params)


# --- forward -----------------------------------------------------------------

@dataclass
class ForwardTrace:
    """Per-snapshot outputs; index 0 is the initial query, then one per layer."""

    queries: list[np.ndarray]
    mask_logits: list[np.ndarray]
    scores: list[np.ndarray]
    cross_attention: list[np.ndarray]  # (heads, L+2, N_s) per layer
    self_attention: list[np.ndarray]  # (heads, L+2, L+2) per layer

    @property
    def n_layers(self) -> int:
        return len(self.queries) - 1


@dataclass
class _Graph:
    queries: list
    logits: list
    scores: list
    cross_attention: list
    self_attention: list


def _linear(x, p, name):
    return x @ p[f"{name}.weight"] + p[f"{name}.bias"]


def _norm(x, p, name, eps):
    return x.normalize(eps) * p[f"{name}.weight"] + p[f"{name}.bias"]


def _attention(xq, xkv, p, prefix, heads):
    n_q, d = xq.shape
    n_k = xkv.shape[0]
    dh = d // heads
    q = _linear(xq, p, f"{prefix}.q").reshape(n_q, heads, dh).transpose(1, 0, 2)
    k = _linear(xkv, p, f"{prefix}.k").reshape(n_k, heads, dh).transpose(1, 2, 0)
    v = _linear(xkv, p, f"{prefix}.v").reshape(n_k, heads, dh).transpose(1, 0, 2)
    attn = ((q @ k) * (1.0 / np.sqrt(dh))).softmax(axis=-1)
    ctx = (attn @ v).transpose(1, 0, 2).reshape(n_q, d)
    return _linear(ctx, p, f"{prefix}.out"), attn


def _layer(q, f_v, p, i, cfg):
    pre = f"layers.{i}"
    h = _norm(q, p, f"{pre}.cross.norm", cfg.norm_eps)
    out, cross = _attention(h, f_v, p, f"{pre}.cross", cfg.heads)
    q = q + out
    h = _norm(q, p, f"{pre}.self.norm", cfg.norm_eps)
    out, self_attn = _attention(h, h, p, f"{pre}.self", cfg.heads)
    q = q + out
    h = _norm(q, p, f"{pre}.ffn.norm", cfg.norm_eps)
    q = q + _linear(_linear(h, p, f"{pre}.ffn.fc1").gelu(), p, f"{pre}.ffn.fc2")
    if not np.isfinite(q.data).all():
        raise NonFiniteActivation(f"layer {i} produced non-finite queries")
    return q, cross, self_attn


def _score(q, p):
    return _linear(_linear(q, p, "score.fc1").gelu(), p, "score.fc2").reshape(-1).sigmoid()


def _check_inputs(cfg, f_v, f_sp, tokens):
    if tokens.ndim != 2 or tokens.shape[1] != cfg.e or tokens.shape[0] < 1:
        raise ShapeMismatch(f"token features {tokens.shape}, expected (L+2, {cfg.e})")
    if f_v.ndim != 2 or f_v.shape[1] != cfg.d or f_v.shape[0] < 1:
        raise ShapeMismatch(f"visual features {f_v.shape}, expected (N_s, {cfg.d})")
    if f_sp.shape != f_v.shape:
        raise ShapeMismatch(f"superpoint features {f_sp.shape} vs visual {f_v.shape}")


def build_graph(params: dict, cfg: ModelConfig, token_features, pooled=None,
                f_v=None, f_sp=None) -> _Graph:
    """Forward pass over ``params`` (Tensors or arrays).

    Give either ``pooled`` features (projected here by W1/W2) or the
    projected ``f_v`` and ``f_sp`` directly.
    """
    p = {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}
    if pooled is not None:
        pooled = pooled if isinstance(pooled, Tensor) else Tensor(pooled)
        if pooled.ndim != 2 or pooled.shape[1] != cfg.c:
            raise ShapeMismatch(f"pooled features {pooled.shape}, expected (N_s, {cfg.c})")
        f_v, f_sp = pooled @ p["W1"], pooled @ p["W2"]
    f_v = f_v if isinstance(f_v, Tensor) else Tensor(f_v)
    f_sp = f_sp if isinstance(f_sp, Tensor) else Tensor(f_sp)
    tokens = token_features if isinstance(token_features, Tensor) else Tensor(token_features)
    _check_inputs(cfg, f_v.data, f_sp.data, tokens.data)

    f_sp_t = f_sp.T
    q = tokens @ p["W3"]
    g = _Graph([q], [q @ f_sp_t], [_score(q, p)], [], [])
    for i in range(cfg.n_layers):
        q, cross, self_attn = _layer(q, f_v, p, i, cfg)
        g.queries.append(q)
        g.logits.append(q @ f_sp_t)
        g.scores.append(_score(q, p))
        g.cross_attention.append(cross)
        g.self_attention.append(self_attn)
    return g


def _to_trace(g: _Graph) -> ForwardTrace:
    arr = lambda xs: [x.data.copy() for x in xs]
    return ForwardTrace(arr(g.queries), arr(g.logits), arr(g.scores),
                        arr(g.cross_attention), arr(g.self_attention))


def init_queries(token_features, W3) -> np.ndarray:
    """Initial queries, one row per token; row 0 is [CLS]."""
    E, W3 = np.asarray(token_features, dtype=np.float64), np.asarray(W3, dtype=np.float64)
    if E.ndim != 2 or W3.ndim != 2 or E.shape[1] != W3.shape[0]:
        raise ShapeMismatch(f"token features {E.shape} vs W3 {W3.shape}")
    return E @ W3


def decoder_layer(q_prev, f_v, state: ModelState, layer: int = 0):
    """One Cross-Self-FFN block. Returns the new queries and both attention maps."""
    cfg = state.config
    q_prev, f_v = np.asarray(q_prev, dtype=np.float64), np.asarray(f_v, dtype=np.float64)
    if q_prev.ndim != 2 or q_prev.shape[1] != cfg.d or f_v.ndim != 2 or f_v.shape[1] != cfg.d:
        raise ShapeMismatch(f"queries {q_prev.shape}, visual {f_v.shape}, d={cfg.d}")
    with no_grad():
        p = {k: Tensor(v) for k, v in state.params.items()}
        q, cross, self_attn = _layer(Tensor(q_prev), Tensor(f_v), p, layer, cfg)
    return q.data, cross.data, self_attn.data


def forward(f_v, f_sp, token_features, state: ModelState) -> ForwardTrace:
    with no_grad():
        g = build_graph(state.params, state.config, np.asarray(token_features, dtype=np.float64),
                        f_v=np.asarray(f_v, dtype=np.float64),
                        f_sp=np.asarray(f_sp, dtype=np.float64))
    return _to_trace(g)


def forward_pooled(pooled, token_features, state: ModelState) -> ForwardTrace:
    """Project pooled superpoint features with W1/W2, then run :func:`forward`."""
    with no_grad():
        g = build_graph(state.params, state.config, np.asarray(token_features, dtype=np.float64),
                        pooled=np.asarray(pooled, dtype=np.float64))
    return _to_trace(g)


def binarize(logits, threshold: float = 0.0) -> np.ndarray:
    return np.asarray(logits) > threshold


def predict_masks(trace: ForwardTrace, desc: AnnotatedDescription,
                  part: SuperpointPartition, threshold: float = 0.0) -> PhraseMaskSet:
    """Final-layer masks for each phrase head, plus the [CLS] sentence mask."""
    final = trace.mask_logits[-1]
    if final.shape[1] != part.n_superpoints:
        raise ShapeMismatch(f"logits over {final.shape[1]} superpoints, partition has {part.n_superpoints}")
    masks = []
    for p in desc.phrases:
        if p.head_index >= desc.n_tokens or p.query_index >= final.shape[0] or p.query_index < 0:
            raise IndexOutOfRange(f"phrase head {p.head_index} for {desc.n_tokens} tokens")
        masks.append(broadcast_mask(binarize(final[p.query_index], threshold), part))
    sentence = broadcast_mask(binarize(final[0], threshold), part)
    return PhraseMaskSet(tuple(masks), sentence)


# --- checkpoints ----------------------------------------------------------------

def checkpoint_dict(state: ModelState) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(state.config),
        "params": [
            {"name": k, "shape": list(v.shape), "data": v.reshape(-1).tolist()}
            for k, v in state.params.items()
        ],
    }


def save_checkpoint(state: ModelState, path) -> None:
    """JSON container; Python float repr round-trips float64 exactly."""
    text = json.dumps(checkpoint_dict(state), separators=(",", ":"))
    Path(path).write_text(text + "\n", encoding="utf-8")


def state_from_dict(blob: dict) -> ModelState:
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise MalformedRecord(1, "not a dres3d checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise MalformedRecord(1, f"unsupported checkpoint version {blob.get('version')}")
    cfg = ModelConfig(**blob["config"])
    params = {}
    for entry in blob["params"]:
        arr = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        params[entry["name"]] = arr
    state = ModelState(cfg, params)
    state.check()
    return state


def load_checkpoint(path) -> ModelState:
    try:
        blob = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise FileUnreadable(f"cannot read checkpoint {path}: {exc}") from exc
    return state_from_dict(blob)
