"""Patch embedder, class-token Transformer pooling, hierarchy and classifier.

Parameters live in a flat ``{name: Tensor}`` dict so they map one-to-one onto
checkpoint entries. The forward pass consumes patch embeddings arranged in
the dense bag layout described in :mod:`hmil.sampling`.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Union

import numpy as np

from . import tensor as T
from .config import Config, ConfigError
from .tensor import Tensor


class StructureError(ValueError):
    pass


class DegenerateRegionError(ValueError):
    pass


@dataclass
class ModelConfig:
    aggregator: str = "transformer"  # "transformer" or "baseline"
    embed_dim: int = 64
    heads: int = 4
    encoder_layers: int = 1
    mlp_ratio: int = 2
    levels: int = 1
    share_regional_weights: bool = True
    patch_px: int = 16
    ln_eps: float = 1e-5
    use_positional_embeddings: bool = False

    def __post_init__(self):
        if self.aggregator not in ("transformer", "baseline"):
            raise ValueError(f"aggregator must be transformer or baseline, got {self.aggregator!r}")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.levels < 1 or self.encoder_layers < 1:
            raise ValueError("levels and encoder_layers must be >= 1")
        if self.use_positional_embeddings:
            raise ValueError("positional embeddings are not supported")
        if self.patch_px < 7:
            raise ValueError("patch_px must be >= 7 for the two valid 3x3 convolutions")

    @classmethod
    def from_config(cls, cfg: Config) -> "ModelConfig":
        strategy = cfg.str("strategy", "regional")
        try:
            return cls(
                aggregator=cfg.str("aggregator", "baseline" if strategy == "global" else "transformer"),
                embed_dim=cfg.int("embed_dim", 64),
                heads=cfg.int("heads", 4),
                encoder_layers=cfg.int("encoder_layers", 1),
                mlp_ratio=cfg.int("mlp_ratio", 2),
                levels=1 if strategy == "global" else cfg.int("L", 1),
                share_regional_weights=cfg.bool("share_regional_weights", True),
                patch_px=cfg.int("patch_px", 16),
            )
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None

    @property
    def out_dim(self) -> int:
        return self.embed_dim if self.aggregator == "baseline" else self.levels * self.embed_dim


# ---------------------------------------------------------------------------
# initialisation


def _kaiming(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _init_transformer(rng, prefix: str, cfg: ModelConfig, params: dict) -> None:
    d = cfg.embed_dim
    hid = cfg.mlp_ratio * d
    for i in range(cfg.encoder_layers):
        p = f"{prefix}.layer{i}"
        params[f"{p}.ln1.g"] = np.ones(d)
        params[f"{p}.ln1.b"] = np.zeros(d)
        for nm in ("q", "k", "v", "o"):
            params[f"{p}.attn.w{nm}"] = _kaiming(rng, (d, d), d)
            # a key bias only shifts every score of a query equally, so it is omitted
            if nm != "k":
                params[f"{p}.attn.b{nm}"] = np.zeros(d)
        params[f"{p}.ln2.g"] = np.ones(d)
        params[f"{p}.ln2.b"] = np.zeros(d)
        params[f"{p}.mlp.w1"] = _kaiming(rng, (d, hid), d)
        params[f"{p}.mlp.b1"] = np.zeros(hid)
        params[f"{p}.mlp.w2"] = _kaiming(rng, (hid, d), hid)
        params[f"{p}.mlp.b2"] = np.zeros(d)
    params[f"{prefix}.cls"] = rng.normal(0.0, 0.02, size=(1, d))


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict:
    """Fresh parameter tensors keyed by checkpoint name."""
    d = cfg.embed_dim
    raw: dict = {}
    raw["embed.conv1.w"] = _kaiming(rng, (16, 3, 3, 3), 27)
    raw["embed.conv1.b"] = np.zeros(16)
    raw["embed.conv2.w"] = _kaiming(rng, (32, 16, 3, 3), 144)
    raw["embed.conv2.b"] = np.zeros(32)
    raw["embed.proj.w"] = _kaiming(rng, (32, d), 32)
    raw["embed.proj.b"] = np.zeros(d)
    if cfg.aggregator == "baseline":
        raw["baseline.C"] = rng.normal(0.0, 0.02, size=(1, d))
    else:
        if cfg.share_regional_weights:
            _init_transformer(rng, "regional", cfg, raw)
        else:
            for lvl in range(1, cfg.levels + 1):
                _init_transformer(rng, f"regional.l{lvl}", cfg, raw)
        for lvl in range(1, cfg.levels + 1):
            _init_transformer(rng, f"global.l{lvl}", cfg, raw)
    raw["head.w"] = _kaiming(rng, (cfg.out_dim, 1), cfg.out_dim)
    raw["head.b"] = np.zeros(1)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in raw.items()}


def count_parameters(params: dict) -> int:
    return int(sum(p.size for p in params.values()))


def params_from_arrays(arrays: dict) -> dict:
    return {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True, name=k) for k, v in arrays.items()}


def check_params(cfg: ModelConfig, arrays: dict) -> None:
    """Raise ``StructureError`` unless ``arrays`` has exactly the names/shapes ``cfg`` expects."""
    ref = init_params(cfg, np.random.default_rng(0))
    if set(ref) != set(arrays):
        missing = sorted(set(ref) - set(arrays))[:3]
        extra = sorted(set(arrays) - set(ref))[:3]
        raise StructureError(f"checkpoint does not match model config (missing {missing}, unexpected {extra})")
    for k, v in ref.items():
        if tuple(arrays[k].shape) != v.shape:
            raise StructureError(f"checkpoint parameter {k!r} has shape {arrays[k].shape}, config expects {v.shape}")


# ---------------------------------------------------------------------------
# embedder

# fixed input normalisation; without it every embedding shares a large common
# component that layer norm maps to nearly the same token
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


def embed_patches(params: dict, patches, chunk: int = 512) -> Tensor:
    """Embed ``[n, p, p, 3]`` pixel patches (0-255) to ``[n, d]``."""
    x = np.asarray(patches, dtype=np.float64)
    if x.ndim != 4 or x.shape[1] != x.shape[2] or x.shape[3] != 3:
        raise T.DimensionError(f"embed_patches expects [n, p, p, 3] patches, got {x.shape}")
    if x.shape[1] < 7:
        raise T.DimensionError(f"patch size {x.shape[1]} too small for the embedder")
    x = (x.transpose(0, 3, 1, 2) / 255.0 - PIXEL_MEAN) / PIXEL_STD
    if len(x) > chunk and T._active_tape() is None:
        return Tensor(np.concatenate([embed_patches(params, patches[i : i + chunk], chunk).data for i in range(0, len(x), chunk)]))
    h = T.relu(T.conv2d(Tensor(x), params["embed.conv1.w"], params["embed.conv1.b"], stride=1))
    h = T.relu(T.conv2d(h, params["embed.conv2.w"], params["embed.conv2.b"], stride=2))
    h = T.mean(h, axis=(2, 3))
    return T.linear(h, params["embed.proj.w"], params["embed.proj.b"])


# ---------------------------------------------------------------------------
# attention pooling


def baseline_aggregate(embeddings: Tensor, C: Tensor, mask=None):
    """Dot-product attention pooling with a learnable query.

    ``a_k = softmax_k(C . x_k)`` without scaling or projections, and
    ``Z = sum_k a_k x_k``. Returns ``(Z [1, d], a [K])``.
    """
    scores = T.matmul(C, T.transpose(embeddings))  # [1, K]
    a = T.masked_softmax(scores, None if mask is None else np.asarray(mask, bool)[None], axis=-1)
    Z = T.matmul(a, embeddings)
    return Z, a.data[0]


def _split_heads(x: Tensor, h: int) -> Tensor:
    # [B, n, d] -> [B, h, n, d/h]
    B, n, d = x.shape
    return T.transpose(T.reshape(x, (B, n, h, d // h)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    B, h, n, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (B, n, h * dh))


def _mlp(params, p, x):
    return T.linear(T.gelu(T.linear(x, params[f"{p}.mlp.w1"], params[f"{p}.mlp.b1"])), params[f"{p}.mlp.w2"], params[f"{p}.mlp.b2"])


def _self_attention_layer(params, p, x: Tensor, mask: np.ndarray, cfg: ModelConfig) -> Tensor:
    h = cfg.heads
    xn = T.layer_norm(x, params[f"{p}.ln1.g"], params[f"{p}.ln1.b"], cfg.ln_eps)
    q = _split_heads(T.linear(xn, params[f"{p}.attn.wq"], params[f"{p}.attn.bq"]), h)
    k = _split_heads(T.matmul(xn, params[f"{p}.attn.wk"]), h)
    v = _split_heads(T.linear(xn, params[f"{p}.attn.wv"], params[f"{p}.attn.bv"]), h)
    scale = 1.0 / np.sqrt(cfg.embed_dim // h)
    s = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), scale)
    w = T.masked_softmax(s, mask[:, None, None, :], axis=-1)
    o = T.linear(_merge_heads(T.matmul(w, v)), params[f"{p}.attn.wo"], params[f"{p}.attn.bo"])
    x = T.add(x, o)
    return T.add(x, _mlp(params, p, T.layer_norm(x, params[f"{p}.ln2.g"], params[f"{p}.ln2.b"], cfg.ln_eps)))


def _class_token_layer(params, p, cls: Tensor, x: Tensor, mask: np.ndarray, cfg: ModelConfig):
    """Final encoder layer, evaluated for the class-token position only.

    The class token queries the ``n`` input tokens; it is not among the keys,
    so its attention weights over the inputs sum to one.
    """
    B, n, d = x.shape
    h = cfg.heads
    dh = d // h
    g1, b1 = params[f"{p}.ln1.g"], params[f"{p}.ln1.b"]
    cn = T.layer_norm(cls, g1, b1, cfg.ln_eps)  # [1, d]
    xn = T.layer_norm(x, g1, b1, cfg.ln_eps)
    q = T.reshape(T.linear(cn, params[f"{p}.attn.wq"], params[f"{p}.attn.bq"]), (1, h, 1, dh))
    k = _split_heads(T.matmul(xn, params[f"{p}.attn.wk"]), h)  # [B, h, n, dh]
    v = _split_heads(T.linear(xn, params[f"{p}.attn.wv"], params[f"{p}.attn.bv"]), h)
    s = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))  # [B, h, 1, n]
    w = T.masked_softmax(s, mask[:, None, None, :], axis=-1)
    o = T.reshape(T.matmul(w, v), (B, d))  # heads are contiguous: [B, h, 1, dh] -> [B, d]
    o = T.linear(o, params[f"{p}.attn.wo"], params[f"{p}.attn.bo"])
    y = T.add(cls, o)  # [B, d]
    y = T.add(y, _mlp(params, p, T.layer_norm(y, params[f"{p}.ln2.g"], params[f"{p}.ln2.b"], cfg.ln_eps)))
    return y, w.data[:, :, 0, :].mean(axis=1)


def transformer_pool(params: dict, prefix: str, tokens: Tensor, mask: np.ndarray, cfg: ModelConfig):
    """Pool each row of ``tokens [B, n, d]`` to one vector; returns ``(pooled [B, d], weights [B, n])``."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=1).all():
        raise DegenerateRegionError(f"{prefix}: a region has every token masked")
    x = tokens
    for i in range(cfg.encoder_layers - 1):
        x = _self_attention_layer(params, f"{prefix}.layer{i}", x, mask, cfg)
    return _class_token_layer(params, f"{prefix}.layer{cfg.encoder_layers - 1}", params[f"{prefix}.cls"], x, mask, cfg)


def transformer_aggregate(tokens: Tensor, params: dict, prefix: str, cfg: ModelConfig, mask=None):
    """Pool a single token set ``[n, d]``; returns ``(pooled [1, d], weights [n])``."""
    n = tokens.shape[0]
    mask = np.ones((1, n), bool) if mask is None else np.asarray(mask, bool).reshape(1, n)
    pooled, w = transformer_pool(params, prefix, T.reshape(tokens, (1, n, tokens.shape[1])), mask, cfg)
    return pooled, w[0]


# ---------------------------------------------------------------------------
# hierarchy


@dataclass
class AttentionRecord:
    level: Union[int, str]
    group: int
    weights: np.ndarray
    provenance: np.ndarray


@dataclass
class ForwardResult:
    logit: Tensor
    layout: tuple
    valid: np.ndarray
    regional: list = field(default_factory=list)  # level l: weights [B_l, k_l]
    alive: list = field(default_factory=list)  # level l: bool [B_l]
    global_: list = field(default_factory=list)  # level l: weights [B_l] (0 for dead groups)
    baseline: Optional[np.ndarray] = None  # [n]
    coords: Optional[np.ndarray] = None  # [*layout, 2] when known

    @property
    def probability(self) -> float:
        return float(T.sigmoid(self.logit.data).reshape(-1)[0])

    def records(self) -> list:
        """Per-group :class:`AttentionRecord` list (regional levels, then global, or baseline)."""
        out = []
        if self.baseline is not None:
            prov = self.coords.reshape(-1, 2) if self.coords is not None else np.arange(len(self.baseline))
            keep = self.valid.reshape(-1)
            out.append(AttentionRecord("baseline", 0, self.baseline[keep], prov[keep]))
            return out
        for lvl, (w, alive) in enumerate(zip(self.regional, self.alive), 1):
            child_alive = self.valid.reshape(w.shape) if lvl == 1 else self.alive[lvl - 2].reshape(w.shape)
            for g in np.flatnonzero(alive):
                if lvl == 1 and self.coords is not None:
                    prov = self.coords.reshape(w.shape + (2,))[g]
                else:
                    prov = np.arange(g * w.shape[1], (g + 1) * w.shape[1])
                keep = child_alive[g]
                out.append(AttentionRecord(lvl, int(g), w[g][keep], prov[keep]))
        for lvl, (gw, alive) in enumerate(zip(self.global_, self.alive), 1):
            idx = np.flatnonzero(alive)
            out.append(AttentionRecord(f"global{lvl}", 0, gw[idx], idx))
        return out


def hierarchical_aggregate(params: dict, tokens: Tensor, layout: tuple, valid: np.ndarray, cfg: ModelConfig):
    """Pool embeddings level by level.

    ``tokens`` is ``[prod(layout), d]`` in layout order; ``layout`` is
    ``(n_top, k_L, ..., k_1)``. Returns a list with one ``(pooled [B_l, d],
    alive [B_l], weights [B_l, k_l])`` triple per level; rows of groups with no
    valid input are zero and flagged dead.
    """
    if len(layout) != cfg.levels + 1:
        raise StructureError(f"layout {layout} does not describe a {cfg.levels}-level hierarchy")
    valid = np.asarray(valid, dtype=bool).reshape(layout)
    d = cfg.embed_dim
    x = tokens
    m = valid
    out = []
    for lvl in range(1, cfg.levels + 1):
        k = layout[-lvl]
        B = int(np.prod(layout[: len(layout) - lvl]))
        xg = T.reshape(x, (B, k, d))
        mg = m.reshape(B, k)
        alive = mg.any(axis=1)
        prefix = "regional" if cfg.share_regional_weights else f"regional.l{lvl}"
        weights = np.zeros((B, k))
        if alive.all():
            pooled, w = transformer_pool(params, prefix, xg, mg, cfg)
            weights[:] = w
        else:
            idx = np.flatnonzero(alive)
            if len(idx) == 0:
                raise DegenerateRegionError("no valid tokens in any region")
            p_alive, w = transformer_pool(params, prefix, T.take_rows(xg, idx), mg[idx], cfg)
            pooled = T.scatter_rows(p_alive, idx, B)
            weights[idx] = w
        out.append((pooled, alive, weights))
        x, m = pooled, alive
    return out


def global_aggregate(params: dict, levels: list, cfg: ModelConfig):
    """Pool each level's embeddings across all regions and concatenate: ``[1, L*d]``."""
    pooled_all, weights_all = [], []
    for lvl, (pooled, alive, _) in enumerate(levels, 1):
        idx = np.flatnonzero(alive)
        if len(idx) == 0:
            raise DegenerateRegionError(f"level {lvl} has no embeddings")
        tok = pooled if len(idx) == len(alive) else T.take_rows(pooled, idx)
        g, w = transformer_aggregate(tok, params, f"global.l{lvl}", cfg)
        full = np.zeros(len(alive))
        full[idx] = w
        pooled_all.append(g)
        weights_all.append(full)
    rep = pooled_all[0] if len(pooled_all) == 1 else T.concat(pooled_all, axis=1)
    return rep, weights_all


def classify(params: dict, representation: Tensor) -> Tensor:
    """Linear map of ``[1, D]`` to a scalar logit tensor of shape ``[1, 1]``."""
    return T.linear(representation, params["head.w"], params["head.b"])


def forward_embeddings(params: dict, emb: Tensor, layout: tuple, valid, cfg: ModelConfig, coords=None) -> ForwardResult:
    """Aggregate precomputed embeddings ``[prod(layout), d]`` to a logit."""
    valid = np.ones(layout, bool) if valid is None else np.asarray(valid, bool).reshape(layout)
    if cfg.aggregator == "baseline":
        flat = valid.reshape(-1)
        Z, a = baseline_aggregate(emb, params["baseline.C"], flat)
        return ForwardResult(classify(params, Z), layout, valid, baseline=a, coords=coords)
    levels = hierarchical_aggregate(params, emb, layout, valid, cfg)
    rep, gw = global_aggregate(params, levels, cfg)
    res = ForwardResult(classify(params, rep), layout, valid, coords=coords)
    res.regional = [w for _, _, w in levels]
    res.alive = [a for _, a, _ in levels]
    res.global_ = gw
    return res


def forward(params: dict, patches: np.ndarray, layout: tuple, cfg: ModelConfig, valid=None, coords=None) -> ForwardResult:
    """Embed ``[prod(layout), p, p, 3]`` patches and aggregate them."""
    emb = embed_patches(params, patches)
    return forward_embeddings(params, emb, layout, valid, cfg, coords)
