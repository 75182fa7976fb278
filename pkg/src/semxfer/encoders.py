"""Per-domain embedding functions and the transformation-spec encoder.

All three map into (or, for specs, alongside) the shared embedding space:

* grid:   flatten raster -> linear -> relu -> linear -> normalize
* tokens: position-keyed lookup, averaged over the sequence -> linear -> relu -> linear -> normalize
* spec:   same as tokens with its own parameters, keyed by sequence position, not normalized

Encoders take precomputed feature matrices so observations are rendered once
and reused across training steps.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import ParamStore, Tensor
from .scene import (
    CELLS,
    RASTER_SHAPE,
    SPEC_LENGTH,
    VOCAB,
    Scene,
    TransformSpec,
    render_grid,
    render_tokens,
    spec_tokens,
    token_slots,
    VocabularyError,
)

GRID_FEATURES = int(np.prod(RASTER_SHAPE))
SCENE_SLOTS = len(CELLS) + 1
DOMAINS = ("A", "B")


@dataclass
class ModelConfig:
    embed_dim: int = 64
    hidden_dim: int = 128
    token_dim: int = 64
    fusion_hidden: int = 128
    spec_dim: int | None = None
    normalize: bool = True

    @property
    def d_t(self) -> int:
        return self.spec_dim or self.embed_dim

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def _bias(rng: np.random.Generator, fan_in: int, n: int) -> np.ndarray:
    a = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-a, a, size=n)


def _mlp(store: ParamStore, rng, prefix: str, n_in: int, n_hidden: int, n_out: int) -> None:
    store.add(prefix + "w1", glorot(rng, n_in, n_hidden))
    store.add(prefix + "b1", _bias(rng, n_in, n_hidden))
    store.add(prefix + "w2", glorot(rng, n_hidden, n_out))
    store.add(prefix + "b2", _bias(rng, n_hidden, n_out))


def _table(store: ParamStore, rng, name: str, rows: int, dim: int) -> None:
    # each row is used as a vector on its own, so fan_in is 1
    a = math.sqrt(6.0 / (1 + dim))
    store.add(name, rng.uniform(-a, a, size=(rows, dim)))


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> ParamStore:
    """All encoder and fusion parameters. Same seed, same values."""
    store = ParamStore()
    d, h, e = cfg.embed_dim, cfg.hidden_dim, cfg.token_dim
    _mlp(store, rng, "enc_grid.", GRID_FEATURES, h, d)
    _table(store, rng, "enc_tok.table", len(VOCAB) * SCENE_SLOTS, e)
    _mlp(store, rng, "enc_tok.", e, h, d)
    _table(store, rng, "enc_spec.table", len(VOCAB) * SPEC_LENGTH, e)
    _mlp(store, rng, "enc_spec.", e, h, cfg.d_t)
    _mlp(store, rng, "fuse.", d + cfg.d_t, cfg.fusion_hidden, d)
    return store


def _head(x: Tensor, params: ParamStore, prefix: str) -> Tensor:
    x = dc.add_bias(dc.matmul(x, params.param(prefix + "w1")), params.param(prefix + "b1"))
    x = dc.relu(x)
    return dc.add_bias(dc.matmul(x, params.param(prefix + "w2")), params.param(prefix + "b2"))


# ---------------------------------------------------------------- features


def grid_features(images) -> np.ndarray:
    """Flatten one raster (12×12×3) or a stack of them into rows."""
    arr = np.asarray(images, dtype=np.float64)
    if arr.shape == RASTER_SHAPE:
        arr = arr[None]
    if arr.shape[1:] != RASTER_SHAPE:
        raise dc.DimensionError(f"raster shape {list(arr.shape[1:])} does not match {list(RASTER_SHAPE)}")
    return arr.reshape(len(arr), -1)


def bag_features(tokens, slots, n_slots: int) -> np.ndarray:
    """Averaging row over (token, slot) lookup indices: weight 1/len on each occurrence."""
    row = np.zeros(len(VOCAB) * n_slots)
    for tok, slot in zip(tokens, slots):
        if not 0 <= int(tok) < len(VOCAB):
            raise VocabularyError(f"token id {tok} outside vocabulary of size {len(VOCAB)}")
        row[int(tok) * n_slots + slot] += 1.0 / len(tokens)
    return row


def token_features(seqs) -> np.ndarray:
    """Rows for one token sequence or a list of them. Slot = grid cell of the described object."""
    if seqs and isinstance(seqs[0], (int, np.integer)):
        seqs = [seqs]
    return np.stack([bag_features(s, token_slots(s), SCENE_SLOTS) for s in seqs])


def spec_features(specs) -> np.ndarray:
    if not isinstance(specs, (list, tuple)):
        specs = [specs]
    pos = tuple(range(SPEC_LENGTH))
    return np.stack([bag_features(spec_tokens(t), pos, SPEC_LENGTH) for t in specs])


def observe(scene: Scene, domain: str) -> np.ndarray:
    """Feature row of a scene as seen in ``domain`` (A = raster, B = tokens)."""
    if domain == "A":
        return render_grid(scene).reshape(-1)
    if domain == "B":
        seq = render_tokens(scene)
        return bag_features(seq, token_slots(seq), SCENE_SLOTS)
    raise ValueError(f"unknown domain {domain!r}")


# ---------------------------------------------------------------- encoders


def _finish(x: Tensor, cfg: ModelConfig) -> Tensor:
    return dc.l2_normalize(x) if cfg.normalize else x


def embed_grid(feats, params: ParamStore, cfg: ModelConfig) -> Tensor:
    x = feats if isinstance(feats, Tensor) else Tensor(feats)
    if x.data.ndim != 2 or x.shape[1] != GRID_FEATURES:
        raise dc.DimensionError(f"embed_grid: expected rows of {GRID_FEATURES} features, got {list(x.shape)}")
    return _finish(_head(x, params, "enc_grid."), cfg)


def embed_tokens(feats, params: ParamStore, cfg: ModelConfig) -> Tensor:
    x = feats if isinstance(feats, Tensor) else Tensor(feats)
    x = dc.matmul(x, params.param("enc_tok.table"))
    return _finish(_head(x, params, "enc_tok."), cfg)


def embed_spec(feats, params: ParamStore, cfg: ModelConfig) -> Tensor:
    x = feats if isinstance(feats, Tensor) else Tensor(feats)
    x = dc.matmul(x, params.param("enc_spec.table"))
    return _head(x, params, "enc_spec.")


ENCODERS = {"A": embed_grid, "B": embed_tokens}


def embed_domain(domain: str, feats, params: ParamStore, cfg: ModelConfig) -> Tensor:
    return ENCODERS[domain](feats, params, cfg)


def embed_mixed(domains, feats: np.ndarray, params: ParamStore, cfg: ModelConfig) -> Tensor:
    """Embed rows whose domains differ; output rows keep the input order.

    ``feats`` is a list of per-row feature vectors (their widths differ by domain).
    """
    domains = list(domains)
    groups = [d for d in DOMAINS if d in domains]
    if len(groups) == 1:
        return embed_domain(groups[0], np.stack(feats), params, cfg)
    order, out = [], None
    for d in groups:
        idx = [i for i, dd in enumerate(domains) if dd == d]
        order += idx
        emb = embed_domain(d, np.stack([feats[i] for i in idx]), params, cfg)
        out = emb if out is None else dc.concat(out, emb, axis=0)
    inverse = np.argsort(np.asarray(order), kind="stable")
    return dc.take_rows(out, inverse)


def embed_scenes(scenes, domain: str, params: ParamStore, cfg: ModelConfig) -> Tensor:
    return embed_domain(domain, np.stack([observe(s, domain) for s in scenes]), params, cfg)
