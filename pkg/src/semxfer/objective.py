"""Metric loss over in-batch negatives, the concat fusion network, and the joint objective."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import ParamStore, Tensor
from .encoders import ModelConfig, embed_mixed, embed_spec


class SamplingError(ValueError):
    pass


@dataclass
class LossConfig:
    temperature: float = 10.0
    lambda_transform: float = 1.0
    batch_size_pairs: int = 32
    batch_size_triplets: int = 32
    learnable_temperature: bool = False

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.lambda_transform < 0:
            raise ValueError("lambda_transform must be non-negative")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class PairBatch:
    ids: list[str]
    feats_a: np.ndarray
    feats_b: np.ndarray


@dataclass
class TripletBatch:
    q_domains: list[str]
    q_feats: list[np.ndarray]
    spec_feats: np.ndarray
    r_domains: list[str]
    r_feats: list[np.ndarray]
    r_keys: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.q_domains)


def temperature(params: ParamStore, lcfg: LossConfig):
    if lcfg.learnable_temperature:
        if "loss.temperature" not in params:
            params.add("loss.temperature", np.array(lcfg.temperature))
        return params.param("loss.temperature")
    return lcfg.temperature


def score_matrix(a: Tensor, b: Tensor, s) -> Tensor:
    return dc.scale(dc.matmul(a, dc.transpose(b)), s)


def metric_loss(a: Tensor, b: Tensor, s=10.0) -> Tensor:
    """Each a_i must pick b_i among all b_j: softmax cross-entropy on s·a bᵀ."""
    if a.shape != b.shape:
        raise dc.DimensionError(f"metric_loss: shapes differ, {list(a.shape)} and {list(b.shape)}")
    return dc.softmax_cross_entropy(score_matrix(a, b, s))


def transform_fuse(q_hat: Tensor, t_hat: Tensor, params: ParamStore, cfg: ModelConfig) -> Tensor:
    """Two-layer feed-forward network over concat(q̂, t̂), mapped back into the shared space."""
    if q_hat.shape[-1] != cfg.embed_dim or t_hat.shape[-1] != cfg.d_t:
        raise dc.DimensionError(
            f"transform_fuse: got {list(q_hat.shape)} and {list(t_hat.shape)}, want last dims {cfg.embed_dim} and {cfg.d_t}"
        )
    x = dc.concat(q_hat, t_hat)
    x = dc.relu(dc.add_bias(dc.matmul(x, params.param("fuse.w1")), params.param("fuse.b1")))
    x = dc.add_bias(dc.matmul(x, params.param("fuse.w2")), params.param("fuse.b2"))
    return dc.l2_normalize(x) if cfg.normalize else x


def embed_loss(batch: PairBatch, params: ParamStore, cfg: ModelConfig, lcfg: LossConfig) -> Tensor:
    if len(set(batch.ids)) != len(batch.ids):
        raise SamplingError("pair batch contains a duplicate scene id")
    s = temperature(params, lcfg)
    a = embed_mixed(["A"] * len(batch.ids), list(batch.feats_a), params, cfg)
    b = embed_mixed(["B"] * len(batch.ids), list(batch.feats_b), params, cfg)
    return dc.scale(dc.add(metric_loss(a, b, s), metric_loss(b, a, s)), 0.5)


def predict_targets(batch: TripletBatch, params: ParamStore, cfg: ModelConfig) -> Tensor:
    q_hat = embed_mixed(batch.q_domains, batch.q_feats, params, cfg)
    t_hat = embed_spec(batch.spec_feats, params, cfg)
    return transform_fuse(q_hat, t_hat, params, cfg)


def transform_loss(batch: TripletBatch, params: ParamStore, cfg: ModelConfig, lcfg: LossConfig) -> Tensor:
    r_tilde = predict_targets(batch, params, cfg)
    r_hat = embed_mixed(batch.r_domains, batch.r_feats, params, cfg)
    return metric_loss(r_tilde, r_hat, temperature(params, lcfg))


def joint_loss(
    pair_batch: PairBatch | None,
    triplet_batch: TripletBatch | None,
    params: ParamStore,
    cfg: ModelConfig,
    lcfg: LossConfig,
) -> tuple[Tensor, dict[str, float]]:
    """embed_loss + lambda · transform_loss; a missing batch or zero lambda drops its term.

    Dropped terms are never built, so their parameters receive no gradient.
    """
    total, parts = None, {}
    if pair_batch is not None:
        le = embed_loss(pair_batch, params, cfg, lcfg)
        parts["loss_embed"] = le.item()
        total = le
    if triplet_batch is not None and lcfg.lambda_transform > 0:
        lt = transform_loss(triplet_batch, params, cfg, lcfg)
        parts["loss_transform"] = lt.item()
        weighted = dc.scale(lt, lcfg.lambda_transform)
        total = weighted if total is None else dc.add(total, weighted)
    if total is None:
        raise ValueError("joint_loss: no loss term to compute")
    return total, parts
