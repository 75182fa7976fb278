"""Batch sampling, the optimization loop for the four training regimes, and checkpoints."""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .augment import AugmentConfig, augment_reverse, augment_transitive, onfly_examples
from .dataset import Dataset, Triplet, canonical_json
from .diffcore import ParamStore
from .encoders import ModelConfig, init_params, observe, spec_features
from .objective import LossConfig, PairBatch, SamplingError, TripletBatch, joint_loss
from .scene import child_rng

logger = logging.getLogger(__name__)

# training-triplet domains (query side, target side) per regime
REGIMES = {
    "in_domain_A": ("A", "A"),
    "in_domain_B": ("B", "B"),
    "cross_AB": ("A", "B"),
    "transfer": ("A", "A"),
}
OPTIMIZERS = ("sgd_momentum", "adam")
SCHEDULES = ("joint", "two_phase")
ENCODER_PREFIXES = ("enc_grid.", "enc_tok.")

MAGIC = b"SMXF"
FORMAT_VERSION = 1


class ConfigError(ValueError):
    pass


class NumericalAbort(RuntimeError):
    def __init__(self, step: int, parts: dict):
        self.step, self.parts = step, parts
        super().__init__(f"non-finite loss at step {step}: {parts}")


class FormatError(ValueError):
    pass


def _from_dict(cls, d: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys {sorted(unknown)}")
    return cls(**d)


@dataclass
class TrainConfig:
    seed: int = 0
    iterations: int = 5000
    learning_rate: float = 0.001
    optimizer: str = "adam"
    momentum: float = 0.9
    regime: str = "transfer"
    schedule: str = "joint"
    phase1_fraction: float = 0.5
    log_every: int = 100
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.iterations <= 0:
            raise ConfigError("iterations must be positive")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {tuple(REGIMES)}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> TrainConfig:
        d = dict(d)
        try:
            nested = {
                "model": _from_dict(ModelConfig, d.pop("model", {})),
                "loss": _from_dict(LossConfig, d.pop("loss", {})),
                "augment": _from_dict(AugmentConfig, d.pop("augment", {})),
            }
            return _from_dict(cls, {**d, **nested})
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None


@dataclass
class Checkpoint:
    params: ParamStore
    config: TrainConfig
    manifest_hash: str = ""
    final_losses: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def to_bytes(self) -> bytes:
        meta = canonical_json(
            {
                "train_config": self.config.to_json(),
                "final_losses": self.final_losses,
                "step_count": self.params.step_count,
            }
        ).encode()
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<I", self.version))
        buf.write(struct.pack("<I", len(meta)))
        buf.write(meta)
        mh = self.manifest_hash.encode()
        buf.write(struct.pack("<I", len(mh)))
        buf.write(mh)
        for name in self.params.names():
            value = self.params[name]
            nb = name.encode()
            buf.write(struct.pack("<I", len(nb)))
            buf.write(nb)
            buf.write(struct.pack("<I", value.ndim))
            buf.write(struct.pack(f"<{value.ndim}Q", *value.shape))
            buf.write(np.ascontiguousarray(value, dtype="<f8").tobytes())
        return buf.getvalue()

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    @classmethod
    def from_bytes(cls, data: bytes) -> Checkpoint:
        view = memoryview(data)
        pos = 0

        def take(n: int) -> bytes:
            nonlocal pos
            if pos + n > len(view):
                raise FormatError("checkpoint truncated")
            out = bytes(view[pos : pos + n])
            pos += n
            return out

        if take(4) != MAGIC:
            raise FormatError("not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", take(4))
        if version != FORMAT_VERSION:
            raise FormatError(f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
        (n,) = struct.unpack("<I", take(4))
        meta = json.loads(take(n))
        (n,) = struct.unpack("<I", take(4))
        manifest_hash = take(n).decode()
        params = ParamStore()
        while pos < len(view):
            (n,) = struct.unpack("<I", take(4))
            name = take(n).decode()
            (rank,) = struct.unpack("<I", take(4))
            shape = struct.unpack(f"<{rank}Q", take(8 * rank))
            count = int(np.prod(shape)) if rank else 1
            params.add(name, np.frombuffer(take(8 * count), dtype="<f8").reshape(shape))
        params.step_count = meta["step_count"]
        return cls(params, TrainConfig.from_json(meta["train_config"]), manifest_hash, meta["final_losses"], version)


def write_checkpoint(path: str | Path, ckpt: Checkpoint) -> str:
    data = ckpt.to_bytes()
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def read_checkpoint(path: str | Path) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes())


def sample_batch(rng: np.random.Generator, items: list, size: int, key=None) -> list:
    """Uniform sample without replacement, skipping items whose ``key`` is already in the batch."""
    if size > len(items):
        raise SamplingError(f"batch size {size} exceeds dataset size {len(items)}")
    out, used = [], set()
    for i in rng.permutation(len(items)):
        item = items[int(i)]
        k = key(item) if key else int(i)
        if k in used:
            continue
        used.add(k)
        out.append(item)
        if len(out) == size:
            return out
    raise SamplingError(f"only {len(out)} items with distinct keys, batch needs {size}")


def training_triplets(cfg: TrainConfig, ds: Dataset) -> list[Triplet]:
    qd, rd = REGIMES[cfg.regime]
    trips = [dataclasses.replace(t, q_domain=qd, r_domain=rd) for t in ds.train]
    if cfg.augment.enable_reverse:
        trips = augment_reverse(trips)
    if cfg.augment.enable_transitive and cfg.regime == "transfer":
        trips = augment_transitive(trips, ds.pairs)
    return trips


def check_regime(cfg: TrainConfig, ds: Dataset) -> None:
    if cfg.regime == "transfer":
        if not ds.pairs:
            raise ConfigError("transfer regime needs a non-empty pair dataset")
        if any(t.q_domain != "A" or t.r_domain != "A" for t in ds.train):
            raise ConfigError("transfer regime trains on domain-A triplets only")
    if not ds.train:
        raise ConfigError("no training triplets")


class _Features:
    """Rendered observations, computed once per (scene, domain)."""

    def __init__(self, scenes):
        self.scenes = scenes
        self.cache: dict[tuple[str, str], np.ndarray] = {}

    def __call__(self, scene_id: str, domain: str) -> np.ndarray:
        k = (scene_id, domain)
        row = self.cache.get(k)
        if row is None:
            row = self.cache[k] = observe(self.scenes[scene_id], domain)
        return row


def train(cfg: TrainConfig, ds: Dataset, manifest_hash: str = "", log: list | None = None) -> Checkpoint:
    """Run ``cfg.iterations`` optimizer steps and return the final checkpoint.

    ``log`` (if given) receives {"step", "loss_embed", "loss_transform"} records
    every ``cfg.log_every`` steps, plus the first and last step.
    """
    check_regime(cfg, ds)
    qd, rd = REGIMES[cfg.regime]
    mcfg, lcfg = cfg.model, cfg.loss
    params = init_params(mcfg, child_rng(cfg.seed, "init"))
    if lcfg.learnable_temperature:
        params.add("loss.temperature", np.array(lcfg.temperature))
    batch_rng = child_rng(cfg.seed, "batches")
    fly_rng = child_rng(cfg.seed, "onfly")

    trips = training_triplets(cfg, ds)
    use_pairs = cfg.regime == "transfer"
    feats = _Features(ds.scenes)
    spec_rows = {}
    holdout = ds.config.holdout_selector

    def spec_row(t):
        row = spec_rows.get(t)
        if row is None:
            row = spec_rows[t] = spec_features([t])[0]
        return row

    phase1_end = int(cfg.iterations * cfg.phase1_fraction) if cfg.schedule == "two_phase" and use_pairs else 0
    last = {}
    for step in range(1, cfg.iterations + 1):
        pair_batch = trip_batch = None
        in_phase1 = step <= phase1_end
        if use_pairs and (cfg.schedule == "joint" or in_phase1):
            ids = sample_batch(batch_rng, ds.pairs, min(lcfg.batch_size_pairs, len(ds.pairs)))
            pair_batch = PairBatch(ids, np.stack([feats(i, "A") for i in ids]), np.stack([feats(i, "B") for i in ids]))
        if not in_phase1:
            size = min(lcfg.batch_size_triplets, len(trips))
            batch = sample_batch(batch_rng, trips, size, key=lambda t: t.r)
            fly = onfly_examples(
                fly_rng, cfg.augment.onfly_per_step, cfg.augment.onfly_kinds, ds.config.object_count, holdout
            )
            r_keys = {ds.scenes[t.r].objects for t in batch}
            extra = []
            for q, t, r in fly:
                if r.objects not in r_keys:
                    r_keys.add(r.objects)
                    extra.append((q, t, r))
            trip_batch = TripletBatch(
                [t.q_domain for t in batch] + [qd] * len(extra),
                [feats(t.q, t.q_domain) for t in batch] + [observe(q, qd) for q, _, _ in extra],
                np.stack([spec_row(t.t) for t in batch] + [spec_row(t) for _, t, _ in extra]),
                [t.r_domain for t in batch] + [rd] * len(extra),
                [feats(t.r, t.r_domain) for t in batch] + [observe(r, rd) for _, _, r in extra],
            )
        params.frozen = (
            {n for n in params.names() if n.startswith(ENCODER_PREFIXES)} if phase1_end and not in_phase1 else set()
        )
        loss, parts = joint_loss(pair_batch, trip_batch, params, mcfg, lcfg)
        if not all(math.isfinite(v) for v in parts.values()):
            raise NumericalAbort(step, parts)
        loss.backward()
        if cfg.optimizer == "adam":
            dc.adam_step(params, cfg.learning_rate)
        else:
            dc.sgd_step(params, cfg.learning_rate, cfg.momentum)
        last = parts
        if log is not None and (step == 1 or step % cfg.log_every == 0 or step == cfg.iterations):
            rec = {"step": step, "loss_embed": parts.get("loss_embed"), "loss_transform": parts.get("loss_transform")}
            log.append(rec)
            logger.debug("step %d %s", step, rec)
    params.frozen = set()
    return Checkpoint(params, cfg, manifest_hash, last)
