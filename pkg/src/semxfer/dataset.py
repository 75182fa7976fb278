"""Generation of pair/triplet supervision and its JSON-lines file format."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .scene import (
    KINDS,
    Scene,
    Selector,
    TransformSpec,
    apply_transform,
    child_rng,
    enumerate_specs,
    sample_scene,
    spec_from_json,
    spec_key,
    spec_to_json,
)

FILES = {"scenes": "scenes.jsonl", "pairs": "pairs.jsonl", "train": "train.jsonl", "test": "test.jsonl"}
MANIFEST = "manifest.json"


class GenerationError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass
class GenConfig:
    seed: int = 0
    base_scenes: int = 200
    pairs: int = 200
    train_triplets: int = 3000
    test_triplets: int = 500
    queries_per_test_scene: int = 25
    novel_fraction: float = 0.25
    object_count: tuple[int, int] = (3, 5)
    # objects matching this never occur in training data; "novel" test scenes contain one
    holdout: dict = field(default_factory=lambda: {"color": "cyan", "shape": "triangle"})
    kind_weights: dict = field(default_factory=lambda: {k: 1.0 for k in KINDS})

    def __post_init__(self):
        self.object_count = tuple(self.object_count)
        for name in ("base_scenes", "train_triplets", "test_triplets", "queries_per_test_scene"):
            if getattr(self, name) <= 0:
                raise GenerationError(f"{name} must be positive")
        if self.pairs < 0 or self.pairs > self.base_scenes:
            raise GenerationError(f"pairs must lie in 0..base_scenes, got {self.pairs}")
        if not 0 <= self.novel_fraction <= 1:
            raise GenerationError("novel_fraction must lie in [0, 1]")
        unknown = set(self.kind_weights) - set(KINDS)
        if unknown:
            raise GenerationError(f"unknown spec kinds {sorted(unknown)}")

    @property
    def holdout_selector(self) -> Selector | None:
        return Selector(**self.holdout) if self.holdout else None

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["object_count"] = list(self.object_count)
        return d

    @classmethod
    def from_json(cls, d: dict) -> GenConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise GenerationError(f"unknown GenConfig keys {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class Triplet:
    id: str
    q: str
    t: TransformSpec
    r: str
    q_domain: str = "A"
    r_domain: str = "A"

    @property
    def domain(self) -> str:
        return self.q_domain if self.q_domain == self.r_domain else self.q_domain + self.r_domain

    @property
    def key(self) -> tuple[str, str, str, str, str]:
        return (self.q, spec_key(self.t), self.r, self.q_domain, self.r_domain)

    def to_json(self) -> dict:
        return {"id": self.id, "q": self.q, "t": spec_to_json(self.t), "r": self.r, "domain": self.domain}

    @classmethod
    def from_json(cls, d: dict) -> Triplet:
        dom = d["domain"]
        qd, rd = (dom, dom) if len(dom) == 1 else (dom[0], dom[1])
        return cls(d["id"], d["q"], spec_from_json(d["t"]), d["r"], qd, rd)


@dataclass
class Dataset:
    scenes: dict[str, Scene]
    roles: dict[str, set[str]]
    pairs: list[str]
    train: list[Triplet]
    test: list[Triplet]
    config: GenConfig

    @property
    def pool(self) -> list[str]:
        """Candidate pool: every base and test-base scene plus every test target."""
        keep = {"base", "test_base", "test_target"}
        return sorted(sid for sid, rs in self.roles.items() if rs & keep)

    def is_novel(self, scene_id: str) -> bool:
        sel = self.config.holdout_selector
        return sel is not None and count_matching(self.scenes[scene_id], sel) > 0

    def translation_db(self) -> list[str]:
        """Scenes with a known token observation for round-trip translation (no held-out objects)."""
        keep = {"base", "test_base"}
        return sorted(s for s, rs in self.roles.items() if rs & keep and not self.is_novel(s))

    def validate(self) -> None:
        for trip in self.train + self.test:
            got = apply_transform(self.scenes[trip.q], trip.t)
            if got != self.scenes[trip.r]:
                raise GenerationError(f"triplet {trip.id} fails validation")


def count_matching(scene: Scene, sel: Selector) -> int:
    return sum(sel.matches(o) for o in scene.objects)


class _Registry:
    """Content-addressed scene ids: equal scenes share one id."""

    def __init__(self):
        self.by_key: dict[tuple, str] = {}
        self.scenes: dict[str, Scene] = {}
        self.roles: dict[str, set[str]] = {}

    def intern(self, scene: Scene, role: str) -> str:
        sid = self.by_key.get(scene.objects)
        if sid is None:
            sid = f"s{len(self.by_key):06d}"
            self.by_key[scene.objects] = sid
            self.scenes[sid] = scene.with_id(sid)
            self.roles[sid] = set()
        self.roles[sid].add(role)
        return sid

    def __contains__(self, scene: Scene) -> bool:
        return scene.objects in self.by_key


def _candidates(scene: Scene, holdout: Selector | None, kind_weights: dict) -> list[tuple[TransformSpec, Scene, float]]:
    """Valid edits of ``scene`` that do not create held-out objects, with sampling weights.

    A kind's weight is split evenly over that kind's edits, so each kind is drawn
    with probability proportional to its configured weight.
    """
    kinds = [k for k in KINDS if kind_weights.get(k, 0) > 0]
    before = count_matching(scene, holdout) if holdout else 0
    by_kind: dict[str, list] = {k: [] for k in kinds}
    for t in enumerate_specs(scene, kinds):
        r = apply_transform(scene, t)
        if holdout and count_matching(r, holdout) > before:
            continue
        by_kind[t.kind].append((t, r))
    out = []
    for k in kinds:
        for t, r in by_kind[k]:
            out.append((t, r, kind_weights[k] / len(by_kind[k])))
    return out


def _weighted_without_replacement(rng: np.random.Generator, weights: np.ndarray, n: int) -> np.ndarray:
    # Efraimidis-Spirakis: the n largest u^(1/w) keys
    u = rng.random(len(weights))
    keys = np.log(u) / weights
    return np.argsort(-keys, kind="stable")[:n]


def _unique_scene(rng_for, registry: _Registry, count_range, accept) -> Scene:
    for attempt in range(10_000):
        s = sample_scene(rng_for(attempt), count_range)
        if s not in registry and accept(s):
            return s
    raise GenerationError("could not sample a fresh scene; scene space too small for config")


def _force_holdout(rng: np.random.Generator, scene: Scene, holdout: Selector) -> Scene:
    objs = list(scene.objects)
    i = int(rng.integers(len(objs)))
    o = objs[i]
    for attr in ("shape", "color", "size"):
        if holdout.get(attr) is not None:
            o = o.with_attr(attr, holdout.get(attr))
    objs[i] = o
    return Scene(tuple(objs))


def gen_dataset(cfg: GenConfig) -> Dataset:
    holdout = cfg.holdout_selector
    reg = _Registry()
    root = cfg.seed
    no_holdout = (lambda s: count_matching(s, holdout) == 0) if holdout else (lambda s: True)

    base = []
    for i in range(cfg.base_scenes):
        s = _unique_scene(lambda a, i=i: child_rng(root, "base", i, a), reg, cfg.object_count, no_holdout)
        base.append(reg.intern(s, "base"))

    pick = child_rng(root, "pairs").permutation(len(base))[: cfg.pairs]
    pairs = sorted(base[int(i)] for i in pick)

    # training triplets, sampled jointly over all (base scene, edit) candidates
    cands: list[tuple[str, TransformSpec, Scene]] = []
    weights: list[float] = []
    for sid in base:
        for t, r, w in _candidates(reg.scenes[sid], holdout, cfg.kind_weights):
            cands.append((sid, t, r))
            weights.append(w / len(base))
    if cfg.train_triplets > len(cands):
        raise GenerationError(f"requested {cfg.train_triplets} training triplets but only {len(cands)} valid edits exist")
    chosen = _weighted_without_replacement(child_rng(root, "train"), np.asarray(weights), cfg.train_triplets)
    train = []
    for j, ci in enumerate(sorted(chosen)):
        q, t, r = cands[int(ci)]
        train.append(Triplet(f"tr{j:06d}", q, t, reg.intern(r, "target"), "A", "A"))

    # test triplets: many edits per fresh query scene, as in CSS
    per = cfg.queries_per_test_scene
    n_scenes = math.ceil(cfg.test_triplets / per)
    n_novel = round(cfg.novel_fraction * n_scenes) if holdout else 0
    test = []
    for i in range(n_scenes):
        novel = i < n_novel

        def accept(s, novel=novel):
            if novel:
                return True
            return no_holdout(s)

        def rng_for(a, i=i):
            return child_rng(root, "test_base", i, a)

        if novel:
            s = None
            for a in range(10_000):
                cand = _force_holdout(child_rng(root, "novel", i, a), sample_scene(rng_for(a), cfg.object_count), holdout)
                if cand not in reg:
                    s = cand
                    break
            if s is None:
                raise GenerationError("could not sample a fresh novel scene")
        else:
            s = _unique_scene(rng_for, reg, cfg.object_count, accept)
        qid = reg.intern(s, "test_base")
        want = min(per, cfg.test_triplets - len(test))
        opts = _candidates(s, holdout, cfg.kind_weights)
        if want > len(opts):
            raise GenerationError(f"test scene {qid} has only {len(opts)} valid edits, need {want}")
        chosen = _weighted_without_replacement(child_rng(root, "test", i), np.array([w for _, _, w in opts]), want)
        for ci in sorted(chosen):
            t, r, _ = opts[int(ci)]
            test.append(Triplet(f"te{len(test):06d}", qid, t, reg.intern(r, "test_target"), "B", "B"))

    seen_kinds = {tr.t.kind for tr in train}
    missing = {tr.t.kind for tr in test} - seen_kinds
    if missing:
        raise GenerationError(f"test kinds {sorted(missing)} never appear in training")
    ds = Dataset(reg.scenes, reg.roles, pairs, train, test, cfg)
    ds.validate()
    return ds


# ---------------------------------------------------------------- files


def _dump_lines(records) -> bytes:
    return "".join(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n" for r in records).encode()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def dataset_hash(file_hashes: dict[str, str]) -> str:
    return sha256_bytes(canonical_json(file_hashes).encode())


def write_dataset(ds: Dataset, out_dir: str | Path) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pool = set(ds.pool)
    blobs = {
        "scenes": _dump_lines(
            {**ds.scenes[s].to_json(), "roles": sorted(ds.roles[s]), "pool": s in pool} for s in sorted(ds.scenes)
        ),
        "pairs": _dump_lines({"id": s} for s in ds.pairs),
        "train": _dump_lines(t.to_json() for t in ds.train),
        "test": _dump_lines(t.to_json() for t in ds.test),
    }
    hashes = {}
    for name, data in blobs.items():
        (out / FILES[name]).write_bytes(data)
        hashes[name] = sha256_bytes(data)
    manifest = {
        "files": FILES,
        "hashes": hashes,
        "dataset_hash": dataset_hash(hashes),
        "seed": ds.config.seed,
        "gen_config": ds.config.to_json(),
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _read_lines(path: Path) -> list[dict]:
    records = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: {e.msg}") from None
    return records


def read_manifest(data_dir: str | Path) -> dict:
    path = Path(data_dir) / MANIFEST
    if not path.exists():
        raise DataError(f"{path}: manifest not found")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"{path}:{e.lineno}: {e.msg}") from None


def verify_manifest(data_dir: str | Path, manifest: dict | None = None) -> dict:
    """Recompute file hashes and compare against the manifest (stale-data guard)."""
    data_dir = Path(data_dir)
    manifest = manifest or read_manifest(data_dir)
    for name, fname in manifest["files"].items():
        path = data_dir / fname
        if not path.exists():
            raise DataError(f"{path}: dataset file missing")
        got = sha256_bytes(path.read_bytes())
        if got != manifest["hashes"][name]:
            raise DataError(f"{path}: hash {got[:12]} does not match manifest {manifest['hashes'][name][:12]}")
    if dataset_hash(manifest["hashes"]) != manifest["dataset_hash"]:
        raise DataError(f"{data_dir / MANIFEST}: dataset_hash inconsistent with file hashes")
    return manifest


def read_dataset(data_dir: str | Path, verify: bool = True) -> tuple[Dataset, dict]:
    data_dir = Path(data_dir)
    manifest = verify_manifest(data_dir) if verify else read_manifest(data_dir)
    files = manifest["files"]
    scenes, roles = {}, {}
    for rec in _read_lines(data_dir / files["scenes"]):
        s = Scene.from_json(rec)
        scenes[s.id] = s
        roles[s.id] = set(rec.get("roles", []))
    pairs = [rec["id"] for rec in _read_lines(data_dir / files["pairs"])]
    train = [Triplet.from_json(r) for r in _read_lines(data_dir / files["train"])]
    test = [Triplet.from_json(r) for r in _read_lines(data_dir / files["test"])]
    ds = Dataset(scenes, roles, pairs, train, test, GenConfig.from_json(manifest["gen_config"]))
    return ds, manifest
