"""Exhaustive embedding index, composed-query retrieval, R@k, and the baseline suite."""

from __future__ import annotations

import dataclasses
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .dataset import Dataset, Triplet
from .diffcore import ParamStore, Tensor
from .encoders import ModelConfig, embed_domain, embed_spec, embed_tokens, observe, spec_features, token_features
from .objective import transform_fuse
from .scene import (
    Add,
    ChangeAttr,
    Remove,
    Scene,
    TransformError,
    TransformSpec,
    apply_transform,
    object_fragment,
    parse_tokens,
    render_tokens,
    selector_fragment,
)

DEFAULT_KS = (1, 5, 10)
# Protocols evaluated for each regime's checkpoint
REGIME_PROTOCOLS = {
    "in_domain_A": [("A", "A")],
    "in_domain_B": [("B", "B")],
    "cross_AB": [("A", "B")],
    "transfer": [("A", "A"), ("A", "B"), ("B", "B")],
}
PROTOCOL_COLUMNS = [("A", "A"), ("A", "B"), ("B", "B")]
BASELINES = ("image_only", "arithmetic", "roundtrip")


class ProtocolError(ValueError):
    pass


@dataclass
class EmbeddingIndex:
    ids: list[str]
    matrix: np.ndarray
    domain: str

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class RetrievalResult:
    """Full ranking of the pool for one query, best first; ties go to the smaller id."""

    query_id: str
    ranked: list[str]
    scores: np.ndarray
    fallback: bool = False

    def top(self, k: int) -> list[str]:
        return self.ranked[:k]


@dataclass
class MetricsReport:
    regime: str
    protocol: str
    method: str
    r_at: dict[str, float]
    by_kind: dict[str, dict[str, float]]
    by_subset: dict[str, dict[str, float]]
    n_queries: int
    checkpoint_hash: str = ""
    dataset_hash: str = ""
    n_fallback: int = 0

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def protocol_name(q_domain: str, r_domain: str) -> str:
    return f"{q_domain}->{r_domain}"


def _embed(scenes, domain, params, cfg) -> np.ndarray:
    return embed_domain(domain, np.stack([observe(s, domain) for s in scenes]), params, cfg).data


def build_index(scenes, domain: str, params: ParamStore, cfg: ModelConfig) -> EmbeddingIndex:
    """Encode scenes (Scene objects with ids) into a matrix whose rows follow ascending id."""
    scenes = sorted(scenes, key=lambda s: s.id)
    if not scenes:
        raise ProtocolError("cannot build an index over zero observations")
    ids = [s.id for s in scenes]
    if len(set(ids)) != len(ids):
        raise ProtocolError("index ids must be unique")
    return EmbeddingIndex(ids, _embed(scenes, domain, params, cfg), domain)


def rank(query_id: str, scores: np.ndarray, index: EmbeddingIndex, exclude=()) -> RetrievalResult:
    # index ids ascend, so a stable sort on -score breaks ties by ascending id
    order = np.argsort(-scores, kind="stable")
    skip = set(exclude)
    keep = [int(i) for i in order if index.ids[int(i)] not in skip]
    return RetrievalResult(query_id, [index.ids[i] for i in keep], scores[keep])


def rank_many(query_ids, vectors: np.ndarray, index: EmbeddingIndex, excludes) -> list[RetrievalResult]:
    scores = vectors @ index.matrix.T
    return [rank(qid, scores[i], index, excludes[i]) for i, qid in enumerate(query_ids)]


def compose(q_scenes, q_domain: str, specs, params: ParamStore, cfg: ModelConfig) -> np.ndarray:
    """Predicted target embeddings: fuse(embed(q), embed_spec(t)) for each query."""
    q_hat = embed_domain(q_domain, np.stack([observe(s, q_domain) for s in q_scenes]), params, cfg)
    t_hat = embed_spec(spec_features(list(specs)), params, cfg)
    return transform_fuse(q_hat, t_hat, params, cfg).data


def query_composed(
    q_scene: Scene, q_domain: str, t: TransformSpec, index: EmbeddingIndex, params: ParamStore, cfg: ModelConfig, exclude=()
) -> RetrievalResult:
    vec = compose([q_scene], q_domain, [t], params, cfg)
    return rank(q_scene.id, index.matrix @ vec[0], index, exclude)


def baseline_image_only(
    q_scene: Scene, q_domain: str, index: EmbeddingIndex, params: ParamStore, cfg: ModelConfig, exclude=()
) -> RetrievalResult:
    vec = _embed([q_scene], q_domain, params, cfg)
    return rank(q_scene.id, index.matrix @ vec[0], index, exclude)


def arithmetic_offsets(specs, params: ParamStore, cfg: ModelConfig) -> np.ndarray:
    """embed(to) - embed(from) per spec, with token-domain fragments as the semantic units.

    Add contributes +embed(object); Remove contributes -embed(selected object).
    """
    plus, minus, out = [], [], np.zeros((len(specs), cfg.embed_dim))
    for i, t in enumerate(specs):
        if isinstance(t, Add):
            plus.append((i, object_fragment(t.object)))
        elif isinstance(t, Remove):
            minus.append((i, selector_fragment(t.selector)))
        else:
            to_sel = dataclasses.replace(t.selector, **{t.attribute: t.value})
            minus.append((i, selector_fragment(t.selector)))
            plus.append((i, selector_fragment(to_sel)))
    for sign, items in ((1.0, plus), (-1.0, minus)):
        if items:
            emb = embed_tokens(token_features([f for _, f in items]), params, cfg).data
            for (i, _), e in zip(items, emb):
                out[i] += sign * e
    return out


def baseline_arithmetic(
    q_scene: Scene, q_domain: str, t: TransformSpec, index: EmbeddingIndex, params: ParamStore, cfg: ModelConfig, exclude=()
) -> RetrievalResult:
    vec = _arithmetic_vectors([q_scene], q_domain, [t], params, cfg)
    return rank(q_scene.id, index.matrix @ vec[0], index, exclude)


def _arithmetic_vectors(q_scenes, q_domain, specs, params, cfg) -> np.ndarray:
    q = _embed(q_scenes, q_domain, params, cfg)
    v = q + arithmetic_offsets(list(specs), params, cfg)
    return dc.l2_normalize(Tensor(v)).data if cfg.normalize else v


def baseline_roundtrip(
    q_scene: Scene,
    t: TransformSpec,
    translation: EmbeddingIndex,
    translation_scenes: dict[str, Scene],
    index_b: EmbeddingIndex,
    params: ParamStore,
    cfg: ModelConfig,
    exclude=(),
) -> RetrievalResult:
    """Domain A query -> nearest token observation -> apply t natively -> re-embed -> search domain B.

    If the edit does not apply to the translated scene, fall back to image-only
    ranking against ``index_b`` and flag the result.
    """
    q_vec = _embed([q_scene], "A", params, cfg)[0]
    nearest = rank(q_scene.id, translation.matrix @ q_vec, translation).ranked[0]
    tokens = render_tokens(translation_scenes[nearest])
    try:
        edited = apply_transform(parse_tokens(tokens), t)
    except TransformError:
        res = rank(q_scene.id, index_b.matrix @ q_vec, index_b, exclude)
        res.fallback = True
        return res
    vec = embed_tokens(token_features([render_tokens(edited)]), params, cfg).data[0]
    return rank(q_scene.id, index_b.matrix @ vec, index_b, exclude)


def recall_at_k(results: list[RetrievalResult], ground_truth: dict[str, set[str]], k: int) -> float:
    """Percentage of queries with at least one correct id in the top k."""
    if not results:
        raise ProtocolError("recall over zero queries")
    hits = 0
    for res in results:
        correct = ground_truth[res.query_id]
        if not correct & set(res.ranked):
            raise ProtocolError(f"query {res.query_id}: no correct candidate in the pool")
        hits += bool(correct & set(res.ranked[:k]))
    return 100.0 * hits / len(results)


# ---------------------------------------------------------------- evaluation protocol


def _summarize(results, truth, groups: dict[str, list[str]], ks) -> dict[str, dict[str, float]]:
    out = {}
    by_id = {r.query_id: r for r in results}
    for name in sorted(groups):
        subset = [by_id[q] for q in groups[name]]
        if subset:
            out[name] = {str(k): round(recall_at_k(subset, truth, k), 2) for k in ks}
    return out


def evaluate(
    ds: Dataset,
    params: ParamStore,
    cfg: ModelConfig,
    q_domain: str,
    r_domain: str,
    method: str = "composed",
    ks=DEFAULT_KS,
    regime: str = "",
    checkpoint_hash: str = "",
    dataset_hash: str = "",
) -> MetricsReport:
    """Run every test triplet as a query against the candidate pool in ``r_domain``.

    The pool holds all base and test-base scenes plus all test targets; each
    query's own scene is removed from its ranking.
    """
    tests: list[Triplet] = ds.test
    if not tests:
        raise ProtocolError("empty test set")
    pool = [ds.scenes[s] for s in ds.pool]
    index = build_index(pool, r_domain, params, cfg)
    pool_ids = set(index.ids)
    for tr in tests:
        if tr.r not in pool_ids:
            raise ProtocolError(f"test target {tr.r} of {tr.id} missing from the pool")
    qids = [tr.id for tr in tests]
    q_scenes = [ds.scenes[tr.q] for tr in tests]
    specs = [tr.t for tr in tests]
    excludes = [{tr.q} for tr in tests]

    if method == "composed":
        results = rank_many(qids, compose(q_scenes, q_domain, specs, params, cfg), index, excludes)
    elif method == "image_only":
        results = rank_many(qids, _embed(q_scenes, q_domain, params, cfg), index, excludes)
    elif method == "arithmetic":
        results = rank_many(qids, _arithmetic_vectors(q_scenes, q_domain, specs, params, cfg), index, excludes)
    elif method == "roundtrip":
        if (q_domain, r_domain) != ("A", "B"):
            raise ProtocolError("round-trip baseline is defined for domain-A queries against a domain-B pool")
        db = {s: ds.scenes[s] for s in ds.translation_db()}
        translation = build_index(db.values(), "B", params, cfg)
        results = [
            dataclasses.replace(
                baseline_roundtrip(q, t, translation, db, index, params, cfg, ex), query_id=qid
            )
            for qid, q, t, ex in zip(qids, q_scenes, specs, excludes)
        ]
    else:
        raise ValueError(f"unknown retrieval method {method!r}")

    truth = {tr.id: {tr.r} for tr in tests}
    by_kind = defaultdict(list)
    by_subset = defaultdict(list)
    for tr in tests:
        by_kind[tr.t.kind].append(tr.id)
        by_subset["novel" if ds.is_novel(tr.q) else "seen"].append(tr.id)
    return MetricsReport(
        regime=regime,
        protocol=protocol_name(q_domain, r_domain),
        method=method,
        r_at={str(k): round(recall_at_k(results, truth, k), 2) for k in ks},
        by_kind=_summarize(results, truth, by_kind, ks),
        by_subset=_summarize(results, truth, by_subset, ks),
        n_queries=len(tests),
        checkpoint_hash=checkpoint_hash,
        dataset_hash=dataset_hash,
        n_fallback=sum(r.fallback for r in results),
    )


def run_matrix(checkpoints: dict, ds: Dataset, ks=DEFAULT_KS, dataset_hash: str = "") -> list[MetricsReport]:
    """Regime-by-protocol results: each present regime checkpoint on its protocols.

    ``checkpoints`` maps regime name to a Checkpoint (or None when missing);
    missing regimes are simply absent from the output and show as gaps in
    :func:`format_table`.
    """
    reports = []
    for regime in REGIME_PROTOCOLS:
        ckpt = checkpoints.get(regime)
        if ckpt is None:
            continue
        for qd, rd in REGIME_PROTOCOLS[regime]:
            reports.append(
                evaluate(ds, ckpt.params, ckpt.config.model, qd, rd, "composed", ks, regime, ckpt.hash, dataset_hash)
            )
    return reports


def run_baselines(ckpt, ds: Dataset, ks=DEFAULT_KS, dataset_hash: str = "") -> list[MetricsReport]:
    """Image-only, arithmetic and round-trip baselines on a (transfer) checkpoint."""
    out = []
    h = ckpt.hash
    regime = ckpt.config.regime
    for method, protocols in (
        ("image_only", [("A", "B"), ("B", "B")]),
        ("arithmetic", [("A", "B"), ("B", "B")]),
        ("roundtrip", [("A", "B")]),
    ):
        for qd, rd in protocols:
            out.append(evaluate(ds, ckpt.params, ckpt.config.model, qd, rd, method, ks, regime, h, dataset_hash))
    return out


def format_table(reports: list[MetricsReport], k: str = "1") -> str:
    """Aligned plain-text R@k table: one row per (regime, method), one column per protocol."""
    rows: dict[tuple[str, str], dict[str, float]] = {}
    for rep in reports:
        rows.setdefault((rep.regime, rep.method), {})[rep.protocol] = rep.r_at[k]
    cols = [protocol_name(*p) for p in PROTOCOL_COLUMNS]
    header = ["regime", "method"] + cols
    body = [
        [regime, method] + [f"{vals[c]:.2f}" if c in vals else "-" for c in cols]
        for (regime, method), vals in rows.items()
    ]
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    lines = [f"R@{k}"]
    for r in [header] + body:
        lines.append("  ".join(cell.ljust(w) if i < 2 else cell.rjust(w) for i, (cell, w) in enumerate(zip(r, widths))))
    return "\n".join(lines)
