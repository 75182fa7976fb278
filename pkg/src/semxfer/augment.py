"""Domain-blind augmentation: reversal, transitivity through pairs, and fresh on-the-fly edits."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .dataset import Triplet, count_matching
from .scene import (
    KINDS,
    Add,
    ChangeAttr,
    Remove,
    Scene,
    Selector,
    TransformSpec,
    apply_transform,
    enumerate_specs,
    sample_scene,
)

OTHER = {"A": "B", "B": "A"}


@dataclass
class AugmentConfig:
    enable_reverse: bool = True
    enable_transitive: bool = True
    onfly_per_step: int = 8
    onfly_kinds: dict = field(
        default_factory=lambda: {"change_shape": 1.0, "change_color": 1.0, "change_size": 1.0, "change_cell": 1.0}
    )

    def __post_init__(self):
        if self.onfly_per_step < 0:
            raise ValueError("onfly_per_step must be >= 0")
        unknown = set(self.onfly_kinds) - set(KINDS)
        if unknown:
            raise ValueError(f"unknown spec kinds {sorted(unknown)}")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def reverse_spec(t: TransformSpec) -> TransformSpec:
    """The edit that undoes ``t``.

    Removal and attribute changes are only reversible when the selector already
    pins down what must be restored (the whole object, or the old value).
    """
    if isinstance(t, Add):
        return Remove(Selector.of(t.object))
    if isinstance(t, Remove):
        return Add(t.selector.to_object())
    old = t.selector.get(t.attribute)
    if old is None:
        raise ValueError(f"cannot reverse {t}: selector does not state the current {t.attribute}")
    return ChangeAttr(dataclasses.replace(t.selector, **{t.attribute: t.value}), t.attribute, old)


def _dedupe(triplets) -> list[Triplet]:
    seen, out = set(), []
    for tr in triplets:
        if tr.key not in seen:
            seen.add(tr.key)
            out.append(tr)
    return out


def augment_reverse(triplets: list[Triplet]) -> list[Triplet]:
    """Add (r, reverse(t), q) for every (q, t, r); set semantics on the triplet key."""
    out = list(triplets)
    for tr in triplets:
        if tr.id.endswith("~rev"):
            continue
        out.append(Triplet(tr.id + "~rev", tr.r, reverse_spec(tr.t), tr.q, tr.r_domain, tr.q_domain))
    return _dedupe(out)


def augment_transitive(triplets: list[Triplet], pairs) -> list[Triplet]:
    """Swap in the other-domain observation of q (or of r) when the pairs link it.

    Only one side is swapped per emitted triplet, so the result stays anchored
    in the source domain and never fabricates a pure target-domain example.
    """
    linked = set(pairs)
    if not linked:
        return list(triplets)
    out = list(triplets)
    for tr in triplets:
        if tr.q_domain != tr.r_domain:
            continue
        if tr.q in linked:
            out.append(dataclasses.replace(tr, id=tr.id + "~tq", q_domain=OTHER[tr.q_domain]))
        if tr.r in linked:
            out.append(dataclasses.replace(tr, id=tr.id + "~tr", r_domain=OTHER[tr.r_domain]))
    return _dedupe(out)


def onfly_examples(
    rng: np.random.Generator,
    count: int,
    kind_weights: dict | None = None,
    count_range: tuple[int, int] = (3, 5),
    holdout: Selector | None = None,
    tag: str = "",
) -> list[tuple[Scene, TransformSpec, Scene]]:
    """Fresh (q, t, r) scene triples, never persisted.

    A kind is drawn by weight, then a fresh scene, then a uniform valid edit of
    that kind. Edits that would create a held-out object are skipped. Scene ids
    start with "fly" and cannot collide with dataset ids.
    """
    if count <= 0:
        return []
    weights = kind_weights or AugmentConfig().onfly_kinds
    kinds = sorted(k for k, w in weights.items() if w > 0)
    p = np.array([weights[k] for k in kinds], dtype=float)
    p /= p.sum()
    out = []
    while len(out) < count:
        kind = kinds[int(rng.choice(len(kinds), p=p))]
        while True:
            q = sample_scene(rng, count_range)
            if holdout is not None and count_matching(q, holdout):
                continue
            opts = enumerate_specs(q, (kind,))
            if holdout is not None:
                opts = [t for t in opts if not count_matching(apply_transform(q, t), holdout)]
            if opts:
                break
        t = opts[int(rng.integers(len(opts)))]
        i = len(out)
        out.append((q.with_id(f"fly{tag}-{i}q"), t, apply_transform(q, t).with_id(f"fly{tag}-{i}r")))
    return out
