"""Ground-truth scenes, symbolic edits, and the two deterministic renderers.

A scene is a set of attributed objects on a 3×3 grid. Domain A observes it as
a 12×12×3 raster of blobs, domain B as a token sequence that parses back to
the exact scene.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace
from typing import Union

import numpy as np

SHAPES = ("circle", "triangle", "square")
COLORS = ("red", "green", "blue", "yellow", "gray", "cyan")
SIZES = ("small", "large")
GRID = 3
CELLS = tuple((r, c) for r in range(GRID) for c in range(GRID))
CHANGE_ATTRIBUTES = ("shape", "color", "size", "cell")
KINDS = ("add", "remove", "change_shape", "change_color", "change_size", "change_cell")

BLOCK = 4
RASTER_SHAPE = (GRID * BLOCK, GRID * BLOCK, 3)

_VALUES = {"shape": SHAPES, "color": COLORS, "size": SIZES}


class TransformError(ValueError):
    pass


class NoMatch(TransformError):
    pass


class Ambiguous(TransformError):
    pass


class CellOccupied(TransformError):
    pass


class NoOp(TransformError):
    pass


class VocabularyError(ValueError):
    pass


class ParseError(ValueError):
    pass


def child_rng(root: int, *keys: int | str) -> np.random.Generator:
    """Independent generator for (root, keys...): the seed-splitting contract."""
    ints = [int(root)] + [zlib.crc32(k.encode()) if isinstance(k, str) else int(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(ints))


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    size: str
    row: int
    col: int

    def __post_init__(self):
        if self.shape not in SHAPES or self.color not in COLORS or self.size not in SIZES:
            raise ValueError(f"bad object attributes: {self.shape}/{self.color}/{self.size}")
        if not (0 <= self.row < GRID and 0 <= self.col < GRID):
            raise ValueError(f"cell ({self.row}, {self.col}) outside the {GRID}x{GRID} grid")

    @property
    def cell(self) -> tuple[int, int]:
        return (self.row, self.col)

    def get(self, attribute: str):
        return self.cell if attribute == "cell" else getattr(self, attribute)

    def with_attr(self, attribute: str, value) -> SceneObject:
        if attribute == "cell":
            return replace(self, row=value[0], col=value[1])
        return replace(self, **{attribute: value})

    def to_json(self) -> dict:
        return {"shape": self.shape, "color": self.color, "size": self.size, "row": self.row, "col": self.col}

    @classmethod
    def from_json(cls, d: dict) -> SceneObject:
        return cls(d["shape"], d["color"], d["size"], int(d["row"]), int(d["col"]))


@dataclass(frozen=True)
class Scene:
    """Objects in canonical (row, col) order. Equality ignores ``id``."""

    objects: tuple[SceneObject, ...]
    id: str = field(default="", compare=False)

    def __post_init__(self):
        objs = tuple(sorted(self.objects, key=lambda o: o.cell))
        cells = [o.cell for o in objs]
        if len(set(cells)) != len(cells):
            raise CellOccupied(f"two objects share a cell in {cells}")
        object.__setattr__(self, "objects", objs)

    def __len__(self) -> int:
        return len(self.objects)

    def at(self, cell) -> SceneObject | None:
        for o in self.objects:
            if o.cell == tuple(cell):
                return o
        return None

    def empty_cells(self) -> list[tuple[int, int]]:
        used = {o.cell for o in self.objects}
        return [c for c in CELLS if c not in used]

    def with_id(self, scene_id: str) -> Scene:
        return Scene(self.objects, scene_id)

    def to_json(self) -> dict:
        return {"id": self.id, "objects": [o.to_json() for o in self.objects]}

    @classmethod
    def from_json(cls, d: dict) -> Scene:
        return cls(tuple(SceneObject.from_json(o) for o in d["objects"]), d.get("id", ""))


@dataclass(frozen=True)
class Selector:
    """Conjunction of optional attribute constraints."""

    shape: str | None = None
    color: str | None = None
    size: str | None = None
    cell: tuple[int, int] | None = None

    def matches(self, o: SceneObject) -> bool:
        return all(
            want is None or o.get(attr) == want
            for attr, want in (("shape", self.shape), ("color", self.color), ("size", self.size), ("cell", self.cell))
        )

    def get(self, attribute: str):
        return getattr(self, attribute)

    @property
    def is_full(self) -> bool:
        return None not in (self.shape, self.color, self.size, self.cell)

    def to_object(self) -> SceneObject:
        if not self.is_full:
            raise ValueError(f"selector {self} does not name a single concrete object")
        return SceneObject(self.shape, self.color, self.size, *self.cell)

    @classmethod
    def of(cls, o: SceneObject) -> Selector:
        return cls(o.shape, o.color, o.size, o.cell)

    def to_json(self) -> dict:
        d = {k: getattr(self, k) for k in ("shape", "color", "size") if getattr(self, k) is not None}
        if self.cell is not None:
            d["row"], d["col"] = self.cell
        return d

    @classmethod
    def from_json(cls, d: dict) -> Selector:
        cell = (int(d["row"]), int(d["col"])) if "row" in d else None
        return cls(d.get("shape"), d.get("color"), d.get("size"), cell)


@dataclass(frozen=True)
class Add:
    object: SceneObject

    @property
    def kind(self) -> str:
        return "add"


@dataclass(frozen=True)
class Remove:
    selector: Selector

    @property
    def kind(self) -> str:
        return "remove"


@dataclass(frozen=True)
class ChangeAttr:
    selector: Selector
    attribute: str
    value: object

    def __post_init__(self):
        if self.attribute not in CHANGE_ATTRIBUTES:
            raise ValueError(f"unknown attribute {self.attribute!r}")
        if self.attribute == "cell":
            object.__setattr__(self, "value", tuple(self.value))

    @property
    def kind(self) -> str:
        return f"change_{self.attribute}"


TransformSpec = Union[Add, Remove, ChangeAttr]


def spec_to_json(t: TransformSpec) -> dict:
    if isinstance(t, Add):
        return {"kind": "add", "object": t.object.to_json()}
    if isinstance(t, Remove):
        return {"kind": "remove", "selector": t.selector.to_json()}
    value = list(t.value) if t.attribute == "cell" else t.value
    return {"kind": "change", "selector": t.selector.to_json(), "attribute": t.attribute, "value": value}


def spec_from_json(d: dict) -> TransformSpec:
    kind = d["kind"]
    if kind == "add":
        return Add(SceneObject.from_json(d["object"]))
    if kind == "remove":
        return Remove(Selector.from_json(d["selector"]))
    if kind == "change":
        return ChangeAttr(Selector.from_json(d["selector"]), d["attribute"], d["value"])
    raise ValueError(f"unknown spec kind {kind!r}")


def _select(scene: Scene, selector: Selector) -> SceneObject:
    hits = [o for o in scene.objects if selector.matches(o)]
    if not hits:
        raise NoMatch(f"selector {selector} matches no object")
    if len(hits) > 1:
        raise Ambiguous(f"selector {selector} matches {len(hits)} objects")
    return hits[0]


def apply_transform(scene: Scene, t: TransformSpec) -> Scene:
    """Return the edited scene (without an id). ``scene`` is not modified."""
    objs = list(scene.objects)
    if isinstance(t, Add):
        if scene.at(t.object.cell) is not None:
            raise CellOccupied(f"cell {t.object.cell} already occupied")
        return Scene(tuple(objs + [t.object]))
    target = _select(scene, t.selector)
    objs.remove(target)
    if isinstance(t, Remove):
        return Scene(tuple(objs))
    if target.get(t.attribute) == t.value:
        raise NoOp(f"{t.attribute} is already {t.value!r}")
    if t.attribute == "cell" and scene.at(t.value) is not None:
        raise CellOccupied(f"cell {t.value} already occupied")
    return Scene(tuple(objs + [target.with_attr(t.attribute, t.value)]))


def enumerate_specs(scene: Scene, kinds=KINDS) -> list[TransformSpec]:
    """Every valid edit of ``scene`` with full selectors, in a fixed order."""
    out: list[TransformSpec] = []
    empty = scene.empty_cells()
    if "add" in kinds:
        for cell in empty:
            for size in SIZES:
                for color in COLORS:
                    for shape in SHAPES:
                        out.append(Add(SceneObject(shape, color, size, *cell)))
    for o in scene.objects:
        sel = Selector.of(o)
        if "remove" in kinds:
            out.append(Remove(sel))
        for attr in CHANGE_ATTRIBUTES:
            if f"change_{attr}" not in kinds:
                continue
            choices = empty if attr == "cell" else _VALUES[attr]
            out.extend(ChangeAttr(sel, attr, v) for v in choices if v != o.get(attr))
    return out


def sample_scene(rng, count_range: tuple[int, int] = (1, 9)) -> Scene:
    """Uniform object count, then uniform attributes on distinct cells."""
    lo, hi = count_range
    if not (0 <= lo <= hi <= GRID * GRID):
        raise ValueError(f"object count range {count_range} outside 0..{GRID * GRID}")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    n = int(rng.integers(lo, hi + 1))
    cells = rng.choice(len(CELLS), size=n, replace=False)
    objs = []
    for ci in cells:
        r, c = CELLS[int(ci)]
        objs.append(
            SceneObject(
                SHAPES[int(rng.integers(len(SHAPES)))],
                COLORS[int(rng.integers(len(COLORS)))],
                SIZES[int(rng.integers(len(SIZES)))],
                r,
                c,
            )
        )
    return Scene(tuple(objs))


# ---------------------------------------------------------------- domain A: raster

RGB = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "gray": (0.5, 0.5, 0.5),
    "cyan": (0.0, 1.0, 1.0),
}


def _mask(rows: str) -> np.ndarray:
    return np.array([[ch == "X" for ch in r] for r in rows.split("/")], dtype=np.float64)


# every (shape, size) pair has a distinct mask so the renderer is injective
MASKS = {
    ("square", "large"): _mask("XXXX/XXXX/XXXX/XXXX"),
    ("circle", "large"): _mask(".XX./XXXX/XXXX/.XX."),
    ("triangle", "large"): _mask("X.../XX../XXX./XXXX"),
    ("square", "small"): _mask("..../.XX./.XX./...."),
    ("circle", "small"): _mask("..../..X./.XXX/..X."),
    ("triangle", "small"): _mask("..../.X../.XX./...."),
}


def render_grid(scene: Scene) -> np.ndarray:
    img = np.zeros(RASTER_SHAPE)
    for o in scene.objects:
        block = MASKS[(o.shape, o.size)][:, :, None] * np.asarray(RGB[o.color])
        img[o.row * BLOCK : (o.row + 1) * BLOCK, o.col * BLOCK : (o.col + 1) * BLOCK] = block
    return img


# ---------------------------------------------------------------- domain B: tokens

STRUCTURAL = ("<pad>", "<empty>", "<scene>", "<sep>", "<add>", "<remove>", "<change>", "<any>")
ATTR_TOKENS = ("<shape>", "<color>", "<size>", "<cell>")
CELL_TOKENS = tuple(f"c{r}{c}" for r, c in CELLS)
VOCAB = STRUCTURAL + ATTR_TOKENS + SHAPES + COLORS + SIZES + CELL_TOKENS
TOKEN_ID = {tok: i for i, tok in enumerate(VOCAB)}
SPEC_LENGTH = 7
GLOBAL_SLOT = len(CELLS)


def cell_token(cell) -> str:
    return f"c{cell[0]}{cell[1]}"


def _token_cell(tok: str) -> tuple[int, int]:
    return (int(tok[1]), int(tok[2]))


def render_tokens(scene: Scene) -> tuple[int, ...]:
    """``<scene>`` then one ``size color shape cell <sep>`` group per object."""
    if not scene.objects:
        return (TOKEN_ID["<empty>"],)
    toks = ["<scene>"]
    for o in scene.objects:
        toks += [o.size, o.color, o.shape, cell_token(o.cell), "<sep>"]
    return tuple(TOKEN_ID[t] for t in toks)


def token_slots(tokens) -> tuple[int, ...]:
    """Grid cell index of the object each token describes; structural head gets GLOBAL_SLOT."""
    words = decode(tokens)
    slots = []
    for i, w in enumerate(words):
        if i == 0:
            slots.append(GLOBAL_SLOT)
            continue
        group_start = 1 + 5 * ((i - 1) // 5)
        cell_word = words[group_start + 3] if group_start + 3 < len(words) else None
        slots.append(CELLS.index(_token_cell(cell_word)) if cell_word in CELL_TOKENS else GLOBAL_SLOT)
    return tuple(slots)


def decode(tokens) -> list[str]:
    out = []
    for t in tokens:
        if not 0 <= int(t) < len(VOCAB):
            raise VocabularyError(f"token id {t} outside vocabulary of size {len(VOCAB)}")
        out.append(VOCAB[int(t)])
    return out


def parse_tokens(tokens) -> Scene:
    words = decode(tokens)
    if words == ["<empty>"]:
        return Scene(())
    if not words or words[0] != "<scene>" or (len(words) - 1) % 5:
        raise ParseError(f"malformed scene token sequence: {words}")
    objs = []
    for i in range(1, len(words), 5):
        size, color, shape, cell, sep = words[i : i + 5]
        if sep != "<sep>" or cell not in CELL_TOKENS:
            raise ParseError(f"malformed object group at token {i}: {words[i:i + 5]}")
        try:
            objs.append(SceneObject(shape, color, size, *_token_cell(cell)))
        except ValueError as e:
            raise ParseError(f"bad object group at token {i}: {e}") from None
    return Scene(tuple(objs))


def spec_tokens(t: TransformSpec) -> tuple[int, ...]:
    """Fixed-length serialization: kind, selector size/color/shape/cell, attribute, value."""
    if isinstance(t, Add):
        o = t.object
        words = ["<add>", o.size, o.color, o.shape, cell_token(o.cell), "<pad>", "<pad>"]
    else:
        s = t.selector
        sel = [s.size or "<any>", s.color or "<any>", s.shape or "<any>", cell_token(s.cell) if s.cell else "<any>"]
        if isinstance(t, Remove):
            words = ["<remove>"] + sel + ["<pad>", "<pad>"]
        else:
            value = cell_token(t.value) if t.attribute == "cell" else t.value
            words = ["<change>"] + sel + [f"<{t.attribute}>", value]
    return tuple(TOKEN_ID[w] for w in words)


def spec_key(t: TransformSpec) -> str:
    return " ".join(decode(spec_tokens(t)))


def object_fragment(obj: SceneObject) -> tuple[int, ...]:
    """Tokens of a one-object scene; the unit the arithmetic baseline adds or subtracts."""
    return render_tokens(Scene((obj,)))


def selector_fragment(sel: Selector) -> tuple[int, ...]:
    """Tokens for whatever a selector pins down, laid out like a one-object group."""
    if sel.is_full:
        return object_fragment(sel.to_object())
    words = ["<scene>", sel.size or "<any>", sel.color or "<any>", sel.shape or "<any>"]
    words += [cell_token(sel.cell) if sel.cell else "<any>", "<sep>"]
    return tuple(TOKEN_ID[w] for w in words)
