"""Synthetic scene microworld.

Scenes are small grids of attributed objects. Questions are written in a
keyword grammar inside literal ``<question>`` tags and every well-formed
question has an exact answer computed by :func:`oracle_answer`.

Surface grammar (body between the tags, words separated by single spaces)::

    count [FILTER ...]                 0-3 filters, distinct keys
    exists FILTER [FILTER ...]         1-3 filters, distinct keys
    compare_count FILTER... vs FILTER...   1-3 filters per side
    attribute_at attr=KEY row=R col=C  arguments in any order

    FILTER := shape=VALUE | color=VALUE | size=VALUE

Answers are canonical strings: decimal digits for counts, ``yes``/``no`` for
existence, ``more``/``fewer``/``equal`` for comparisons (left side relative to
the right side), an attribute value or ``none`` for empty cells.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import FormatError, GrammarError, SpecError

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "blue", "green", "yellow")
SIZES = ("small", "large")
ATTRIBUTES = {"shape": SHAPES, "color": COLORS, "size": SIZES}
FILTER_KEYS = ("color", "shape", "size")  # canonical serialization order

KINDS = ("count", "exists", "compare_count", "attribute_at")
OPEN_TAG = "<question>"
CLOSE_TAG = "</question>"
END_TOKEN = "<eos>"
VS = "vs"
COMPARE_ANSWERS = ("more", "fewer", "equal")
NONE_ANSWER = "none"

GRAMMAR_VERSION = 1


@dataclass(frozen=True)
class GenerationSpec:
    grid_w: int = 4
    grid_h: int = 4
    min_objects: int = 1
    max_objects: int = 5
    shapes: tuple[str, ...] = SHAPES
    colors: tuple[str, ...] = COLORS
    sizes: tuple[str, ...] = SIZES

    @property
    def capacity(self) -> int:
        return self.grid_w * self.grid_h

    def palette(self, key: str) -> tuple[str, ...]:
        return {"shape": self.shapes, "color": self.colors, "size": self.sizes}[key]

    def validate(self) -> None:
        if self.grid_w < 1 or self.grid_h < 1:
            raise SpecError(f"grid must have positive dimensions, got {self.grid_w}x{self.grid_h}")
        if not (1 <= self.min_objects <= self.max_objects <= self.capacity):
            raise SpecError(
                f"need 1 <= min_objects <= max_objects <= {self.capacity}, "
                f"got {self.min_objects}..{self.max_objects}"
            )
        for key in ("shape", "color", "size"):
            values = self.palette(key)
            if not values:
                raise SpecError(f"empty {key} palette")
            unknown = set(values) - set(ATTRIBUTES[key])
            if unknown or len(set(values)) != len(values):
                raise SpecError(f"bad {key} palette {values!r}")

    def to_dict(self) -> dict:
        return {
            "grid_w": self.grid_w,
            "grid_h": self.grid_h,
            "min_objects": self.min_objects,
            "max_objects": self.max_objects,
            "shapes": list(self.shapes),
            "colors": list(self.colors),
            "sizes": list(self.sizes),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GenerationSpec":
        d = dict(d)
        for key in ("shapes", "colors", "sizes"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    size: str
    cell: tuple[int, int]  # (row, col)

    def attribute(self, key: str) -> str:
        return getattr(self, key)


@dataclass(frozen=True)
class Scene:
    scene_id: int
    seed: int
    grid_w: int
    grid_h: int
    objects: tuple[SceneObject, ...]
    feature_vector: tuple[float, ...] = field(repr=False)

    def object_at(self, row: int, col: int) -> SceneObject | None:
        for obj in self.objects:
            if obj.cell == (row, col):
                return obj
        return None

    def to_dict(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "seed": self.seed,
            "grid_w": self.grid_w,
            "grid_h": self.grid_h,
            "objects": [
                {"shape": o.shape, "color": o.color, "size": o.size, "cell": list(o.cell)}
                for o in self.objects
            ],
            "feature_vector": list(self.feature_vector),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        objects = tuple(
            SceneObject(o["shape"], o["color"], o["size"], (int(o["cell"][0]), int(o["cell"][1])))
            for o in d["objects"]
        )
        return cls(
            scene_id=int(d["scene_id"]),
            seed=int(d["seed"]),
            grid_w=int(d["grid_w"]),
            grid_h=int(d["grid_h"]),
            objects=objects,
            feature_vector=tuple(float(x) for x in d["feature_vector"]),
        )


def generate_scene(seed: int, spec: GenerationSpec, scene_id: int = 0) -> Scene:
    """Build the scene determined by ``(seed, spec)``."""
    spec.validate()
    rng = np.random.default_rng(int(seed))
    n = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    cells = rng.choice(spec.capacity, size=n, replace=False)
    objects = []
    for flat in sorted(int(c) for c in cells):
        objects.append(
            SceneObject(
                shape=spec.shapes[int(rng.integers(len(spec.shapes)))],
                color=spec.colors[int(rng.integers(len(spec.colors)))],
                size=spec.sizes[int(rng.integers(len(spec.sizes)))],
                cell=divmod(flat, spec.grid_w),
            )
        )
    objects = tuple(objects)
    features = _features(objects, spec.grid_w, spec.grid_h)
    return Scene(int(scene_id), int(seed), spec.grid_w, spec.grid_h, objects, tuple(features))


# ---------------------------------------------------------------------------
# Features


def _combos() -> list[tuple[str | None, str | None, str | None]]:
    """(shape, color, size) filter combinations; None is the wildcard."""
    return list(
        itertools.product((None,) + SHAPES, (None,) + COLORS, (None,) + SIZES)
    )


_COMBOS = _combos()
CELL_BLOCK = 1 + len(SHAPES) + len(COLORS) + len(SIZES)


def feature_length(grid_w: int, grid_h: int) -> int:
    return len(_COMBOS) + CELL_BLOCK * grid_w * grid_h


def feature_layout(grid_w: int, grid_h: int) -> list[str]:
    """Human readable name of every feature index, in order."""
    names = []
    for shape, color, size in _COMBOS:
        names.append(f"count[shape={shape or '*'},color={color or '*'},size={size or '*'}]/capacity")
    for r in range(grid_h):
        for c in range(grid_w):
            names.append(f"cell[{r},{c}].occupied")
            names.extend(f"cell[{r},{c}].shape={v}" for v in SHAPES)
            names.extend(f"cell[{r},{c}].color={v}" for v in COLORS)
            names.extend(f"cell[{r},{c}].size={v}" for v in SIZES)
    return names


def _features(objects, grid_w: int, grid_h: int) -> list[float]:
    capacity = grid_w * grid_h
    out = []
    for shape, color, size in _COMBOS:
        n = sum(
            1
            for o in objects
            if (shape is None or o.shape == shape)
            and (color is None or o.color == color)
            and (size is None or o.size == size)
        )
        out.append(n / capacity)
    cells = [0.0] * (CELL_BLOCK * capacity)
    for o in objects:
        base = CELL_BLOCK * (o.cell[0] * grid_w + o.cell[1])
        cells[base] = 1.0
        cells[base + 1 + SHAPES.index(o.shape)] = 1.0
        cells[base + 1 + len(SHAPES) + COLORS.index(o.color)] = 1.0
        cells[base + 1 + len(SHAPES) + len(COLORS) + SIZES.index(o.size)] = 1.0
    return out + cells


def scene_features(scene: Scene) -> list[float]:
    """Normalized joint attribute counts followed by per-cell one-hot blocks."""
    return _features(scene.objects, scene.grid_w, scene.grid_h)


# ---------------------------------------------------------------------------
# Questions


@dataclass(frozen=True)
class QuestionAst:
    kind: str
    filters: tuple[tuple[str, str], ...] = ()
    right: tuple[tuple[str, str], ...] = ()
    attr: str | None = None
    cell: tuple[int, int] | None = None


def _canon_filters(pairs) -> tuple[tuple[str, str], ...]:
    return tuple(sorted(pairs, key=lambda kv: FILTER_KEYS.index(kv[0])))


def _matches(obj: SceneObject, filters) -> bool:
    return all(obj.attribute(k) == v for k, v in filters)


def count_matching(scene: Scene, filters) -> int:
    return sum(1 for o in scene.objects if _matches(o, filters))


def oracle_answer(scene: Scene, q: QuestionAst) -> str:
    if q.kind == "count":
        return str(count_matching(scene, q.filters))
    if q.kind == "exists":
        return "yes" if count_matching(scene, q.filters) > 0 else "no"
    if q.kind == "compare_count":
        left = count_matching(scene, q.filters)
        right = count_matching(scene, q.right)
        return "more" if left > right else "fewer" if left < right else "equal"
    if q.kind == "attribute_at":
        obj = scene.object_at(*q.cell)
        return NONE_ANSWER if obj is None else obj.attribute(q.attr)
    raise GrammarError(f"unknown question kind {q.kind!r}")


def canonicalize_answer(text: str) -> str:
    """Lowercase, trim, and strip leading zeros from pure digit strings."""
    s = text.strip().lower()
    if s.isdigit() and s.isascii():
        return str(int(s))
    return s


def split_tags(text: str) -> str:
    """Return the body of a strictly tagged question or raise FormatError."""
    if not (text.startswith(OPEN_TAG) and text.endswith(CLOSE_TAG)):
        raise FormatError("text must start with <question> and end with </question>")
    if len(text) < len(OPEN_TAG) + len(CLOSE_TAG):
        raise FormatError("overlapping tags")
    body = text[len(OPEN_TAG) : len(text) - len(CLOSE_TAG)]
    if OPEN_TAG in body or CLOSE_TAG in body:
        raise FormatError("nested or repeated question tags")
    return body


class Grammar:
    """Question grammar and token vocabulary for one generation spec.

    Token ids: ``<eos>`` is 0, then the two tags, then the body words, then the
    answer words. Both policies share this vocabulary.
    """

    def __init__(self, spec: GenerationSpec):
        spec.validate()
        self.spec = spec
        filters = [f"{k}={v}" for k in FILTER_KEYS for v in spec.palette(k)]
        attrs = [f"attr={k}" for k in ("shape", "color", "size")]
        rows = [f"row={r}" for r in range(spec.grid_h)]
        cols = [f"col={c}" for c in range(spec.grid_w)]
        self.body_words: list[str] = list(KINDS) + [VS] + filters + attrs + rows + cols
        numbers = [str(n) for n in range(spec.capacity + 1)]
        self.answer_words: list[str] = (
            numbers
            + ["yes", "no"]
            + list(COMPARE_ANSWERS)
            + list(spec.shapes)
            + list(spec.colors)
            + list(spec.sizes)
            + [NONE_ANSWER]
        )
        # answer words may repeat across attributes only if palettes overlapped; they do not
        self.vocab: list[str] = [END_TOKEN, OPEN_TAG, CLOSE_TAG] + self.body_words + self.answer_words
        if len(set(self.vocab)) != len(self.vocab):
            raise SpecError("vocabulary collision")
        self.index = {w: i for i, w in enumerate(self.vocab)}
        self.end_id = 0
        self.body_index = {w: i for i, w in enumerate(self.body_words)}

    # -- vocabulary -------------------------------------------------------

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @property
    def encoding_length(self) -> int:
        """Length of the two-slot question encoding used in reasoner contexts."""
        return 2 * len(self.body_words)

    @property
    def context_length(self) -> int:
        return feature_length(self.spec.grid_w, self.spec.grid_h) + self.encoding_length

    def detokenize(self, ids) -> str:
        """Join tokens; body words are separated by a single space, tags are not."""
        parts: list[str] = []
        prev_body = False
        for i in ids:
            i = int(i)
            if i == self.end_id:
                break
            word = self.vocab[i]
            is_body = word not in (OPEN_TAG, CLOSE_TAG)
            if is_body and prev_body:
                parts.append(" ")
            parts.append(word)
            prev_body = is_body
        return "".join(parts)

    def tokenize_question(self, q: QuestionAst) -> list[int]:
        words = [OPEN_TAG] + self.serialize(q).split(" ") + [CLOSE_TAG, END_TOKEN]
        return [self.index[w] for w in words]

    def questioner_mask(self) -> np.ndarray:
        mask = np.zeros(self.vocab_size, dtype=bool)
        mask[: 3 + len(self.body_words)] = True
        return mask

    def answer_options(self, q: QuestionAst) -> list[str]:
        if q.kind == "count":
            return [str(n) for n in range(self.spec.max_objects + 1)]
        if q.kind == "exists":
            return ["yes", "no"]
        if q.kind == "compare_count":
            return list(COMPARE_ANSWERS)
        return list(self.spec.palette(q.attr)) + [NONE_ANSWER]

    def answer_mask(self, q: QuestionAst) -> np.ndarray:
        mask = np.zeros(self.vocab_size, dtype=bool)
        mask[[self.index[a] for a in self.answer_options(q)]] = True
        return mask

    def question_encoding(self, q: QuestionAst) -> list[float]:
        """Indicator bag of body words; words after ``vs`` go to the second slot."""
        n = len(self.body_words)
        enc = [0.0] * (2 * n)
        words = self.serialize(q).split(" ")
        slot = 0
        for w in words:
            if w == VS:
                slot = n
                continue
            enc[slot + self.body_index[w]] = 1.0
        return enc

    def questioner_context(self, scene: Scene) -> np.ndarray:
        return np.asarray(list(scene.feature_vector) + [0.0] * self.encoding_length)

    def reasoner_context(self, scene: Scene, q: QuestionAst) -> np.ndarray:
        return np.asarray(list(scene.feature_vector) + self.question_encoding(q))

    # -- parsing ----------------------------------------------------------

    def _parse_filters(self, words: list[str], lo: int, hi: int) -> tuple[tuple[str, str], ...]:
        if not lo <= len(words) <= hi:
            raise GrammarError(f"expected {lo}-{hi} filters, got {len(words)}")
        seen = {}
        for w in words:
            key, sep, value = w.partition("=")
            if not sep or key not in FILTER_KEYS:
                raise GrammarError(f"not a filter: {w!r}")
            if value not in self.spec.palette(key):
                raise GrammarError(f"{key}={value} is not in the palette")
            if key in seen:
                raise GrammarError(f"duplicate filter key {key!r}")
            seen[key] = value
        return _canon_filters(seen.items())

    def parse_body(self, body: str) -> QuestionAst:
        words = body.split(" ")
        if not body or any(not w for w in words):
            raise GrammarError("empty body or irregular spacing")
        kind, args = words[0], words[1:]
        if kind == "count":
            return QuestionAst("count", self._parse_filters(args, 0, 3))
        if kind == "exists":
            return QuestionAst("exists", self._parse_filters(args, 1, 3))
        if kind == "compare_count":
            if args.count(VS) != 1:
                raise GrammarError("compare_count needs exactly one 'vs'")
            k = args.index(VS)
            return QuestionAst(
                "compare_count",
                self._parse_filters(args[:k], 1, 3),
                self._parse_filters(args[k + 1 :], 1, 3),
            )
        if kind == "attribute_at":
            got: dict[str, str] = {}
            for w in args:
                key, sep, value = w.partition("=")
                if not sep or key not in ("attr", "row", "col") or key in got:
                    raise GrammarError(f"bad attribute_at argument {w!r}")
                got[key] = value
            if set(got) != {"attr", "row", "col"}:
                raise GrammarError("attribute_at needs attr, row and col")
            if got["attr"] not in ATTRIBUTES:
                raise GrammarError(f"unknown attribute {got['attr']!r}")
            try:
                row, col = int(got["row"]), int(got["col"])
            except ValueError:
                raise GrammarError("row/col must be integers") from None
            if got["row"] != str(row) or got["col"] != str(col):
                raise GrammarError("row/col must be canonical integers")
            if not (0 <= row < self.spec.grid_h and 0 <= col < self.spec.grid_w):
                raise GrammarError(f"cell ({row},{col}) outside the grid")
            return QuestionAst("attribute_at", attr=got["attr"], cell=(row, col))
        raise GrammarError(f"unknown question kind {kind!r}")

    def parse_question(self, text: str) -> QuestionAst:
        return self.parse_body(split_tags(text))

    def serialize(self, q: QuestionAst) -> str:
        """Body text of ``q`` (without tags)."""

        def fs(pairs):
            return [f"{k}={v}" for k, v in _canon_filters(pairs)]

        if q.kind in ("count", "exists"):
            return " ".join([q.kind] + fs(q.filters))
        if q.kind == "compare_count":
            return " ".join([q.kind] + fs(q.filters) + [VS] + fs(q.right))
        if q.kind == "attribute_at":
            return f"attribute_at attr={q.attr} row={q.cell[0]} col={q.cell[1]}"
        raise GrammarError(f"unknown question kind {q.kind!r}")

    def question_text(self, q: QuestionAst) -> str:
        return OPEN_TAG + self.serialize(q) + CLOSE_TAG

    # -- enumeration and sampling ------------------------------------------

    def _filter_sets(self, max_filters: int) -> Iterator[tuple[tuple[str, str], ...]]:
        for n in range(max_filters + 1):
            for keys in itertools.combinations(FILTER_KEYS, n):
                for values in itertools.product(*(self.spec.palette(k) for k in keys)):
                    yield tuple(zip(keys, values))

    def enumerate_questions(self, max_filters: int = 3) -> Iterator[QuestionAst]:
        """Every question of the grammar with at most ``max_filters`` filters per side."""
        sets = list(self._filter_sets(max_filters))
        for f in sets:
            yield QuestionAst("count", f)
        for f in sets:
            if f:
                yield QuestionAst("exists", f)
        nonempty = [f for f in sets if f]
        for f, g in itertools.product(nonempty, nonempty):
            yield QuestionAst("compare_count", f, g)
        for attr in ("shape", "color", "size"):
            for r in range(self.spec.grid_h):
                for c in range(self.spec.grid_w):
                    yield QuestionAst("attribute_at", attr=attr, cell=(r, c))

    def _random_filters(self, rng: np.random.Generator, lo: int, hi: int):
        n = int(rng.integers(lo, hi + 1))
        keys = sorted(rng.choice(len(FILTER_KEYS), size=n, replace=False).tolist())
        pairs = []
        for k in keys:
            key = FILTER_KEYS[k]
            values = self.spec.palette(key)
            pairs.append((key, values[int(rng.integers(len(values)))]))
        return _canon_filters(pairs)

    def sample_question(
        self, rng: np.random.Generator, scene: Scene | None = None, kind: str | None = None
    ) -> QuestionAst:
        """Draw a grammar question; attribute_at favours occupied cells of ``scene``."""
        if kind is None:
            kind = KINDS[int(rng.integers(len(KINDS)))]
        if kind == "count":
            return QuestionAst("count", self._random_filters(rng, 1, 2))
        if kind == "exists":
            return QuestionAst("exists", self._random_filters(rng, 1, 2))
        if kind == "compare_count":
            return QuestionAst(
                "compare_count", self._random_filters(rng, 1, 1), self._random_filters(rng, 1, 1)
            )
        attr = ("shape", "color", "size")[int(rng.integers(3))]
        if scene is not None and scene.objects and rng.random() < 0.5:
            cell = scene.objects[int(rng.integers(len(scene.objects)))].cell
        else:
            cell = (int(rng.integers(self.spec.grid_h)), int(rng.integers(self.spec.grid_w)))
        return QuestionAst("attribute_at", attr=attr, cell=cell)


def try_parse(grammar: Grammar, text: str) -> tuple[QuestionAst | None, str]:
    """Parse ``text``; return ``(ast, status)`` with status ok/format/grammar."""
    try:
        return grammar.parse_question(text), "ok"
    except FormatError:
        return None, "format"
    except GrammarError:
        return None, "grammar"
