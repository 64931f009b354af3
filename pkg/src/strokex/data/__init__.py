"""Dataset model for synthetic stroke extraction corpora.

A reference layout is an ordered list of stroke primitives standing in for the
standard-font template of one character. Target samples are jittered
renderings of a layout with exact per-stroke ground truth. The stroke order
of the layout is the matching order used by every later stage.

Stroke kinds map one-to-one onto the seven segmentation categories:

    horizontal -> 0, vertical -> 1, left_falling -> 2, right_falling -> 3,
    dot -> 4, hook -> 5, turning -> 6
"""

import enum
import math
from dataclasses import dataclass

import numpy as np

from ..exceptions import DatasetException

CANVAS = 256
SKELETON_WIDTH = 6.0
MIN_STROKES = 2
MAX_STROKES = 10
NUM_CATEGORIES = 7

# placement window for generated primitives
_MARGIN = 20.0


class StrokeKind(enum.Enum):
    HORIZONTAL = "horizontal"
    VERTICAL = "vertical"
    LEFT_FALLING = "left_falling"
    RIGHT_FALLING = "right_falling"
    DOT = "dot"
    HOOK = "hook"
    TURNING = "turning"


class Style(enum.Enum):
    CALLIGRAPHY = "calligraphy"
    SKELETON = "skeleton"


CATEGORY_TABLE = {
    StrokeKind.HORIZONTAL: 0,
    StrokeKind.VERTICAL: 1,
    StrokeKind.LEFT_FALLING: 2,
    StrokeKind.RIGHT_FALLING: 3,
    StrokeKind.DOT: 4,
    StrokeKind.HOOK: 5,
    StrokeKind.TURNING: 6,
}


def categorize(kind):
    """Map a stroke kind (enum or its string value) to its category index

    Raises:
    -------
    DatasetException
        unknown stroke kind
    """
    if not isinstance(kind, StrokeKind):
        try:
            kind = StrokeKind(kind)
        except ValueError:
            raise DatasetException(f"unknown stroke kind: {kind!r}") from None

    return CATEGORY_TABLE[kind]


def _segments(points):

    return [
        (x1 - x0, y1 - y0)
        for (x0, y0), (x1, y1) in zip(points[:-1], points[1:])
    ]


def _is_horizontal(dx, dy):

    return dx > 0 and abs(dy) < 0.3 * abs(dx)


def _is_vertical(dx, dy):

    return dy > 0 and abs(dx) < 0.3 * abs(dy)


def _check_kind(kind, points):

    segs = _segments(points)
    first, last = segs[0], segs[-1]

    match kind:
        case StrokeKind.HORIZONTAL:
            return all(_is_horizontal(*s) for s in segs)
        case StrokeKind.VERTICAL:
            return all(_is_vertical(*s) for s in segs)
        case StrokeKind.LEFT_FALLING:
            return all(dx < 0 and dy > 0 for dx, dy in segs)
        case StrokeKind.RIGHT_FALLING:
            return all(dx > 0 and dy >= 0.3 * dx for dx, dy in segs)
        case StrokeKind.DOT:
            dx, dy = first
            return len(segs) == 1 and dx > 0 and dy > 0 and math.hypot(dx, dy) <= 24
        case StrokeKind.HOOK:
            return (
                len(segs) >= 2
                and _is_vertical(*first)
                and last[0] < 0
                and last[1] < 0
                and math.hypot(*last) < 0.5 * math.hypot(*first)
            )
        case StrokeKind.TURNING:
            return len(segs) >= 2 and _is_horizontal(*first) and _is_vertical(*last)

    return False


@dataclass(frozen=True)
class StrokePrimitive:
    kind: StrokeKind
    control_points: tuple
    width: float

    def validate(self):
        """Check canvas bounds, width and the kind's monotonicity rules

        Raises:
        -------
        DatasetException
            any invariant violated
        """
        points = self.control_points
        if not 2 <= len(points) <= 5:
            raise DatasetException(
                f"{self.kind.value} stroke needs 2-5 control points, got {len(points)}"
            )

        for x, y in points:
            if not (0 <= x < CANVAS and 0 <= y < CANVAS):
                raise DatasetException(
                    f"{self.kind.value} control point ({x:.2f}, {y:.2f}) is off canvas"
                )

        if self.width < 2:
            raise DatasetException(
                f"{self.kind.value} stroke width {self.width} is below 2 px"
            )

        if self.length() < 1e-6:
            raise DatasetException(f"{self.kind.value} stroke has zero length")

        if not _check_kind(self.kind, points):
            raise DatasetException(
                f"control points violate the {self.kind.value} shape rules"
            )

    def length(self):

        return sum(math.hypot(dx, dy) for dx, dy in _segments(self.control_points))

    @property
    def category(self):

        return categorize(self.kind)

    def to_dict(self):

        return {
            "kind": self.kind.value,
            "control_points": [list(p) for p in self.control_points],
            "width": self.width,
        }

    @classmethod
    def from_dict(cls, data):

        return cls(
            kind=StrokeKind(data["kind"]),
            control_points=tuple(tuple(float(v) for v in p) for p in data["control_points"]),
            width=float(data["width"]),
        )


@dataclass(frozen=True)
class ReferenceLayout:
    layout_id: int
    strokes: tuple
    char_class: int

    def validate(self):

        if not MIN_STROKES <= len(self.strokes) <= MAX_STROKES:
            raise DatasetException(
                f"layout {self.layout_id} has {len(self.strokes)} strokes; "
                f"expected {MIN_STROKES}-{MAX_STROKES}"
            )
        for index, stroke in enumerate(self.strokes):
            try:
                stroke.validate()
            except DatasetException as err:
                raise DatasetException(
                    f"layout {self.layout_id} stroke {index}: {err}"
                ) from None

    @property
    def categories(self):

        return tuple(stroke.category for stroke in self.strokes)

    def to_dict(self):

        return {
            "layout_id": self.layout_id,
            "char_class": self.char_class,
            "strokes": [stroke.to_dict() for stroke in self.strokes],
        }

    @classmethod
    def from_dict(cls, data):

        return cls(
            layout_id=int(data["layout_id"]),
            strokes=tuple(StrokePrimitive.from_dict(s) for s in data["strokes"]),
            char_class=int(data["char_class"]),
        )


@dataclass(frozen=True)
class AffineRecord:
    """Ground-truth jitter of one stroke: q = M (p - center) + center + t"""

    matrix: tuple
    center: tuple
    translation: tuple

    def apply(self, points):

        points = np.asarray(points, dtype=np.float64)
        matrix = np.asarray(self.matrix, dtype=np.float64)
        center = np.asarray(self.center, dtype=np.float64)
        offset = (points - center) @ (matrix - np.eye(2)).T
        return points + offset + np.asarray(self.translation, dtype=np.float64)

    def to_transform(self, dtype=None):
        """The field-ops transform that moves the reference stroke onto the sample"""

        import torch

        from ..fields import AffineStrokeTransform

        dtype = dtype or torch.get_default_dtype()
        matrix = torch.tensor(self.matrix, dtype=dtype)
        return AffineStrokeTransform(
            G=matrix - torch.eye(2, dtype=dtype),
            c=torch.tensor(self.translation, dtype=dtype),
            P=torch.tensor(self.center, dtype=dtype),
        )

    @classmethod
    def identity(cls, center=(0.0, 0.0)):

        return cls(((1.0, 0.0), (0.0, 1.0)), tuple(center), (0.0, 0.0))

    def to_dict(self):

        return {
            "matrix": [list(row) for row in self.matrix],
            "center": list(self.center),
            "translation": list(self.translation),
        }

    @classmethod
    def from_dict(cls, data):

        return cls(
            matrix=tuple(tuple(float(v) for v in row) for row in data["matrix"]),
            center=tuple(float(v) for v in data["center"]),
            translation=tuple(float(v) for v in data["translation"]),
        )


@dataclass
class StrokeSample:
    """One character: 8-bit target image and ordered binary stroke masks"""

    sample_id: str
    target_image: np.ndarray
    stroke_masks: np.ndarray
    layout_id: int
    categories: tuple
    style: Style
    affines: tuple = ()

    @property
    def image(self):
        """Target as float32 in [0, 1]"""

        return self.target_image.astype(np.float32) / 255.0

    @property
    def support(self):

        return self.target_image >= 128

    @property
    def stroke_count(self):

        return len(self.stroke_masks)


def _relative_shape(kind, rng):

    u = rng.uniform
    match kind:
        case StrokeKind.HORIZONTAL:
            n = int(rng.integers(2, 4))
            xs = np.linspace(0.0, u(50, 140), n)
            ys = np.concatenate([[0.0], np.cumsum(u(-0.15, 0.15, n - 1) * np.diff(xs))])
            return np.stack([xs, ys], axis=1)
        case StrokeKind.VERTICAL:
            n = int(rng.integers(2, 4))
            ys = np.linspace(0.0, u(50, 140), n)
            xs = np.concatenate([[0.0], np.cumsum(u(-0.15, 0.15, n - 1) * np.diff(ys))])
            return np.stack([xs, ys], axis=1)
        case StrokeKind.LEFT_FALLING:
            steps = [(-u(5, 25), u(25, 60)), (-u(20, 50), u(15, 45))]
        case StrokeKind.RIGHT_FALLING:
            steps = []
            for _ in range(2):
                dx = u(15, 45)
                steps.append((dx, u(0.5, 1.2) * dx))
        case StrokeKind.DOT:
            steps = [(u(5, 12), u(5, 12))]
        case StrokeKind.HOOK:
            steps = [(u(-6, 6), u(50, 110)), (-u(8, 18), -u(6, 14))]
        case StrokeKind.TURNING:
            steps = [(u(40, 110), u(-8, 8)), (u(-10, 0), u(40, 110))]

    return np.concatenate([[[0.0, 0.0]], np.cumsum(np.array(steps), axis=0)])


def _place(shape, rng):

    lo = shape.min(axis=0)
    extent = shape.max(axis=0) - lo
    room = CANVAS - 2 * _MARGIN
    if (scale := room / max(extent.max(), 1e-9)) < 1:
        shape = (shape - lo) * scale
        lo, extent = shape.min(axis=0), extent * scale

    offset = np.array([rng.uniform(_MARGIN, CANVAS - _MARGIN - e) for e in extent])
    return shape - lo + offset


def _kind_bag(rng):
    """Endless sequence of kinds cycling through shuffled permutations"""

    kinds = list(StrokeKind)
    while True:
        for index in rng.permutation(len(kinds)):
            yield kinds[index]


def generate_layouts(n, seed):
    """Generate `n` distinct reference layouts

    Stroke kinds are drawn from shuffled permutations of the seven kinds, so
    categories are balanced over a corpus and a category repeats inside one
    layout only once every other kind has appeared.

    Parameters:
    -----------
    n : int
        number of layouts, clamped to at least 1
    seed : int
        generator seed; output is a pure function of (n, seed)

    Returns:
    --------
    list(ReferenceLayout)
        layouts with ids 0..n-1 and char_class equal to the id
    """
    n = max(1, int(n))
    rng = np.random.default_rng(seed)
    kinds = _kind_bag(rng)

    layouts, seen = [], set()
    while len(layouts) < n:
        count = int(rng.integers(MIN_STROKES, MAX_STROKES + 1))
        base_width = rng.uniform(9, 15)
        strokes = []
        for _ in range(count):
            kind = next(kinds)
            points = _place(_relative_shape(kind, rng), rng)
            width = float(np.clip(base_width + rng.uniform(-2, 2), 8, 20))
            strokes.append(
                StrokePrimitive(
                    kind=kind,
                    control_points=tuple(tuple(map(float, p)) for p in points),
                    width=width,
                )
            )

        key = tuple((s.kind, s.control_points) for s in strokes)
        if key in seen:
            continue
        seen.add(key)

        layout_id = len(layouts)
        layout = ReferenceLayout(
            layout_id=layout_id, strokes=tuple(strokes), char_class=layout_id
        )
        layout.validate()
        layouts.append(layout)

    return layouts
