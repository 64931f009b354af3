"""Rasterisation of stroke primitives and jittered target synthesis.

Strokes are thick polylines with round caps. The centre line is drawn with
OpenCV on a grid SUPERSAMPLE times finer than the canvas, a distance
transform marks every subpixel within w/2 of it, and the coverage of a pixel
is the inside fraction of its subpixels quantised to 8 bits. A pixel belongs
to a stroke mask when at least half of it is covered. The composite is the
pixelwise maximum of stroke coverages, hence the union of the masks is the
composite binarised at 0.5.
"""

import math
from dataclasses import dataclass

import cv2
import numpy as np

from ..exceptions import DatasetException
from . import (
    CANVAS,
    SKELETON_WIDTH,
    AffineRecord,
    StrokeSample,
    Style,
)

# 8-bit level that corresponds to coverage 0.5
FOREGROUND_LEVEL = 128

# subpixels per pixel side
SUPERSAMPLE = 4

# fractional bits of the fixed-point vertices handed to cv2.polylines
_SHIFT = 4

CALLIGRAPHY_WIDTHS = (8.0, 20.0)


def stroke_coverage(points, width, size=CANVAS):
    """Anti-aliased 8-bit coverage of one thick polyline

    Parameters:
    -----------
    points : array-like (N, 2)
        centre-line vertices in (x, y) pixel coordinates, pixel centres at
        integers
    width : float
        stroke width in pixels
    size : int (default: CANVAS)
        canvas side

    Raises:
    -------
    DatasetException
        the polyline has zero length

    Returns:
    --------
    numpy.ndarray (size, size) uint8
        coverage scaled to 0..255
    """
    points = np.asarray(points, dtype=np.float64)
    if np.hypot(*np.diff(points, axis=0).T).sum() < 1e-6:
        raise DatasetException("degenerate stroke: zero-length centre line")

    coverage = np.zeros((size, size), dtype=np.uint8)

    # the window is not clipped to the canvas so off-canvas parts of the
    # centre line still count in the distance transform
    reach = width / 2 + 1
    x0 = int(math.floor(points[:, 0].min() - reach))
    x1 = int(math.ceil(points[:, 0].max() + reach)) + 1
    y0 = int(math.floor(points[:, 1].min() - reach))
    y1 = int(math.ceil(points[:, 1].max() + reach)) + 1
    if x1 <= 0 or y1 <= 0 or x0 >= size or y0 >= size:
        return coverage

    fine = (points - (x0, y0) + 0.5) * SUPERSAMPLE - 0.5
    vertices = np.rint(fine * (1 << _SHIFT)).astype(np.int32).reshape(-1, 1, 2)

    centre_line = np.full(((y1 - y0) * SUPERSAMPLE, (x1 - x0) * SUPERSAMPLE), 255, np.uint8)
    cv2.polylines(centre_line, [vertices], False, 0, thickness=1, lineType=cv2.LINE_8, shift=_SHIFT)
    dist = cv2.distanceTransform(centre_line, cv2.DIST_L2, cv2.DIST_MASK_PRECISE)

    inside = (dist <= width / 2 * SUPERSAMPLE).astype(np.float32)
    ramp = cv2.resize(inside, (x1 - x0, y1 - y0), interpolation=cv2.INTER_AREA)

    cx0, cy0 = max(x0, 0), max(y0, 0)
    cx1, cy1 = min(x1, size), min(y1, size)
    coverage[cy0:cy1, cx0:cx1] = np.rint(
        ramp[cy0 - y0 : cy1 - y0, cx0 - x0 : cx1 - x0] * 255
    ).astype(np.uint8)
    return coverage


def stroke_width(primitive, style, scale=1.0):
    """Rendered width: fixed for skeletons, scaled and kept in range otherwise"""

    if Style(style) is Style.SKELETON:
        return SKELETON_WIDTH
    return float(np.clip(primitive.width * scale, *CALLIGRAPHY_WIDTHS))


def render_layout(layout, style=Style.CALLIGRAPHY):
    """Render a reference layout

    Returns:
    --------
    tuple(numpy.ndarray, numpy.ndarray)
        (H, W) uint8 composite and (K, H, W) bool stroke masks in layout order
    """
    layout.validate()

    coverages = np.stack(
        [
            stroke_coverage(s.control_points, stroke_width(s, style))
            for s in layout.strokes
        ]
    )
    return coverages.max(axis=0), coverages >= FOREGROUND_LEVEL


def labeled_reference(masks):
    """Stroke i of K marked with (i + 1) / K on a zero background"""

    masks = np.asarray(masks, dtype=bool)
    count = len(masks)
    values = (np.arange(1, count + 1, dtype=np.float32) / count)[:, None, None]
    return (masks * values).max(axis=0)


@dataclass(frozen=True)
class JitterConfig:
    max_rotation_deg: float = 15.0
    scale_range: tuple = (0.8, 1.2)
    max_translation: float = 20.0
    elastic_amplitude: float = 0.0

    def validate(self):

        lo, hi = self.scale_range
        if not 0 <= self.max_rotation_deg <= 15:
            raise DatasetException("jitter rotation must be within [0, 15] degrees")
        if not 0.8 <= lo <= hi <= 1.2:
            raise DatasetException("jitter scale range must lie within [0.8, 1.2]")
        if not 0 <= self.max_translation <= 20:
            raise DatasetException("jitter translation must be within [0, 20] px")
        if not 0 <= self.elastic_amplitude <= 8:
            raise DatasetException("elastic jitter amplitude must be within [0, 8] px")

    @classmethod
    def zero(cls):

        return cls(0.0, (1.0, 1.0), 0.0, 0.0)

    def to_dict(self):

        return {
            "max_rotation_deg": self.max_rotation_deg,
            "scale_range": list(self.scale_range),
            "max_translation": self.max_translation,
            "elastic_amplitude": self.elastic_amplitude,
        }


def _elastic(rng, amplitude):
    """Smooth global displacement: one low-frequency sinusoid per axis"""

    if amplitude <= 0:
        return lambda points: points

    freqs = rng.uniform(0.5, 1.5, size=(2, 2)) * rng.choice([-1, 1], size=(2, 2))
    phases = rng.uniform(0, 2 * np.pi, size=2)

    def displace(points):

        angle = 2 * np.pi * (points @ freqs.T) / CANVAS + phases
        return points + amplitude * np.sin(angle)

    return displace


def synthesize_sample(
    layout,
    jitter,
    seed,
    style=Style.CALLIGRAPHY,
    sample_id=None,
    max_retries=10,
):
    """Render a handwriting-style target from a reference layout

    Each stroke is rotated and isotropically scaled about the mean of its
    control points and translated. Calligraphy widths scale with it and stay
    within 8 to 20 px; skeleton strokes keep their 6 px width. The optional
    elastic displacement is applied to the jittered control points and is not
    part of the recorded affine.

    Parameters:
    -----------
    layout : ReferenceLayout
        reference template
    jitter : JitterConfig
        per-stroke jitter bounds
    seed : int
        generator seed; the sample is a pure function of its arguments
    style : Style (default: CALLIGRAPHY)
        SKELETON renders every stroke at 6 px
    sample_id : str (default: None)
        identifier, derived from layout id and seed when omitted
    max_retries : int (default: 10)
        translation redraws allowed when a stroke lands off canvas

    Raises:
    -------
    DatasetException
        invalid jitter bounds, or a stroke stays off canvas after retries

    Returns:
    --------
    StrokeSample
        sample with masks in layout order and the true per-stroke affines
    """
    jitter.validate()
    layout.validate()
    style = Style(style)
    sample_id = sample_id or f"{layout.layout_id:04d}-{seed}"

    rng = np.random.default_rng(seed)
    displace = _elastic(rng, jitter.elastic_amplitude)

    coverages, affines = [], []
    for index, primitive in enumerate(layout.strokes):
        points = np.asarray(primitive.control_points, dtype=np.float64)
        center = points.mean(axis=0)

        theta = math.radians(rng.uniform(-jitter.max_rotation_deg, jitter.max_rotation_deg))
        scale = rng.uniform(*jitter.scale_range)
        matrix = scale * np.array(
            [[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]]
        )
        width = stroke_width(primitive, style, scale)

        for _ in range(max_retries):
            shift = rng.uniform(-jitter.max_translation, jitter.max_translation, size=2)
            record = AffineRecord(
                matrix=tuple(map(tuple, matrix.tolist())),
                center=tuple(center.tolist()),
                translation=tuple(shift.tolist()),
            )
            coverage = stroke_coverage(displace(record.apply(points)), width)
            if (coverage >= FOREGROUND_LEVEL).any():
                break
        else:
            raise DatasetException(
                f"sample '{sample_id}': stroke {index} left the canvas "
                f"after {max_retries} translation draws"
            )

        coverages.append(coverage)
        affines.append(record)

    coverages = np.stack(coverages)
    return StrokeSample(
        sample_id=sample_id,
        target_image=coverages.max(axis=0),
        stroke_masks=coverages >= FOREGROUND_LEVEL,
        layout_id=layout.layout_id,
        categories=layout.categories,
        style=style,
        affines=tuple(affines),
    )


@dataclass(frozen=True)
class ReferenceRender:
    image: np.ndarray
    masks: np.ndarray
    labeled: np.ndarray
    categories: tuple


class ReferenceBank:
    """Cached reference renderings keyed by (layout_id, style)"""

    def __init__(self, layouts):

        self.__layouts = {layout.layout_id: layout for layout in layouts}
        self.__cache = {}

    def __len__(self):

        return len(self.__layouts)

    def layout(self, layout_id):

        try:
            return self.__layouts[layout_id]
        except KeyError:
            raise DatasetException(f"unknown layout id {layout_id}") from None

    def render(self, layout_id, style=Style.CALLIGRAPHY):

        key = (layout_id, Style(style))
        if (cached := self.__cache.get(key)) is not None:
            return cached

        layout = self.layout(layout_id)
        image, masks = render_layout(layout, key[1])
        render = ReferenceRender(
            image=image,
            masks=masks,
            labeled=labeled_reference(masks),
            categories=layout.categories,
        )
        self.__cache[key] = render
        return render
