"""Overlay and panel rendering of extraction results.

Images are built in BGR, the order cv2 writes. Stroke i is drawn in palette
entry i (mod 10), so colours encode the reference order of the match.
"""

import logging
import pathlib

import cv2
import numpy as np

from .data import NUM_CATEGORIES
from .exceptions import DatasetException

logger = logging.getLogger(__name__)

# tab10, BGR
PALETTE = np.array(
    [
        (180, 119, 31),
        (14, 127, 255),
        (44, 160, 44),
        (40, 39, 214),
        (189, 103, 148),
        (75, 86, 140),
        (194, 119, 227),
        (127, 127, 127),
        (34, 189, 188),
        (207, 190, 23),
    ],
    dtype=np.uint8,
)

WHITE = 255
TARGET_GRAY = 215
PLACEHOLDER_GRAY = 160
SEPARATOR = 4


def _as_uint8(image):

    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image
    return np.clip(np.rint(image.astype(np.float64) * 255), 0, 255).astype(np.uint8)


def _label_image(labels, palette=PALETTE):
    """Colour a (H, W) label map, 0 = background"""

    out = np.full((*labels.shape, 3), WHITE, dtype=np.uint8)
    for label in np.unique(labels):
        if label > 0:
            out[labels == label] = palette[(label - 1) % len(palette)]
    return out


class OverlayRenderer:
    """Draws extracted strokes over their target

    Parameters:
    -----------
    palette : numpy.ndarray (P, 3) (default: PALETTE)
        BGR colours indexed by stroke order
    """

    def __init__(self, palette=PALETTE):

        self.palette = np.asarray(palette, dtype=np.uint8)

    def overlay(self, target, extractions):
        """Coloured strokes on a light-gray target, white background

        An empty extraction list gives a uniform gray placeholder.
        """
        target = _as_uint8(target)
        if len(extractions) == 0:
            return np.full((*target.shape, 3), PLACEHOLDER_GRAY, dtype=np.uint8)

        out = np.full((*target.shape, 3), WHITE, dtype=np.uint8)
        out[target >= 128] = TARGET_GRAY
        for index, mask in enumerate(extractions):
            out[np.asarray(mask, dtype=bool)] = self.palette[index % len(self.palette)]
        return out

    def target_panel(self, target):

        target = _as_uint8(target)
        return cv2.cvtColor(WHITE - target, cv2.COLOR_GRAY2BGR)

    def prior_panel(self, composite):
        """Prior composite coloured by category marker"""

        if composite is None:
            return None
        composite = np.asarray(composite, dtype=np.float64).reshape(np.shape(composite)[-2:])
        return _label_image(np.rint(composite * NUM_CATEGORIES).astype(np.int64), self.palette)

    def segmentation_panel(self, labels):
        """Segmentation argmax (0 = background, k + 1 = category k)"""

        if labels is None:
            return None
        return _label_image(np.asarray(labels, dtype=np.int64), self.palette)

    def panel(self, target, extractions, composite=None, seg_labels=None):
        """target | prior | segmentation | extraction, side by side

        Missing prior or segmentation inputs render as gray placeholders.
        """
        target = _as_uint8(target)
        placeholder = np.full((*target.shape, 3), PLACEHOLDER_GRAY, dtype=np.uint8)
        separator = np.full((target.shape[0], SEPARATOR, 3), WHITE, dtype=np.uint8)

        tiles = [
            self.target_panel(target),
            p if (p := self.prior_panel(composite)) is not None else placeholder,
            s if (s := self.segmentation_panel(seg_labels)) is not None else placeholder,
            self.overlay(target, extractions),
        ]
        row = [tiles[0]]
        for tile in tiles[1:]:
            row += [separator, tile]
        return cv2.hconcat(row)

    def write(self, out_dir, sample_id, target, extractions, composite=None, seg_labels=None):
        """Write `<sample_id>.png` and `<sample_id>_panel.png`

        Raises:
        -------
        DatasetException
            an image could not be written

        Returns:
        --------
        dict(str, pathlib.Path)
            "overlay" and "panel" paths
        """
        out_dir = pathlib.Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

        paths = {
            "overlay": out_dir / f"{sample_id}.png",
            "panel": out_dir / f"{sample_id}_panel.png",
        }
        images = {
            "overlay": self.overlay(target, extractions),
            "panel": self.panel(target, extractions, composite, seg_labels),
        }
        for key, path in paths.items():
            if not cv2.imwrite(str(path), images[key]):
                raise DatasetException(f"sample '{sample_id}': could not write {path}")

        logger.debug("overlays of %s written to %s", sample_id, out_dir)
        return paths


def render_overlays(sample_id, target, extractions, out_dir, composite=None, seg_labels=None):
    """Overlay and panel of one sample with the default palette"""

    return OverlayRenderer().write(out_dir, sample_id, target, extractions, composite, seg_labels)
