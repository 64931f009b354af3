import cv2
import numpy as np

from strokex.data.raster import render_layout
from strokex.render import PALETTE, PLACEHOLDER_GRAY, SEPARATOR, OverlayRenderer, render_overlays


def _colours(image):

    return {tuple(c) for c in image.reshape(-1, 3).tolist()}


def test_overlay_uses_one_colour_per_stroke(cross_layout):

    image, masks = render_layout(cross_layout)
    overlay = OverlayRenderer().overlay(image, list(masks))

    palette = {tuple(c) for c in PALETTE.tolist()}
    assert overlay.shape == (256, 256, 3)
    assert len(_colours(overlay) & palette) == 2
    assert tuple(overlay[128, 70]) == tuple(PALETTE[0])
    assert tuple(overlay[70, 128]) == tuple(PALETTE[1])


def test_empty_extraction_is_a_placeholder(cross_layout):

    image, _ = render_layout(cross_layout)
    overlay = OverlayRenderer().overlay(image, [])

    assert _colours(overlay) == {(PLACEHOLDER_GRAY,) * 3}


def test_overlay_depends_on_order(cross_layout):

    image, masks = render_layout(cross_layout)
    renderer = OverlayRenderer()

    assert not np.array_equal(renderer.overlay(image, list(masks)), renderer.overlay(image, list(masks[::-1])))


def test_panel_layout(cross_layout):

    image, masks = render_layout(cross_layout)
    composite = np.zeros((1, 256, 256))
    composite[0, masks[0]] = 1 / 7

    panel = OverlayRenderer().panel(image, list(masks), composite=composite)
    assert panel.shape == (256, 4 * 256 + 3 * SEPARATOR, 3)

    prior = panel[:, 256 + SEPARATOR:2 * 256 + SEPARATOR]
    assert tuple(prior[128, 70]) == tuple(PALETTE[0])
    segmentation = panel[:, 2 * (256 + SEPARATOR):3 * 256 + 2 * SEPARATOR]
    assert _colours(segmentation) == {(PLACEHOLDER_GRAY,) * 3}


def test_write_creates_both_images(tmp_path, cross_layout):

    image, masks = render_layout(cross_layout)
    paths = render_overlays("00007", image, list(masks), tmp_path / "overlays")

    assert paths["overlay"].name == "00007.png"
    written = cv2.imread(str(paths["panel"]))
    assert written.shape[1] == 4 * 256 + 3 * SEPARATOR
    assert cv2.imread(str(paths["overlay"])).shape == (256, 256, 3)
