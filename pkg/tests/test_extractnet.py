import dataclasses

import numpy as np
import pytest
import torch

from strokex.data import AffineRecord
from strokex.data.raster import ReferenceBank
from strokex.exceptions import ShapeException, StageException
from strokex.stages.extractnet import (
    GroupedStrokeSampler,
    build_inputs,
    extract_all,
    ref_segment,
)
from strokex.stages.extractnet.crop import CropRecord, adaptive_crop, crop_channels, uncrop
from strokex.stages.extractnet.model import ExtractNetModel
from strokex.stages.sdnet import PriorData, oracle_transforms, prior_composite
from strokex.stages.sdnet.model import SDNetModel
from strokex.stages.segnet import SegmentationResult
from strokex.stages.segnet.model import SegNetModel

FEATURES = 16


def _prior(size=256):

    strokes = torch.zeros(3, 1, size, size)
    strokes[0, 0, 40:50, 30:200] = 1
    strokes[1, 0, 100:110, 30:200] = 1
    strokes[2, 0, 20:230, 120:130] = 1
    categories = (0, 0, 1)
    return PriorData(
        strokes=strokes,
        transforms=oracle_transforms([AffineRecord.identity()] * 3),
        categories=categories,
        composite=prior_composite(strokes, categories),
    )


def _segmentation(size=256):

    probs = torch.rand(7, size, size)
    return SegmentationResult(
        probs=probs, masks=probs >= 0.5, feature64=torch.rand(FEATURES, size // 4, size // 4)
    )


def test_crop_of_empty_mask_is_full_canvas():

    assert adaptive_crop(np.zeros((256, 256), dtype=bool)) == CropRecord(0, 0, 256)


def test_crop_side_follows_prior_extent():

    mask = np.zeros((256, 256), dtype=bool)
    mask[100:110, 60:160] = True
    crop = adaptive_crop(mask)

    assert crop.side == 140
    assert (crop.x, crop.y) == (40, 35)
    assert crop.scale == pytest.approx(128 / 140)


def test_small_crops_are_widened_and_clamped():

    mask = np.zeros((256, 256), dtype=bool)
    mask[0:10, 0:10] = True
    crop = adaptive_crop(mask)
    assert (crop.x, crop.y, crop.side) == (0, 0, 48)

    mask = np.zeros((256, 256), dtype=bool)
    mask[5:250, 240:250] = True
    crop = adaptive_crop(torch.from_numpy(mask))
    assert crop.side == 256 and crop.x == 0 and crop.y == 0


def test_full_canvas_crop_is_identity(rng):

    image = torch.from_numpy(rng.random((2, 64, 64)).astype(np.float32))
    crop = adaptive_crop(np.zeros((64, 64)), size=64, canvas=64)

    patch = crop_channels(image, crop)
    torch.testing.assert_close(patch, image, atol=1e-5, rtol=0)
    torch.testing.assert_close(uncrop(patch, crop), image, atol=1e-5, rtol=0)


def test_uncrop_places_patch():

    crop = CropRecord(x=10, y=20, side=32, size=16, canvas=64)
    canvas = uncrop(torch.ones(1, 16, 16), crop)

    assert canvas.shape == (1, 64, 64)
    assert float(canvas.sum()) == pytest.approx(32 * 32)
    assert float(canvas[0, 20, 10]) == 1.0
    assert float(canvas[0, 19, 10]) == 0.0


def test_reference_segment_marks_same_category():

    prior = _prior()
    segment = ref_segment(prior, 0)

    assert segment.shape == (1, 256, 256)
    assert float(segment[0, 45, 100]) == 1.0
    assert float(segment[0, 105, 100]) == 0.5
    assert float(segment[0, 150, 125]) == 0.0
    assert float(ref_segment(prior, 2)[0, 105, 100]) == 0.0


def test_input_stack_layout():

    prior, seg = _prior(), _segmentation()
    target = prior.composite.clone()

    stack, crop = build_inputs(target, 2, prior, seg, crop_size=64)
    assert stack.shape == (4 + FEATURES, 64, 64)
    assert crop == adaptive_crop(prior.masks[2], 64)
    assert float(stack[1].max()) > 0.5


def test_input_ablations():

    prior, seg = _prior(), _segmentation()
    target = prior.composite.clone()

    stack, crop = build_inputs(target, 0, prior, seg, crop_size=64, no_prior=True)
    assert crop.side == 256
    assert float(stack[[1, 3]].abs().max()) == 0.0
    assert float(stack[2].abs().max()) > 0.0

    stack, _ = build_inputs(target, 0, prior, seg, crop_size=64, no_semantic=True)
    assert float(stack[2].abs().max()) == 0.0
    assert float(stack[4:].abs().max()) == 0.0
    assert float(stack[1].max()) > 0.0


def test_input_index_is_checked():

    with pytest.raises(ShapeException):
        build_inputs(torch.zeros(1, 256, 256), 3, _prior(), _segmentation())


def test_extractor_shapes():

    torch.manual_seed(0)
    model = ExtractNetModel(feature_channels=FEATURES, channel_scale=0.125).eval()

    assert model(torch.rand(2, 4 + FEATURES, 64, 64)).shape == (2, 1, 64, 64)
    with pytest.raises(ShapeException):
        model(torch.rand(1, 3, 64, 64))
    with pytest.raises(ShapeException):
        model(torch.rand(1, 4 + FEATURES, 66, 66))


def test_alignment_starts_at_identity():

    torch.manual_seed(0)
    model = ExtractNetModel(feature_channels=FEATURES, channel_scale=0.125).eval()
    target, reference = torch.rand(2, 8, 16, 16), torch.rand(2, 8, 16, 16)

    with torch.no_grad():
        aligned, theta = model.align(target, reference)
    identity = torch.tensor([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    torch.testing.assert_close(theta, identity.expand(2, 2, 3))
    torch.testing.assert_close(aligned, reference, atol=1e-5, rtol=0)


def test_alignment_warps_reference_branch_features():

    torch.manual_seed(0)
    model = ExtractNetModel(feature_channels=FEATURES, channel_scale=0.125).eval()
    seen = []
    model.align.register_forward_hook(lambda module, args, output: seen.append(args[1]))
    stack = torch.rand(1, 4 + FEATURES, 64, 64)

    with torch.no_grad():
        model(stack)
        expected = model.reference_branch(stack.index_select(1, model.reference_index))
    torch.testing.assert_close(seen[0], expected)
    assert seen[0].shape[-2:] == (16, 16)


def test_sampler_keeps_characters_together():

    examples = [("a", 0), ("a", 1), ("b", 0), ("c", 0), ("c", 1), ("c", 2)]
    order = list(GroupedStrokeSampler(examples, seed=3))

    assert sorted(order) == list(range(6))
    keys = [examples[i][0] for i in order]
    for key in "abc":
        positions = [i for i, k in enumerate(keys) if k == key]
        assert positions == list(range(positions[0], positions[0] + len(positions)))
    assert list(GroupedStrokeSampler(examples, seed=3)) == order
    assert list(GroupedStrokeSampler(examples, seed=3, shuffle=False)) == list(range(6))


def _untrained_models():

    torch.manual_seed(0)
    sdnet = SDNetModel(num_classes=1, channel_scale=0.125).eval()
    segnet = SegNetModel(channel_scale=0.125).eval()
    extractnet = ExtractNetModel(feature_channels=segnet.feature_channels, channel_scale=0.125)
    return sdnet, segnet, extractnet.eval()


def test_extract_all_returns_one_mask_per_stroke(cross_layout):

    reference = ReferenceBank([cross_layout]).render(0)
    target = torch.from_numpy(reference.image / 255.0).float()[None]

    masks = extract_all(target, reference, *_untrained_models(), crop_size=64)
    assert len(masks) == 2
    assert all(m.shape == (256, 256) and m.dtype == bool for m in masks)


def test_empty_reference_stroke_names_the_stage(cross_layout):

    reference = ReferenceBank([cross_layout]).render(0)
    masks = reference.masks.copy()
    masks[1] = False
    broken = dataclasses.replace(reference, masks=masks)
    target = torch.from_numpy(reference.image / 255.0).float()[None]

    with pytest.raises(StageException) as info:
        extract_all(target, broken, *_untrained_models(), crop_size=64)
    assert info.value.stage == "sdnet"
    assert info.value.stroke_index == 1
