import numpy as np
import pytest
import torch

from strokex.data import AffineRecord
from strokex.exceptions import ShapeException
from strokex.stages import load_checkpoint
from strokex.stages.sdnet import PriorData, oracle_transforms, prior_composite
from strokex.stages.segnet import (
    SegmentationResult,
    SegNetStage,
    draw_offsets,
    jitter_prior,
    segment,
    shift_image,
)
from strokex.stages.segnet.model import SegNetModel, decoder_width


@pytest.fixture
def segnet():

    torch.manual_seed(0)
    return SegNetModel(channel_scale=0.125).eval()


def _prior():

    strokes = torch.zeros(2, 1, 32, 32)
    strokes[0, 0, 10:12, 4:28] = 1
    strokes[1, 0, 4:28, 20:22] = 1
    categories = (0, 1)
    return PriorData(
        strokes=strokes,
        transforms=oracle_transforms([AffineRecord.identity()] * 2),
        categories=categories,
        composite=prior_composite(strokes, categories),
    )


def test_segmentation_shapes(segnet):

    logits, features = segnet(torch.rand(2, 1, 64, 64), torch.rand(2, 1, 64, 64))

    assert logits.shape == (2, 7, 64, 64)
    assert features.shape == (2, decoder_width(0.125), 16, 16)
    assert segnet.feature_channels == features.shape[1]


def test_segmentation_input_checks(segnet):

    with pytest.raises(ShapeException):
        segnet(torch.rand(1, 1, 40, 40), torch.rand(1, 1, 40, 40))
    with pytest.raises(ShapeException):
        segnet(torch.rand(1, 1, 64, 64), torch.rand(1, 2, 64, 64))


def test_segment_unbatched(segnet):

    result = segment(segnet, torch.rand(1, 64, 64), torch.rand(1, 64, 64))

    assert result.probs.shape == (7, 64, 64)
    assert result.feature64.dim() == 3
    torch.testing.assert_close(result.masks, result.probs >= 0.5)


def test_argmax_labels():

    probs = torch.zeros(7, 2, 2)
    probs[3, 0, 0] = 0.9
    probs[1, 0, 0] = 0.6
    probs[5, 1, 1] = 0.7
    result = SegmentationResult(probs=probs, masks=probs >= 0.5, feature64=None)

    assert result.argmax().tolist() == [[4, 0], [0, 6]]


def test_offsets_stay_in_bounds(rng):

    offsets = draw_offsets(rng, 1000, max_offset=5)
    assert offsets.shape == (1000, 2)
    assert offsets.min() == -5 and offsets.max() == 5
    assert not draw_offsets(rng, 10, max_offset=0).any()


def test_shift_image():

    image = torch.zeros(1, 8, 8)
    image[0, 2, 3] = 1

    shifted = shift_image(image, 2, -1)
    assert float(shifted[0, 1, 5]) == 1.0
    assert float(shifted.sum()) == 1.0
    assert float(shift_image(image, 8, 0).sum()) == 0.0
    torch.testing.assert_close(shift_image(image, 0, 0), image)


def test_jitter_without_offset_is_composite():

    prior = _prior()
    torch.testing.assert_close(jitter_prior(prior, 0, max_offset=0), prior.composite)


def test_jitter_keeps_category_markers():

    prior = _prior()
    jittered = jitter_prior(prior, 7, max_offset=3)

    assert set(np.unique(jittered.numpy()).astype(np.float64).round(6)) <= {0.0, round(1 / 7, 6), round(2 / 7, 6)}
    assert float((jittered > 0).sum()) > 0
    torch.testing.assert_close(jitter_prior(prior, 7, max_offset=3), jittered)


def test_jitter_offsets_stay_within_bound():

    strokes = torch.zeros(1, 1, 32, 32)
    strokes[0, 0, 16, 16] = 1
    prior = PriorData(
        strokes=strokes,
        transforms=oracle_transforms([AffineRecord.identity()]),
        categories=(6,),
        composite=prior_composite(strokes, (6,)),
    )

    rng = np.random.default_rng(0)
    largest = 0
    for _ in range(1000):
        (row, col), = torch.nonzero(jitter_prior(prior, rng, max_offset=5)[0]).tolist()
        largest = max(largest, abs(row - 16), abs(col - 16))
    assert largest == 5


def test_oracle_stage_needs_no_registration(tiny_config, paths, tiny_dataset, monkeypatch):

    monkeypatch.setattr(SegNetStage, "workers", 0)
    tiny_config.segnet.epochs = 0
    tiny_config.segnet.oracle_prior = True

    summary = SegNetStage(tiny_config, paths, tiny_dataset).train()
    checkpoint = load_checkpoint(paths.get_stage("segnet", "best"), "segnet")

    assert 0.0 <= summary["best"]["val_miou"] <= 1.0
    assert checkpoint["model_config"] == {"channel_scale": 0.125}
