"""Per-stroke extraction.

For stroke i of a character the input stack holds, in crop space:

    0  target
    1  rt_s^i, the transformed reference stroke
    2  SegNet probability of stroke i's category
    3  transformed reference strokes of that category (i at 1.0, others 0.5)
    4+ SegNet 1/4-resolution decoder features

The crop is chosen from the stroke's prior, so every stroke is seen at a
comparable scale. Strokes are extracted in reference order, which makes the
match between extracted and reference strokes positional.
"""

import collections
import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import Dataset, Sampler

from ...data.loader import make_loader
from ...data.raster import ReferenceBank
from ...data.storage import load_sample
from ...exceptions import DatasetException, EstimationException, ShapeException, StageException
from ...metrics import evaluate_extraction, mask_iou
from .. import TrainingStage, freeze, load_checkpoint
from ..sdnet import PriorCache, make_prior
from ..segnet import THRESHOLD, load_segnet, make_prior_cache, segment
from .crop import adaptive_crop, crop_channels, uncrop
from .model import ExtractNetModel

logger = logging.getLogger(__name__)


def ref_segment(prior, index):
    """Same-category prior strokes: stroke `index` at 1.0, the others at 0.5"""

    masks = prior.masks.float()
    out = masks[index].clone()
    for j, category in enumerate(prior.categories):
        if j != index and category == prior.categories[index]:
            out = torch.maximum(out, 0.5 * masks[j])
    return out[None]


def build_inputs(target, index, prior, seg, crop_size=128, no_prior=False, no_semantic=False):
    """Input stack and crop of one stroke

    Parameters:
    -----------
    target : torch.Tensor (1, H, W)
        target character
    index : int
        stroke index in reference order
    prior : PriorData
        priors of the character
    seg : SegmentationResult
        unbatched segmentation of the character
    crop_size : int (default: 128)
        crop-space side
    no_prior : bool (default: False)
        zero the prior channels and crop the full canvas
    no_semantic : bool (default: False)
        zero the segment and feature channels

    Raises:
    -------
    ShapeException
        stroke index out of range

    Returns:
    --------
    tuple(torch.Tensor, CropRecord)
        (4 + C, crop_size, crop_size) stack and its crop
    """
    if not 0 <= index < len(prior):
        raise ShapeException(f"stroke index {index} out of range for {len(prior)} strokes")

    category = prior.categories[index]
    prior_mask = torch.zeros_like(prior.masks[index]) if no_prior else prior.masks[index]
    crop = adaptive_crop(prior_mask, crop_size, target.shape[-1])

    device = target.device
    full = torch.cat(
        (
            target,
            prior.strokes[index].to(device),
            seg.probs[category:category + 1].to(device),
            ref_segment(prior, index).to(device),
        )
    )
    stack = torch.cat(
        (crop_channels(full, crop), crop_channels(seg.feature64.to(device), crop))
    )

    if no_prior:
        stack[[1, 3]] = 0
    if no_semantic:
        stack[2] = 0
        stack[4:] = 0
    return stack, crop


@dataclass
class ExtractionContext:
    """Character-level upstream results shared by its strokes"""

    sample_id: str
    target: torch.Tensor
    prior: object
    seg: object


def build_context(sample_id, target, reference, prior_source, segnet, affines=(), device="cpu"):
    """Prior and segmentation of one character

    `prior_source` is a PriorCache or an SDNet model.

    Raises:
    -------
    StageException
        registration or segmentation failed
    """
    target = target.to(device)
    try:
        if isinstance(prior_source, PriorCache):
            prior = prior_source.prior(sample_id, target, reference, affines)
        else:
            prior = make_prior(prior_source, target, reference, device)
    except EstimationException as err:
        empty = [k for k, m in enumerate(reference.masks) if not m.any()]
        raise StageException("sdnet", empty[0] if empty else 0, err) from None

    try:
        seg = segment(segnet, target, prior.composite.to(device))
    except ShapeException as err:
        raise StageException("segnet", 0, err) from None

    return ExtractionContext(sample_id, target, prior, seg)


@torch.no_grad()
def extract_strokes(model, context, crop_size=128, no_prior=False, no_semantic=False):
    """Probability maps of every stroke of a character on the full canvas

    Returns:
    --------
    torch.Tensor (K, H, W)
        stroke probabilities in reference order
    """
    model.eval()
    maps = []
    for index in range(len(context.prior)):
        try:
            stack, crop = build_inputs(
                context.target, index, context.prior, context.seg, crop_size, no_prior, no_semantic
            )
            maps.append(uncrop(model.predict(stack[None])[0], crop)[0])
        except StageException:
            raise
        except Exception as err:
            raise StageException("extractnet", index, err) from None
    return torch.stack(maps)


def extract_all(
    target,
    reference,
    sdnet,
    segnet,
    extractnet,
    device="cpu",
    crop_size=128,
    no_prior=False,
    no_semantic=False,
):
    """Ordered full-canvas stroke masks of one target character

    Parameters:
    -----------
    target : torch.Tensor (1, H, W)
        target character
    reference : ReferenceRender
        reference rendering of its layout
    sdnet, segnet, extractnet : torch.nn.Module
        trained stage models

    Raises:
    -------
    StageException
        a stage failed; names the stroke and the stage

    Returns:
    --------
    list(numpy.ndarray)
        one boolean mask per reference stroke, in reference order
    """
    context = build_context(None, target, reference, sdnet, segnet, device=device)
    probs = extract_strokes(extractnet, context, crop_size, no_prior, no_semantic)
    return [m.cpu().numpy() for m in probs >= THRESHOLD]


def enumerate_examples(entries):
    """(entry index, stroke index) for every stroke of every entry"""

    return [(i, k) for i, entry in enumerate(entries) for k in range(len(entry.stroke_paths))]


class StrokeExampleDataset(Dataset):
    def __init__(self, examples):

        self.examples = examples

    def __len__(self):

        return len(self.examples)

    def __getitem__(self, index):

        return self.examples[index]


class GroupedStrokeSampler(Sampler):
    """Shuffles characters, keeping each character's strokes adjacent"""

    def __init__(self, examples, seed, shuffle=True):

        self.groups = collections.OrderedDict()
        for index, (entry, _) in enumerate(examples):
            self.groups.setdefault(entry, []).append(index)
        self.shuffle = shuffle
        self.generator = torch.Generator()
        self.generator.manual_seed(seed)
        self.count = len(examples)

    def __iter__(self):

        groups = list(self.groups.values())
        if self.shuffle:
            order = torch.randperm(len(groups), generator=self.generator).tolist()
            groups = [groups[i] for i in order]
        for group in groups:
            yield from group

    def __len__(self):

        return self.count


def _as_list(items):

    return list(items)


def build_model(model_config):

    return ExtractNetModel(**model_config)


def load_extractnet(path, device="cpu"):

    checkpoint = load_checkpoint(path, "extractnet", device)
    model = build_model(checkpoint["model_config"])
    model.load_state_dict(checkpoint["state_dict"])
    return freeze(model.to(device)), checkpoint["model_config"]


class ExtractNetStage(TrainingStage):
    stage = "extractnet"
    monitor = ("val_mIOU_m", "max")
    workers = 0

    # characters whose upstream results stay in memory
    context_capacity = 32

    def __init__(self, config, paths, dataset, resume=False):

        super().__init__(config, paths, dataset, resume)
        self.__cache = None
        self.__segnet = None
        self.__bank = ReferenceBank(dataset.layouts.values())
        self.__contexts = collections.OrderedDict()
        self.__entries = {}

    def _prerequisites(self):

        if self.stage_config.oracle_prior:
            return ("segnet",)
        return super()._prerequisites()

    def _build_model(self):

        self.__cache = make_prior_cache(
            self.config, self.paths, self.stage_config.oracle_prior, self.device
        )
        self.__segnet, _ = load_segnet(self.paths.checkpoint("segnet"), self.device)

        model_config = {
            "feature_channels": self.__segnet.feature_channels,
            "channel_scale": self.config.channel_scale,
        }
        return build_model(model_config), model_config

    def _build_loaders(self):

        train, test = self.dataset.partition()
        if not train:
            raise DatasetException("training split is empty")
        self.__entries = {"train": train, "val": test}

        loaders = []
        for split, shuffle in (("train", True), ("val", False)):
            examples = [(split, i, k) for i, k in enumerate_examples(self.__entries[split])]
            sampler = GroupedStrokeSampler(
                [((s, i), k) for s, i, k in examples], self.config.seed, shuffle
            )
            loaders.append(
                make_loader(
                    StrokeExampleDataset(examples), self.stage_config.batch_size, False,
                    self.config.seed, 0, _as_list, sampler=sampler,
                )
            )
        return tuple(loaders)

    def _context(self, split, index):

        key = (split, index)
        if (hit := self.__contexts.get(key)) is not None:
            self.__contexts.move_to_end(key)
            return hit

        sample = load_sample(self.dataset, self.__entries[split][index])
        reference = self.__bank.render(sample.layout_id, sample.style)
        target = torch.from_numpy(sample.image)[None]
        context = build_context(
            sample.sample_id, target, reference, self.__cache, self.__segnet,
            sample.affines, self.device,
        )
        hit = (context, torch.from_numpy(sample.stroke_masks).to(self.device))

        self.__contexts[key] = hit
        if len(self.__contexts) > self.context_capacity:
            self.__contexts.popitem(last=False)
        return hit

    def _batch(self, batch):

        cfg = self.stage_config
        stacks, labels, crops = [], [], []
        for split, index, k in batch:
            context, truth = self._context(split, index)
            stack, crop = build_inputs(
                context.target, k, context.prior, context.seg,
                cfg.crop_size, cfg.no_prior, cfg.no_semantic,
            )
            stacks.append(stack)
            labels.append((crop_channels(truth[k:k + 1].float(), crop) >= 0.5).float())
            crops.append(crop)
        return torch.stack(stacks), torch.stack(labels), crops

    def _train_step(self, batch):

        stacks, labels, _ = self._batch(batch)
        logits = self.model(stacks)
        return {"loss": F.binary_cross_entropy_with_logits(logits, labels)}

    def _validate(self, loader):

        total, count = 0.0, 0
        crop_ious = []
        extracted, truths = {}, {}
        for batch in loader:
            stacks, labels, crops = self._batch(batch)
            logits = self.model(stacks)
            total += float(F.binary_cross_entropy_with_logits(logits, labels)) * len(labels)
            count += len(labels)

            probs = torch.sigmoid(logits)
            for (split, index, k), prob, label, crop in zip(batch, probs, labels, crops):
                context, truth = self._context(split, index)
                crop_ious.append(mask_iou((prob >= THRESHOLD).cpu().numpy(), label.cpu().numpy() >= 0.5))

                masks = extracted.setdefault(context.sample_id, {})
                masks[k] = (uncrop(prob, crop)[0] >= THRESHOLD).cpu().numpy()
                truths[context.sample_id] = truth.cpu().numpy()

        extraction = evaluate_extraction(
            {sid: np.stack([m[k] for k in sorted(m)]) for sid, m in extracted.items()},
            truths,
        )
        return {
            "val_loss": total / max(count, 1),
            "val_mIOU_m": extraction["mIOU_m"],
            "val_mIOU_um": extraction["mIOU_um"],
            "val_crop_iou_median": float(np.median(crop_ious)) if crop_ious else 0.0,
        }


def train_extractnet(config, paths, dataset, resume=False):
    """Train ExtractNet with one example per (sample, stroke)

    Raises:
    -------
    CheckpointException
        an upstream checkpoint is missing
    """
    summary = ExtractNetStage(config, paths, dataset, resume).train()
    logger.info("extraction network trained: %s", summary["best"])
    return summary
