"""Prior-guided stroke-category segmentation.

Each of the seven output channels is an independent sigmoid, so pixels where
strokes of different categories cross may be active in several channels.
Training labels are per-category unions of the ground-truth stroke masks;
training priors are jittered by up to `max_prior_offset` pixels per stroke.
"""

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from ...data import NUM_CATEGORIES
from ...data.loader import CharacterDataset, collate_characters, make_loader
from ...exceptions import DatasetException
from ...metrics import SegmentationScore
from .. import TrainingStage, freeze, load_checkpoint
from ..sdnet import PriorCache, category_value, load_sdnet
from .model import SegNetModel

THRESHOLD = 0.5

logger = logging.getLogger(__name__)


def draw_offsets(rng, count, max_offset=5):
    """Integer (dx, dy) per stroke, uniform on [-max_offset, max_offset]^2"""

    return rng.integers(-max_offset, max_offset, size=(count, 2), endpoint=True)


def shift_image(image, dx, dy):
    """Translate (..., H, W) content by whole pixels, filling with zeros"""

    height, width = image.shape[-2:]
    out = torch.zeros_like(image)
    if abs(dx) >= width or abs(dy) >= height:
        return out

    out[..., max(dy, 0):height + min(dy, 0), max(dx, 0):width + min(dx, 0)] = image[
        ..., max(-dy, 0):height + min(-dy, 0), max(-dx, 0):width + min(-dx, 0)
    ]
    return out


def jitter_prior(prior, seed, max_offset=5):
    """Prior composite with every stroke shifted by its own random offset

    Parameters:
    -----------
    prior : PriorData
        transformed reference strokes and their categories
    seed : int | numpy.random.Generator
        offset source
    max_offset : int (default: 5)
        bound on |dx| and |dy|

    Returns:
    --------
    torch.Tensor (1, H, W)
        composite with category marker values preserved
    """
    rng = np.random.default_rng(seed)
    masks = prior.masks
    offsets = draw_offsets(rng, len(masks), max_offset)

    composite = torch.zeros((1, *masks.shape[-2:]), device=masks.device)
    for mask, category, (dx, dy) in zip(masks, prior.categories, offsets):
        shifted = shift_image(mask.float(), int(dx), int(dy)) * category_value(category)
        composite[0] = torch.maximum(composite[0], shifted)
    return composite


@dataclass
class SegmentationResult:
    probs: torch.Tensor
    masks: torch.Tensor
    feature64: torch.Tensor

    def argmax(self):
        """Most likely category + 1 per pixel, 0 where no channel fires"""

        labels = self.probs.argmax(dim=-3) + 1
        return torch.where(self.masks.any(dim=-3), labels, torch.zeros_like(labels))


@torch.no_grad()
def segment(model, target, composite):
    """Evaluate SegNet on one character or a batch

    Parameters:
    -----------
    model : SegNetModel
        segmentation network, switched to evaluation mode
    target, composite : torch.Tensor (1, H, W) or (B, 1, H, W)
        target character and prior composite

    Returns:
    --------
    SegmentationResult
        probabilities, masks (probs >= 0.5) and decoder features
    """
    model.eval()
    unbatched = target.dim() == 3
    if unbatched:
        target, composite = target[None], composite[None]

    logits, features = model(target, composite)
    probs = torch.sigmoid(logits)
    if unbatched:
        probs, features = probs[0], features[0]
    return SegmentationResult(probs=probs, masks=probs >= THRESHOLD, feature64=features)


def build_model(model_config):

    return SegNetModel(**model_config)


def load_segnet(path, device="cpu"):

    checkpoint = load_checkpoint(path, "segnet", device)
    model = build_model(checkpoint["model_config"])
    model.load_state_dict(checkpoint["state_dict"])
    return freeze(model.to(device)), checkpoint["model_config"]


def make_prior_cache(config, paths, oracle, device):
    """PriorCache over the run's registration network, or over true affines"""

    if oracle:
        return PriorCache(None, device)
    return PriorCache(load_sdnet(paths.checkpoint("sdnet"), device), device)


class SegNetStage(TrainingStage):
    stage = "segnet"
    monitor = ("val_miou", "max")

    def __init__(self, config, paths, dataset, resume=False):

        super().__init__(config, paths, dataset, resume)
        self.__cache = None
        self.__bank = None
        self.__rng = np.random.default_rng(config.seed)

    def _seed_epoch(self, loader, epoch):

        seed = super()._seed_epoch(loader, epoch)
        self.__rng = np.random.default_rng(seed)
        return seed

    def _prerequisites(self):

        return () if self.stage_config.oracle_prior else super()._prerequisites()

    def _build_model(self):

        self.__cache = make_prior_cache(
            self.config, self.paths, self.stage_config.oracle_prior, self.device
        )
        model_config = {"channel_scale": self.config.channel_scale}
        return build_model(model_config), model_config

    def _build_loaders(self):

        train, test = self.dataset.partition()
        if not train:
            raise DatasetException("training split is empty")

        train_set = CharacterDataset(self.dataset, train)
        self.__bank = train_set.bank
        cfg = self.stage_config
        return (
            make_loader(
                train_set, cfg.batch_size, True, self.config.seed,
                self._loader_workers(), collate_characters,
            ),
            make_loader(
                CharacterDataset(self.dataset, test, self.__bank), cfg.batch_size, False,
                self.config.seed, self._loader_workers(), collate_characters,
            ),
        )

    def _composites(self, batch, jitter):

        composites = []
        for index, sample_id in enumerate(batch["sample_id"]):
            if self.stage_config.no_prior:
                composites.append(torch.zeros_like(batch["target"][index]))
                continue

            reference = self.__bank.render(batch["layout_id"][index], batch["style"][index])
            prior = self.__cache.prior(
                sample_id, batch["target"][index], reference, batch["affines"][index]
            )
            if jitter:
                composites.append(jitter_prior(prior, self.__rng, self.stage_config.max_prior_offset))
            else:
                composites.append(prior.composite)
        return torch.stack(composites).to(self.device)

    def _train_step(self, batch):

        composite = self._composites(batch, jitter=True)
        logits, _ = self.model(batch["target"].to(self.device), composite)
        return {
            "loss": F.binary_cross_entropy_with_logits(
                logits, batch["category_masks"].to(self.device)
            )
        }

    def _validate(self, loader):

        score = SegmentationScore(NUM_CATEGORIES)
        total, count = 0.0, 0
        for batch in loader:
            labels = batch["category_masks"].to(self.device)
            composite = self._composites(batch, jitter=False)
            logits, _ = self.model(batch["target"].to(self.device), composite)
            total += float(F.binary_cross_entropy_with_logits(logits, labels)) * len(labels)
            count += len(labels)
            score.update((torch.sigmoid(logits) >= THRESHOLD).cpu().numpy(), (labels >= 0.5).cpu().numpy())

        metrics = {"val_loss": total / max(count, 1), "val_miou": score.mean()}
        for category, iou in enumerate(score.per_category()):
            metrics[f"val_iou_{category}"] = float(np.nan_to_num(iou))
        return metrics


def train_segnet(config, paths, dataset, resume=False):
    """Train SegNet on priors from the run's SDNet (or true affines in oracle mode)

    Raises:
    -------
    CheckpointException
        the SDNet checkpoint is missing outside oracle mode
    """
    summary = SegNetStage(config, paths, dataset, resume).train()
    logger.info("segmentation network trained: %s", summary["best"])
    return summary
