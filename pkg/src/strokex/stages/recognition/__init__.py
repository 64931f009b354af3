"""Character recognition features.

The recogniser classifies target images by their layout (the synthetic
character class). Once trained it is frozen and its intermediate feature
maps are injected into the registration encoder.
"""

import logging

import torch.nn.functional as F

from ...data.loader import CharacterDataset, collate_characters, make_loader
from ...exceptions import DatasetException
from .. import TrainingStage, freeze, load_checkpoint
from .model import RecognitionNet, feature_widths

logger = logging.getLogger(__name__)


def build_model(model_config):

    return RecognitionNet(**model_config)


def load_recognizer(path, device="cpu"):

    checkpoint = load_checkpoint(path, "recognizer", device)
    model = build_model(checkpoint["model_config"])
    model.load_state_dict(checkpoint["state_dict"])
    return freeze(model.to(device)), checkpoint["model_config"]


class RecognitionStage(TrainingStage):
    stage = "recognizer"
    monitor = ("val_accuracy", "max")

    def _build_model(self):

        if not self.dataset.layouts:
            raise DatasetException("dataset has no layouts to recognise")

        model_config = {
            "num_classes": max(l.char_class for l in self.dataset.layouts.values()) + 1,
            "channel_scale": self.config.channel_scale,
        }
        return build_model(model_config), model_config

    def _build_loaders(self):

        train, test = self.dataset.partition()
        if not train:
            raise DatasetException("training split is empty")

        cfg = self.stage_config
        return (
            make_loader(
                CharacterDataset(self.dataset, train), cfg.batch_size, True,
                self.config.seed, self._loader_workers(), collate_characters,
            ),
            make_loader(
                CharacterDataset(self.dataset, test), cfg.batch_size, False,
                self.config.seed, self._loader_workers(), collate_characters,
            ),
        )

    def _train_step(self, batch):

        logits = self.model(batch["target"].to(self.device))
        return {"loss": F.cross_entropy(logits, batch["char_class"].to(self.device))}

    def _validate(self, loader):

        total, correct, count = 0.0, 0, 0
        for batch in loader:
            labels = batch["char_class"].to(self.device)
            logits = self.model(batch["target"].to(self.device))
            total += float(F.cross_entropy(logits, labels, reduction="sum"))
            correct += int((logits.argmax(dim=1) == labels).sum())
            count += len(labels)

        return {
            "val_loss": total / max(count, 1),
            "val_accuracy": correct / max(count, 1),
        }


def train_recognizer(config, paths, dataset, resume=False):

    summary = RecognitionStage(config, paths, dataset, resume).train()
    logger.info("recogniser trained: %s", summary["best"])
    return summary
