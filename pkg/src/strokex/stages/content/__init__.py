"""Learned stroke similarity.

A ContentNet autoencoder is trained to reconstruct single-stroke images; the
Euclidean distance between its l2-normalised encodings is the similarity
used by every registration loss:

    s_c(a, b) = || E(a) / |E(a)| - E(b) / |E(b)| ||   in [0, 2]
"""

import logging

import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import Subset

from ...data.loader import StrokeImageDataset, make_loader
from ...exceptions import DatasetException, ShapeException
from .. import TrainingStage, freeze, load_checkpoint
from .model import ContentNet

logger = logging.getLogger(__name__)


def s_c(a, b, encoder):
    """Normalised-embedding distance of two image batches

    Parameters:
    -----------
    a, b : torch.Tensor (N, 1, H, W)
        images of equal size
    encoder : ContentNet
        trained (usually frozen) encoder

    Raises:
    -------
    ShapeException
        the two batches differ in shape

    Returns:
    --------
    torch.Tensor (N,)
        per-pair distances, differentiable in both images
    """
    if a.shape != b.shape:
        raise ShapeException(
            f"similarity inputs differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}"
        )

    ea = F.normalize(encoder.encode(a), dim=1)
    eb = F.normalize(encoder.encode(b), dim=1)
    return torch.linalg.vector_norm(ea - eb, dim=1)


def build_model(model_config):

    return ContentNet(**model_config)


def load_encoder(path, device="cpu"):
    """Frozen ContentNet from a content checkpoint"""

    checkpoint = load_checkpoint(path, "content", device)
    model = build_model(checkpoint["model_config"])
    model.load_state_dict(checkpoint["state_dict"])
    return freeze(model.to(device))


class ContentStage(TrainingStage):
    stage = "content"
    monitor = ("val_bce", "min")

    def _build_model(self):

        model_config = {
            "input_size": 256,
            "embedding_dim": self.stage_config.embedding_dim,
            "channel_scale": self.config.channel_scale,
        }
        return build_model(model_config), model_config

    def _build_loaders(self):

        train_entries, _ = self.dataset.partition()
        corpus = StrokeImageDataset(self.dataset, train_entries)
        if len(corpus) == 0:
            raise DatasetException("no stroke images to train the content network on")

        order = np.random.default_rng(self.config.seed).permutation(len(corpus))
        n_val = max(1, int(round(self.stage_config.holdout * len(corpus))))
        if n_val >= len(corpus):
            raise DatasetException(
                f"content holdout leaves no training strokes ({len(corpus)} strokes)"
            )

        train = Subset(corpus, sorted(order[n_val:].tolist()))
        val = Subset(corpus, sorted(order[:n_val].tolist()))
        return (
            make_loader(train, self.stage_config.batch_size, True, self.config.seed, self._loader_workers()),
            make_loader(val, self.stage_config.batch_size, False, self.config.seed, self._loader_workers()),
        )

    def _train_step(self, batch):

        batch = batch.to(self.device)
        logits = self.model(batch)
        return {"loss": F.binary_cross_entropy_with_logits(logits, batch)}

    def _validate(self, loader):

        total, inter, union, count = 0.0, 0.0, 0.0, 0
        for batch in loader:
            batch = batch.to(self.device)
            logits = self.model(batch)
            total += float(
                F.binary_cross_entropy_with_logits(logits, batch, reduction="sum")
            ) / batch[0].numel()
            count += len(batch)

            pred, truth = logits >= 0, batch >= 0.5
            inter += float((pred & truth).sum())
            union += float((pred | truth).sum())

        return {
            "val_bce": total / max(count, 1),
            "val_iou": inter / union if union else 0.0,
        }


def train_contentnet(config, paths, dataset, resume=False):
    """Train the stroke autoencoder and keep its best checkpoint

    Raises:
    -------
    DatasetException
        the corpus holds no stroke images
    """
    summary = ContentStage(config, paths, dataset, resume).train()
    logger.info("content network trained: %s", summary["best"])
    return summary
