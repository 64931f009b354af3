"""Structure-deformable registration and prior generation.

Training aligns the target to the labeled reference: warp(t, phi) ~ r. For a
reference pixel p the matching target pixel is p + phi(p), so the local
linear estimate of phi_s over reference stroke i is a transform moving that
stroke from reference space into target space. Rendering the reference
stroke through it gives the stroke's prior rt_s^i.

    L_sum = lambda * L_single_linear + L_sim_global + gamma * L_smooth
"""

import logging
from dataclasses import dataclass

import numpy as np
import torch

from ...data import NUM_CATEGORIES
from ...data.loader import CharacterDataset, collate_characters, make_loader
from ...exceptions import DatasetException, ShapeException
from ...fields import (
    AffineStrokeTransform,
    folding_ratio,
    linear_estimate,
    linear_field,
    render_affine,
    smoothness,
    warp,
)
from ...metrics import evaluate_registration
from .. import TrainingStage, freeze, load_checkpoint
from ..content import load_encoder, s_c
from ..recognition import load_recognizer
from .model import SDNetModel

logger = logging.getLogger(__name__)


def loss_sum(t, r, t_s, r_s, owner, phi_d, phi_s, encoder, lambda_=0.5, gamma=5.0):
    """Registration loss and its components

    Parameters:
    -----------
    t, r : torch.Tensor (B, 1, H, W)
        target and reference characters
    t_s, r_s : torch.Tensor (N, 1, H, W)
        target and reference single strokes, flattened over the batch
    owner : torch.Tensor (N,)
        batch index of every stroke
    phi_d, phi_s : torch.Tensor (B, 2, H, W)
        main and composed registration fields
    encoder : ContentNet
        frozen similarity encoder
    lambda_, gamma : float
        weights of the single-stroke and smoothness terms

    Raises:
    -------
    ShapeException
        stroke counts of t_s, r_s and owner differ

    Returns:
    --------
    dict(str, torch.Tensor)
        "loss", "single_linear", "sim_global", "smooth"
    """
    if not len(t_s) == len(r_s) == len(owner):
        raise ShapeException(
            f"stroke count mismatch: {len(t_s)} target strokes, "
            f"{len(r_s)} reference strokes, {len(owner)} owners"
        )

    transforms = linear_estimate(phi_s[owner], r_s)
    moved = warp(t_s, linear_field(transforms, t_s.shape[-2:]))
    per_stroke = s_c(r_s, moved, encoder)

    batch = phi_s.shape[0]
    sums = torch.zeros(batch, dtype=per_stroke.dtype, device=per_stroke.device)
    sums = sums.index_add(0, owner, per_stroke)
    counts = torch.bincount(owner, minlength=batch)
    present = counts > 0
    single = (sums[present] / counts[present].to(sums.dtype)).mean()

    sim_global = s_c(r, warp(t, phi_d), encoder).mean()
    smooth = smoothness(phi_d)

    return {
        "loss": lambda_ * single + sim_global + gamma * smooth,
        "single_linear": single,
        "sim_global": sim_global,
        "smooth": smooth,
    }


def category_value(category):
    """Marker of a category in the prior composite"""

    return (category + 1) / NUM_CATEGORIES


def prior_composite(masks, categories):
    """Max-composite of stroke masks marked by category, shaped (1, H, W)"""

    values = torch.tensor(
        [category_value(c) for c in categories], dtype=torch.float32, device=masks.device
    )
    marked = (masks.reshape(len(categories), *masks.shape[-2:]) >= 0.5) * values[:, None, None]
    return marked.max(dim=0, keepdim=True).values


@dataclass
class PriorData:
    """Transformed reference strokes of one character, in reference order"""

    strokes: torch.Tensor
    transforms: AffineStrokeTransform
    categories: tuple
    composite: torch.Tensor

    def __len__(self):

        return len(self.categories)

    @property
    def masks(self):

        return self.strokes[:, 0] >= 0.5

    @property
    def singular(self):

        return self.transforms.singular


def render_prior(reference, transforms, device="cpu"):
    """PriorData from a reference rendering and per-stroke transforms

    Parameters:
    -----------
    reference : ReferenceRender
        reference composite, masks and categories
    transforms : AffineStrokeTransform
        batch of one transform per stroke, reference -> target

    Returns:
    --------
    PriorData
        prior with the inversion fallback flags of the transforms
    """
    masks = torch.from_numpy(reference.masks.astype(np.float32)).to(device)[:, None]
    transforms = transforms.to(device=device, dtype=masks.dtype)
    strokes, singular = render_affine(masks, transforms)
    transforms.singular = singular

    return PriorData(
        strokes=strokes,
        transforms=transforms,
        categories=tuple(reference.categories),
        composite=prior_composite(strokes, reference.categories),
    )


def oracle_transforms(affines):
    """Ground-truth transforms from recorded per-stroke affines"""

    if not affines:
        raise DatasetException("sample carries no recorded affines for the oracle prior")
    return AffineStrokeTransform.stack([a.to_transform(torch.float32) for a in affines])


@torch.no_grad()
def estimate_transforms(model, target, reference, device="cpu"):
    """Per-stroke transforms estimated from phi_s of one character

    Parameters:
    -----------
    model : SDNetModel
        registration network in evaluation mode
    target : torch.Tensor (1, H, W)
        target character
    reference : ReferenceRender
        reference rendering of the character's layout

    Raises:
    -------
    EstimationException
        a reference stroke mask is empty
    """
    labeled = torch.from_numpy(reference.labeled.astype(np.float32)).to(device)
    _, _, phi_s = model(target.to(device)[None], labeled[None, None])

    masks = torch.from_numpy(reference.masks).to(device)
    return linear_estimate(phi_s.expand(len(masks), -1, -1, -1), masks)


def make_prior(model, target, reference, device="cpu"):
    """Prior information for one target character

    Singular transforms fall back to translation-only inverses and are
    flagged in PriorData.transforms.singular; they never abort.
    """
    model.eval()
    return render_prior(reference, estimate_transforms(model, target, reference, device), device)


class PriorCache:
    """Per-sample transforms computed once, priors rendered on demand

    With `model` None the recorded ground-truth affines are used.
    """

    def __init__(self, model=None, device="cpu"):

        self.__model = model
        self.__device = device
        self.__transforms = {}

    @property
    def oracle(self):

        return self.__model is None

    def transforms(self, sample_id, target, reference, affines=()):

        if (cached := self.__transforms.get(sample_id)) is not None:
            return cached

        if self.oracle:
            transforms = oracle_transforms(affines)
        else:
            transforms = estimate_transforms(self.__model, target, reference, self.__device)
        transforms = transforms.detach().to(device="cpu")
        self.__transforms[sample_id] = transforms
        return transforms

    def prior(self, sample_id, target, reference, affines=()):

        transforms = self.transforms(sample_id, target, reference, affines)
        return render_prior(reference, transforms, self.__device)

    def __len__(self):

        return len(self.__transforms)


def build_model(model_config):

    return SDNetModel(**model_config)


def load_sdnet(path, device="cpu"):

    checkpoint = load_checkpoint(path, "sdnet", device)
    model = build_model(checkpoint["model_config"])
    model.load_state_dict(checkpoint["state_dict"])
    return freeze(model.to(device))


class SDNetStage(TrainingStage):
    stage = "sdnet"
    monitor = ("val_mDis", "min")

    def __init__(self, config, paths, dataset, resume=False):

        super().__init__(config, paths, dataset, resume)
        self.__encoder = None
        self.__baseline = None

    @property
    def lambda_(self):

        return 0.0 if self.stage_config.single_field else self.stage_config.lambda_

    def _build_model(self):

        self.__encoder = load_encoder(self.paths.checkpoint("content"), self.device)
        recognizer, rec_config = load_recognizer(self.paths.checkpoint("recognizer"), self.device)

        model_config = {
            "num_classes": rec_config["num_classes"],
            "channel_scale": self.config.channel_scale,
            "refine_weight": self.stage_config.refine_weight,
            "single_field": self.stage_config.single_field,
        }
        model = build_model(model_config)
        model.recognizer.load_state_dict(recognizer.state_dict())
        freeze(model.recognizer)
        return model, model_config

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

    def __losses(self, batch):

        device = self.device
        phi_d, _, phi_s = self.model(batch["target"].to(device), batch["labeled"].to(device))
        losses = loss_sum(
            batch["target"].to(device),
            batch["reference"].to(device),
            batch["strokes"].to(device),
            batch["ref_strokes"].to(device),
            batch["owner"].to(device),
            phi_d,
            phi_s,
            self.__encoder,
            lambda_=self.lambda_,
            gamma=self.stage_config.gamma,
        )
        return losses, phi_d, phi_s

    def _train_step(self, batch):

        losses, _, _ = self.__losses(batch)
        return losses

    def _validate(self, loader):

        totals, count = {}, 0
        priors, truths, baseline = {}, {}, {}
        folding = []
        for batch in loader:
            losses, phi_d, phi_s = self.__losses(batch)
            size = len(batch["sample_id"])
            for key, value in losses.items():
                totals[key] = totals.get(key, 0.0) + float(value) * size
            count += size
            folding.append(float(folding_ratio(phi_d)))

            owner = batch["owner"].to(self.device)
            ref_strokes = batch["ref_strokes"].to(self.device)
            transforms = linear_estimate(phi_s[owner], ref_strokes)
            rendered, _ = render_affine(ref_strokes, transforms)

            offset = 0
            for index, sample_id in enumerate(batch["sample_id"]):
                n = batch["counts"][index]
                priors[sample_id] = (rendered[offset:offset + n, 0] >= 0.5).cpu().numpy()
                truths[sample_id] = (batch["strokes"][offset:offset + n, 0] >= 0.5).numpy()
                baseline[sample_id] = (batch["ref_strokes"][offset:offset + n, 0] >= 0.5).numpy()
                offset += n

        metrics = {f"val_{k}": v / max(count, 1) for k, v in totals.items()}

        registration = evaluate_registration(
            priors, truths, baseline=baseline if self.__baseline is None else None
        )
        if self.__baseline is None:
            self.__baseline = registration["baseline"]
            logger.info(
                "unregistered reference baseline: mDis %.3f, mBIou %.4f",
                self.__baseline["mDis"], self.__baseline["mBIou"],
            )

        metrics.update(
            val_mDis=registration["mDis"],
            val_mBIou=registration["mBIou"],
            val_folding=float(np.mean(folding)) if folding else 0.0,
            baseline_mDis=self.__baseline["mDis"],
            baseline_mBIou=self.__baseline["mBIou"],
        )
        return metrics


def train_sdnet(config, paths, dataset, resume=False):
    """Train the registration network on the training split

    Raises:
    -------
    CheckpointException
        the content or recogniser checkpoint is missing
    """
    summary = SDNetStage(config, paths, dataset, resume).train()
    logger.info("registration network trained: %s", summary["best"])
    return summary
