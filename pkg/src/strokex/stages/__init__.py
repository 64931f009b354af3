"""Base class of the trainable pipeline stages.

This class is purely virtual and therefore requires a child class to inherit
and implement its protected methods. The child class must implement the
following protected methods:
- _build_model()
- _build_loaders()
- _train_step(batch)
- _validate(loader)

and set the class attributes `stage` (a name from files.STAGES) and
`monitor` (validation key and "min" or "max" used to keep the best
checkpoint).

The following public methods are inherited by the child classes and are not
to be overridden:
- train()
- validate_checkpoint(key)
"""

import logging
import os
import random
import sys

import numpy as np
import torch
from tqdm import tqdm

from ..exceptions import CheckpointException
from ..files import PREREQUISITES
from ..logs import EpochLog

CHECKPOINT_FORMAT = "strokex-checkpoint"
CHECKPOINT_VERSION = 1

logger = logging.getLogger(__name__)


def set_seed(seed, deterministic=False):
    """Seed python, numpy and torch; optionally force deterministic kernels"""

    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.cuda.manual_seed_all(seed)

    if deterministic:
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
        torch.use_deterministic_algorithms(True, warn_only=True)
        torch.backends.cudnn.benchmark = False
        torch.set_num_threads(1)


def epoch_seed(seed, epoch):
    """Seed of one training epoch, a pure function of the run seed and the epoch"""

    return int(np.random.SeedSequence((seed, epoch)).generate_state(1)[0])


def resolve_device(name="auto"):

    if name == "auto":
        return torch.device("cuda" if torch.cuda.is_available() else "cpu")
    return torch.device(name)


def save_checkpoint(path, stage, model_config, model, epoch, metrics, training=None):
    """Write a self-describing checkpoint

    Parameters:
    -----------
    path : pathlib.Path
        destination file
    stage : str
        pipeline stage that produced the weights
    model_config : dict
        constructor arguments of the model
    model : torch.nn.Module
        trained model
    epoch : int
        last completed epoch
    metrics : dict
        validation metrics of that epoch
    training : dict (default: None)
        optimizer and scheduler state for resuming
    """
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "stage": stage,
            "model_config": model_config,
            "state_dict": model.state_dict(),
            "epoch": epoch,
            "metrics": metrics,
            "training": training,
        },
        path,
    )
    logger.debug("saved %s checkpoint %s (epoch %d)", stage, path, epoch)


def load_checkpoint(path, stage, device="cpu"):
    """Read a checkpoint and check that it belongs to `stage`

    Raises:
    -------
    CheckpointException
        unreadable file, foreign format or wrong stage
    """
    try:
        checkpoint = torch.load(path, map_location=device, weights_only=False)
    except FileNotFoundError:
        raise CheckpointException(f"missing {stage} checkpoint {path}") from None
    except Exception as err:
        raise CheckpointException(f"cannot read {stage} checkpoint {path}: {err}") from None

    if not isinstance(checkpoint, dict) or checkpoint.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointException(f"{path} is not a strokex checkpoint")
    if checkpoint.get("version") != CHECKPOINT_VERSION:
        raise CheckpointException(
            f"{path}: unsupported checkpoint version {checkpoint.get('version')}"
        )
    if checkpoint.get("stage") != stage:
        raise CheckpointException(
            f"{path} holds a {checkpoint.get('stage')} model, expected {stage}"
        )
    return checkpoint


def freeze(model):

    model.eval()
    for param in model.parameters():
        param.requires_grad_(False)
    return model


def _progress(iterable, desc):

    return tqdm(iterable, desc=desc, leave=False, disable=not sys.stderr.isatty())


class TrainingStage:
    stage = None
    monitor = ("val_loss", "min")

    # dataloader workers outside deterministic mode
    workers = 2

    def __init__(self, config, paths, dataset, resume=False):
        """Constructor for the virtual base class TrainingStage

        Parameters:
        -----------
        config : RunConfig
            resolved run configuration
        paths : Paths
            run directory bookkeeping
        dataset : DatasetManifest
            validated dataset; its partition gives the training and
            validation splits
        resume : bool (default: False)
            continue from the stage's last checkpoint when present
        """
        self.config = config
        self.stage_config = getattr(config, self.stage)
        self.paths = paths
        self.dataset = dataset
        self.resume = resume
        self.device = resolve_device(config.device)

        self.model = None
        self.model_config = {}

    def _build_model(self):
        raise NotImplementedError()

    def _build_loaders(self):
        raise NotImplementedError()

    def _train_step(self, batch):
        raise NotImplementedError()

    def _validate(self, loader):
        raise NotImplementedError()

    def _prerequisites(self):

        return PREREQUISITES[self.stage]

    def _seed_epoch(self, loader, epoch):
        """Reseed the shuffling and the global torch generator for `epoch`

        A resumed run draws the same batches as an uninterrupted one.
        """
        seed = epoch_seed(self.config.seed, epoch)
        torch.manual_seed(seed)
        for generator in (loader.generator, getattr(loader.sampler, "generator", None)):
            if generator is not None:
                generator.manual_seed(seed)
        return seed

    def _loader_workers(self):

        return 0 if self.config.deterministic else self.workers

    def _is_better(self, metrics, best):

        key, mode = self.monitor
        if best is None:
            return True
        if mode == "min":
            return metrics[key] < best[key]
        return metrics[key] > best[key]

    def check_prerequisites(self):
        """Fail before any work when an upstream checkpoint is missing"""

        self.paths.require(*self._prerequisites())

    def train(self):
        """Run the epoch loop

        Each epoch trains with Adam, validates in evaluation mode without
        gradients, appends one record to the stage's JSON-lines log and
        writes the last checkpoint; the best checkpoint is kept according to
        `monitor`. The learning rate halves every `lr_halve_every` epochs.

        Raises:
        -------
        CheckpointException
            an upstream checkpoint is missing

        Returns:
        --------
        dict
            stage summary with the best validation metrics
        """
        self.check_prerequisites()
        set_seed(self.config.seed, self.config.deterministic)

        self.model, self.model_config = self._build_model()
        self.model.to(self.device)
        train_loader, val_loader = self._build_loaders()

        params = [p for p in self.model.parameters() if p.requires_grad]
        optimizer = torch.optim.Adam(params, lr=self.stage_config.lr)
        scheduler = torch.optim.lr_scheduler.StepLR(
            optimizer, step_size=self.stage_config.lr_halve_every, gamma=0.5
        )

        start, best = 0, None
        last_path = self.paths.get_stage(self.stage, "last")
        best_path = self.paths.get_stage(self.stage, "best")
        if self.resume and last_path.exists():
            checkpoint = load_checkpoint(last_path, self.stage, self.device)
            self.model.load_state_dict(checkpoint["state_dict"])
            if training := checkpoint.get("training"):
                optimizer.load_state_dict(training["optimizer"])
                scheduler.load_state_dict(training["scheduler"])
                best = training.get("best")
            start = checkpoint["epoch"] + 1
            logger.info("resuming %s at epoch %d", self.stage, start)

        log = EpochLog(self.paths.get_stage(self.stage, "log"), resume=self.resume)
        metrics = {}
        for epoch in range(start, self.stage_config.epochs):
            lr = optimizer.param_groups[0]["lr"]
            self._seed_epoch(train_loader, epoch)

            self.model.train()
            totals, steps = {}, 0
            for batch in _progress(train_loader, f"{self.stage} {epoch + 1}/{self.stage_config.epochs}"):
                optimizer.zero_grad()
                losses = self._train_step(batch)
                losses["loss"].backward()
                optimizer.step()

                for key, value in losses.items():
                    totals[key] = totals.get(key, 0.0) + float(value.detach())
                steps += 1

            metrics = self.__evaluate(val_loader)
            record = {
                "epoch": epoch,
                "lr": lr,
                **{f"train_{k}": v / max(steps, 1) for k, v in totals.items()},
                **metrics,
            }
            log.write(record)
            logger.info(
                "%s epoch %d: %s",
                self.stage,
                epoch,
                ", ".join(f"{k}={v:.5g}" for k, v in record.items() if isinstance(v, float)),
            )

            scheduler.step()
            improved = self._is_better(metrics, best)
            if improved:
                best = metrics
                save_checkpoint(best_path, self.stage, self.model_config, self.model, epoch, metrics)

            save_checkpoint(
                last_path,
                self.stage,
                self.model_config,
                self.model,
                epoch,
                metrics,
                training={
                    "optimizer": optimizer.state_dict(),
                    "scheduler": scheduler.state_dict(),
                    "best": best,
                },
            )

        if best is None:
            # zero epochs: keep the initialised weights so downstream stages can run
            metrics = self.__evaluate(val_loader)
            best = metrics
            save_checkpoint(best_path, self.stage, self.model_config, self.model, -1, metrics)

        return {
            "stage": self.stage,
            "epochs": self.stage_config.epochs,
            "checkpoint": str(best_path),
            "best": best,
        }

    def validate_checkpoint(self, key="best"):
        """Reload a saved checkpoint and recompute its validation metrics"""

        path = self.paths.get_stage(self.stage, key)
        checkpoint = load_checkpoint(path, self.stage, self.device)
        set_seed(self.config.seed, self.config.deterministic)

        self.model, self.model_config = self._build_model()
        self.model.load_state_dict(checkpoint["state_dict"])
        self.model.to(self.device)
        _, val_loader = self._build_loaders()
        return self.__evaluate(val_loader)

    def __evaluate(self, loader):

        self.model.eval()
        with torch.no_grad():
            return {k: float(v) for k, v in self._validate(loader).items()}
