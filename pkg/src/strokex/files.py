import json
import os
import pathlib

from .exceptions import CheckpointException, ConfigException

STAGES = ("content", "recognizer", "sdnet", "segnet", "extractnet")

# stages each stage consumes, in training order
PREREQUISITES = {
    "content": (),
    "recognizer": (),
    "sdnet": ("content", "recognizer"),
    "segnet": ("sdnet",),
    "extractnet": ("sdnet", "segnet"),
}


def runs_root():

    return pathlib.Path(os.environ.get("STROKEX_RUNS", "runs"))


class Paths:
    def __init__(self, run_name, root=None):

        self.run_name = run_name

        self.__run_dir = (pathlib.Path(root) if root else runs_root()) / run_name

        self.__stage_paths = {}
        for stage in STAGES:
            stage_dir = self.__run_dir / stage
            self.__stage_paths[stage] = {
                "dir": stage_dir,
                "best": stage_dir / "best.pt",
                "last": stage_dir / "last.pt",
                "log": stage_dir / "train.jsonl",
            }

        self.__run_paths = {
            "dir": self.__run_dir,
            "config": self.__run_dir / "config.json",
            "manifest": self.__run_dir / "run.json",
            "lock": self.__run_dir / ".lock",
            "report": self.__run_dir / "report.json",
            "extractions": self.__run_dir / "extractions",
            "overlays": self.__run_dir / "overlays",
        }

    def get_run(self, key):

        return self.__run_paths[key]

    def get_stage(self, stage, key="dir"):

        try:
            return self.__stage_paths[stage][key]
        except KeyError:
            raise ConfigException(f"'{stage}' is not a pipeline stage") from None

    def checkpoint(self, stage):
        """Path of the checkpoint a downstream stage should consume

        Raises:
        -------
        CheckpointException
            the stage has not been trained in this run
        """
        for key in ("best", "last"):
            path = self.get_stage(stage, key)
            if path.exists():
                return path

        raise CheckpointException(
            f"missing {stage} checkpoint in run '{self.run_name}' "
            f"(expected {self.get_stage(stage, 'best')})"
        )

    def require(self, *stages):

        missing = [s for s in stages if not self.has_checkpoint(s)]
        if missing:
            raise CheckpointException(
                f"run '{self.run_name}' is missing trained stage(s): "
                + ", ".join(missing)
            )

    def has_checkpoint(self, stage):

        return any(
            self.get_stage(stage, key).exists() for key in ("best", "last")
        )

    def make_dirs(self, stage=None):

        self.__run_dir.mkdir(parents=True, exist_ok=True)
        if stage:
            self.get_stage(stage).mkdir(parents=True, exist_ok=True)


class RunLock:
    """Exclusive ownership of a run directory for one invocation"""

    def __init__(self, paths):

        self.__path = paths.get_run("lock")

    def __enter__(self):

        self.__path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.__path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigException(
                f"run directory is locked by another invocation: {self.__path}"
            ) from None

        with os.fdopen(fd, "w") as fp:
            fp.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):

        self.__path.unlink(missing_ok=True)
        return False


class RunManifest:
    """Run bookkeeping: frozen config snapshot, stage checkpoints and reports"""

    def __init__(self, paths):

        self.paths = paths
        self.data = {
            "run": paths.run_name,
            "stages": {},
            "reports": [],
        }
        if (path := paths.get_run("manifest")).exists():
            with open(path) as fp:
                self.data = json.load(fp)

    def snapshot_config(self, config_dict):
        """Store the resolved config once; later runs must resolve identically

        Raises:
        -------
        ConfigException
            a snapshot exists and differs from `config_dict`
        """
        path = self.paths.get_run("config")
        if path.exists():
            with open(path) as fp:
                stored = json.load(fp)
            if stored != config_dict:
                raise ConfigException(
                    f"resolved config differs from the snapshot in {path}; "
                    "use a new run name to change hyperparameters"
                )
            return stored

        self.paths.make_dirs()
        with open(path, "w") as fp:
            json.dump(config_dict, fp, indent=2, sort_keys=True)
        return config_dict

    def load_config_snapshot(self):

        path = self.paths.get_run("config")
        if not path.exists():
            return None
        with open(path) as fp:
            return json.load(fp)

    def record_stage(self, stage, checkpoint, metrics):

        self.data["stages"][stage] = {
            "checkpoint": str(checkpoint),
            "metrics": metrics,
        }
        self.save()

    def record_report(self, kind, path):

        entry = {"kind": kind, "path": str(path)}
        if entry not in self.data["reports"]:
            self.data["reports"].append(entry)
        self.save()

    def validate(self):
        """Every artifact referenced by the manifest must exist"""

        for stage, entry in self.data["stages"].items():
            if not pathlib.Path(entry["checkpoint"]).exists():
                raise CheckpointException(
                    f"run manifest references missing {stage} checkpoint "
                    f"{entry['checkpoint']}"
                )
        for entry in self.data["reports"]:
            if not pathlib.Path(entry["path"]).exists():
                raise ConfigException(
                    f"run manifest references missing report {entry['path']}"
                )

    def save(self):

        self.paths.make_dirs()
        with open(self.paths.get_run("manifest"), "w") as fp:
            json.dump(self.data, fp, indent=2)
