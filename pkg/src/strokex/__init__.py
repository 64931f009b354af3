import argparse
import concurrent.futures
import importlib.metadata
import json
import logging
import sys
from pprint import pprint

import numpy as np
import torch

from . import logs
from .configfile import load_config
from .data import Style, generate_layouts
from .data.raster import JitterConfig, ReferenceBank, synthesize_sample
from .data.storage import load_sample, read_dataset, write_dataset, write_mask
from .exceptions import StageException, StrokexError
from .files import Paths, RunLock, RunManifest
from .metrics import build_report, evaluate_extraction, evaluate_registration, mask_iou, write_report
from .render import OverlayRenderer
from .stages import _progress, resolve_device, set_seed
from .stages.content import train_contentnet
from .stages.extractnet import build_context, extract_strokes, load_extractnet, train_extractnet
from .stages.recognition import train_recognizer
from .stages.sdnet import PriorCache, load_sdnet, train_sdnet
from .stages.segnet import THRESHOLD, load_segnet, train_segnet

logger = logging.getLogger(__name__)

TRAINERS = {
    "content": train_contentnet,
    "recognizer": train_recognizer,
    "sdnet": train_sdnet,
    "segnet": train_segnet,
    "extractnet": train_extractnet,
}

# samples per layout when --layouts is not given
SAMPLES_PER_LAYOUT = 5


def _synthesize(task):

    layout, jitter, seed, style, sample_id = task
    return synthesize_sample(layout, jitter, seed, style, sample_id)


def sample_seed(seed, index):
    """Independent per-sample seed, stable under parallel generation"""

    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def generate_dataset(
    n, seed, out, split=0.1, layouts=None, style="calligraphy", jitter=None, workers=1
):
    """Generate a synthetic dataset and write it under `out`

    Parameters:
    -----------
    n : int
        number of samples
    seed : int
        corpus seed; the output is a pure function of the arguments
    out : str | pathlib.Path
        dataset root
    split : float (default: 0.1)
        held-out test fraction
    layouts : int (default: None)
        number of reference layouts, n / 5 when omitted
    style : str (default: "calligraphy")
        "calligraphy", "skeleton" or "mixed" (alternating)
    jitter : JitterConfig (default: None)
        per-stroke jitter bounds, JitterConfig() when omitted
    workers : int (default: 1)
        worker processes; results keep sample order

    Returns:
    --------
    DatasetManifest
        manifest of the written dataset
    """
    jitter = jitter or JitterConfig()
    jitter.validate()
    n = max(1, int(n))
    corpus = generate_layouts(layouts or max(1, n // SAMPLES_PER_LAYOUT), seed)

    styles = [Style.CALLIGRAPHY, Style.SKELETON] if style == "mixed" else [Style(style)]
    tasks = [
        (
            corpus[i % len(corpus)],
            jitter,
            sample_seed(seed, i),
            styles[i % len(styles)],
            f"{i:05d}",
        )
        for i in range(n)
    ]

    if workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            samples = list(pool.map(_synthesize, tasks, chunksize=8))
    else:
        samples = [_synthesize(task) for task in _progress(tasks, "gen-data")]

    manifest = write_dataset(samples, out, corpus, split)
    logger.info("wrote %d samples over %d layouts to %s", n, len(corpus), out)
    return manifest


class StrokeExtractor:
    """Facade over one run directory: training, extraction, evaluation"""

    def __init__(self, config, paths):

        self.__config = config
        self.__paths = paths
        self.__manifest = RunManifest(paths)
        self.__dataset = None
        self.__summary = {}

    @property
    def config(self):

        return self.__config

    @property
    def dataset(self):

        if self.__dataset is None:
            self.__dataset = read_dataset(self.__config.data_dir)
        return self.__dataset

    def train(self, stage, resume=False):

        summary = TRAINERS[stage](self.__config, self.__paths, self.dataset, resume)
        self.__manifest.record_stage(stage, summary["checkpoint"], summary["best"])
        self.__summary = {
            "run": self.__paths.run_name,
            "stage": stage,
            "checkpoint": summary["checkpoint"],
            "epochs": summary["epochs"],
            "best": summary["best"],
        }
        return summary

    def extract(self, split="test", limit=None):
        """Write every extracted stroke mask and an index of the extraction

        Returns:
        --------
        pathlib.Path
            index.json of the extraction directory
        """
        root = self.__paths.get_run("extractions")
        index = []
        for sample, _, context, masks in self.__infer(split, limit):
            strokes = []
            for k, (mask, category) in enumerate(zip(masks, context.prior.categories)):
                path = root / sample.sample_id / f"{k}.png"
                write_mask(path, mask)
                strokes.append(
                    {
                        "index": k,
                        "category": int(category),
                        "path": str(path.relative_to(root)),
                        "iou": mask_iou(mask, sample.stroke_masks[k]),
                    }
                )
            index.append({"sample_id": sample.sample_id, "strokes": strokes})

        path = root / "index.json"
        root.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fp:
            json.dump(index, fp, indent=2)
        self.__manifest.record_report("extractions", path)

        ious = [s["iou"] for entry in index for s in entry["strokes"]]
        self.__summary = {
            "run": self.__paths.run_name,
            "samples": len(index),
            "strokes": len(ious),
            "median stroke iou": float(np.median(ious)) if ious else None,
            "index": str(path),
        }
        return path

    def evaluate(self, split="test", limit=None):
        """Registration and extraction metrics of the run, written to report.json"""

        priors, truths, baseline, extractions = {}, {}, {}, {}
        for sample, reference, context, masks in self.__infer(split, limit):
            priors[sample.sample_id] = context.prior.masks.cpu().numpy()
            truths[sample.sample_id] = sample.stroke_masks
            baseline[sample.sample_id] = reference.masks
            extractions[sample.sample_id] = masks

        report = build_report(
            self.__config.data_dir,
            self.__paths.run_name,
            evaluate_registration(priors, truths, baseline),
            evaluate_extraction(extractions, truths),
        )
        path = self.__paths.get_run("report")
        write_report(path, report)
        self.__manifest.record_report("evaluation", path)

        self.__summary = {
            "run": self.__paths.run_name,
            "samples": len(truths),
            "mDis": report["mDis"],
            "mBIou": report["mBIou"],
            "mIOU_m": report["mIOU_m"],
            "mIOU_um": report["mIOU_um"],
            "baseline": report.get("baseline"),
            "report": str(path),
        }
        return report

    def report(self, split="test", limit=None):
        """Overlay and four-panel image per sample"""

        out_dir = self.__paths.get_run("overlays")
        renderer = OverlayRenderer()
        written = 0
        for sample, _, context, masks in self.__infer(split, limit):
            renderer.write(
                out_dir,
                sample.sample_id,
                sample.target_image,
                list(masks),
                context.prior.composite[0].cpu().numpy(),
                context.seg.argmax().cpu().numpy(),
            )
            written += 1
        self.__manifest.record_report("overlays", out_dir)

        self.__summary = {
            "run": self.__paths.run_name,
            "samples": written,
            "overlays": str(out_dir),
        }
        return out_dir

    def dump_summary(self):

        pprint(self.__summary, sort_dicts=False)

    def __models(self):

        cfg = self.__config.extractnet
        if cfg.oracle_prior:
            self.__paths.require("segnet", "extractnet")
        else:
            self.__paths.require("sdnet", "segnet", "extractnet")
        self.__manifest.validate()

        device = resolve_device(self.__config.device)
        if cfg.oracle_prior:
            prior_source = PriorCache(None, device)
        else:
            prior_source = load_sdnet(self.__paths.checkpoint("sdnet"), device)
        segnet, _ = load_segnet(self.__paths.checkpoint("segnet"), device)
        extractnet, _ = load_extractnet(self.__paths.checkpoint("extractnet"), device)
        return device, prior_source, segnet, extractnet

    def __infer(self, split, limit):

        device, prior_source, segnet, extractnet = self.__models()
        set_seed(self.__config.seed, self.__config.deterministic)

        train, test = self.dataset.partition()
        match split:
            case "train":
                entries = train
            case "all":
                entries = train + test
            case _:
                entries = test
        if limit:
            entries = entries[:limit]

        cfg = self.__config.extractnet
        bank = ReferenceBank(self.dataset.layouts.values())
        for entry in _progress(entries, split):
            sample = load_sample(self.dataset, entry)
            reference = bank.render(sample.layout_id, sample.style)
            target = torch.from_numpy(sample.image)[None]
            try:
                context = build_context(
                    sample.sample_id, target, reference, prior_source, segnet,
                    sample.affines, device,
                )
                probs = extract_strokes(
                    extractnet, context, cfg.crop_size, cfg.no_prior, cfg.no_semantic
                )
            except StageException as err:
                logger.error("sample '%s': %s", sample.sample_id, err)
                raise
            yield sample, reference, context, (probs >= THRESHOLD).cpu().numpy()


class _ArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with status 1"""

    def error(self, message):

        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _version():

    try:
        return importlib.metadata.version("strokex")
    except importlib.metadata.PackageNotFoundError:
        return "unknown"


def _build_parser():

    parser = _ArgumentParser(prog="strokex", description="stroke extraction pipeline")
    parser.add_argument("--version", action="version", version=_version())

    common = _ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="count", default=0, help="-v info, -vv debug")

    run_opts = _ArgumentParser(add_help=False)
    run_opts.add_argument("--run", default="default", help="run name under the runs root")
    run_opts.add_argument("--data", help="dataset root (default: config data_dir)")
    run_opts.add_argument("--config", help="JSON file with config overrides")
    run_opts.add_argument("--seed", type=int, help="run seed")
    run_opts.add_argument("--deterministic", action="store_true", default=None)
    run_opts.add_argument("--desk", action="store_true", help="desk-scale preset")
    run_opts.add_argument("--device", help="torch device, 'auto' picks cuda when present")

    subparsers = parser.add_subparsers(dest="command", required=True)

    gen = subparsers.add_parser("gen-data", parents=[common], help="generate a synthetic dataset")
    gen.add_argument("--n", type=int, default=None, help="number of samples")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", default="data")
    gen.add_argument("--split", type=float, default=None, help="test fraction")
    gen.add_argument("--layouts", type=int, default=None)
    gen.add_argument("--style", choices=("calligraphy", "skeleton", "mixed"), default="calligraphy")
    gen.add_argument("--zero-jitter", action="store_true")
    gen.add_argument("--elastic", type=float, default=0.0, help="elastic amplitude in px")
    gen.add_argument("--workers", type=int, default=1)
    gen.add_argument("--desk", action="store_true", help="250 samples, 0.2 test split")

    for stage in ("content", "recognizer"):
        train = subparsers.add_parser(f"train-{stage}", parents=[common, run_opts])
        train.add_argument("--resume", action="store_true")

    train = subparsers.add_parser("train-sdnet", parents=[common, run_opts])
    train.add_argument("--resume", action="store_true")
    train.add_argument("--single-field", action="store_true", default=None)

    train = subparsers.add_parser("train-segnet", parents=[common, run_opts])
    train.add_argument("--resume", action="store_true")
    train.add_argument("--no-prior", action="store_true", default=None)
    train.add_argument("--oracle-prior", action="store_true", default=None)

    train = subparsers.add_parser("train-extractnet", parents=[common, run_opts])
    train.add_argument("--resume", action="store_true")
    train.add_argument("--no-prior", action="store_true", default=None)
    train.add_argument("--no-semantic", action="store_true", default=None)
    train.add_argument("--oracle-prior", action="store_true", default=None)

    for command in ("extract", "evaluate", "report"):
        sub = subparsers.add_parser(command, parents=[common, run_opts])
        sub.add_argument("--split", choices=("test", "train", "all"), default="test")
        sub.add_argument("--limit", type=int, default=None, help="first N samples only")

    return parser


def _overrides(args):
    """Config overrides carried by command-line flags"""

    overrides = {}
    for flag, key in (("seed", "seed"), ("deterministic", "deterministic"), ("device", "device"), ("data", "data_dir")):
        if (value := args.get(flag)) is not None:
            overrides[key] = value

    section = args["command"].removeprefix("train-")
    for flag in ("single_field", "no_prior", "no_semantic"):
        if args.get(flag) is not None:
            overrides.setdefault(section, {})[flag] = args[flag]

    # oracle priors are a property of the whole run, inference included
    if args.get("oracle_prior") is not None:
        for section in ("segnet", "extractnet"):
            overrides.setdefault(section, {})["oracle_prior"] = args["oracle_prior"]
    return overrides


def _gen_data(args):

    n = args["n"] or (250 if args["desk"] else 200)
    split = args["split"] if args["split"] is not None else (0.2 if args["desk"] else 0.1)

    jitter = JitterConfig.zero() if args["zero_jitter"] else JitterConfig()
    if args["elastic"]:
        jitter = JitterConfig(
            jitter.max_rotation_deg, jitter.scale_range, jitter.max_translation, args["elastic"]
        )

    manifest = generate_dataset(
        n, args["seed"], args["out"], split, args["layouts"], args["style"], jitter, args["workers"]
    )
    train, test = manifest.partition()
    pprint(
        {
            "dataset": str(args["out"]),
            "samples": len(manifest.entries),
            "layouts": len(manifest.layouts),
            "train": len(train),
            "test": len(test),
            "jitter": jitter.to_dict(),
        },
        sort_dicts=False,
    )


def _run_command(args):

    paths = Paths(args["run"])
    with RunLock(paths):
        manifest = RunManifest(paths)
        config = load_config(
            args["config"], _overrides(args), args["desk"], base=manifest.load_config_snapshot()
        )
        manifest.snapshot_config(config.to_dict())

        extractor = StrokeExtractor(config, paths)
        match args["command"]:
            case "extract":
                extractor.extract(args["split"], args["limit"])
            case "evaluate":
                extractor.evaluate(args["split"], args["limit"])
            case "report":
                extractor.report(args["split"], args["limit"])
            case command:
                extractor.train(command.removeprefix("train-"), args["resume"])
        extractor.dump_summary()


def run(argv=None):
    """Command-line entry point; returns the process exit code"""

    parser = _build_parser()
    try:
        args = vars(parser.parse_args(argv))
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1

    logs.configure(args["verbose"])
    try:
        if args["command"] == "gen-data":
            _gen_data(args)
        else:
            _run_command(args)

    except StrokexError as err:
        logger.error("%s", err)
        print(f"strokex: error: {err}", file=sys.stderr)
        return err.exit_code

    except Exception:
        logger.exception("%s failed", args["command"])
        return 2

    return 0
