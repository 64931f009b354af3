"""On-disk dataset format.

    <root>/manifest.json
    <root>/layouts.json
    <root>/targets/<sample_id>.png
    <root>/strokes/<sample_id>/<k>.png      k = 0-based stroke order

Images are 8-bit grayscale PNG; stroke masks are stored as 0/255. All paths
inside the manifest are relative to the root.
"""

import hashlib
import json
import logging
import pathlib
from dataclasses import dataclass, field

import cv2
import numpy as np

from ..exceptions import DatasetException
from . import CANVAS, AffineRecord, ReferenceLayout, StrokeSample, Style

MANIFEST_VERSION = 1

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ManifestEntry:
    sample_id: str
    target_path: str
    stroke_paths: tuple
    layout_id: int
    categories: tuple
    style: Style = Style.CALLIGRAPHY
    affines: tuple = ()

    def to_dict(self):

        return {
            "sample_id": self.sample_id,
            "target_path": self.target_path,
            "stroke_paths": list(self.stroke_paths),
            "layout_id": self.layout_id,
            "categories": list(self.categories),
            "style": self.style.value,
            "affines": [a.to_dict() for a in self.affines],
        }

    @classmethod
    def from_dict(cls, data):

        try:
            return cls(
                sample_id=str(data["sample_id"]),
                target_path=data["target_path"],
                stroke_paths=tuple(data["stroke_paths"]),
                layout_id=int(data["layout_id"]),
                categories=tuple(int(c) for c in data["categories"]),
                style=Style(data.get("style", Style.CALLIGRAPHY.value)),
                affines=tuple(AffineRecord.from_dict(a) for a in data.get("affines", ())),
            )
        except (KeyError, ValueError, TypeError) as err:
            sample = data.get("sample_id", "?") if isinstance(data, dict) else "?"
            raise DatasetException(
                f"sample '{sample}': malformed manifest entry ({err})"
            ) from None


def _split_key(sample_id):

    return hashlib.sha1(sample_id.encode("utf-8")).hexdigest()


@dataclass
class DatasetManifest:
    root_dir: pathlib.Path
    entries: list
    split: float = 0.1
    layouts: dict = field(default_factory=dict)

    def partition(self):
        """Deterministic (train, test) split ordered by sha1 of sample_id

        The first round(split * n) entries in hash order form the test split;
        each side is returned sorted by sample_id.
        """
        ordered = sorted(self.entries, key=lambda e: _split_key(e.sample_id))
        n_test = int(round(self.split * len(ordered)))
        test = sorted(ordered[:n_test], key=lambda e: e.sample_id)
        train = sorted(ordered[n_test:], key=lambda e: e.sample_id)
        return train, test

    def entry(self, sample_id):

        for entry in self.entries:
            if entry.sample_id == sample_id:
                return entry
        raise DatasetException(f"sample '{sample_id}' is not in the manifest")

    def path(self, relative):

        return self.root_dir / relative

    def to_dict(self):

        return {
            "version": MANIFEST_VERSION,
            "root_dir": ".",
            "resolution": CANVAS,
            "split": self.split,
            "entries": [entry.to_dict() for entry in self.entries],
        }


def _write_png(path, array):

    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), np.ascontiguousarray(array, dtype=np.uint8)):
        raise DatasetException(f"could not write image {path}")


def _read_png(path, sample_id):

    if not path.exists():
        raise DatasetException(f"sample '{sample_id}': missing file {path}")

    image = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if image is None:
        raise DatasetException(f"sample '{sample_id}': cannot decode {path}")
    if image.shape != (CANVAS, CANVAS):
        raise DatasetException(
            f"sample '{sample_id}': {path.name} is {image.shape[1]}x{image.shape[0]}, "
            f"expected {CANVAS}x{CANVAS}"
        )
    return image


def write_dataset(samples, root, layouts, split=0.1):
    """Write samples, their layouts and the manifest under `root`

    Parameters:
    -----------
    samples : iterable(StrokeSample)
        samples to store
    root : str | pathlib.Path
        dataset root, created if missing
    layouts : iterable(ReferenceLayout)
        every layout referenced by the samples
    split : float (default: 0.1)
        held-out test fraction

    Returns:
    --------
    DatasetManifest
        manifest describing what was written
    """
    root = pathlib.Path(root)
    root.mkdir(parents=True, exist_ok=True)
    layouts = {layout.layout_id: layout for layout in layouts}

    entries = []
    for sample in samples:
        if sample.layout_id not in layouts:
            raise DatasetException(
                f"sample '{sample.sample_id}': layout {sample.layout_id} not provided"
            )

        target_path = f"targets/{sample.sample_id}.png"
        _write_png(root / target_path, sample.target_image)

        stroke_paths = []
        for k, mask in enumerate(sample.stroke_masks):
            stroke_path = f"strokes/{sample.sample_id}/{k}.png"
            _write_png(root / stroke_path, np.where(mask, 255, 0))
            stroke_paths.append(stroke_path)

        entries.append(
            ManifestEntry(
                sample_id=sample.sample_id,
                target_path=target_path,
                stroke_paths=tuple(stroke_paths),
                layout_id=sample.layout_id,
                categories=tuple(sample.categories),
                style=sample.style,
                affines=tuple(sample.affines),
            )
        )

    manifest = DatasetManifest(
        root_dir=root, entries=entries, split=split, layouts=layouts
    )
    with open(root / "layouts.json", "w") as fp:
        json.dump(
            [layouts[k].to_dict() for k in sorted(layouts)], fp, indent=1
        )
    with open(root / "manifest.json", "w") as fp:
        json.dump(manifest.to_dict(), fp, indent=1)

    logger.info("wrote %d samples to %s", len(entries), root)
    return manifest


def read_dataset(root, validate=True):
    """Read and validate a dataset root

    Parameters:
    -----------
    root : str | pathlib.Path
        dataset root holding manifest.json and layouts.json
    validate : bool (default: True)
        decode every referenced image and check stroke counts

    Raises:
    -------
    DatasetException
        missing manifest or files, wrong resolution, stroke count differing
        from the layout; messages name the offending sample

    Returns:
    --------
    DatasetManifest
        manifest with layouts attached
    """
    root = pathlib.Path(root)
    try:
        with open(root / "manifest.json") as fp:
            data = json.load(fp)
        with open(root / "layouts.json") as fp:
            layouts = [ReferenceLayout.from_dict(d) for d in json.load(fp)]
    except FileNotFoundError as err:
        raise DatasetException(f"dataset root {root}: {err.filename} not found") from None
    except json.JSONDecodeError as err:
        raise DatasetException(f"dataset root {root}: invalid JSON ({err})") from None

    if data.get("version") != MANIFEST_VERSION:
        raise DatasetException(
            f"dataset root {root}: unsupported manifest version {data.get('version')}"
        )

    manifest = DatasetManifest(
        root_dir=root,
        entries=[ManifestEntry.from_dict(e) for e in data["entries"]],
        split=float(data.get("split", 0.1)),
        layouts={layout.layout_id: layout for layout in layouts},
    )

    if validate:
        for entry in manifest.entries:
            _validate_entry(manifest, entry)

    return manifest


def _validate_entry(manifest, entry):

    layout = manifest.layouts.get(entry.layout_id)
    if layout is None:
        raise DatasetException(
            f"sample '{entry.sample_id}': unknown layout {entry.layout_id}"
        )
    if len(entry.stroke_paths) != len(layout.strokes):
        raise DatasetException(
            f"sample '{entry.sample_id}': {len(entry.stroke_paths)} strokes, "
            f"layout {entry.layout_id} has {len(layout.strokes)}"
        )
    if len(entry.categories) != len(entry.stroke_paths):
        raise DatasetException(
            f"sample '{entry.sample_id}': category count differs from stroke count"
        )

    _read_png(manifest.path(entry.target_path), entry.sample_id)
    for stroke_path in entry.stroke_paths:
        _read_png(manifest.path(stroke_path), entry.sample_id)


def load_sample(manifest, entry):
    """Decode one manifest entry into a StrokeSample"""

    target = _read_png(manifest.path(entry.target_path), entry.sample_id)
    masks = np.stack(
        [
            _read_png(manifest.path(p), entry.sample_id) >= 128
            for p in entry.stroke_paths
        ]
    )
    return StrokeSample(
        sample_id=entry.sample_id,
        target_image=target,
        stroke_masks=masks,
        layout_id=entry.layout_id,
        categories=entry.categories,
        style=entry.style,
        affines=entry.affines,
    )


def load_stroke_mask(manifest, entry, index):
    """Decode a single ground-truth stroke mask"""

    return _read_png(manifest.path(entry.stroke_paths[index]), entry.sample_id) >= 128


def write_mask(path, mask):
    """Store a binary mask as a 0/255 PNG"""

    _write_png(pathlib.Path(path), np.where(np.asarray(mask, dtype=bool), 255, 0))
