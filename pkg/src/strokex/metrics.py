"""Stroke-level evaluation metrics.

Stroke sets are ordered sequences of binary masks of equal size; pairing is
positional, so index i of the extracted set is compared with index i of the
ground truth. An empty extracted mask is a failed stroke: it contributes the
canvas diagonal to the centroid distance and zero to every IOU.
"""

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .data import CANVAS
from .exceptions import DatasetException, EstimationException, ShapeException

# penalty distance for strokes without a centroid
EMPTY_DISTANCE = 362.0

logger = logging.getLogger(__name__)


def _as_masks(strokes):

    masks = np.asarray(strokes).astype(bool)
    if masks.ndim == 2:
        masks = masks[None]
    return masks


def _check_pair(extracted, truth):

    extracted, truth = _as_masks(extracted), _as_masks(truth)
    if len(extracted) != len(truth):
        raise ShapeException(
            f"stroke count mismatch: {len(extracted)} extracted, {len(truth)} in truth"
        )
    if extracted.shape[1:] != truth.shape[1:]:
        raise ShapeException(
            f"mask size mismatch: {extracted.shape[1:]} vs {truth.shape[1:]}"
        )
    return extracted, truth


def centroid(mask):
    """Mean (x, y) of the foreground pixels

    Raises:
    -------
    EstimationException
        the mask is empty
    """
    ys, xs = np.nonzero(np.asarray(mask))
    if len(xs) == 0:
        raise EstimationException("centroid of an empty mask is undefined")
    return float(xs.mean()), float(ys.mean())


def mask_iou(a, b):

    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def bounding_box(mask):
    """Tight half-open box (x0, y0, x1, y1), None for an empty mask"""

    ys, xs = np.nonzero(np.asarray(mask))
    if len(xs) == 0:
        return None
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def box_iou(a, b):

    if a is None or b is None:
        return 0.0

    ix = max(0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    if union == 0:
        return 0.0
    return inter / union


def centroid_distance(a, b):

    try:
        ax, ay = centroid(a)
        bx, by = centroid(b)
    except EstimationException:
        return EMPTY_DISTANCE
    return float(np.hypot(ax - bx, ay - by))


def max_cross(stroke, truth):
    """Index of the truth stroke with the largest intersection, lowest on ties"""

    inter = np.logical_and(truth, np.asarray(stroke, dtype=bool)[None]).sum(axis=(1, 2))
    return int(np.argmax(inter))


def m_dis(extracted, truth):

    extracted, truth = _check_pair(extracted, truth)
    return float(np.mean([centroid_distance(e, t) for e, t in zip(extracted, truth)]))


def m_biou(extracted, truth):

    extracted, truth = _check_pair(extracted, truth)
    return float(
        np.mean(
            [box_iou(bounding_box(e), bounding_box(t)) for e, t in zip(extracted, truth)]
        )
    )


def m_iou_m(extracted, truth):

    extracted, truth = _check_pair(extracted, truth)
    return float(np.mean([mask_iou(e, t) for e, t in zip(extracted, truth)]))


def m_iou_um(extracted, truth):

    extracted, truth = _check_pair(extracted, truth)
    return float(np.mean([mask_iou(e, truth[max_cross(e, truth)]) for e in extracted]))


@dataclass
class StrokeMetricsReport:
    """Per-sample metrics; every aggregate is the mean of its stroke rows"""

    sample_id: str
    mDis: float
    mBIou: float
    mIOU_m: float
    mIOU_um: float
    strokes: list = field(default_factory=list)

    @classmethod
    def compute(cls, sample_id, extracted, truth):

        try:
            extracted, truth = _check_pair(extracted, truth)
        except ShapeException as err:
            raise DatasetException(f"sample '{sample_id}': {err}") from None

        rows = []
        for index, (e, t) in enumerate(zip(extracted, truth)):
            matched = max_cross(e, truth)
            rows.append(
                {
                    "stroke": index,
                    "distance": centroid_distance(e, t),
                    "box_iou": box_iou(bounding_box(e), bounding_box(t)),
                    "iou": mask_iou(e, t),
                    "matched_index": matched,
                    "matched_iou": mask_iou(e, truth[matched]),
                }
            )

        return cls(
            sample_id=sample_id,
            mDis=float(np.mean([r["distance"] for r in rows])),
            mBIou=float(np.mean([r["box_iou"] for r in rows])),
            mIOU_m=float(np.mean([r["iou"] for r in rows])),
            mIOU_um=float(np.mean([r["matched_iou"] for r in rows])),
            strokes=rows,
        )

    def to_dict(self):

        return {
            "sample_id": self.sample_id,
            "mDis": self.mDis,
            "mBIou": self.mBIou,
            "mIOU_m": self.mIOU_m,
            "mIOU_um": self.mIOU_um,
            "strokes": self.strokes,
        }


def _reports(predictions, truths):

    missing = set(truths) - set(predictions)
    extra = set(predictions) - set(truths)
    if missing or extra:
        sample = sorted(missing or extra)[0]
        side = "has no prediction" if missing else "has no ground truth"
        raise DatasetException(f"sample '{sample}' {side}")

    return [
        StrokeMetricsReport.compute(sample_id, predictions[sample_id], truths[sample_id])
        for sample_id in sorted(truths)
    ]


def _mean(reports, key):

    if not reports:
        return 0.0
    return float(np.mean([getattr(r, key) for r in reports]))


def evaluate_registration(priors, truths, baseline=None):
    """Prior quality: mean centroid distance and mean bounding-box IOU

    Parameters:
    -----------
    priors : dict(str, array-like)
        sample_id -> ordered transformed reference stroke masks
    truths : dict(str, array-like)
        sample_id -> ordered ground-truth stroke masks
    baseline : dict(str, array-like) (default: None)
        sample_id -> untransformed reference stroke masks, reported alongside

    Raises:
    -------
    DatasetException
        the sample sets or a sample's stroke counts disagree

    Returns:
    --------
    dict
        {"mDis", "mBIou", "per_sample"[, "baseline"]}
    """
    reports = _reports(priors, truths)
    result = {
        "mDis": _mean(reports, "mDis"),
        "mBIou": _mean(reports, "mBIou"),
        "per_sample": [
            {"sample_id": r.sample_id, "mDis": r.mDis, "mBIou": r.mBIou}
            for r in reports
        ],
    }

    if baseline is not None:
        base = _reports(baseline, truths)
        result["baseline"] = {"mDis": _mean(base, "mDis"), "mBIou": _mean(base, "mBIou")}

    logger.info(
        "registration over %d samples: mDis %.3f, mBIou %.4f",
        len(reports), result["mDis"], result["mBIou"],
    )
    return result


def evaluate_extraction(extractions, truths):
    """Extraction quality: matched and maxCross mean IOU

    Parameters:
    -----------
    extractions : dict(str, array-like)
        sample_id -> ordered extracted stroke masks
    truths : dict(str, array-like)
        sample_id -> ordered ground-truth stroke masks

    Returns:
    --------
    dict
        {"mIOU_m", "mIOU_um", "per_sample"} with per-stroke rows
    """
    reports = _reports(extractions, truths)
    result = {
        "mIOU_m": _mean(reports, "mIOU_m"),
        "mIOU_um": _mean(reports, "mIOU_um"),
        "per_sample": [r.to_dict() for r in reports],
    }
    logger.info(
        "extraction over %d samples: mIOU_m %.4f, mIOU_um %.4f",
        len(reports), result["mIOU_m"], result["mIOU_um"],
    )
    return result


def segmentation_iou(pred, label):
    """Per-category IOU of (C, H, W) masks; NaN where a category is absent"""

    pred, label = np.asarray(pred, dtype=bool), np.asarray(label, dtype=bool)
    if pred.shape != label.shape:
        raise ShapeException(f"segmentation shape mismatch: {pred.shape} vs {label.shape}")

    inter = np.logical_and(pred, label).sum(axis=(-2, -1)).astype(np.float64)
    union = np.logical_or(pred, label).sum(axis=(-2, -1)).astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, np.nan)


class SegmentationScore:
    """Dataset-level per-category IOU from accumulated intersections and unions"""

    def __init__(self, categories):

        self.__inter = np.zeros(categories, dtype=np.int64)
        self.__union = np.zeros(categories, dtype=np.int64)

    def update(self, pred, label):

        pred, label = np.asarray(pred, dtype=bool), np.asarray(label, dtype=bool)
        if pred.shape != label.shape:
            raise ShapeException(
                f"segmentation shape mismatch: {pred.shape} vs {label.shape}"
            )
        axes = tuple(i for i in range(pred.ndim) if i != pred.ndim - 3)
        self.__inter += np.logical_and(pred, label).sum(axis=axes)
        self.__union += np.logical_or(pred, label).sum(axis=axes)

    def per_category(self):

        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.__union > 0, self.__inter / np.maximum(self.__union, 1), np.nan)

    def mean(self):

        values = self.per_category()
        if np.isnan(values).all():
            return 0.0
        return float(np.nanmean(values))


# per-stroke columns of the report that describe extractions
EXTRACTION_COLUMNS = ("stroke", "iou", "matched_index", "matched_iou")


def build_report(dataset, model_run, registration=None, extraction=None):
    """Assemble the report document

    {dataset, model_run, mDis, mBIou, mIOU_m, mIOU_um, per_sample}. A
    per-sample row takes mDis and mBIou from the priors and the IOU columns
    from the extractions, so every top-level value is the mean of its column.
    """
    registration = registration or {}
    extraction = extraction or {}

    rows = {}
    for row in registration.get("per_sample", []):
        rows.setdefault(row["sample_id"], {}).update(row)
    for row in extraction.get("per_sample", []):
        merged = rows.setdefault(row["sample_id"], {"sample_id": row["sample_id"]})
        merged["mIOU_m"] = row["mIOU_m"]
        merged["mIOU_um"] = row["mIOU_um"]
        merged["strokes"] = [
            {key: stroke[key] for key in EXTRACTION_COLUMNS} for stroke in row["strokes"]
        ]

    report = {
        "dataset": str(dataset),
        "model_run": model_run,
        "canvas": CANVAS,
        "mDis": registration.get("mDis"),
        "mBIou": registration.get("mBIou"),
        "mIOU_m": extraction.get("mIOU_m"),
        "mIOU_um": extraction.get("mIOU_um"),
        "per_sample": [rows[k] for k in sorted(rows)],
    }
    if "baseline" in registration:
        report["baseline"] = registration["baseline"]
    return report


def write_report(path, report):

    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fp:
        json.dump(report, fp, indent=2)
    logger.info("wrote report %s", path)
