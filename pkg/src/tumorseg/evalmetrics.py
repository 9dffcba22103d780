"""
Region grouping and overlap scores for tumor segmentations.

Regions: ``complete`` = labels {1, 2, 3, 4}, ``core`` = {1, 3, 4},
``enhancing`` = {4}. A score whose denominator is zero is undefined and
reported as ``None``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from fractions import Fraction

import jsonschema
import numpy as np

REGIONS = {
    "complete": (1, 2, 3, 4),
    "core": (1, 3, 4),
    "enhancing": (4,),
}
METRICS = ("dice", "sensitivity", "specificity")


class DimensionMismatch(ValueError):
    """Prediction and truth grids differ in shape."""


@dataclass(frozen=True)
class RegionMaskSet:
    complete: np.ndarray
    core: np.ndarray
    enhancing: np.ndarray

    def __getitem__(self, region: str) -> np.ndarray:
        return getattr(self, region)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.complete.shape


def region_masks(labels) -> RegionMaskSet:
    labels = np.asarray(labels)
    return RegionMaskSet(**{name: np.isin(labels, codes) for name, codes in REGIONS.items()})


@dataclass(frozen=True)
class RegionScore:
    """Voxel counts of one region and the scores derived from them."""

    tp: int          # |P1 and T1|
    pred_pos: int    # |P1|
    true_pos: int    # |T1|
    tn: int          # |P0 and T0|
    pred_neg: int    # |P0|
    true_neg: int    # |T0|

    def exact(self) -> dict[str, Fraction | None]:
        def ratio(a, b):
            return None if b == 0 else Fraction(a, b)
        return {
            "dice": ratio(2 * self.tp, self.pred_pos + self.true_pos),
            "sensitivity": ratio(self.tp, self.true_pos),
            "specificity": ratio(self.tn, self.true_neg),
        }

    @property
    def dice(self) -> float | None:
        v = self.exact()["dice"]
        return None if v is None else float(v)

    @property
    def sensitivity(self) -> float | None:
        v = self.exact()["sensitivity"]
        return None if v is None else float(v)

    @property
    def specificity(self) -> float | None:
        v = self.exact()["specificity"]
        return None if v is None else float(v)

    def to_dict(self) -> dict:
        return {
            "dice": self.dice,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "counts": {"tp": self.tp, "pred_pos": self.pred_pos, "true_pos": self.true_pos,
                       "tn": self.tn, "pred_neg": self.pred_neg, "true_neg": self.true_neg},
        }


def score_region(pred: np.ndarray, truth: np.ndarray) -> RegionScore:
    pred, truth = np.asarray(pred, dtype=bool), np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise DimensionMismatch(f"prediction {pred.shape} vs truth {truth.shape}")
    return RegionScore(
        tp=int(np.count_nonzero(pred & truth)),
        pred_pos=int(np.count_nonzero(pred)),
        true_pos=int(np.count_nonzero(truth)),
        tn=int(np.count_nonzero(~pred & ~truth)),
        pred_neg=int(np.count_nonzero(~pred)),
        true_neg=int(np.count_nonzero(~truth)),
    )


@dataclass(frozen=True)
class SegReport:
    regions: dict[str, RegionScore]
    case_id: str = ""

    def __getitem__(self, region: str) -> RegionScore:
        return self.regions[region]

    def to_dict(self) -> dict:
        return {"case_id": self.case_id,
                "regions": {name: s.to_dict() for name, s in self.regions.items()}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def score(pred: RegionMaskSet, truth: RegionMaskSet, case_id: str = "") -> SegReport:
    if pred.shape != truth.shape:
        raise DimensionMismatch(f"prediction {pred.shape} vs truth {truth.shape}")
    return SegReport({name: score_region(pred[name], truth[name]) for name in REGIONS}, case_id)


def score_labels(pred_labels, true_labels, case_id: str = "") -> SegReport:
    """Score two label volumes region by region."""
    pred_labels, true_labels = np.asarray(pred_labels), np.asarray(true_labels)
    if pred_labels.shape != true_labels.shape:
        raise DimensionMismatch(f"prediction {pred_labels.shape} vs truth {true_labels.shape}")
    return score(region_masks(pred_labels), region_masks(true_labels), case_id)


def aggregate(reports: list[SegReport]) -> dict:
    """Per region and metric: mean over defined cases and the number of undefined ones."""
    if not reports:
        raise ValueError("no reports to aggregate")
    summary = {"cases": len(reports), "regions": {}}
    for region in REGIONS:
        entry = {}
        for metric in METRICS:
            vals = [getattr(r[region], metric) for r in reports]
            defined = [v for v in vals if v is not None]
            entry[metric] = {
                "mean": float(np.mean(defined)) if defined else None,
                "defined": len(defined),
                "undefined": len(vals) - len(defined),
            }
        summary["regions"][region] = entry
    return summary


def write_summary_csv(reports: list[SegReport], path) -> None:
    """One row per case and a final ``mean`` row; undefined cells are empty."""
    summary = aggregate(reports)
    header = ["case_id"] + [f"{r}_{m}" for r in REGIONS for m in METRICS]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for rep in reports:
            w.writerow([rep.case_id] + [_cell(getattr(rep[r], m)) for r in REGIONS for m in METRICS])
        w.writerow(["mean"] + [_cell(summary["regions"][r][m]["mean"])
                               for r in REGIONS for m in METRICS])


def _cell(v):
    return "" if v is None else repr(float(v))


_UNIT = {"type": ["number", "null"], "minimum": 0, "maximum": 1}
_COUNT = {"type": "integer", "minimum": 0}

REGION_SCHEMA = {
    "type": "object",
    "required": ["dice", "sensitivity", "specificity", "counts"],
    "properties": {
        "dice": _UNIT,
        "sensitivity": _UNIT,
        "specificity": _UNIT,
        "counts": {
            "type": "object",
            "required": ["tp", "pred_pos", "true_pos", "tn", "pred_neg", "true_neg"],
            "properties": {k: _COUNT for k in ("tp", "pred_pos", "true_pos", "tn", "pred_neg",
                                               "true_neg")},
        },
    },
}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["cases", "summary"],
    "properties": {
        "cases": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["case_id", "regions"],
                "properties": {
                    "case_id": {"type": "string"},
                    "regions": {
                        "type": "object",
                        "required": list(REGIONS),
                        "properties": {r: REGION_SCHEMA for r in REGIONS},
                    },
                },
            },
        },
        "summary": {
            "type": "object",
            "required": ["cases", "regions"],
            "properties": {
                "cases": _COUNT,
                "regions": {
                    "type": "object",
                    "required": list(REGIONS),
                    "additionalProperties": {
                        "type": "object",
                        "additionalProperties": {
                            "type": "object",
                            "required": ["mean", "defined", "undefined"],
                            "properties": {"mean": _UNIT, "defined": _COUNT,
                                           "undefined": _COUNT},
                        },
                    },
                },
            },
        },
    },
}


def corpus_report(reports: list[SegReport]) -> dict:
    doc = {"cases": [r.to_dict() for r in reports], "summary": aggregate(reports)}
    validate_report(doc)
    return doc


def validate_report(doc: dict) -> None:
    jsonschema.validate(doc, REPORT_SCHEMA)
