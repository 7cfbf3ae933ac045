"""KITTI label / calibration / result text formats and difficulty levels."""
from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ContractError, ParseError

CLASS_NAMES = ("Car", "Pedestrian", "Cyclist")

# official thresholds, indexed Easy / Moderate / Hard
MIN_HEIGHT = (40.0, 25.0, 25.0)
MAX_OCCLUSION = (0, 1, 2)
MAX_TRUNCATION = (0.15, 0.30, 0.50)


class Difficulty(enum.IntEnum):
    EASY = 0
    MODERATE = 1
    HARD = 2
    IGNORED = 3

    @property
    def label(self) -> str:
        return self.name.capitalize()


@dataclass(frozen=True)
class LabelRecord:
    type: str
    truncated: float
    occluded: int
    alpha: float
    bbox: tuple[float, float, float, float]  # left, top, right, bottom (px)
    dims: tuple[float, float, float]  # h, w, l (m)
    loc: tuple[float, float, float]  # x, y, z (m), bottom centre in camera frame
    ry: float
    score: float | None = None

    @property
    def height_px(self) -> float:
        return self.bbox[3] - self.bbox[1]


@dataclass(frozen=True)
class CalibRecord:
    P2: np.ndarray  # 3×4

    def __post_init__(self):
        p = np.asarray(self.P2, dtype=np.float64).reshape(3, 4)
        object.__setattr__(self, "P2", p)
        if p[0, 0] <= 0:
            raise ContractError("P2 focal length must be positive")

    def __eq__(self, other):
        return isinstance(other, CalibRecord) and np.array_equal(self.P2, other.P2)


def _float(tok: str, lineno: int, name: str) -> float:
    try:
        return float(tok)
    except ValueError:
        raise ParseError(f"field {name!r}: not a number: {tok!r}", lineno) from None


_FIELDS = ("truncated", "occluded", "alpha", "left", "top", "right", "bottom", "h", "w", "l", "x", "y", "z", "ry")


def parse_label_line(line: str, lineno: int = 1) -> LabelRecord:
    toks = line.split()
    if len(toks) < 15:
        raise ParseError(f"expected at least 15 fields, got {len(toks)}", lineno)
    if len(toks) > 16:
        raise ParseError(f"expected at most 16 fields, got {len(toks)}", lineno)
    v = [_float(t, lineno, name) for t, name in zip(toks[1:15], _FIELDS)]
    if v[1] != int(v[1]):
        raise ParseError(f"occluded must be an integer, got {toks[2]!r}", lineno)
    score = _float(toks[15], lineno, "score") if len(toks) == 16 else None
    return LabelRecord(
        type=toks[0],
        truncated=v[0],
        occluded=int(v[1]),
        alpha=v[2],
        bbox=(v[3], v[4], v[5], v[6]),
        dims=(v[7], v[8], v[9]),
        loc=(v[10], v[11], v[12]),
        ry=v[13],
        score=score,
    )


def parse_label_file(text: str) -> list[LabelRecord]:
    """One record per non-blank line; LF or CRLF."""
    return [parse_label_line(line, i) for i, line in enumerate(text.splitlines(), 1) if line.strip()]


def _fmt_full(v: float) -> str:
    # KITTI-style two decimals when that is exact, otherwise shortest round-trip repr
    two = f"{v:.2f}"
    return two if float(two) == v else repr(float(v))


def _values(rec: LabelRecord) -> list[float]:
    return [rec.alpha, *rec.bbox, *rec.dims, *rec.loc, rec.ry]


def format_label_line(rec: LabelRecord) -> str:
    parts = [rec.type, _fmt_full(rec.truncated), str(int(rec.occluded))]
    parts += [_fmt_full(v) for v in _values(rec)]
    if rec.score is not None:
        parts.append(_fmt_full(rec.score))
    return " ".join(parts)


def write_label_file(records) -> str:
    """Full-precision writer: parse(write(x)) == x exactly."""
    return "".join(format_label_line(r) + "\n" for r in records)


def format_result_line(rec: LabelRecord) -> str:
    if rec.score is None:
        raise ContractError(f"result record of type {rec.type} has no score")
    vals = " ".join(f"{v:.2f}" for v in _values(rec))
    return f"{rec.type} {rec.truncated:.2f} {int(rec.occluded)} {vals} {rec.score:.2f}"


def write_result_file(dets) -> str:
    """16-field KITTI result lines with two-decimal formatting.

    Accepts LabelRecords or objects exposing ``to_record()``.
    """
    lines = []
    for d in dets:
        rec = d.to_record() if hasattr(d, "to_record") else d
        lines.append(format_result_line(rec) + "\n")
    return "".join(lines)


def parse_calib(text: str) -> CalibRecord:
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.startswith("P2:"):
            continue
        toks = line[3:].split()
        if len(toks) != 12:
            raise ParseError(f"P2 needs 12 values, got {len(toks)}", lineno)
        return CalibRecord(np.array([_float(t, lineno, f"P2[{i}]") for i, t in enumerate(toks)]).reshape(3, 4))
    raise ParseError("no P2 line found")


def write_calib(calib: CalibRecord) -> str:
    return "P2: " + " ".join(f"{v:.12e}" for v in calib.P2.reshape(-1)) + "\n"


def classify_difficulty(rec: LabelRecord) -> Difficulty:
    """Easiest official level the record qualifies for."""
    for level in (Difficulty.EASY, Difficulty.MODERATE, Difficulty.HARD):
        if meets_difficulty(rec, level):
            return level
    return Difficulty.IGNORED


def meets_difficulty(rec: LabelRecord, level: Difficulty) -> bool:
    i = int(level)
    return (
        rec.height_px >= MIN_HEIGHT[i]
        and rec.occluded <= MAX_OCCLUSION[i]
        and rec.truncated <= MAX_TRUNCATION[i]
    )


def with_score(rec: LabelRecord, score: float) -> LabelRecord:
    return replace(rec, score=score)


def read_label_dir(path) -> dict[str, list[LabelRecord]]:
    """Frame id -> records for every ``*.txt`` in ``path``."""
    out = {}
    for f in sorted(Path(path).glob("*.txt")):
        out[f.stem] = parse_label_file(f.read_text(encoding="utf-8"))
    return out
