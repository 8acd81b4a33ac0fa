"""Realizable lighting patterns: signed learned rows split into non-negative pairs."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ExportError, FormatError
from .model import FeatureNet


@dataclass(frozen=True, eq=False)
class PhysicalPatternPair:
    positive: np.ndarray  # intensities in [0, 1]
    negative: np.ndarray  # intensities in [0, 1]
    scale: float

    @property
    def row(self) -> np.ndarray:
        return self.scale * (self.positive - self.negative)


def split_pattern(row) -> PhysicalPatternPair:
    row = np.asarray(row, dtype=np.float64)
    peak = np.max(np.abs(row)) if row.size else 0.0
    if not peak > 0:
        raise ExportError("cannot export an all-zero pattern")
    return PhysicalPatternPair(np.maximum(row, 0.0) / peak, np.maximum(-row, 0.0) / peak, float(peak))


def measure(lumitexel, row) -> np.ndarray:
    """Camera reading under a pattern: the pattern/lumitexel dot product (batched over rows of ``lumitexel``)."""
    return np.asarray(lumitexel) @ np.asarray(row)


def simulate_capture(lumitexel, pair: PhysicalPatternPair):
    """Two non-negative exposures recombined into one signed measurement."""
    lum = np.asarray(lumitexel, dtype=np.float64)
    if lum.shape[-1] != pair.positive.shape[0]:
        raise ContractError("lumitexel and pattern lengths differ")
    return pair.scale * (lum @ pair.positive - lum @ pair.negative)


def export_patterns(net: FeatureNet) -> list[PhysicalPatternPair]:
    """All pattern rows of the network, sensitive branch first."""
    if not net.config.has_patterns:
        raise ExportError("pointlight models have no lighting patterns")
    pairs = []
    for name in ("sens", "insens"):
        if name in net.config.active:
            pairs.extend(split_pattern(r) for r in net.patterns(name))
    return pairs


def capture_measurements(lumitexels, pairs: list[PhysicalPatternPair]) -> np.ndarray:
    """``(N, M)`` recombined measurements for ``(N, L)`` lumitexels."""
    lum = np.asarray(lumitexels, dtype=np.float64)
    pos = np.stack([p.positive for p in pairs], axis=1)
    neg = np.stack([p.negative for p in pairs], axis=1)
    scale = np.array([p.scale for p in pairs])
    return scale * (lum @ pos - lum @ neg)


def write_patterns_csv(path, pairs: list[PhysicalPatternPair]) -> None:
    """One line per physical pattern; values stored at single precision."""
    if not pairs:
        raise ExportError("no patterns to export")
    n = len(pairs[0].positive)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["pattern_id", "kind", "scale"] + [f"w_{i}" for i in range(n)])
        for pid, pair in enumerate(pairs):
            scale = repr(float(np.float32(pair.scale)))
            for kind, values in (("pos", pair.positive), ("neg", pair.negative)):
                w.writerow([pid, kind, scale] + [repr(float(v)) for v in values.astype(np.float32)])


def read_patterns_csv(path) -> list[PhysicalPatternPair]:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0][:3] != ["pattern_id", "kind", "scale"]:
        raise FormatError(f"{path}: bad pattern header")
    found: dict[int, dict] = {}
    for r in rows[1:]:
        entry = found.setdefault(int(r[0]), {"scale": np.float32(float(r[2]))})
        entry[r[1]] = np.array([np.float32(float(v)) for v in r[3:]], dtype=np.float32)
    pairs = []
    for pid in sorted(found):
        e = found[pid]
        if "pos" not in e or "neg" not in e:
            raise FormatError(f"{path}: pattern {pid} lacks a pos/neg line")
        pairs.append(PhysicalPatternPair(e["pos"], e["neg"], float(e["scale"])))
    return pairs
