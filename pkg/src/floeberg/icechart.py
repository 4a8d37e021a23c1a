"""Simplified egg codes, regional label vectors and chart-file parsing.

Class indices follow the four-class stage-of-development scheme:
0 open water, 1 young ice, 2 first-year ice, 3 multiyear ice. A regional
label is a length-4 vector of concentrations indexed by that class number.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from typing import Mapping, Optional, Union

import numpy as np

logger = logging.getLogger(__name__)

NUM_CLASSES = 4
CLASS_NAMES = ("open water", "young ice", "first-year ice", "multiyear ice")
CHART_HEADER = ("polygon_id", "ct", "ca", "cb", "cc", "sa", "sb", "sc")
EXCLUDED_TOKEN = "X"

# SIGRID-3 stage-of-development codes folded onto the four classes by
# thickness: <30 cm -> young, first-year stages -> FYI, old/second-year/
# multiyear -> MYI. Entries 0-3 map to themselves so native charts pass
# through unchanged. 98 (glacier ice) and 99 (undetermined) are left
# unmapped on purpose.
DEFAULT_STAGE_MAPPING: dict[int, int] = {
    0: 0, 1: 1, 2: 2, 3: 3,
    55: 0,  # ice free
    80: 0,  # no stage of development
    81: 1,  # new ice
    82: 1,  # nilas, ice rind
    83: 1,  # young ice
    84: 1,  # grey ice
    85: 1,  # grey-white ice
    86: 2,  # first-year ice
    87: 2,  # thin first-year ice
    88: 2,  # thin first-year ice, stage 1
    89: 2,  # thin first-year ice, stage 2
    91: 2,  # medium first-year ice
    93: 2,  # thick first-year ice
    95: 3,  # old ice
    96: 3,  # second-year ice
    97: 3,  # multiyear ice
}


class ChartParseError(ValueError):
    """Malformed chart or stage-mapping file."""


class UnmappedStageError(KeyError):
    def __str__(self) -> str:
        return f"unmapped stage code {self.args[0]}"


@dataclass(frozen=True)
class EggCode:
    """One polygon's simplified egg code, concentrations in integer tenths.

    ``ca``, ``cb`` and ``cc`` are the partial concentrations of the three
    thickest ice types present and ``sa``, ``sb``, ``sc`` their class entries.
    """

    ct: int
    ca: int
    cb: int
    cc: int
    sa: int
    sb: int
    sc: int

    def __post_init__(self):
        for name in ("ct", "ca", "cb", "cc"):
            v = getattr(self, name)
            if not 0 <= v <= 10:
                raise ValueError(f"{name}={v} outside 0-10")
        for name in ("sa", "sb", "sc"):
            v = getattr(self, name)
            if not 0 <= v < NUM_CLASSES:
                raise ValueError(f"{name}={v} outside 0-{NUM_CLASSES - 1}")
        if self.ca + self.cb + self.cc != self.ct:
            raise ValueError(f"ca+cb+cc ≠ ct ({self.ca}+{self.cb}+{self.cc} != {self.ct})")


class Excluded:
    """Marker for a polygon left out of training and evaluation."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "EXCLUDED"


EXCLUDED = Excluded()

ChartEntry = Union[np.ndarray, Excluded]
ChartTable = dict  # polygon id -> regional label (np.ndarray, shape (4,)) or EXCLUDED


def check_label(conc) -> np.ndarray:
    """Validate and return a regional label as a float64 array."""
    arr = np.asarray(conc, dtype=np.float64)
    if arr.shape != (NUM_CLASSES,):
        raise ValueError(f"regional label must have {NUM_CLASSES} entries, got shape {arr.shape}")
    if (arr < 0).any() or (arr > 1).any():
        raise ValueError(f"regional label components must lie in [0, 1]: {arr}")
    if abs(arr.sum() - 1.0) > 1e-12:
        raise ValueError(f"regional label must sum to 1, sums to {arr.sum()!r}")
    return arr


def map_stage(code: int, mapping: Mapping[int, int] = DEFAULT_STAGE_MAPPING) -> int:
    try:
        return int(mapping[int(code)])
    except KeyError:
        raise UnmappedStageError(int(code)) from None


def eggcode_to_label(e: EggCode) -> np.ndarray:
    """Class-indexed concentration vector of an egg code.

    Water receives the ice-free share ``(10 - ct) / 10``; each partial adds
    ``c / 10`` to the class named by its stage entry, so repeated stages
    accumulate. A nonzero partial tagged as water is honoured but logged.
    """
    conc = np.zeros(NUM_CLASSES)
    conc[0] = (10 - e.ct) / 10
    for c, s in ((e.ca, e.sa), (e.cb, e.sb), (e.cc, e.sc)):
        if s == 0 and c:
            logger.warning("partial concentration %d/10 tagged as open water", c)
        conc[s] += c / 10
    return conc


def quantize_tenths(conc) -> np.ndarray:
    """Integer tenths summing to 10, by largest remainder.

    Floors ``10 * conc`` and hands the missing units to the largest
    fractional parts (lower class index first on ties). This minimises the
    worst per-class error, which stays below 0.75 tenths for four classes.
    """
    x = 10.0 * np.asarray(conc, dtype=np.float64)
    q = np.floor(x + 1e-9).astype(int)
    missing = 10 - int(q.sum())
    rem = x - q
    order = sorted(range(len(x)), key=lambda i: (-rem[i], i))
    for i in order[:missing]:
        q[i] += 1
    return q


def label_to_eggcode(conc) -> EggCode:
    """Inverse of :func:`eggcode_to_label` up to tenths quantisation.

    Ice classes present are listed thickest first; unused slots hold
    concentration 0 with stage 0.
    """
    q = quantize_tenths(check_label_loose(conc))
    ice = [(int(q[k]), k) for k in (3, 2, 1) if q[k] > 0]
    ice += [(0, 0)] * (3 - len(ice))
    (ca, sa), (cb, sb), (cc, sc) = ice
    return EggCode(10 - int(q[0]), ca, cb, cc, sa, sb, sc)


def check_label_loose(conc) -> np.ndarray:
    arr = np.asarray(conc, dtype=np.float64)
    if arr.shape != (NUM_CLASSES,) or (arr < -1e-12).any() or abs(arr.sum() - 1) > 1e-9:
        raise ValueError(f"not a regional label: {conc!r}")
    return arr


def dominant_class(conc, threshold: float = 0.65) -> Optional[int]:
    """Class whose concentration strictly exceeds ``threshold``, else None.

    Water is eligible like any ice class.
    """
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    arr = np.asarray(conc, dtype=np.float64)
    k = int(np.argmax(arr))
    return k if arr[k] > threshold else None


def _int_field(raw: str, name: str, row: int) -> int:
    try:
        return int(raw.strip())
    except ValueError:
        raise ChartParseError(f"non-integer {name} {raw!r} at row {row}") from None


def parse_chart(text: str, mapping: Optional[Mapping[int, int]] = None) -> ChartTable:
    """Parse chart CSV text into a polygon-id -> label table.

    Data rows are numbered from 1 after the header. Without ``mapping`` the
    stage columns must already hold class entries 0-3; with one, they are
    treated as external codes and folded through :func:`map_stage`.

    Raises:
        ChartParseError: naming the offending row.
    """
    reader = csv.reader(io.StringIO(text))
    rows = [r for r in reader if r and any(f.strip() for f in r)]
    if not rows or tuple(f.strip() for f in rows[0]) != CHART_HEADER:
        raise ChartParseError(f"chart header must be {','.join(CHART_HEADER)}")
    table: ChartTable = {}
    for n, fields in enumerate(rows[1:], start=1):
        pid = _int_field(fields[0], "polygon_id", n)
        if pid < 0:
            raise ChartParseError(f"negative polygon_id {pid} at row {n}")
        if pid in table:
            raise ChartParseError(f"duplicate polygon_id {pid} at row {n}")
        if len(fields) == 2 and fields[1].strip() == EXCLUDED_TOKEN:
            table[pid] = EXCLUDED
            continue
        if len(fields) != len(CHART_HEADER):
            raise ChartParseError(f"expected {len(CHART_HEADER)} columns at row {n}, got {len(fields)}")
        vals = [_int_field(f, name, n) for f, name in zip(fields[1:], CHART_HEADER[1:])]
        ct, ca, cb, cc, sa, sb, sc = vals
        for name, v in zip(("ct", "ca", "cb", "cc"), (ct, ca, cb, cc)):
            if not 0 <= v <= 10:
                raise ChartParseError(f"{name}={v} outside 0-10 at row {n}")
        stages = []
        for name, v in zip(("sa", "sb", "sc"), (sa, sb, sc)):
            if mapping is not None:
                try:
                    v = map_stage(v, mapping)
                except UnmappedStageError as err:
                    raise ChartParseError(f"{err} at row {n}") from None
            if not 0 <= v < NUM_CLASSES:
                raise ChartParseError(f"{name}={v} outside 0-{NUM_CLASSES - 1} at row {n}")
            stages.append(v)
        if ca + cb + cc != ct:
            raise ChartParseError(f"ca+cb+cc ≠ ct at row {n}")
        table[pid] = eggcode_to_label(EggCode(ct, ca, cb, cc, *stages))
    return table


def format_chart(table: Mapping[int, ChartEntry]) -> str:
    """Serialise a chart table; labels are re-encoded as egg codes."""
    lines = [",".join(CHART_HEADER)]
    for pid in sorted(table):
        entry = table[pid]
        if entry is EXCLUDED:
            lines.append(f"{pid},{EXCLUDED_TOKEN}")
        else:
            e = label_to_eggcode(entry)
            lines.append(f"{pid},{e.ct},{e.ca},{e.cb},{e.cc},{e.sa},{e.sb},{e.sc}")
    return "\n".join(lines) + "\n"


def parse_stage_mapping(text: str) -> dict[int, int]:
    """Read an ``external_code,entry`` CSV (header optional)."""
    mapping: dict[int, int] = {}
    for n, fields in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not fields or not any(f.strip() for f in fields):
            continue
        if n == 1 and fields[0].strip() == "external_code":
            continue
        if len(fields) != 2:
            raise ChartParseError(f"stage mapping needs 2 columns at line {n}")
        code = _int_field(fields[0], "external_code", n)
        entry = _int_field(fields[1], "entry", n)
        if not 0 <= entry < NUM_CLASSES:
            raise ChartParseError(f"entry {entry} outside 0-{NUM_CLASSES - 1} at line {n}")
        mapping[code] = entry
    return mapping
