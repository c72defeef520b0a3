"""
Cleaning two-round election returns into the canonical station dataset.

Input is one long-format CSV per round with columns
``station_id,option,votes,registered`` (one row per station and option,
abstentions not listed).  Station ids follow ``DEPT-CONST-STATION`` so that
department and constituency groupings can be read off the id.

The pipeline:

1. ``join_rounds``: link stations across rounds, add an "Abstention" option
   (registered minus votes), discard stations whose registered counts differ
   by more than 50, pad the smaller round's abstention otherwise, and discard
   stations with 100% abstention.
2. ``merge_small_stations``: pool stations under 70 voters per group.
3. ``merge_small_candidates``: pool options under 5% of the votes cast.
4. ``emit_dataset`` / ``load_dataset``: the canonical CSV and its sidecar.
"""

from __future__ import annotations

import csv
import json
import math
import os
import tempfile
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .ei_models import StationData

ABSTENTION = "Abstention"
OTHER = "other"
RAW_HEADER = ["station_id", "option", "votes", "registered"]


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class DatasetParseError(DataError):
    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")
        self.line = line


@dataclass
class Rejection:
    station_id: str
    reason: str


@dataclass
class ElectionData:
    """Stations with the option names of both rounds."""

    stations: list[StationData]
    options1: list[str]
    options2: list[str]
    rejections: list[Rejection] = field(default_factory=list)
    option_map: dict = field(default_factory=dict)

    @property
    def I(self):
        return len(self.options1)

    @property
    def J(self):
        return len(self.options2)


# ---------------------------------------------------------------------------
# Raw rounds
# ---------------------------------------------------------------------------

@dataclass
class RawStation:
    registered: int
    votes: dict


def read_round(path) -> dict[str, RawStation]:
    with open(path, newline="") as fh:
        return parse_round(fh, str(path))


def parse_round(lines: Iterable[str], name: str = "<round>") -> dict[str, RawStation]:
    """Parse a long-format round into {station_id: RawStation}."""
    reader = csv.reader(lines)
    try:
        header = next(reader)
    except StopIteration:
        raise DatasetParseError(name, 1, "empty file") from None
    if [h.strip() for h in header] != RAW_HEADER:
        raise DatasetParseError(name, 1, f"expected header {','.join(RAW_HEADER)}")
    out: dict[str, RawStation] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 4:
            raise DatasetParseError(name, lineno, f"expected 4 fields, got {len(row)}")
        sid, option = row[0].strip(), row[1].strip()
        try:
            votes, registered = int(row[2]), int(row[3])
        except ValueError:
            raise DatasetParseError(name, lineno, "votes and registered must be integers") from None
        if votes < 0 or registered < 0:
            raise DatasetParseError(name, lineno, "negative count")
        if option == ABSTENTION:
            raise DatasetParseError(name, lineno, "abstention is derived, not listed")
        st = out.setdefault(sid, RawStation(registered, {}))
        if st.registered != registered:
            raise DatasetParseError(name, lineno, f"station {sid}: inconsistent registered count")
        if option in st.votes:
            raise DatasetParseError(name, lineno, f"duplicate row for station {sid}, option {option}")
        st.votes[option] = votes
    for sid, st in out.items():
        if sum(st.votes.values()) > st.registered:
            raise DataError(f"{name}: station {sid} has more votes than registered voters")
    return out


def _options(raw: dict[str, RawStation]) -> list[str]:
    names = sorted({o for st in raw.values() for o in st.votes})
    return [ABSTENTION] + names


def _counts(st: RawStation, options: Sequence[str], pad: int) -> np.ndarray:
    c = np.array([st.votes.get(o, 0) for o in options], dtype=np.int64)
    c[0] = st.registered - sum(st.votes.values()) + pad
    return c


def join_rounds(round1: dict[str, RawStation], round2: dict[str, RawStation],
                max_registered_diff: int = 50, exclude: Iterable[str] = ()) -> ElectionData:
    """
    Link the two rounds station by station.

    A station missing from one round, listed in ``exclude``, with registered
    counts differing by more than ``max_registered_diff``, or with only
    abstentions in either round (after padding) is rejected.  Otherwise the
    difference in registered voters is added to the abstentions of the round
    with fewer registered voters, so both rounds sum to the larger count.
    """
    opts1, opts2 = _options(round1), _options(round2)
    excluded = set(exclude)
    stations, rejections = [], []
    for sid in sorted(set(round1) | set(round2)):
        if sid in excluded:
            rejections.append(Rejection(sid, "excluded"))
            continue
        if sid not in round1 or sid not in round2:
            rejections.append(Rejection(sid, "present in one round only"))
            continue
        a, b = round1[sid], round2[sid]
        diff = a.registered - b.registered
        if abs(diff) > max_registered_diff:
            rejections.append(Rejection(sid, f"registered differ by {abs(diff)}"))
            continue
        r = _counts(a, opts1, max(0, -diff))
        s = _counts(b, opts2, max(0, diff))
        if r.sum() == 0:
            rejections.append(Rejection(sid, "no registered voters"))
            continue
        if r[0] == r.sum() or s[0] == s.sum():
            rejections.append(Rejection(sid, "100% abstention"))
            continue
        stations.append(StationData(sid, r, s))
    return ElectionData(stations, opts1, opts2, rejections)


# ---------------------------------------------------------------------------
# Merges
# ---------------------------------------------------------------------------

def group_of(station_id: str, group_key: str) -> str:
    parts = station_id.split("-")
    if group_key == "department":
        return parts[0]
    if group_key == "constituency":
        return "-".join(parts[:2])
    raise ValueError(f"unknown group key {group_key!r}")


def merge_small_stations(stations: Sequence[StationData], group_key: str = "department",
                         threshold: int = 70) -> list[StationData]:
    """
    Pool, within each group, every station with fewer than ``threshold``
    voters into one station ``<group>-merged``.

    The pooled covariate (if all pooled stations have one) is the
    voter-weighted mean.
    """
    keep, small = [], defaultdict(list)
    for st in stations:
        if st.n < threshold:
            small[group_of(st.station_id, group_key)].append(st)
        else:
            keep.append(st)
    for group, members in small.items():
        r = np.sum([m.round1 for m in members], axis=0)
        s = np.sum([m.round2 for m in members], axis=0)
        covs = [m.covariate for m in members]
        cov = None
        if all(c is not None for c in covs):
            w = np.array([m.n for m in members], dtype=float)
            cov = float(np.dot(w, covs) / w.sum())
        keep.append(StationData(f"{group}-merged", r, s, cov))
    return sorted(keep, key=lambda st: st.station_id)


def _merge_round(counts: np.ndarray, options: list[str], threshold_share: float):
    cast = counts[:, 1:].sum()
    totals = counts.sum(axis=0)
    share = totals / cast if cast > 0 else np.zeros_like(totals, dtype=float)
    small = [i for i in range(1, len(options)) if share[i] < threshold_share]
    if options.count(OTHER) and small:
        small = sorted(set(small) | {options.index(OTHER)})
    if len(small) <= 1 and not (len(small) == 1 and options[small[0]] != OTHER):
        return counts, options, {}
    keep = [i for i in range(len(options)) if i not in small]
    if len(keep) + 1 < 2:
        raise DataError("fewer than two options would remain after merging")
    merged = np.concatenate([counts[:, keep], counts[:, small].sum(axis=1, keepdims=True)], axis=1)
    names = [options[i] for i in keep] + [OTHER]
    mapping = {options[i]: OTHER for i in small}
    return merged, names, mapping


def merge_small_candidates(data: ElectionData, threshold_share: float = 0.05) -> ElectionData:
    """
    Pool, separately in each round, the options whose share of the votes
    cast (abstentions excluded) is below ``threshold_share`` into "other".

    Abstention is never merged.  The mapping of pooled names is returned in
    ``option_map`` as {"round1": {...}, "round2": {...}}.
    """
    if not data.stations:
        return data
    R = np.stack([s.round1 for s in data.stations])
    S = np.stack([s.round2 for s in data.stations])
    R2, o1, m1 = _merge_round(R, list(data.options1), threshold_share)
    S2, o2, m2 = _merge_round(S, list(data.options2), threshold_share)
    if len(o1) < 2 or len(o2) < 2:
        raise DataError("fewer than two options would remain after merging")
    stations = [StationData(st.station_id, r, s, st.covariate)
                for st, r, s in zip(data.stations, R2, S2)]
    return ElectionData(stations, o1, o2, list(data.rejections),
                        {"round1": m1, "round2": m2})


# ---------------------------------------------------------------------------
# Covariate
# ---------------------------------------------------------------------------

def clamped_log_density(population, area_km2):
    population = np.asarray(population, dtype=float)
    area_km2 = np.asarray(area_km2, dtype=float)
    if np.any(population <= 0) or np.any(area_km2 <= 0):
        raise DataError("population and area must be positive")
    return np.maximum(0.0, np.log(population / area_km2))


def corpus_stats(populations, areas) -> tuple[float, float]:
    """Mean and (population) standard deviation of the clamped log densities."""
    v = clamped_log_density(populations, areas)
    return float(v.mean()), float(v.std())


def covariate_density(population, area_km2, stats: tuple[float, float]):
    """(max(0, log(population / area)) - mean) / sd."""
    mean, sd = stats
    if not sd > 0:
        raise DataError("covariate standard deviation is zero")
    return (clamped_log_density(population, area_km2) - mean) / sd


def attach_covariates(stations: Sequence[StationData], table: dict[str, tuple[float, float]]):
    """
    Standardized log-density covariate from {station_id: (population, area)}.

    Stations absent from the table keep no covariate.
    """
    ids = [s.station_id for s in stations if s.station_id in table]
    if not ids:
        return list(stations)
    pops = [table[i][0] for i in ids]
    areas = [table[i][1] for i in ids]
    stats = corpus_stats(pops, areas)
    out = []
    for st in stations:
        cov = None
        if st.station_id in table:
            cov = float(covariate_density(*table[st.station_id], stats))
        out.append(StationData(st.station_id, st.round1, st.round2, cov))
    return out


def read_covariate_table(path) -> dict[str, tuple[float, float]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["station_id", "population", "area_km2"]:
            raise DatasetParseError(path, 1, "expected header station_id,population,area_km2")
        out = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                out[row[0].strip()] = (float(row[1]), float(row[2]))
            except (IndexError, ValueError):
                raise DatasetParseError(path, lineno, "malformed covariate row") from None
    return out


def read_exclusions(path) -> list[str]:
    with open(path) as fh:
        return [line.strip() for line in fh if line.strip() and not line.startswith("#")]


# ---------------------------------------------------------------------------
# Canonical dataset
# ---------------------------------------------------------------------------

def dataset_header(I: int, J: int, covariate: bool = True) -> list[str]:
    cols = ["station_id", "n"] + (["covariate"] if covariate else [])
    return cols + [f"r_{i + 1}" for i in range(I)] + [f"s_{j + 1}" for j in range(J)]


def _format_cov(c):
    return "" if c is None else repr(float(c))


def atomic_write_text(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sidecar_path(path) -> Path:
    return Path(str(path) + ".meta.json")


def dataset_text(stations: Sequence[StationData], I: int, J: int) -> str:
    import io
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(dataset_header(I, J))
    for st in stations:
        w.writerow([st.station_id, st.n, _format_cov(st.covariate)]
                   + [int(v) for v in st.round1] + [int(v) for v in st.round2])
    return buf.getvalue()


def emit_dataset(data: ElectionData, path, extra_meta: dict | None = None):
    """Write the canonical CSV and its JSON sidecar (option names, I, J)."""
    atomic_write_text(path, dataset_text(data.stations, data.I, data.J))
    meta = {"I": data.I, "J": data.J, "options_round1": list(data.options1),
            "options_round2": list(data.options2), "option_map": data.option_map}
    if extra_meta:
        meta.update(extra_meta)
    atomic_write_text(sidecar_path(path), json.dumps(meta, indent=2, sort_keys=True) + "\n")


def write_rejections(rejections: Sequence[Rejection], path):
    import io
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["station_id", "reason"])
    for r in rejections:
        w.writerow([r.station_id, r.reason])
    atomic_write_text(path, buf.getvalue())


def _parse_header(header, path):
    h = [c.strip() for c in header]
    if h[:2] != ["station_id", "n"]:
        raise DatasetParseError(path, 1, "header must start with station_id,n")
    has_cov = len(h) > 2 and h[2] == "covariate"
    rest = h[3:] if has_cov else h[2:]
    I = sum(1 for c in rest if c.startswith("r_"))
    J = len(rest) - I
    if I < 1 or J < 1 or rest != dataset_header(I, J, False)[2:]:
        raise DatasetParseError(path, 1, "expected columns r_1..r_I then s_1..s_J")
    return has_cov, I, J


def load_dataset(path) -> ElectionData:
    """Read a canonical dataset (and its sidecar when present)."""
    path = Path(path)
    meta = {}
    if sidecar_path(path).exists():
        meta = json.loads(sidecar_path(path).read_text())
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DatasetParseError(path, 1, "empty file")
        has_cov, I, J = _parse_header(header, path)
        if meta and (meta.get("I") != I or meta.get("J") != J):
            raise DatasetParseError(path, 1, f"header has {I}x{J} options, sidecar "
                                    f"{meta.get('I')}x{meta.get('J')}")
        width = len(header)
        stations = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise DatasetParseError(path, lineno, f"expected {width} fields, got {len(row)}")
            off = 3 if has_cov else 2
            try:
                n = int(row[1])
                counts = [int(v) for v in row[off:]]
                cov = float(row[2]) if has_cov and row[2].strip() != "" else None
            except ValueError:
                raise DatasetParseError(path, lineno, "non-numeric field") from None
            if cov is not None and not math.isfinite(cov):
                raise DatasetParseError(path, lineno, "covariate must be finite")
            r, s = counts[:I], counts[I:]
            if sum(r) != n or sum(s) != n:
                raise DatasetParseError(path, lineno, "round counts do not sum to n")
            try:
                stations.append(StationData(row[0], r, s, cov))
            except ValueError as exc:
                raise DatasetParseError(path, lineno, str(exc)) from None
    options1 = meta.get("options_round1", [f"r_{i + 1}" for i in range(I)])
    options2 = meta.get("options_round2", [f"s_{j + 1}" for j in range(J)])
    return ElectionData(stations, list(options1), list(options2),
                        option_map=meta.get("option_map", {}))


def prepare(round1_path, round2_path, group_key="department", station_threshold=70,
            candidate_share=0.05, covariates_path=None, exclusions_path=None) -> ElectionData:
    """The whole cleaning pipeline from raw round files."""
    exclude = read_exclusions(exclusions_path) if exclusions_path else ()
    data = join_rounds(read_round(round1_path), read_round(round2_path), exclude=exclude)
    stations = data.stations
    if covariates_path:
        stations = attach_covariates(stations, read_covariate_table(covariates_path))
    stations = merge_small_stations(stations, group_key, station_threshold)
    data = ElectionData(stations, data.options1, data.options2, data.rejections)
    return merge_small_candidates(data, candidate_share)
