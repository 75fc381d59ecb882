"""Per-topic CSV logs and the nearest-neighbour master table."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from ..errors import LogFormatError
from ..simbus import Message, RunTrace, flatten

HEADER = ("timestamp", "header.stamp", "header.seq")


def expand_schema(schema: Mapping[str, int]) -> list[str]:
    """Column names of a topic: vector leaves become ``path.i``."""
    cols = []
    for path, n in schema.items():
        cols += [f"{path}.{i}" for i in range(n)] if n else [path]
    return cols


def topic_filename(topic: str) -> str:
    return topic.strip("/").replace("/", "__") + ".csv"


@dataclass
class TopicTable:
    topic: str
    columns: list[str]
    data: np.ndarray  # rows x columns, float64

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def t(self) -> np.ndarray:
        return self.data[:, 0]

    def col(self, name: str) -> np.ndarray:
        return self.data[:, self.columns.index(name)]

    def has(self, name: str) -> bool:
        return name in self.columns

    def frequency(self) -> float:
        """Mean message rate over the table's time span (0 if undefined)."""
        n = len(self)
        if n < 2:
            return 0.0
        span = float(self.t[-1] - self.t[0])
        return (n - 1) / span if span > 0 else 0.0


def _row(tick_time: float, msg: Message, columns: list[str]) -> list[float]:
    flat = flatten(msg.payload)
    row = [tick_time, float(msg.stamp), float(msg.seq)]
    for k, v in flat.items():
        if isinstance(v, tuple):
            row.extend(float(x) for x in v)
        else:
            row.append(float(v))
    if len(row) != len(columns):
        raise ValueError(f"message on {msg.topic} does not match its columns")
    return row


def extract_tables(trace: RunTrace, schemas: Mapping[str, Mapping[str, int]] | None = None) -> dict[str, TopicTable]:
    """One table per topic. Timestamp is the delivery time on the bus.

    ``schemas`` adds header-only tables for declared topics that never carried
    a message.
    """
    step = trace.base_step
    rows: dict[str, list] = {}
    columns: dict[str, list[str]] = {}
    for tick, msg in trace:
        cols = columns.get(msg.topic)
        if cols is None:
            schema = {k: len(v) if isinstance(v, tuple) else 0 for k, v in flatten(msg.payload).items()}
            cols = columns[msg.topic] = [*HEADER, *expand_schema(schema)]
            rows[msg.topic] = []
        rows[msg.topic].append(_row(round(tick * step, 9), msg, cols))
    for topic, schema in (schemas or {}).items():
        if topic not in columns:
            columns[topic] = [*HEADER, *expand_schema(schema)]
            rows[topic] = []
    return {
        t: TopicTable(t, columns[t], np.asarray(rows[t], dtype=float).reshape(len(rows[t]), len(columns[t])))
        for t in sorted(columns)
    }


def events_from_trace(trace: RunTrace) -> list[dict]:
    """Messages that carry metadata (errors, scenario commands), as JSON-ready dicts."""
    out = []
    step = trace.base_step
    for tick, msg in trace:
        if msg.meta is None:
            continue
        out.append({"timestamp": round(tick * step, 9), "topic": msg.topic, "stamp": msg.stamp,
                    "publisher": msg.publisher,
                    "payload": {k: list(v) if isinstance(v, tuple) else v for k, v in flatten(msg.payload).items()},
                    "meta": msg.meta})
    return out


# --------------------------------------------------------------- CSV I/O
def write_table(table: TopicTable, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(table.columns)
        for row in table.data:
            w.writerow([repr(float(v)) for v in row])


def read_table(path: Path, topic: str) -> TopicTable:
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            columns = next(reader)
            rows = [[float(v) for v in r] for r in reader if r]
        if list(columns[:len(HEADER)]) != list(HEADER) or any(len(r) != len(columns) for r in rows):
            raise ValueError("ragged rows or missing header columns")
    except (OSError, StopIteration, ValueError, csv.Error) as exc:
        raise LogFormatError(f"corrupt log file {path}: {exc or 'empty file'}") from exc
    data = np.asarray(rows, dtype=float).reshape(len(rows), len(columns))
    return TopicTable(topic, columns, data)


def write_tables(tables: Mapping[str, TopicTable], out_dir: Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = {}
    for topic, table in tables.items():
        name = topic_filename(topic)
        write_table(table, out_dir / name)
        index[topic] = name
    (out_dir / "topics.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")


def read_tables(log_dir: Path) -> dict[str, TopicTable]:
    log_dir = Path(log_dir)
    try:
        index = json.loads((log_dir / "topics.json").read_text())
    except (OSError, ValueError) as exc:
        raise LogFormatError(f"corrupt log index {log_dir / 'topics.json'}: {exc}") from exc
    return {topic: read_table(log_dir / name, topic) for topic, name in sorted(index.items())}


def write_events(events: Iterable[dict], path: Path) -> None:
    with open(path, "w") as fh:
        for e in events:
            fh.write(json.dumps(e, sort_keys=True) + "\n")


def read_events(path: Path) -> list[dict]:
    path = Path(path)
    if not path.is_file():
        return []
    try:
        return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    except ValueError as exc:
        raise LogFormatError(f"corrupt event log {path}: {exc}") from exc


# ------------------------------------------------------------------ merge
@dataclass
class MasterTable:
    t: np.ndarray
    columns: dict[str, np.ndarray]
    frequency: float

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, key: str) -> np.ndarray:
        return self.columns[key]

    def get(self, key: str, default=None):
        return self.columns.get(key, default)

    def __contains__(self, key: str) -> bool:
        return key in self.columns


def nearest_indices(ts: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Index of the nearest timestamp for each grid time; ties go to the earlier sample.

    Among equal timestamps the first row wins, matching an argmin scan.
    """
    n = len(ts)
    hi = np.clip(np.searchsorted(ts, grid, side="left"), 0, n - 1)
    lo = np.clip(hi - 1, 0, n - 1)
    pick = np.where(np.abs(grid - ts[lo]) <= np.abs(ts[hi] - grid), lo, hi)
    return np.searchsorted(ts, ts[pick], side="left")


def grid_frequency(tables: Iterable[TopicTable], freq_bound: float) -> float:
    f = max((t.frequency() for t in tables), default=0.0)
    f = round(f, 6)
    if f <= 0:
        return float(freq_bound)
    return min(f, float(freq_bound))


def merge_tables(tables: Mapping[str, TopicTable], used: Mapping[str, Iterable[str] | None],
                 freq_bound: float = 100.0) -> MasterTable:
    """Resample the ``used`` columns of each topic onto one grid by nearest timestamp.

    ``used`` maps topic to column names (None for all). Columns are keyed
    ``topic:column``. Topics without rows yield NaN columns.
    """
    chosen = {t: tables[t] for t in used if t in tables}
    f = grid_frequency(chosen.values(), freq_bound)
    nonempty = [tb for tb in chosen.values() if len(tb)]
    if nonempty:
        t0 = min(float(tb.t[0]) for tb in nonempty)
        t1 = max(float(tb.t[-1]) for tb in nonempty)
        n = int(math.floor((t1 - t0) * f + 1e-9)) + 1
        grid = t0 + np.arange(n) / f
    else:
        grid = np.zeros(0)
    out: dict[str, np.ndarray] = {}
    for topic, cols in used.items():
        tb = chosen.get(topic)
        names = list(cols) if cols is not None else (tb.columns[1:] if tb is not None else [])
        if tb is None or not len(tb):
            for c in names:
                out[f"{topic}:{c}"] = np.full(len(grid), np.nan)
            continue
        idx = nearest_indices(tb.t, grid)
        for c in names:
            if c not in tb.columns:
                raise KeyError(f"{topic} has no column {c}")
            out[f"{topic}:{c}"] = tb.col(c)[idx]
    return MasterTable(grid, out, f)
