"""Per-round CSV logs, rounds-to-threshold tables and accuracy curves."""

from __future__ import annotations

import csv
import io
import json
import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParseError
from .trainer import FINETUNE, PRETRAIN, REGIMES, RoundRecord, rounds_to_threshold

CSV_HEADER = ["round", "stage", "epoch", "train_loss", "test_accuracy"]
MANIFEST = "manifest.json"
UNREACHED = "—"


def regime_slug(name: str) -> str:
    """'SSL-FT(60%)' -> 'ssl-ft-60'; safe in file names."""
    return re.sub(r"[^a-z0-9]+", "-", name.lower().replace("%", "")).strip("-")


_FROM_SLUG = {regime_slug(name): name for name in REGIMES}


def run_filename(regime: str, channel_label: str, seed: int) -> str:
    return f"{regime_slug(regime)}__{channel_label}__seed{seed}.csv"


def atomic_write(path: Path, text: str):
    """Write to a sibling temp file, then rename over ``path``."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        fh.write(text)
    tmp.replace(path)


def _fmt(value) -> str:
    return "" if value is None else repr(float(value))


def records_to_csv(records) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in records:
        writer.writerow([r.round, r.stage, r.epoch, _fmt(r.train_loss), _fmt(r.test_accuracy)])
    return buf.getvalue()


def write_records(path, records):
    atomic_write(path, records_to_csv(records))


def read_records(path) -> list[RoundRecord]:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != CSV_HEADER:
        raise ParseError(f"{path}: expected header {','.join(CSV_HEADER)}", line=1)
    records = []
    last_round = 0
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(CSV_HEADER):
            raise ParseError(f"{path}: expected {len(CSV_HEADER)} fields, got {len(row)}", line=lineno)
        try:
            rnd, stage, epoch = int(row[0]), row[1], int(row[2])
            loss = float(row[3])
            acc = float(row[4]) if row[4] else None
        except ValueError as exc:
            raise ParseError(f"{path}: {exc}", line=lineno) from None
        if stage not in (PRETRAIN, FINETUNE):
            raise ParseError(f"{path}: unknown stage {stage!r}", line=lineno)
        if stage == FINETUNE:
            if rnd <= last_round:
                raise ParseError(f"{path}: fine-tuning rounds must increase", line=lineno)
            last_round = rnd
        elif rnd != 0:
            raise ParseError(f"{path}: pre-training records carry round 0", line=lineno)
        records.append(RoundRecord(rnd, stage, epoch, loss, acc))
    return records


@dataclass(frozen=True)
class RunFile:
    regime: str
    channel: str
    seed: int
    path: Path


def parse_run_filename(path) -> RunFile:
    path = Path(path)
    match = re.fullmatch(r"(.+)__(.+)__seed(\d+)\.csv", path.name)
    if not match or match.group(1) not in _FROM_SLUG:
        raise ParseError(f"{path}: expected <regime>__<channel>__seed<k>.csv")
    return RunFile(_FROM_SLUG[match.group(1)], match.group(2), int(match.group(3)), path)


def discover_runs(paths) -> list[RunFile]:
    """Run files from a list of CSVs and/or output directories (manifest first)."""
    runs = []
    for p in map(Path, paths):
        if p.is_dir():
            manifest = p / MANIFEST
            if manifest.exists():
                entries = json.loads(manifest.read_text())["runs"]
                runs += [RunFile(e["regime"], e["channel"], e["seed"], p / e["file"]) for e in entries]
            else:
                runs += [parse_run_filename(f) for f in sorted(p.glob("*.csv")) if "__seed" in f.name]
        else:
            runs.append(parse_run_filename(p))
    if not runs:
        raise ParseError("no run CSVs found")
    return runs


def load_manifest(directory) -> dict:
    return json.loads((Path(directory) / MANIFEST).read_text())


# ------------------------------------------------------------------ tables

BEST, SECOND = "best", "second"


@dataclass
class ReportTable:
    rows: list
    columns: list
    cells: dict
    marks: dict = field(default_factory=dict)
    saturated: set = field(default_factory=set)

    def cell_text(self, row, col) -> str:
        value = self.cells.get((row, col))
        if value is None:
            return UNREACHED
        mark = self.marks.get((row, col))
        text = str(value)
        if mark == BEST:
            return f"*{text}*"
        if mark == SECOND:
            return f"_{text}_"
        return text

    def to_text(self) -> str:
        groups = []
        for channel, _ in self.columns:
            if channel not in groups:
                groups.append(channel)
        header1 = ["Channel"] + [c for c, _ in self.columns]
        header2 = ["Training loss"] + [f"{t:.2f}" for _, t in self.columns]
        body = [[row] + [self.cell_text(row, col) for col in self.columns] for row in self.rows]
        table = [header1, header2] + body
        widths = [max(len(r[i]) for r in table) for i in range(len(header1))]
        lines = []
        for i, r in enumerate(table):
            lines.append("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip())
            if i == 1:
                lines.append("  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["regime"] + [f"{c}@{t:g}" for c, t in self.columns])
        for row in self.rows:
            writer.writerow([row] + [self.cell_text(row, col) for col in self.columns])
        return buf.getvalue()


def rank_table(rows, columns, cells, max_rounds=None) -> ReportTable:
    """Mark the best and second-best (fewest rounds) cell of every column.

    Ties share the better marker.  Unreached cells and cells at the round
    budget ``max_rounds`` (saturated) take part in no ranking.
    """
    table = ReportTable(list(rows), list(columns), dict(cells))
    for col in table.columns:
        ranked = []
        for row in table.rows:
            value = table.cells.get((row, col))
            if value is None:
                continue
            if max_rounds is not None and value >= max_rounds:
                table.saturated.add((row, col))
                continue
            ranked.append(value)
        distinct = sorted(set(ranked))
        for row in table.rows:
            value = table.cells.get((row, col))
            if (row, col) in table.saturated or value is None:
                continue
            if value == distinct[0]:
                table.marks[(row, col)] = BEST
            elif len(distinct) > 1 and value == distinct[1]:
                table.marks[(row, col)] = SECOND
    return table


def render_table(csvs, thresholds, max_rounds=None) -> ReportTable:
    """Rounds-to-threshold per (regime, channel); several seeds are averaged
    (rounded to the nearest round) and a cell any seed fails to reach is
    unreached."""
    runs = discover_runs(csvs)
    per_cell = defaultdict(list)
    rows, channels = [], []
    for run in runs:
        if run.regime not in rows:
            rows.append(run.regime)
        if run.channel not in channels:
            channels.append(run.channel)
        reached = rounds_to_threshold(read_records(run.path), thresholds)
        for t, r in zip(thresholds, reached):
            per_cell[(run.regime, (run.channel, t))].append(r)
    rows.sort(key=lambda r: list(REGIMES).index(r) if r in REGIMES else len(REGIMES))
    columns = [(c, t) for c in channels for t in thresholds]
    cells = {}
    for key, values in per_cell.items():
        cells[key] = None if None in values else int(round(float(np.mean(values))))
    return rank_table(rows, columns, cells, max_rounds)


# ------------------------------------------------------------------ curves


def emit_curves(csvs, out_dir) -> list[Path]:
    """One ``curves__<channel>.csv`` per channel: round, then the mean test
    accuracy of each regime at that round (blank where it was not evaluated)."""
    runs = discover_runs(csvs)
    series = defaultdict(lambda: defaultdict(list))
    regimes = []
    for run in runs:
        if run.regime not in regimes:
            regimes.append(run.regime)
        for r in read_records(run.path):
            if r.stage == FINETUNE and r.test_accuracy is not None:
                series[run.channel][(run.regime, r.round)].append(r.test_accuracy)
    regimes.sort(key=lambda r: list(REGIMES).index(r) if r in REGIMES else len(REGIMES))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for channel, points in series.items():
        rounds = sorted({rnd for _, rnd in points})
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["round"] + regimes)
        for rnd in rounds:
            row = [rnd]
            for regime in regimes:
                values = points.get((regime, rnd))
                row.append("" if not values else repr(float(np.mean(values))))
            writer.writerow(row)
        path = out_dir / f"curves__{channel}.csv"
        atomic_write(path, buf.getvalue())
        written.append(path)
    return written
