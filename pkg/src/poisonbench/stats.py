"""Success-rate aggregation and report rendering.

Standard errors follow the benchmark convention: E = sqrt(p(1-p)/N) with p
clamped to 1/2 whenever fewer than five successes or five failures were
observed, which upper-bounds the error.  Percentages print with two
decimals, half-even rounding.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

from .errors import PoisonBenchError

TRIAL_CSV_COLUMNS = [
    "trial_index", "seed", "attack", "mode", "threat", "target_class", "base_class",
    "target_id", "J", "N", "success", "clean_test_acc", "poisoned_test_acc",
    "craft_final_loss", "wall_s",
]


def standard_error(successes, n):
    """One-standard-error radius for a success fraction."""
    if n <= 0:
        raise PoisonBenchError("standard_error: n must be >= 1")
    if not 0 <= successes <= n:
        raise PoisonBenchError(f"standard_error: successes {successes} outside [0, {n}]")
    failures = n - successes
    p = 0.5 if (successes < 5 or failures < 5) else successes / n
    return (p * (1.0 - p) / n) ** 0.5


def format_pct(x):
    """Two decimals, half-even (the float formatter's rounding)."""
    return f"{x * 100:.2f}"


def format_rate(successes, n):
    """e.g. (92, 100) -> "92.00 ± 2.71"."""
    return f"{format_pct(successes / n)} ± {format_pct(standard_error(successes, n))}"


@dataclass
class BenchmarkReport:
    attack: str
    mode: str
    threat: str
    successes: int
    n: int
    rows: list = field(default_factory=list)  # per-trial CSV row dicts (strings)
    config_hash: str = ""
    timestamp: str = ""
    errored_trials: int = 0

    def __post_init__(self):
        if not 0 <= self.successes <= self.n:
            raise PoisonBenchError(f"successes {self.successes} outside [0, {self.n}]")

    @property
    def rate(self):
        return self.successes / self.n if self.n else 0.0

    @property
    def stderr(self):
        return standard_error(self.successes, self.n) if self.n else 0.0

    def rendered_rate(self):
        return format_rate(self.successes, self.n)

    def summary_dict(self):
        return {
            "attack": self.attack,
            "mode": self.mode,
            "threat": self.threat,
            "n": self.n,
            "successes": self.successes,
            "rate_pct": float(format_pct(self.rate)),
            "stderr_pct": float(format_pct(self.stderr)),
            "errored_trials": self.errored_trials,
            "config_hash": self.config_hash,
            "timestamp": self.timestamp,
        }

    def summary_json(self):
        return json.dumps(self.summary_dict(), sort_keys=True, indent=2) + "\n"


def diff_from_baseline(report, baseline):
    """Signed percentage-point difference in success rate."""
    if report.attack != baseline.attack:
        raise PoisonBenchError(f"diff_from_baseline: attack mismatch {report.attack!r} vs {baseline.attack!r}")
    return float(format_pct(report.rate)) - float(format_pct(baseline.rate))


# --- per-trial CSV ---

def render_trial_csv(rows):
    """Rows are dicts of strings keyed by TRIAL_CSV_COLUMNS; stable bytes."""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=TRIAL_CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: row.get(k, "") for k in TRIAL_CSV_COLUMNS})
    return buf.getvalue()


def parse_trial_csv(text):
    reader = csv.DictReader(io.StringIO(text))
    return [dict(row) for row in reader]


# --- table rendering (attacks x columns grids) ---

def _column_key(report):
    if report.mode == "from_scratch":
        return "From Scratch"
    label = {"white_box": "WB", "black_box": "BB"}.get(report.threat, report.threat)
    return f"Transfer {label}"

_COLUMN_ORDER = ["Transfer WB", "Transfer BB", "From Scratch"]


def _grid(reports):
    columns = sorted({_column_key(r) for r in reports},
                     key=lambda c: _COLUMN_ORDER.index(c) if c in _COLUMN_ORDER else 99)
    attacks = []
    for r in reports:
        if r.attack not in attacks:
            attacks.append(r.attack)
    cells = {}
    for r in reports:
        key = (r.attack, _column_key(r))
        if key in cells:
            raise PoisonBenchError(f"duplicate report for {key}")
        cells[key] = r
    return attacks, columns, cells


def render_table_markdown(reports):
    """Aligned markdown grid; the best rate in each column is bold."""
    attacks, columns, cells = _grid(reports)
    best = {}
    for col in columns:
        rates = [cells[(a, col)].rate for a in attacks if (a, col) in cells]
        best[col] = max(rates) if rates else None

    header = ["Attack"] + columns
    body = []
    for a in attacks:
        row = [a]
        for col in columns:
            r = cells.get((a, col))
            if r is None:
                row.append("-")
            else:
                text = r.rendered_rate()
                if best[col] is not None and r.rate == best[col]:
                    text = f"**{text}**"
                row.append(text)
        body.append(row)

    widths = [max(len(header[i]), *(len(row[i]) for row in body)) if body else len(header[i])
              for i in range(len(header))]

    def fmt(row):
        return "| " + " | ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)) + " |"

    lines = [fmt(header), "| " + " | ".join("-" * w for w in widths) + " |"]
    lines.extend(fmt(row) for row in body)
    return "\n".join(lines) + "\n"


def render_table_csv(reports):
    attacks, columns, cells = _grid(reports)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["attack"] + columns)
    for a in attacks:
        row = [a]
        for col in columns:
            r = cells.get((a, col))
            row.append("" if r is None else r.rendered_rate())
        writer.writerow(row)
    return buf.getvalue()


def render_table_json(reports):
    attacks, columns, cells = _grid(reports)
    out = []
    for a in attacks:
        entry = {"attack": a}
        for col in columns:
            r = cells.get((a, col))
            entry[col] = None if r is None else r.summary_dict()
        out.append(entry)
    return json.dumps(out, sort_keys=True, indent=2) + "\n"
