"""Output files for runs and sweeps: CSV tables, summary JSON, gnuplot data
and matplotlib figures.  Every file is written atomically (temp + rename)."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

from .sim import MetricsReport

SECURITY_COLUMNS = ["alpha", "t", "attempts", "successes", "rate"]
AVAILABILITY_COLUMNS = ["t", "mean_replicas_with_owner", "mean_replicas_validators_only"]
EFFICIENCY_COLUMNS = ["k", "mean_trials"]
STORAGE_COLUMNS = ["peer", "replica_count"]
MESSAGES_COLUMNS = ["op_class", "mean", "max"]
CSV_FILES = {
    "security.csv": SECURITY_COLUMNS,
    "availability.csv": AVAILABILITY_COLUMNS,
    "efficiency.csv": EFFICIENCY_COLUMNS,
    "storage.csv": STORAGE_COLUMNS,
    "messages.csv": MESSAGES_COLUMNS,
}
CI_SUFFIXES = ["runs", "mean", "ci_low", "ci_high"]


def atomic_write(path: Path, data: str | bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"newline": ""})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def csv_text(columns: Sequence[str], rows: Iterable[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def summary_json(report: MetricsReport) -> dict:
    return {
        "seed": report.config["seed"],
        "config": report.config,
        "totals": report.totals,
        "storage_stats": report.storage_stats,
        "per_slot": report.per_slot,
    }


def write_run(report: MetricsReport, out_dir: Path) -> list[Path]:
    """The five CSV files plus ``summary.json``."""
    out = Path(out_dir)
    tables = {
        "security.csv": report.security,
        "availability.csv": report.availability,
        "efficiency.csv": report.efficiency,
        "storage.csv": report.storage,
        "messages.csv": report.messages,
    }
    written = []
    for name, rows in tables.items():
        atomic_write(out / name, csv_text(CSV_FILES[name], rows))
        written.append(out / name)
    atomic_write(out / "summary.json", json.dumps(summary_json(report), sort_keys=True, indent=1) + "\n")
    written.append(out / "summary.json")
    return written


# ------------------------------------------------------------ aggregation

def mean_ci(values: Sequence[float], level: float = 0.95) -> tuple[float, float, float]:
    """Mean and Student-t confidence interval; zero width for one value."""
    from scipy.stats import t as student

    n = len(values)
    if n == 0:
        return 0.0, 0.0, 0.0
    m = math.fsum(values) / n
    if n == 1:
        return m, m, m
    var = math.fsum((v - m) ** 2 for v in values) / (n - 1)
    half = float(student.ppf(0.5 + level / 2, n - 1)) * math.sqrt(var / n)
    return m, m - half, m + half


def aggregate(cells: Sequence[tuple[dict, MetricsReport]]) -> dict[str, list[dict]]:
    """Merge per-run reports.  ``cells`` pairs each report with its sweep
    coordinates (``alpha``, ``t`` and ``seed``; ``t`` is ``None`` when the run
    covers every threshold)."""
    sec: dict[tuple[int, int], list[dict]] = {}
    avail: dict[int, list[dict]] = {}
    eff: dict[tuple[int, int], list[float]] = {}
    msgs: dict[str, list[dict]] = {}
    for coord, rep in cells:
        for row in rep.security:
            if coord.get("t") is not None and row["t"] != coord["t"]:
                continue
            sec.setdefault((row["alpha"], row["t"]), []).append(row)
        for row in rep.availability:
            avail.setdefault(row["t"], []).append(row)
        for row in rep.efficiency:
            if row.get("samples", 1):
                eff.setdefault((coord["alpha"], row["k"]), []).append(row["mean_trials"])
        for row in rep.messages:
            msgs.setdefault(row["op_class"], []).append(row)
    security = []
    for (a, t), rows in sorted(sec.items()):
        m, lo, hi = mean_ci([r["rate"] for r in rows])
        att = sum(r["attempts"] for r in rows)
        suc = sum(r["successes"] for r in rows)
        security.append({"alpha": a, "t": t, "attempts": att, "successes": suc,
                         "rate": suc / att if att else 0.0, "runs": len(rows),
                         "mean": m, "ci_low": lo, "ci_high": hi})
    availability = []
    for t, rows in sorted(avail.items()):
        mo = mean_ci([r["mean_replicas_with_owner"] for r in rows])
        mv = mean_ci([r["mean_replicas_validators_only"] for r in rows])
        availability.append({"t": t, "mean_replicas_with_owner": mo[0],
                             "mean_replicas_validators_only": mv[0], "runs": len(rows),
                             "mean": mv[0], "ci_low": mv[1], "ci_high": mv[2]})
    efficiency = []
    for (a, k), vals in sorted(eff.items()):
        m, lo, hi = mean_ci(vals)
        efficiency.append({"alpha": a, "k": k, "mean_trials": m, "runs": len(vals),
                           "mean": m, "ci_low": lo, "ci_high": hi})
    messages = []
    for op, rows in sorted(msgs.items()):
        m, lo, hi = mean_ci([r["mean"] for r in rows])
        messages.append({"op_class": op, "mean": m, "max": max(r["max"] for r in rows),
                         "runs": len(rows), "ci_low": lo, "ci_high": hi})
    return {"security": security, "availability": availability, "efficiency": efficiency,
            "messages": messages}


def write_sweep(agg: dict[str, list[dict]], out_dir: Path, meta: dict) -> list[Path]:
    out = Path(out_dir)
    cols = {
        "security.csv": SECURITY_COLUMNS + CI_SUFFIXES,
        "availability.csv": AVAILABILITY_COLUMNS + CI_SUFFIXES,
        "efficiency.csv": ["alpha"] + EFFICIENCY_COLUMNS + CI_SUFFIXES,
        "messages.csv": MESSAGES_COLUMNS + ["runs", "ci_low", "ci_high"],
    }
    written = []
    for name, columns in cols.items():
        atomic_write(out / name, csv_text(columns, agg[name[:-4]]))
        written.append(out / name)
    atomic_write(out / "summary.json", json.dumps(meta, sort_keys=True, indent=1) + "\n")
    written.append(out / "summary.json")
    return written


# ------------------------------------------------------------- rendering

def load_outputs(out_dir: Path) -> dict:
    out = Path(out_dir)
    summary = out / "summary.json"
    if not summary.exists():
        raise FileNotFoundError(f"no summary.json in {out}")
    data = {"summary": json.loads(summary.read_text())}
    for name in CSV_FILES:
        p = out / name
        if p.exists():
            data[name[:-4]] = read_csv(p)
    return data


def _num(v: str):
    try:
        x = float(v)
    except (TypeError, ValueError):
        return v
    return int(x) if x.is_integer() and "." not in v and "e" not in v.lower() else x


GNUPLOT_TABLES = {
    "security.dat": ("security", ["alpha", "t", "rate"]),
    "availability.dat": ("availability", ["t", "mean_replicas_validators_only", "mean_replicas_with_owner"]),
    "efficiency.dat": ("efficiency", ["k", "mean_trials"]),
}


def render(out_dir: Path, fmt: str) -> list[Path]:
    """Re-emit the outputs of a run or sweep in ``fmt`` and draw figures."""
    out = Path(out_dir)
    data = load_outputs(out)
    written: list[Path] = []
    if fmt == "json":
        obj = {k: ([{c: _num(v) for c, v in r.items()} for r in rows] if isinstance(rows, list) else rows)
               for k, rows in data.items()}
        atomic_write(out / "report.json", json.dumps(obj, sort_keys=True, indent=1) + "\n")
        written.append(out / "report.json")
    elif fmt == "gnuplot-data":
        for name, (table, cols) in GNUPLOT_TABLES.items():
            rows = data.get(table)
            if not rows:
                continue
            lines = ["# " + " ".join(cols)]
            prev_alpha = None
            for r in rows:
                if "alpha" in cols and prev_alpha is not None and r["alpha"] != prev_alpha:
                    lines.append("")
                    lines.append("")
                prev_alpha = r.get("alpha")
                lines.append(" ".join(r[c] for c in cols))
            atomic_write(out / name, "\n".join(lines) + "\n")
            written.append(out / name)
    elif fmt == "csv":
        for name, cols in CSV_FILES.items():
            rows = data.get(name[:-4])
            if rows is None:
                continue
            header = list(rows[0].keys()) if rows else cols
            atomic_write(out / name, csv_text(header, rows))
            written.append(out / name)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    written += render_figures(data, out)
    return written


def render_figures(data: dict, out: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []

    def save(fig, name):
        buf = io.BytesIO()
        fig.savefig(buf, format="png", dpi=110, metadata={"Software": None})
        plt.close(fig)
        atomic_write(out / name, buf.getvalue())
        written.append(out / name)

    sec = data.get("security")
    if sec:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        by_alpha: dict[str, list] = {}
        for r in sec:
            by_alpha.setdefault(r["alpha"], []).append(r)
        for a, rows in sorted(by_alpha.items(), key=lambda kv: int(kv[0])):
            xs = [int(r["t"]) for r in rows]
            ys = [max(float(r["rate"]), 1e-7) for r in rows]
            ax.semilogy(xs, ys, marker="o", label=f"alpha={a}")
        ax.set_xlabel("signatures threshold t")
        ax.set_ylabel("adversarial success per draw")
        ax.legend()
        fig.tight_layout()
        save(fig, "security.png")
    av = data.get("availability")
    if av:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        xs = [int(r["t"]) for r in av]
        ax.plot(xs, [float(r["mean_replicas_validators_only"]) for r in av], marker="o", label="validators")
        ax.plot(xs, [float(r["mean_replicas_with_owner"]) for r in av], marker="s", label="validators + owner")
        ax.set_xlabel("signatures threshold t")
        ax.set_ylabel("online replicas per block")
        ax.legend()
        fig.tight_layout()
        save(fig, "availability.png")
    ef = data.get("efficiency")
    if ef:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ks = [int(r["k"]) for r in ef]
        ax.plot(ks, [float(r["mean_trials"]) for r in ef], marker="o")
        ax.set_xlabel("honest validators found")
        ax.set_ylabel("mean trials")
        fig.tight_layout()
        save(fig, "efficiency.png")
    st = data.get("storage")
    if st:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.hist([int(r["replica_count"]) for r in st], bins=40)
        ax.set_xlabel("replicas held")
        ax.set_ylabel("peers")
        fig.tight_layout()
        save(fig, "storage.png")
    return written
