"""Evaluation reports and their renderings: JSON, CSV, and histogram figures.

Artifacts are bit-stable: the same report always serializes to the same
bytes (sorted JSON keys, repr floats in CSV, salted SVG ids, no
timestamps), so determinism checks can compare files directly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, UsageError
from .pose import ErrorPair, median_errors

SVG_HASH_SALT = "camloc"


@dataclass(frozen=True)
class EvalReport:
    """Per-sample localization errors for one split plus their medians.

    The medians are stored redundantly and re-derived from the rows on
    construction, so a report that has been edited or truncated on disk
    fails loudly instead of reporting stale numbers.
    """

    scene: str
    split: str
    config_hash: str
    rows: tuple[tuple[str, float, float], ...]
    med_pos_m: float
    med_ori_deg: float

    def __post_init__(self):
        object.__setattr__(self, "rows",
                           tuple((str(i), float(p), float(o)) for i, p, o in self.rows))
        med_pos, med_ori = median_errors(
            [ErrorPair(pos_err=p, ori_err=o) for _, p, o in self.rows])
        if med_pos != self.med_pos_m or med_ori != self.med_ori_deg:
            raise DataError(
                f"EvalReport: stored medians ({self.med_pos_m}, {self.med_ori_deg}) "
                f"do not match the rows ({med_pos}, {med_ori})")

    @property
    def n(self) -> int:
        return len(self.rows)

    @classmethod
    def create(cls, scene: str, split: str, config_hash: str, rows) -> "EvalReport":
        rows = tuple((str(i), float(p), float(o)) for i, p, o in rows)
        med_pos, med_ori = median_errors(
            [ErrorPair(pos_err=p, ori_err=o) for _, p, o in rows])
        return cls(scene=scene, split=split, config_hash=config_hash, rows=rows,
                   med_pos_m=med_pos, med_ori_deg=med_ori)


def write_eval_report(report: EvalReport, path) -> None:
    """JSON rendering; medians are re-checked against the rows on write."""
    med_pos, med_ori = median_errors(
        [ErrorPair(pos_err=p, ori_err=o) for _, p, o in report.rows])
    if med_pos != report.med_pos_m or med_ori != report.med_ori_deg:
        raise DataError("write_eval_report: medians inconsistent with rows")
    payload = {
        "scene": report.scene,
        "split": report.split,
        "config_hash": report.config_hash,
        "n": report.n,
        "med_pos_m": report.med_pos_m,
        "med_ori_deg": report.med_ori_deg,
        "rows": [[i, p, o] for i, p, o in report.rows],
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n",
                          encoding="utf-8")


def load_eval_report(path) -> EvalReport:
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: unreadable eval report: {exc}") from None
    try:
        report = EvalReport(scene=payload["scene"], split=payload["split"],
                            config_hash=payload["config_hash"],
                            rows=tuple((i, p, o) for i, p, o in payload["rows"]),
                            med_pos_m=payload["med_pos_m"],
                            med_ori_deg=payload["med_ori_deg"])
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"{path}: malformed eval report: {exc}") from None
    if payload["n"] != report.n:
        raise DataError(f"{path}: stored n={payload['n']} but {report.n} rows")
    return report


def improvement_pct(baseline: float, proposed: float) -> int:
    """Percent reduction relative to the baseline, rounded to the nearest
    integer: 1.92 m down to 0.99 m is a 48% improvement. Negative values
    mean the proposed number is worse."""
    if not baseline > 0:
        raise UsageError(f"improvement_pct: baseline must be positive, got {baseline}")
    return int(round(100.0 * (baseline - proposed) / baseline))


# ---------------------------------------------------------------------------
# Aggregate report rendering
# ---------------------------------------------------------------------------

def _histogram(values, n_bins: int = 10) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    hi = float(arr.max()) if arr.size and arr.max() > 0 else 1.0
    edges = np.linspace(0.0, hi, n_bins + 1)
    counts, _ = np.histogram(arr, bins=edges)
    return {"edges": [float(e) for e in edges], "counts": [int(c) for c in counts]}


def _render_histogram(hist: dict, title: str, xlabel: str, path_base: Path) -> list[Path]:
    import matplotlib
    matplotlib.use("Agg", force=True)
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = SVG_HASH_SALT
    edges = np.asarray(hist["edges"])
    counts = np.asarray(hist["counts"])
    fig, ax = plt.subplots(figsize=(6.0, 4.0), dpi=100)
    ax.bar(edges[:-1], counts, width=np.diff(edges), align="edge",
           edgecolor="black", linewidth=0.5)
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("images")
    fig.tight_layout()
    written = []
    for suffix in (".png", ".svg"):
        out = path_base.with_suffix(suffix)
        fig.savefig(out, metadata={"Date": None} if suffix == ".svg" else None)
        written.append(out)
    plt.close(fig)
    return written


def cmd_report(reports, out_dir, figures: bool = True) -> dict:
    """Aggregate eval reports into CSV + JSON (and histogram figures).

    ``reports`` holds EvalReports or paths to their JSON files; rows keep
    the given order. Files written: report.csv, report.json, and when
    ``figures`` is set, hist_pos_m and hist_ori_deg as PNG and SVG.
    """
    loaded = [r if isinstance(r, EvalReport) else load_eval_report(r) for r in reports]
    if not loaded:
        raise UsageError("cmd_report: need at least one report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    lines = ["scene,n,med_pos_m,med_ori_deg,config_hash"]
    for r in loaded:
        lines.append(f"{r.scene},{r.n},{r.med_pos_m!r},{r.med_ori_deg!r},{r.config_hash}")
    csv_path = out_dir / "report.csv"
    csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    pos_errs = [p for r in loaded for _, p, _ in r.rows]
    ori_errs = [o for r in loaded for _, _, o in r.rows]
    hist_pos = _histogram(pos_errs)
    hist_ori = _histogram(ori_errs)
    payload = {
        "rows": [{"scene": r.scene, "n": r.n, "med_pos_m": r.med_pos_m,
                  "med_ori_deg": r.med_ori_deg, "config_hash": r.config_hash}
                 for r in loaded],
        "histograms": {"pos_m": hist_pos, "ori_deg": hist_ori},
        "total_samples": sum(r.n for r in loaded),
    }
    json_path = out_dir / "report.json"
    json_path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n",
                         encoding="utf-8")

    figure_paths: list[Path] = []
    if figures:
        figure_paths += _render_histogram(
            hist_pos, "Position error", "meters", out_dir / "hist_pos_m")
        figure_paths += _render_histogram(
            hist_ori, "Orientation error", "degrees", out_dir / "hist_ori_deg")
    return {"csv": csv_path, "json": json_path, "figures": figure_paths,
            "payload": payload}
