"""PSNR / SSIM on the unit intensity range, per-slice evaluation and reports.

Report conventions:

* a volume's score is the mean of its per-slice scores (``slice_mean``);
  pooling the squared error over the whole volume (``pooled``) is
  available and is labelled in the method name;
* an overall method score is the mean over subjects of the volume scores;
* identical images give PSNR ``inf``, written as ``"inf"`` in CSV and as
  ``null`` with ``psnr_infinite: true`` in JSON.
"""

from __future__ import annotations

import csv
import json
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

from .volume import Volume

DATA_RANGE = 2.0
SSIM_WIN = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03
CSV_FIELDS = ("subject_id", "slice_index", "method", "psnr_db", "ssim")


def psnr(a, b, data_range: float = DATA_RANGE) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range ** 2 / mse)


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def ssim(a, b, data_range: float = DATA_RANGE) -> float:
    """Mean SSIM over all fully contained 11x11 Gaussian windows."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"ssim needs two equal-shape 2D images, got {a.shape} and {b.shape}")
    if min(a.shape) < SSIM_WIN:
        raise ValueError(f"image {a.shape} smaller than the {SSIM_WIN}x{SSIM_WIN} window")
    g = gaussian_window()
    r = SSIM_WIN // 2

    def filt(x):
        y = correlate1d(correlate1d(x, g, axis=0, mode="constant"), g, axis=1, mode="constant")
        return y[r:-r, r:-r]

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class MetricRow:
    subject_id: str
    slice_index: int
    method: str
    psnr_db: float
    ssim: float
    lpips: float | None = None


def finite_mean(values) -> float:
    """Mean of the finite entries; ``inf`` when every entry is infinite."""
    v = np.asarray(list(values), dtype=np.float64)
    fin = v[np.isfinite(v)]
    if fin.size:
        return float(fin.mean())
    return math.inf


def evaluate_volume(pred: Volume, truth: Volume, subject_id: str, method: str,
                    pooled: bool = False) -> list[MetricRow]:
    """One row per slice along axis 0 plus an aggregate row (slice_index -1)."""
    p = pred.data if isinstance(pred, Volume) else np.asarray(pred, dtype=np.float64)
    t = truth.data if isinstance(truth, Volume) else np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"dimension mismatch {p.shape} vs {t.shape}")
    rows = [MetricRow(subject_id, i, method, psnr(p[i], t[i]), ssim(p[i], t[i])) for i in range(p.shape[0])]
    vol_psnr = psnr(p, t) if pooled else finite_mean(r.psnr_db for r in rows)
    rows.append(MetricRow(subject_id, -1, method, vol_psnr, float(np.mean([r.ssim for r in rows]))))
    return rows


@dataclass
class MetricReport:
    rows: list[MetricRow] = field(default_factory=list)

    def extend(self, rows) -> None:
        self.rows.extend(rows)

    def subject_aggregates(self) -> list[MetricRow]:
        return [r for r in self.rows if r.slice_index == -1]

    def aggregates(self) -> dict:
        """Per (subject, method) rows and per-method subject means."""
        per_method: OrderedDict[str, list[MetricRow]] = OrderedDict()
        for r in self.subject_aggregates():
            per_method.setdefault(r.method, []).append(r)
        overall = OrderedDict()
        for m, rows in per_method.items():
            overall[m] = {
                "psnr_db": finite_mean(r.psnr_db for r in rows),
                "ssim": float(np.mean([r.ssim for r in rows])),
                "n_subjects": len(rows),
            }
        return {
            "per_subject": [
                {"subject_id": r.subject_id, "method": r.method, "psnr_db": r.psnr_db, "ssim": r.ssim}
                for r in self.subject_aggregates()
            ],
            "overall": overall,
        }

    def per_slice_psnr(self, subject_id: str, method: str) -> list[tuple[int, float]]:
        return [(r.slice_index, r.psnr_db) for r in self.rows
                if r.subject_id == subject_id and r.method == method and r.slice_index >= 0]


def _fmt(v: float) -> str:
    return "inf" if v == math.inf else f"{v:.6f}"


def _json_value(v: float):
    return None if v == math.inf else round(v, 10)


def write_report(report: MetricReport, path, fmt: str = "csv") -> None:
    path = Path(path)
    if fmt == "csv":
        has_lpips = any(r.lpips is not None for r in report.rows)
        fields = CSV_FIELDS + (("lpips",) if has_lpips else ())
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(fields)
            for r in report.rows:
                line = [r.subject_id, r.slice_index, r.method, _fmt(r.psnr_db), _fmt(r.ssim)]
                if has_lpips:
                    line.append("" if r.lpips is None else _fmt(r.lpips))
                w.writerow(line)
    elif fmt == "json":
        def row_obj(d):
            out = dict(d)
            out["psnr_infinite"] = d["psnr_db"] == math.inf
            out["psnr_db"] = _json_value(d["psnr_db"])
            return out

        agg = report.aggregates()
        doc = {
            "convention": "slice_mean_then_subject_mean",
            "rows": [row_obj({"subject_id": r.subject_id, "slice_index": r.slice_index, "method": r.method,
                              "psnr_db": r.psnr_db, "ssim": r.ssim}) for r in report.rows],
            "aggregates": {
                "per_subject": [row_obj(d) for d in agg["per_subject"]],
                "overall": {m: row_obj(d) for m, d in agg["overall"].items()},
            },
        }
        path.write_text(json.dumps(doc, indent=2) + "\n")
    else:
        raise ValueError(f"unknown report format {fmt!r}")


def read_report_csv(path) -> MetricReport:
    report = MetricReport()
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            lp = rec.get("lpips")
            report.rows.append(MetricRow(
                rec["subject_id"], int(rec["slice_index"]), rec["method"],
                float(rec["psnr_db"]), float(rec["ssim"]),
                float(lp) if lp not in (None, "") else None,
            ))
    return report


def write_per_slice_csv(report: MetricReport, path) -> None:
    """Per-slice PSNR table: one row per (subject, method, slice)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("subject_id", "method", "slice_index", "psnr_db"))
        for r in report.rows:
            if r.slice_index >= 0:
                w.writerow((r.subject_id, r.method, r.slice_index, _fmt(r.psnr_db)))


def error_heatmap(pred: Volume, truth: Volume, slice_index: int) -> np.ndarray:
    """|pred - truth| on one slice, scaled so the largest error maps to 255."""
    p, t = pred.data, truth.data
    if p.shape != t.shape:
        raise ValueError(f"dimension mismatch {p.shape} vs {t.shape}")
    if not 0 <= slice_index < p.shape[0]:
        raise IndexError(f"slice {slice_index} outside [0, {p.shape[0]})")
    err = np.abs(p[slice_index] - t[slice_index])
    top = err.max()
    if top == 0:
        return np.zeros(err.shape, dtype=np.int64)
    return np.rint(err / top * 255.0).astype(np.int64)


def write_pgm(img: np.ndarray, path) -> None:
    """Plain-text (P2) grayscale PGM with maxval 255."""
    img = np.asarray(img, dtype=np.int64)
    lines = ["P2", f"{img.shape[1]} {img.shape[0]}", "255"]
    lines += [" ".join(str(int(v)) for v in row) for row in img]
    Path(path).write_text("\n".join(lines) + "\n")


def read_pgm(path) -> np.ndarray:
    tokens = [t for line in Path(path).read_text().splitlines()
              if not line.startswith("#") for t in line.split()]
    if tokens[0] != "P2":
        raise ValueError("not a plain PGM file")
    w, h, _ = int(tokens[1]), int(tokens[2]), int(tokens[3])
    return np.array([int(t) for t in tokens[4:4 + w * h]]).reshape(h, w)
