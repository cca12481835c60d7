"""Velocity-map evaluation: MAE, RMSE, windowed SSIM, report tables.

Metrics are declared with a range convention, either "normalized"
([-1, 1]) or "physical" ([1500, 4500] m/s). Predictions are clamped to
the declared range before scoring; targets must already lie inside it.
A target far outside the declared range means the caller mixed
conventions, which is rejected rather than silently scored.
"""

import csv
import io

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .velocity import NormalizationSpec
from .wavesim import V_MAX, V_MIN

CONVENTIONS = ("normalized", "physical")
SSIM_WINDOW = 7
SSIM_C1 = (0.01 * 1.0) ** 2
SSIM_C2 = (0.03 * 1.0) ** 2

_BOUNDS = {"normalized": (-1.0, 1.0), "physical": (V_MIN, V_MAX)}
# anything beyond these is data from the other convention, not overshoot
_SANITY = {"normalized": (-2.0, 2.0), "physical": (0.0, 6000.0)}


def _checked(pred, target, convention):
    if convention not in CONVENTIONS:
        raise ValueError(f"unknown convention {convention!r}")
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    lo, hi = _BOUNDS[convention]
    slo, shi = _SANITY[convention]
    if target.min() < lo - 1e-9 or target.max() > hi + 1e-9:
        raise ValueError(
            f"target outside {convention} range [{lo}, {hi}]: "
            f"[{target.min():.3g}, {target.max():.3g}]")
    if pred.min() < slo or pred.max() > shi:
        raise ValueError(
            f"prediction looks like the wrong convention for {convention}: "
            f"[{pred.min():.3g}, {pred.max():.3g}]")
    return np.clip(pred, lo, hi), target


def mae(pred, target, convention="normalized"):
    """Mean absolute pixel error under the declared range convention."""
    p, t = _checked(pred, target, convention)
    return float(np.abs(p - t).mean())


def rmse(pred, target, convention="normalized"):
    """Root-mean-square pixel error under the declared range convention."""
    p, t = _checked(pred, target, convention)
    return float(np.sqrt(((p - t) ** 2).mean()))


def _to_unit(x, convention):
    if convention == "normalized":
        return 0.5 * (x + 1.0)
    return (x - V_MIN) / (V_MAX - V_MIN)


def ssim(pred, target, convention="normalized"):
    """Structural similarity with a 7x7 uniform window, stride 1.

    Inputs are rescaled to [0, 1]; C1 = (0.01 L)^2, C2 = (0.03 L)^2 with
    L = 1. Windowed means/variances/covariance are averaged over every
    valid window position.
    """
    p, t = _checked(pred, target, convention)
    if p.ndim != 2:
        raise ValueError(f"ssim expects single 2D maps, got {p.shape}")
    w = SSIM_WINDOW
    if p.shape[0] < w or p.shape[1] < w:
        raise ValueError(f"window {w}x{w} larger than image {p.shape}")
    a = _to_unit(p, convention)
    b = _to_unit(t, convention)
    wa = sliding_window_view(a, (w, w))
    wb = sliding_window_view(b, (w, w))
    mu_a = wa.mean(axis=(2, 3))
    mu_b = wb.mean(axis=(2, 3))
    var_a = (wa * wa).mean(axis=(2, 3)) - mu_a * mu_a
    var_b = (wb * wb).mean(axis=(2, 3)) - mu_b * mu_b
    cov = (wa * wb).mean(axis=(2, 3)) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float((num / den).mean())


class MetricReport:
    """Per-sample and aggregate scores for a batch of map pairs."""

    def __init__(self, preds, targets, convention="normalized"):
        preds = np.asarray(preds, dtype=np.float64)
        targets = np.asarray(targets, dtype=np.float64)
        if preds.ndim != 3 or preds.shape != targets.shape:
            raise ValueError(
                f"expected matching (N, H, W) stacks, got {preds.shape} "
                f"vs {targets.shape}")
        self.convention = convention
        self.mae = np.array([mae(p, t, convention)
                             for p, t in zip(preds, targets)])
        self.rmse = np.array([rmse(p, t, convention)
                              for p, t in zip(preds, targets)])
        self.ssim = np.array([ssim(p, t, convention)
                              for p, t in zip(preds, targets)])
        self.mean_mae = float(self.mae.mean())
        self.mean_rmse = float(self.rmse.mean())
        self.mean_ssim = float(self.ssim.mean())


REPORT_FIELDS = ("run_id", "config_tag", "mae_norm", "mae_phys",
                 "rmse_phys", "ssim")
_FORMATS = {"mae_norm": "{:.6f}", "mae_phys": "{:.3f}",
            "rmse_phys": "{:.3f}", "ssim": "{:.6f}"}


def _formatted(row):
    out = {}
    for f in REPORT_FIELDS:
        v = row[f]
        out[f] = _FORMATS[f].format(v) if f in _FORMATS else str(v)
    return out


def report(rows):
    """Configuration-ladder comparison: aligned text plus CSV content.

    Rows are dicts with the report fields, listed in ladder order; any
    row whose mae_norm exceeds its predecessor's is flagged "regressed"
    in the text table. Returns (text, csv_text).
    """
    cells = [_formatted(r) for r in rows]
    flags = [""]
    for prev, cur in zip(rows, rows[1:]):
        flags.append("regressed" if cur["mae_norm"] > prev["mae_norm"]
                     else "")
    flags = flags[:len(rows)]
    header = list(REPORT_FIELDS) + ["flag"]
    table = [header] + [[c[f] for f in REPORT_FIELDS] + [fl]
                        for c, fl in zip(cells, flags)]
    widths = [max(len(r[i]) for r in table) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip()
             for r in table]
    text = "\n".join(lines) + "\n"

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_FIELDS)
    for c in cells:
        w.writerow([c[f] for f in REPORT_FIELDS])
    return text, buf.getvalue()


def write_report(rows, path):
    """Write the ladder CSV; returns the text table."""
    text, csv_text = report(rows)
    with open(path, "w", newline="") as fh:
        fh.write(csv_text)
    return text
