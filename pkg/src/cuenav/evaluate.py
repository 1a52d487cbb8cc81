"""Offline evaluation: IoU, threshold sweeps, waypoint RMSE and the report tables."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

THRESHOLDS = tuple(round(0.1 * k, 1) for k in range(1, 10))

TABLE1_ROWS = ("Vanilla", "Places BG", "DTD BG", "DTD and places BG", "Brightness FG", "Hue FG",
               "Blur FG", "DS", "DS with TL")
TABLE2_ROWS = ("Baseline", "DS", "DS + TL", "DS + TL + W/O Abs")


def iou(pred, label, threshold: float = 0.5) -> float:
    """Intersection over union of ``pred >= threshold`` with a binary label; empty vs empty is 1."""
    p = np.asarray(pred)
    lab = np.asarray(label)
    if p.shape != lab.shape:
        raise ValueError(f"iou: prediction shape {p.shape} != label shape {lab.shape}")
    pb = p >= threshold
    lb = lab.astype(bool)
    union = np.count_nonzero(pb | lb)
    if union == 0:
        return 1.0
    return np.count_nonzero(pb & lb) / union


def batch_iou(preds, labels, threshold: float = 0.5) -> np.ndarray:
    """Per-image IoU over a leading batch axis."""
    p = np.asarray(preds).reshape(len(preds), -1) >= threshold
    lb = np.asarray(labels).reshape(len(labels), -1).astype(bool)
    inter = np.count_nonzero(p & lb, axis=1)
    union = np.count_nonzero(p | lb, axis=1)
    out = np.ones(len(p))
    nz = union > 0
    out[nz] = inter[nz] / union[nz]
    return out


@dataclass
class IoUReport:
    per_image: np.ndarray
    threshold: float
    split: str

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_image)) if len(self.per_image) else float("nan")

    @property
    def std(self) -> float:
        return float(np.std(self.per_image)) if len(self.per_image) else float("nan")


def predict_masks(bundle, images, batch_size: int = 32) -> np.ndarray:
    """Mask probabilities (N, H, W) for images (N, H, W, 3) in [0, 1]."""
    from .autograd import no_grad
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            x = np.ascontiguousarray(np.asarray(images[i:i + batch_size]).transpose(0, 3, 1, 2), dtype=np.float32)
            out.append(bundle.predict_mask(x).data[:, 0])
    return np.concatenate(out) if out else np.zeros((0,) + np.asarray(images).shape[1:3], dtype=np.float32)


def predict_heads(bundle, images, batch_size: int = 32) -> np.ndarray:
    from .autograd import no_grad
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            x = np.ascontiguousarray(np.asarray(images[i:i + batch_size]).transpose(0, 3, 1, 2), dtype=np.float32)
            out.append(bundle.predict_head(x).data)
    return np.concatenate(out)


def iou_report(probs, labels, threshold: float = 0.5, split: str = "validation") -> IoUReport:
    return IoUReport(batch_iou(probs, labels, threshold), threshold, split)


def threshold_sweep(probs, labels, thresholds=THRESHOLDS) -> dict[float, float]:
    """Mean IoU per threshold over already-predicted mask probabilities."""
    if len(probs) == 0:
        raise ValueError("threshold sweep needs a non-empty split")
    return {float(t): float(np.mean(batch_iou(probs, labels, t))) for t in thresholds}


def best_threshold(curve: dict[float, float]) -> tuple[float, float]:
    t = max(curve, key=lambda k: (curve[k], -k))
    return t, curve[t]


def write_sweep(curves: dict[str, dict[float, float]], path, plot_path=None) -> None:
    """``curves`` maps split name to a sweep; writes one row per threshold."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(curves)
    thresholds = sorted(next(iter(curves.values()))) if curves else []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold"] + [f"{n}_iou" for n in names])
        for t in thresholds:
            w.writerow([f"{t:.1f}"] + [f"{curves[n][t]:.6f}" for n in names])
    if plot_path is not None:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        for n in names:
            ax.plot(thresholds, [100 * curves[n][t] for t in thresholds], marker="o", label=n)
        ax.set_xlabel("threshold")
        ax.set_ylabel("IoU (%)")
        ax.legend()
        fig.tight_layout()
        fig.savefig(plot_path, dpi=100, metadata={"Software": None})
        plt.close(fig)


def offline_rmse(pred, target) -> float:
    """Root mean square of the per-sample Euclidean error."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"rmse: prediction shape {p.shape} != target shape {t.shape}")
    if p.shape[-1] == 4:
        log.warning("velocity-head RMSE is in mixed units (m/s, rad/s); not comparable to waypoint errors")
    return float(np.sqrt(np.mean(np.sum((p - t) ** 2, axis=-1))))


def per_sample_error(pred, target) -> np.ndarray:
    return np.linalg.norm(np.asarray(pred, np.float64) - np.asarray(target, np.float64), axis=-1)


def write_iou_csv(reports: list[IoUReport], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["split", "threshold", "index", "iou"])
        for r in reports:
            for i, v in enumerate(r.per_image):
                w.writerow([r.split, f"{r.threshold:.1f}", i, f"{v:.6f}"])
        for r in reports:
            w.writerow([r.split, f"{r.threshold:.1f}", "mean", f"{r.mean:.6f}"])
            w.writerow([r.split, f"{r.threshold:.1f}", "std", f"{r.std:.6f}"])


# report tables ---------------------------------------------------------------

def fmt_cell(mean, std, percent: bool = False, digits: int = 2) -> str:
    """'mean (std)' in the tables' style; missing values stay visibly absent."""
    if mean is None or (isinstance(mean, float) and math.isnan(mean)):
        return "absent"
    scale = 100.0 if percent else 1.0
    if std is None or (isinstance(std, float) and math.isnan(std)):
        return f"{mean * scale:.{digits}f}"
    return f"{mean * scale:.{digits}f} ({std * scale:.{digits}f})"


def render_table(header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    line = lambda r: "  ".join(str(c).ljust(w) for c, w in zip(r, widths))  # noqa: E731
    return "\n".join([line(header), line(["-" * w for w in widths])] + [line(r) for r in rows]) + "\n"


def report(experiments: dict[str, dict], out_dir, table: str = "table1") -> str:
    """Write ``<table>.csv`` and ``<table>.txt``; returns the text table.

    ``experiments`` maps row label to a metrics dict. Rows without metrics are
    marked absent; an empty mapping yields an empty table.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if table == "table1":
        header = ["Model", "Validation IoU (%)", "OOD IoU (%)", "OOD best IoU (%)", "OOD best threshold"]
        order = [r for r in TABLE1_ROWS if r in experiments] + [r for r in experiments if r not in TABLE1_ROWS]
        rows = []
        for name in order:
            m = experiments[name] or {}
            rows.append([
                name,
                fmt_cell(m.get("val_iou"), m.get("val_iou_std"), percent=True),
                fmt_cell(m.get("ood_iou"), m.get("ood_iou_std"), percent=True),
                fmt_cell(m.get("ood_best_iou"), None, percent=True),
                "absent" if m.get("ood_best_threshold") is None else f"{m['ood_best_threshold']:.1f}",
            ])
    else:
        header = ["Model", "Validation RMSE", "Online RMSE", "Success rate", "Deploy success", "Deploy cross-track"]
        order = [r for r in TABLE2_ROWS if r in experiments] + [r for r in experiments if r not in TABLE2_ROWS]
        rows = []
        for name in order:
            m = experiments[name] or {}
            succ = m.get("successes")
            dep = m.get("deploy_successes")
            rows.append([
                name,
                fmt_cell(m.get("val_rmse"), m.get("val_rmse_std"), digits=4),
                fmt_cell(m.get("online_rmse"), m.get("online_rmse_std"), digits=4),
                "absent" if succ is None else f"{succ} / {m.get('episodes', 10)}",
                "absent" if dep is None else f"{dep} / {m.get('episodes', 10)}",
                fmt_cell(m.get("deploy_cross_track"), None, digits=4),
            ])
    with open(out / f"{table}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    text = render_table(header, rows)
    (out / f"{table}.txt").write_text(text)
    return text
