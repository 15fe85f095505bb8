"""Count-classification metrics: confusion matrix, per-count and overall
accuracy, RMSE, and the max-over-views aggregation.

``metrics.json`` schema (``schema: graspcount.eval/1``)::

    {
      "schema": "graspcount.eval/1",
      "mode": "cascaded" | "max-over-views",
      "num_classes": int,
      "n_samples": int,
      "confusion": [[int]],            # rows = true count, cols = predicted
      "per_class_accuracy": [float | null],   # null for classes absent from the test set
      "overall_accuracy": float,
      "rmse": float
    }
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .dataset import CompositeStore, DatasetManifest, load_batches
from .losses import predict_counts

SCHEMA = "graspcount.eval/1"


@dataclass
class EvalReport:
    confusion: List[List[int]]
    per_class_accuracy: List[Optional[float]]
    overall_accuracy: float
    rmse: float
    n_samples: int
    mode: str = "cascaded"
    extra: Dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return len(self.confusion)

    @classmethod
    def from_predictions(cls, truths: Sequence[int], preds: Sequence[int], num_classes: int, mode: str = "cascaded"):
        truths, preds = np.asarray(truths, dtype=np.int64), np.asarray(preds, dtype=np.int64)
        if truths.size == 0:
            raise ValueError("cannot evaluate an empty test set")
        if truths.shape != preds.shape:
            raise ValueError("truths and predictions differ in length")
        cm = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(cm, (truths, preds), 1)
        return cls.from_confusion(cm.tolist(), mode)

    @classmethod
    def from_confusion(cls, confusion, mode: str = "cascaded") -> "EvalReport":
        cm = np.asarray(confusion, dtype=np.int64)
        n = int(cm.sum())
        rows = cm.sum(axis=1)
        per_class = [None if r == 0 else float(cm[i, i] / r) for i, r in enumerate(rows)]
        return cls(
            confusion=cm.tolist(),
            per_class_accuracy=per_class,
            overall_accuracy=float(np.trace(cm) / n),
            rmse=rmse_from_confusion(cm),
            n_samples=n,
            mode=mode,
        )

    def to_dict(self) -> Dict:
        d = {
            "schema": SCHEMA,
            "mode": self.mode,
            "num_classes": self.num_classes,
            "n_samples": self.n_samples,
            "confusion": self.confusion,
            "per_class_accuracy": self.per_class_accuracy,
            "overall_accuracy": self.overall_accuracy,
            "rmse": self.rmse,
        }
        if self.extra:
            d["extra"] = self.extra
        return d

    @classmethod
    def from_dict(cls, d: Dict) -> "EvalReport":
        if d.get("schema") != SCHEMA:
            raise ValueError(f"unsupported report schema {d.get('schema')!r}")
        return cls(
            confusion=d["confusion"],
            per_class_accuracy=d["per_class_accuracy"],
            overall_accuracy=d["overall_accuracy"],
            rmse=d["rmse"],
            n_samples=d["n_samples"],
            mode=d["mode"],
            extra=d.get("extra", {}),
        )


def rmse_from_confusion(confusion) -> float:
    cm = np.asarray(confusion, dtype=np.int64)
    t, p = np.indices(cm.shape)
    # integer numerator keeps the recomputation exact
    sq = int((cm * (t - p) ** 2).sum())
    return math.sqrt(sq / int(cm.sum()))


def max_over_views(per_view: np.ndarray) -> np.ndarray:
    """Per-sample maximum over the per-view count predictions (N x 4 -> N)."""
    return np.asarray(per_view).max(axis=1)


def _predict(model, manifest: DatasetManifest, store, batch_size, view=None) -> np.ndarray:
    preds = []
    model.eval()
    with torch.no_grad():
        for x, _ in load_batches(
            manifest.entries, batch_size, None, train=False, input_size=model.input_size, store=store, view=view
        ):
            preds.append(predict_counts(torch.softmax(model.logits(x), dim=1)).numpy())
    return np.concatenate(preds)


def evaluate(model, manifest: DatasetManifest, store: Optional[CompositeStore] = None, batch_size: int = 64) -> EvalReport:
    """Evaluate on every entry of ``manifest`` using cascaded composites."""
    if len(manifest) == 0:
        raise ValueError("cannot evaluate an empty test set")
    store = store or CompositeStore()
    preds = _predict(model, manifest, store, batch_size)
    truths = [e.count for e in manifest.entries]
    return EvalReport.from_predictions(truths, preds, manifest.num_classes, "cascaded")


def evaluate_max_over_views(
    model, manifest: DatasetManifest, store: Optional[CompositeStore] = None, batch_size: int = 64
) -> EvalReport:
    """Classify each view alone (in its quadrant, others zeroed) and keep the max count."""
    if len(manifest) == 0:
        raise ValueError("cannot evaluate an empty test set")
    store = store or CompositeStore()
    per_view = np.stack([_predict(model, manifest, store, batch_size, view=v) for v in range(4)], axis=1)
    truths = [e.count for e in manifest.entries]
    report = EvalReport.from_predictions(truths, max_over_views(per_view), manifest.num_classes, "max-over-views")
    report.extra["per_view_accuracy"] = [float((per_view[:, v] == truths).mean()) for v in range(4)]
    return report


def confusion_figure(report: EvalReport):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cm = np.asarray(report.confusion)
    k = cm.shape[0]
    fig, ax = plt.subplots(figsize=(1.1 * k + 1.5, 1.1 * k + 1.0), dpi=100)
    ax.imshow(cm, cmap="Blues")
    for i in range(k):
        for j in range(k):
            color = "white" if cm[i, j] > cm.max() / 2 else "black"
            ax.text(j, i, str(cm[i, j]), ha="center", va="center", color=color)
    ax.set_xticks(range(k))
    ax.set_yticks(range(k))
    ax.set_xlabel("predicted count")
    ax.set_ylabel("true count")
    ax.set_title(f"{report.mode}: acc {report.overall_accuracy:.3f}, rmse {report.rmse:.3f}")
    fig.tight_layout()
    return fig


def format_table(report: EvalReport) -> str:
    k = report.num_classes
    lines = [f"mode: {report.mode}", f"samples: {report.n_samples}", ""]
    lines.append("true\\pred " + " ".join(f"{j:>6d}" for j in range(k)) + "   accuracy")
    for i, row in enumerate(report.confusion):
        acc = report.per_class_accuracy[i]
        acc_s = "     n/a" if acc is None else f"{acc:8.4f}"
        lines.append(f"{i:>9d} " + " ".join(f"{v:>6d}" for v in row) + f" {acc_s}")
    lines += ["", f"overall accuracy: {report.overall_accuracy:.4f}", f"rmse: {report.rmse:.4f}"]
    return "\n".join(lines) + "\n"


def write_metrics(report: EvalReport, path) -> None:
    with open(path, "w") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def load_report(path) -> EvalReport:
    with open(path) as f:
        return EvalReport.from_dict(json.load(f))


def render_report(report: EvalReport, outdir) -> Dict[str, Path]:
    """Write ``metrics.json``, ``confusion.png`` and ``report.txt`` into ``outdir``."""
    import matplotlib.pyplot as plt

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = {
        "metrics": outdir / "metrics.json",
        "confusion": outdir / "confusion.png",
        "table": outdir / "report.txt",
    }
    write_metrics(report, paths["metrics"])
    fig = confusion_figure(report)
    fig.savefig(paths["confusion"])
    plt.close(fig)
    paths["table"].write_text(format_table(report))
    return paths
