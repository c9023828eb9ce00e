"""Delimited reports and companion figures for evaluation runs.

Every report path writes the CSV atomically (temp + rename) and, unless
disabled, a PNG figure next to it: ROC curves for eval reports, a PV bar
chart for comparison tables, and a loss curve for training logs.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .errors import ConfigError, DataFormatError  # noqa: E402
from .verify import PVRecord, RocCurve, pv_record  # noqa: E402

EVAL_COLUMNS = ["model_label", "dataset", "patch", "stride", "mean_auc", "std_auc"]
PV_COLUMNS = ["setting_a", "setting_b", "auc_a", "auc_b", "pv_percent"]


@dataclass(frozen=True)
class EvalRow:
    model_label: str
    dataset: str
    patch: int
    stride: int
    mean_auc: float
    std_auc: float

    @property
    def variant(self) -> str:
        return self.model_label.split("_p")[0]


def _atomic_write_csv(path: str, columns: list[str], rows: list[dict]) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)
    os.replace(tmp, path)


def write_eval_report(path: str, rows: list[EvalRow]) -> None:
    _atomic_write_csv(path, EVAL_COLUMNS, [{
        "model_label": r.model_label, "dataset": r.dataset,
        "patch": r.patch, "stride": r.stride,
        "mean_auc": f"{r.mean_auc:.6f}", "std_auc": f"{r.std_auc:.6f}",
    } for r in rows])


def read_eval_report(path: str) -> list[EvalRow]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != EVAL_COLUMNS:
            raise DataFormatError(
                f"{path}: expected columns {EVAL_COLUMNS}, got {reader.fieldnames}")
        for line in reader:
            try:
                rows.append(EvalRow(
                    model_label=line["model_label"], dataset=line["dataset"],
                    patch=int(line["patch"]), stride=int(line["stride"]),
                    mean_auc=float(line["mean_auc"]), std_auc=float(line["std_auc"])))
            except (KeyError, ValueError) as exc:
                raise DataFormatError(f"{path}: bad eval row {line} ({exc})") from None
    return rows


def write_pv_table(path: str, records: list[PVRecord]) -> None:
    _atomic_write_csv(path, PV_COLUMNS, [{
        "setting_a": r.setting_a, "setting_b": r.setting_b,
        "auc_a": f"{r.auc_a:.6f}", "auc_b": f"{r.auc_b:.6f}",
        "pv_percent": f"{r.pv_percent:.4f}",
    } for r in records])


def read_pv_table(path: str) -> list[PVRecord]:
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != PV_COLUMNS:
            raise DataFormatError(
                f"{path}: expected columns {PV_COLUMNS}, got {reader.fieldnames}")
        for line in reader:
            records.append(PVRecord(
                setting_a=line["setting_a"], setting_b=line["setting_b"],
                auc_a=float(line["auc_a"]), auc_b=float(line["auc_b"]),
                pv_percent=float(line["pv_percent"])))
    return records


def half_stride_comparisons(rows: list[EvalRow]) -> list[PVRecord]:
    """Pair each half-stride setting (S = P/2) with its S = P counterpart.

    Grouping key is (dataset, variant, patch); rows missing a partner are
    skipped. Setting labels read ``<model_label>:<dataset>``.
    """
    by_key: dict[tuple[str, str, int, int], EvalRow] = {}
    for r in rows:
        key = (r.dataset, r.variant, r.patch, r.stride)
        if key in by_key:
            raise ConfigError(f"duplicate eval row for {key}")
        by_key[key] = r
    records = []
    for (dataset, variant, patch, stride), row_a in sorted(by_key.items()):
        if stride * 2 != patch:
            continue
        row_b = by_key.get((dataset, variant, patch, patch))
        if row_b is None:
            continue
        records.append(pv_record(
            f"{row_a.model_label}:{dataset}", f"{row_b.model_label}:{dataset}",
            row_a.mean_auc, row_b.mean_auc))
    return records


def find_row(rows: list[EvalRow], model_label: str, dataset: str | None) -> EvalRow:
    matches = [r for r in rows if r.model_label == model_label
               and (dataset is None or r.dataset == dataset)]
    if not matches:
        raise ConfigError(f"no eval row with model_label={model_label!r}"
                          + (f", dataset={dataset!r}" if dataset else ""))
    if len(matches) > 1:
        raise ConfigError(f"model_label {model_label!r} is ambiguous; pass a dataset")
    return matches[0]


# -- figures -------------------------------------------------------------------

def figure_path(csv_path: str, suffix: str) -> str:
    return str(Path(csv_path).with_suffix("")) + f"_{suffix}.png"


def plot_roc(curves: list[tuple[str, RocCurve]], path: str) -> None:
    fig, ax = plt.subplots(figsize=(5, 5))
    for label, curve in curves:
        ax.plot(curve.fpr, curve.tpr, label=f"{label} (AUC {curve.auc:.4f})")
    ax.plot([0, 1], [0, 1], linestyle=":", color="gray", linewidth=1)
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_pv_bars(records: list[PVRecord], path: str) -> None:
    fig, ax = plt.subplots(figsize=(max(6, 0.45 * len(records)), 4.5))
    labels = [f"{r.setting_a}\nvs {r.setting_b}" for r in records]
    values = [r.pv_percent for r in records]
    colors = ["tab:green" if v > 0 else "tab:red" for v in values]
    ax.bar(range(len(records)), values, color=colors)
    ax.axhline(0, color="black", linewidth=0.8)
    ax.set_xticks(range(len(records)))
    ax.set_xticklabels(labels, rotation=90, fontsize=6)
    ax.set_ylabel("AUC change (%)")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_loss(history: list[dict], path: str) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot([h["step"] for h in history], [h["loss"] for h in history], linewidth=1)
    ax.set_xlabel("Step")
    ax.set_ylabel("Training loss")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
