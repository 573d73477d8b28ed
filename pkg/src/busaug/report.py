"""Result-table rendering and the class-by-method image grid."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .data import LABELS, Manifest
from .evaluation import MetricsReport
from .pipeline import ARM_ORDER, ExperimentArm
from .util import image_to_uint8


class ReportError(ValueError):
    pass


COLUMNS = ("Accuracy", "F1-Score", "AUC-ROC", "PPV", "FID")

_DISPLAY = {
    ExperimentArm.BASELINE: "baseline (original)",
    ExperimentArm.SD: "original + diffusion",
    ExperimentArm.SD_IMG2IMG: "original + diffusion + img2img",
    ExperimentArm.SD_TI: "original + diffusion + ti",
    ExperimentArm.SD_TI_IMG2IMG: "original + diffusion + ti + img2img",
}


def _column_values(reports: list[MetricsReport]) -> dict[str, list[float | None]]:
    return {
        "Accuracy": [r.accuracy for r in reports],
        "F1-Score": [r.f1_macro for r in reports],
        "AUC-ROC": [r.auc_roc_ovr_macro for r in reports],
        "PPV": [r.ppv_macro for r in reports],
        "FID": [r.fid for r in reports],
    }


def _best_indices(column: str, values: list[float | None]) -> set[int]:
    present = [(i, v) for i, v in enumerate(values) if v is not None]
    if not present:
        return set()
    best = min(present, key=lambda iv: iv[1])[1] if column == "FID" else \
        max(present, key=lambda iv: iv[1])[1]
    return {i for i, v in present if v == best}


def _fmt(column: str, value: float | None) -> str:
    if value is None:
        return "-"
    return f"{value:.2f}" if column == "FID" else f"{value:.3f}"


def render_report(reports: list[tuple[ExperimentArm, MetricsReport]]) -> tuple[str, dict]:
    """Markdown table over the five arms plus its machine-readable twin.

    Rows follow the fixed arm order; the best value per column is bolded
    (ties jointly); the baseline FID cell renders as "-".
    """
    if len(reports) != len(ARM_ORDER):
        raise ReportError(f"expected {len(ARM_ORDER)} arm reports, got {len(reports)}")
    arms = [ExperimentArm.parse(a) for a, _ in reports]
    if tuple(arms) != ARM_ORDER:
        raise ReportError(f"arm order must be {[a.value for a in ARM_ORDER]}, "
                          f"got {[a.value for a in arms]}")
    metric_reports = [r for _, r in reports]
    columns = _column_values(metric_reports)
    best = {col: _best_indices(col, vals) for col, vals in columns.items()}

    header = "| Components | " + " | ".join(COLUMNS) + " |"
    rule = "|" + "---|" * (len(COLUMNS) + 1)
    lines = [header, rule]
    for i, arm in enumerate(arms):
        cells = []
        for col in COLUMNS:
            text = _fmt(col, columns[col][i])
            if i in best[col] and columns[col][i] is not None:
                text = f"**{text}**"
            cells.append(text)
        lines.append("| " + " | ".join([_DISPLAY[arm], *cells]) + " |")
    table = "\n".join(lines) + "\n"

    payload = {
        "columns": list(COLUMNS),
        "rows": [
            {
                "arm": arm.value,
                "display": _DISPLAY[arm],
                "accuracy": r.accuracy,
                "f1_score": r.f1_macro,
                "auc_roc": r.auc_roc_ovr_macro,
                "ppv": r.ppv_macro,
                "recall": r.recall_macro,
                "fid": r.fid,
            }
            for arm, r in zip(arms, metric_reports)
        ],
        "best": {col: sorted(arms[i].value for i in idx) for col, idx in best.items()},
    }
    return table, payload


def load_arm_reports(run_dir: str | Path) -> list[tuple[ExperimentArm, MetricsReport]]:
    run_dir = Path(run_dir)
    reports = []
    for arm in ARM_ORDER:
        path = run_dir / "arms" / arm.value / "report.json"
        if not path.exists():
            raise ReportError(f"missing report for arm {arm.value!r}: {path}")
        reports.append((arm, MetricsReport.from_json_dict(
            json.loads(path.read_text(encoding="utf-8")))))
    return reports


def write_report(reports: list[tuple[ExperimentArm, MetricsReport]],
                 out_dir: str | Path) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table, payload = render_report(reports)
    md = out_dir / "report.md"
    js = out_dir / "report.json"
    md.write_text(table, encoding="utf-8")
    js.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return md, js


# ---------------------------------------------------------------------------
# Image grid


GRID_METHODS = ("real", "sd", "sd_img2img", "sd_ti", "sd_ti_img2img")
_CELL_PAD = 4
_LEFT_MARGIN = 72
_TOP_MARGIN = 18


def export_grid(cells: dict[tuple[str, str], np.ndarray], out_path: str | Path,
                rows: tuple[str, ...] | None = None,
                columns: tuple[str, ...] | None = None) -> Path:
    """Compose one labeled image per (class, method) cell into a single PNG.

    ``cells`` maps (label, method) to a [-1, 1] grayscale image; an absent
    cell is an error naming the pair. Rows are classes, columns methods, and
    labels are drawn into the margins. Deterministic for fixed inputs.
    """
    rows = rows or tuple(lab.value for lab in LABELS)
    columns = columns or GRID_METHODS
    sizes = set()
    for label in rows:
        for method in columns:
            if (label, method) not in cells:
                raise ReportError(f"grid cell missing for (label={label!r}, method={method!r})")
            sizes.add(cells[(label, method)].shape)
    if len(sizes) != 1:
        raise ReportError(f"grid cells must share one image size, got {sorted(sizes)}")
    (h, w) = sizes.pop()
    width = _LEFT_MARGIN + len(columns) * (w + _CELL_PAD)
    height = _TOP_MARGIN + len(rows) * (h + _CELL_PAD)
    canvas = Image.new("L", (width, height), color=255)
    draw = ImageDraw.Draw(canvas)
    for j, method in enumerate(columns):
        draw.text((_LEFT_MARGIN + j * (w + _CELL_PAD) + 2, 4), method, fill=0)
    for i, label in enumerate(rows):
        y = _TOP_MARGIN + i * (h + _CELL_PAD)
        draw.text((2, y + h // 2 - 4), label, fill=0)
        for j, method in enumerate(columns):
            tile = Image.fromarray(image_to_uint8(cells[(label, method)]), mode="L")
            canvas.paste(tile, (_LEFT_MARGIN + j * (w + _CELL_PAD), y))
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    canvas.save(out_path)
    return out_path


def grid_cells_from_run(run_dir: str | Path) -> dict[tuple[str, str], np.ndarray]:
    """Collect grid cells from a finished run directory.

    The real column shows the first train sample per class in manifest
    order; each method column shows that arm's synthetic image with the
    lowest seed for the class.
    """
    run_dir = Path(run_dir)
    data_manifest = Manifest.load(run_dir / "data" / "manifest.jsonl")
    cells: dict[tuple[str, str], np.ndarray] = {}
    for label in LABELS:
        for s in data_manifest.samples:
            if s.label is label and s.split == "train":
                cells[(label.value, "real")] = data_manifest.load_image(s)
                break
    for method in GRID_METHODS[1:]:
        arm_manifest = Manifest.load(run_dir / "arms" / method / "manifest.jsonl")
        for label in LABELS:
            synthetic = [s for s in arm_manifest.samples if s.synthetic and s.label is label]
            if synthetic:
                chosen = min(synthetic, key=lambda s: s.seed)
                cells[(label.value, method)] = arm_manifest.load_image(chosen)
    return cells
