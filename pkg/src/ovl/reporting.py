"""Figures and report files: translation grids, probe curves, metric reports."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .synth import to_uint8

__all__ = [
    "GridSpec",
    "CurveFormatError",
    "grid_image",
    "render_grid",
    "read_curve_tsv",
    "write_curve_tsv",
    "emit_curves",
    "write_report",
]


class CurveFormatError(ValueError):
    pass


@dataclass
class GridSpec:
    """Sources go down the first column, references across the first row."""

    rows: np.ndarray
    cols: np.ndarray
    row_labels: np.ndarray | None = None
    col_labels: np.ndarray | None = None

    def __post_init__(self):
        self.rows = np.array(self.rows, dtype=np.float32)
        self.cols = np.array(self.cols, dtype=np.float32)
        if self.rows.ndim != 4 or self.cols.ndim != 4 or len(self.rows) == 0 or len(self.cols) == 0:
            raise ValueError("grid needs at least one source and one reference (N x H x W x C each)")
        if self.rows.shape[1:] != self.cols.shape[1:]:
            raise ValueError("source and reference images differ in shape")


def grid_image(sources: np.ndarray, references: np.ndarray, cells: np.ndarray) -> np.ndarray:
    """Assemble a ``(rows+1)H x (cols+1)W`` grid; the corner stays black."""
    R, C = len(sources), len(references)
    H, W, ch = sources.shape[1:]
    if cells.shape != (R, C, H, W, ch):
        raise ValueError(f"cells must be {(R, C, H, W, ch)}, got {cells.shape}")
    out = np.full(((R + 1) * H, (C + 1) * W, ch), -1.0, dtype=np.float32)
    for j in range(C):
        out[:H, (j + 1) * W : (j + 2) * W] = references[j]
    for i in range(R):
        out[(i + 1) * H : (i + 2) * H, :W] = sources[i]
        for j in range(C):
            out[(i + 1) * H : (i + 2) * H, (j + 1) * W : (j + 2) * W] = cells[i, j]
    return out


def render_grid(spec: GridSpec, bundle, path=None, y_embed=None, t_mode="identity",
                col_masks=None) -> np.ndarray:
    """Translate every source with every reference and write the grid as PNG.

    ``col_masks`` (one per reference) is required when ``t_mode`` is mask.
    """
    from .trainer import translate

    R, C = len(spec.rows), len(spec.cols)
    src = torch.from_numpy(spec.rows).permute(0, 3, 1, 2)
    ref = torch.from_numpy(spec.cols).permute(0, 3, 1, 2)
    src_rep = src.repeat_interleave(C, dim=0)
    ref_rep = ref.repeat(R, 1, 1, 1)
    labels = None
    if spec.col_labels is not None and y_embed is not None:
        labels = np.tile(np.asarray(spec.col_labels), R)
    masks = None
    if col_masks is not None:
        masks = torch.from_numpy(np.array(col_masks)).repeat(R, 1, 1)
    out = translate(src_rep, ref_rep, bundle, reference_labels=labels,
                    y_embed=y_embed if labels is not None else None, t_mode=t_mode, reference_masks=masks)
    cells = out.permute(0, 2, 3, 1).numpy().reshape(R, C, *spec.rows.shape[1:])
    grid = grid_image(spec.rows, spec.cols, cells)
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(to_uint8(grid)).save(path, format="PNG")
    return grid


def read_curve_tsv(path) -> list[tuple[int, float]]:
    rows = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        try:
            if len(parts) != 2:
                raise ValueError
            epoch, value = int(parts[0]), float(parts[1])
        except ValueError:
            raise CurveFormatError(f"{path}:{lineno}: expected 'epoch<TAB>value'") from None
        if not 0 <= value <= 1:
            raise CurveFormatError(f"{path}:{lineno}: accuracy {value} outside [0, 1]")
        rows.append((epoch, value))
    return rows


def write_curve_tsv(path, rows):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("".join(f"{e}\t{v:.6f}\n" for e, v in rows), encoding="utf-8")


def emit_curves(tsv_inputs: dict, out, chance: float | None = None) -> Path:
    """Plot one accuracy-vs-epoch series per TSV plus a horizontal chance line."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    series = {name: read_curve_tsv(path) for name, path in tsv_inputs.items()}
    fig, ax = plt.subplots(figsize=(5, 3.5), dpi=100)
    for name, rows in series.items():
        epochs = [e for e, _ in rows]
        values = [v for _, v in rows]
        ax.plot(epochs, values, marker="o" if len(rows) == 1 else None, label=name)
    if chance is not None:
        ax.axhline(chance, color="gray", linestyle="--", label="chance")
    ax.set_xlabel("epoch")
    ax.set_ylabel("label probe accuracy")
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, format="png", metadata={"Software": None})
    plt.close(fig)
    return out


def write_report(report, out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path, text_path = out_dir / "report.json", out_dir / "report.txt"
    json_path.write_text(report.to_json() + "\n", encoding="utf-8")
    text_path.write_text(report.to_text(), encoding="utf-8")
    return json_path, text_path
