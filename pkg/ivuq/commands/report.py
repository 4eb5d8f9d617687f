"""
report: one PNG montage per prediction file (rows MAP / AU / EU, columns
D / f / D*) plus map_summary.csv with the median of every map.
"""
import argparse
from pathlib import Path
from typing import List

import numpy as np
import pandas as pd
from PIL import Image
from PIL.PngImagePlugin import PngInfo

from ivuq.commands.common import (
    add_shared_arguments,
    load_config,
    prepare_out_dir,
    prior_ranges,
    provenance,
)
from ivuq.commands.predict import list_prediction_files
from ivuq.exceptions import InvalidArgumentException, StorageException
from ivuq.schemas.ivim import PARAMETER_NAMES, PriorRanges
from ivuq.schemas.prediction import PredictionMap
from ivuq.services.storage_service import storage_service
from ivuq.services.uq_metrics import median_mad
from ivuq.utils.logger import logger

SUMMARY_FILE = "map_summary.csv"
PANEL_GAP = 2
ROWS = ("map_estimate", "au", "eu")
# AU/EU panels are scaled to this percentile of their finite values
UNCERTAINTY_PERCENTILE = 99.0


def register(subparsers) -> None:
    parser = subparsers.add_parser("report", help="输出参数图拼图与汇总表")
    parser.add_argument(
        "--predictions", type=Path, nargs="+", required=True, help="预测目录或 .ivuqpr 文件"
    )
    parser.add_argument("--scale", type=int, default=4, help="每个体素放大的像素数")
    add_shared_arguments(parser)
    parser.set_defaults(func=run)


def _to_gray(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Linear map of [lo, hi] onto 0..255; NaN (skipped voxels) is black."""
    scaled = np.zeros(values.shape, dtype=np.float64)
    finite = np.isfinite(values)
    if hi > lo:
        scaled[finite] = (values[finite] - lo) / (hi - lo)
    return np.round(np.clip(scaled, 0.0, 1.0) * 255.0).astype(np.uint8)


def _uncertainty_limit(values: np.ndarray) -> float:
    finite = values[np.isfinite(values)]
    return float(np.percentile(finite, UNCERTAINTY_PERCENTILE)) if finite.size else 0.0


def middle_slice(prediction: PredictionMap, name: str) -> np.ndarray:
    """(nx, ny, 3) slice at z = nz // 2."""
    return getattr(prediction, name)[:, :, prediction.dims[2] // 2, :]


def render_mosaic(prediction: PredictionMap, ranges: PriorRanges, scale: int = 4) -> Image.Image:
    if scale < 1:
        raise InvalidArgumentException("--scale 必须 >= 1", details={"scale": scale})
    nx, ny = prediction.dims[0], prediction.dims[1]
    panel_h, panel_w = nx * scale, ny * scale
    canvas = Image.new(
        "L",
        (3 * panel_w + 2 * PANEL_GAP, 3 * panel_h + 2 * PANEL_GAP),
        color=0,
    )
    for row, name in enumerate(ROWS):
        maps = middle_slice(prediction, name)
        for col in range(3):
            values = maps[..., col]
            if name == "map_estimate":
                gray = _to_gray(values, ranges.lower[col], ranges.upper[col])
            else:
                gray = _to_gray(values, 0.0, _uncertainty_limit(values))
            panel = Image.fromarray(gray).resize((panel_w, panel_h), Image.Resampling.NEAREST)
            canvas.paste(panel, (col * (panel_w + PANEL_GAP), row * (panel_h + PANEL_GAP)))
    return canvas


def summarize(file_name: str, prediction: PredictionMap) -> List[dict]:
    valid = prediction.valid.reshape(-1)
    rows = []
    for p, parameter in enumerate(PARAMETER_NAMES):
        map_med, map_mad = median_mad(prediction.flat("map_estimate")[valid, p])
        rows.append({
            "file": file_name,
            "parameter": parameter,
            "n_valid": int(valid.sum()),
            "map_median": map_med,
            "map_mad": map_mad,
            "au_median": median_mad(prediction.flat("au")[valid, p])[0],
            "eu_median": median_mad(prediction.flat("eu")[valid, p])[0],
        })
    return rows


def _collect(paths: List[Path]) -> List[Path]:
    files = []
    for path in paths:
        found = list_prediction_files(path)
        if not found:
            raise InvalidArgumentException(f"没有找到预测文件: {path}", details={"path": str(path)})
        files.extend(found)
    return files


def run(args: argparse.Namespace) -> int:
    first = args.predictions[0]
    cfg = load_config(args, fallback_dir=first if first.is_dir() else first.parent)
    ranges = prior_ranges(cfg)
    out_dir = prepare_out_dir(cfg)
    prov = provenance(cfg)

    rows = []
    for path in _collect(args.predictions):
        prediction = storage_service.read_prediction(path)
        png = out_dir / f"{path.stem}.png"
        info = PngInfo()
        info.add_text("config_hash", prov.config_hash)
        info.add_text("seed", str(prov.seed))
        try:
            render_mosaic(prediction, ranges, args.scale).save(png, format="PNG", pnginfo=info)
        except OSError as e:
            raise StorageException(f"写入图片失败: {png}", details={"path": str(png), "error": str(e)}) from e
        rows.extend(summarize(path.name, prediction))
        logger.info(f"已生成拼图 {png.name}")

    storage_service.write_csv(out_dir / SUMMARY_FILE, pd.DataFrame(rows), prov)
    logger.info(f"report 完成: {len(rows) // 3} 个预测文件 -> {out_dir}")
    return 0
