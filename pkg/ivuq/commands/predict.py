"""
predict: ensemble or segmented-fit baseline -> parameter maps and AU/EU maps

The input is a phantom directory, a single phantom file, or a raw float32
volume with its .env sidecar.
"""
import argparse
from pathlib import Path
from typing import Iterator, List, Optional, Tuple

import numpy as np

from ivuq.commands.common import (
    add_shared_arguments,
    load_config,
    prepare_out_dir,
    provenance,
    resolve_workers,
)
from ivuq.commands.simulate import is_phantom_file
from ivuq.exceptions import InvalidArgumentException
from ivuq.services.prediction_service import (
    check_schedule,
    predict_with_baseline,
    predict_with_ensemble,
    sample_sidecar,
)
from ivuq.services.storage_service import storage_service
from ivuq.utils.logger import logger
from ivuq.utils.seeding import PURPOSE_SAMPLING, derive_rng

PREDICTION_SUFFIX = ".ivuqpr"
MIXTURE_SUFFIX = ".mixture.npz"
SAMPLES_SUFFIX = ".samples.npy"

# (name, raw signals (N, n_b), b-values, dims, mask)
PredictionInput = Tuple[str, np.ndarray, np.ndarray, Tuple[int, int, int], Optional[np.ndarray]]


def prediction_path(out_dir: Path, name: str) -> Path:
    return out_dir / f"{name}{PREDICTION_SUFFIX}"


def mixture_path(pred_path: Path) -> Path:
    return pred_path.with_name(pred_path.name + MIXTURE_SUFFIX)


def samples_path(pred_path: Path) -> Path:
    return pred_path.with_name(pred_path.name + SAMPLES_SUFFIX)


def list_prediction_files(path: Path) -> List[Path]:
    if path.is_file():
        return [path]
    return sorted(p for p in path.glob(f"*{PREDICTION_SUFFIX}") if p.is_file())


def register(subparsers) -> None:
    parser = subparsers.add_parser("predict", help="对体模或体数据进行参数估计")
    source = parser.add_mutually_exclusive_group(required=True)
    source.add_argument("--model", type=Path, help="train 的输出目录（ensemble.json 所在目录）")
    source.add_argument("--baseline", action="store_true", help="使用分段最小二乘拟合")
    parser.add_argument("--input", type=Path, required=True, help="体模目录 / .ivuqph 文件 / raw 体数据")
    parser.add_argument("--mask", type=Path, default=None, help="u8 raw 掩膜，覆盖描述文件中的 mask")
    parser.add_argument("--dump-samples", action="store_true", help="输出池化样本 (n_valid, M*S, 3)")
    parser.add_argument("--no-refine", action="store_true", help="基线只做两阶段分段拟合")
    parser.add_argument("--b-threshold", type=float, default=None, help="基线高 b 值阈值")
    add_shared_arguments(parser)
    parser.set_defaults(func=run)


def _iter_inputs(path: Path, mask_override: Optional[Path]) -> Iterator[PredictionInput]:
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if is_phantom_file(p))
        if not files:
            raise InvalidArgumentException(f"目录中没有体模文件: {path}", details={"path": str(path)})
    elif is_phantom_file(path):
        files = [path]
    else:
        files = []

    for f in files:
        phantom = storage_service.read_phantom(f)
        dims = (phantom.height, phantom.width, 1)
        signals = phantom.signals.reshape(-1, len(phantom.schedule))
        yield f.stem, signals, phantom.schedule.as_array(), dims, phantom.foreground.reshape(-1)
    if files:
        return

    volume = storage_service.read_volume(path)
    mask = volume.mask if mask_override is None else storage_service.read_mask(mask_override, volume.dims)
    signals = volume.signals.reshape(-1, volume.n_b)
    yield path.stem, signals, volume.schedule.as_array(), volume.dims, None if mask is None else mask.reshape(-1)


def run(args: argparse.Namespace) -> int:
    cfg = load_config(
        args, {"b_threshold": args.b_threshold}, fallback_dir=None if args.baseline else args.model
    )
    workers = resolve_workers(args)
    ens = None if args.baseline else storage_service.read_ensemble(args.model)
    if args.dump_samples and (ens is None or not ens.head.is_probabilistic):
        raise InvalidArgumentException("--dump-samples 只适用于概率输出头的集成")

    out_dir = prepare_out_dir(cfg)
    prov = provenance(cfg)
    n_written = 0
    for index, (name, signals, b_values, dims, mask) in enumerate(_iter_inputs(args.input, args.mask)):
        path = prediction_path(out_dir, name)
        if ens is None:
            prediction = predict_with_baseline(
                signals, b_values, dims, mask, cfg.b_threshold, not args.no_refine, workers
            )
            storage_service.write_prediction(path, prediction, prov)
        else:
            check_schedule(ens.schedule, b_values, name)
            prediction, sidecar = predict_with_ensemble(ens, signals, dims, mask, workers)
            storage_service.write_prediction(path, prediction, prov)
            if sidecar is not None:
                storage_service.write_mixtures(mixture_path(path), sidecar, prov)
                if args.dump_samples:
                    rng = derive_rng(cfg.seed, PURPOSE_SAMPLING, index)
                    storage_service.write_samples(
                        samples_path(path), sample_sidecar(sidecar, cfg.samples_per_member, rng)
                    )
        n_written += 1
        logger.info(f"已写入预测 {path.name}: 有效体素 {int(np.sum(prediction.valid))}")
    logger.info(f"predict 完成: {n_written} 个预测文件 -> {out_dir}")
    return 0
