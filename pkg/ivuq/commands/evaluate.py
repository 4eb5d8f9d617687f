"""
evaluate: prediction files -> metric CSV tables

Phantom mode (--phantoms): accuracy, uncertainty quality, calibration curves,
AU/EU summaries.
ROI mode (--volume): mask only, no truth; medians, RCV, AU and EU.
evaluate reads prediction files and their mixture sidecars, never models.
"""
import argparse
from pathlib import Path
from typing import Dict, List, Optional

from ivuq.commands.common import (
    add_shared_arguments,
    load_config,
    parse_named_paths,
    prepare_out_dir,
    provenance,
)
from ivuq.commands.predict import PREDICTION_SUFFIX, list_prediction_files, mixture_path
from ivuq.commands.simulate import is_phantom_file
from ivuq.exceptions import InvalidArgumentException, MissingTruthException
from ivuq.schemas.metrics import DEFAULT_LEVELS, MetricReport
from ivuq.services.evaluation_service import (
    PhantomScores,
    aggregate_scores,
    evaluate_roi,
    merge_reports,
    report_frames,
    score_phantom,
    truth_range,
)
from ivuq.services.storage_service import storage_service
from ivuq.utils.logger import logger
from ivuq.utils.seeding import PURPOSE_EVALUATION, derive_rng


def register(subparsers) -> None:
    parser = subparsers.add_parser("evaluate", help="计算评估指标")
    parser.add_argument(
        "--predictions", action="append", required=True, metavar="NAME=DIR",
        help="模型名=预测目录，可重复（如 mdn=out/pred_mdn lsq=out/pred_lsq）",
    )
    source = parser.add_mutually_exclusive_group(required=True)
    source.add_argument("--phantoms", type=Path, help="体模目录（体模模式）")
    source.add_argument("--volume", type=Path, help="raw 体数据（ROI 模式）")
    parser.add_argument("--mask", type=Path, default=None, help="ROI 模式的 u8 raw 掩膜")
    add_shared_arguments(parser)
    parser.set_defaults(func=run)


def _prediction_stem(path: Path) -> str:
    return path.name[: -len(PREDICTION_SUFFIX)] if path.name.endswith(PREDICTION_SUFFIX) else path.stem


def _phantom_index(phantom_dir: Path) -> Dict[str, Path]:
    if not phantom_dir.is_dir():
        raise MissingTruthException(f"体模目录不存在: {phantom_dir}", details={"path": str(phantom_dir)})
    phantoms = {p.stem: p for p in sorted(phantom_dir.iterdir()) if is_phantom_file(p)}
    if not phantoms:
        raise MissingTruthException(f"体模目录中没有真值文件: {phantom_dir}", details={"path": str(phantom_dir)})
    return phantoms


def _model_files(name: str, directory: Path) -> List[Path]:
    files = list_prediction_files(directory)
    if not files:
        raise InvalidArgumentException(f"模型 {name} 没有预测文件", details={"path": str(directory)})
    return files


def evaluate_phantoms(
    models: Dict[str, Path], phantom_dir: Path, seed: int, samples_per_member: int
) -> MetricReport:
    phantoms = _phantom_index(phantom_dir)
    order = {stem: i for i, stem in enumerate(phantoms)}
    levels = list(DEFAULT_LEVELS)

    all_scores: Dict[str, List[PhantomScores]] = {}
    for name, directory in models.items():
        scores = []
        for path in _model_files(name, directory):
            stem = _prediction_stem(path)
            if stem not in phantoms:
                raise MissingTruthException(
                    f"预测文件没有对应的体模真值: {path.name}",
                    details={"prediction": str(path), "phantoms": str(phantom_dir)},
                )
            phantom = storage_service.read_phantom(phantoms[stem])
            prediction = storage_service.read_prediction(path)
            sidecar = mixture_path(path)
            mixtures = storage_service.read_mixtures(sidecar) if sidecar.is_file() else None
            rng = derive_rng(seed, PURPOSE_EVALUATION, order[stem])
            scores.append(score_phantom(phantom, prediction, mixtures, samples_per_member, rng, levels))
        all_scores[name] = scores

    ranges = truth_range(s for scores in all_scores.values() for s in scores)
    return merge_reports(
        aggregate_scores(name, scores, levels, ranges) for name, scores in all_scores.items()
    )


def evaluate_volume(
    models: Dict[str, Path], volume_path: Path, mask_path: Optional[Path] = None
) -> MetricReport:
    volume = storage_service.read_volume(volume_path)
    mask = volume.mask if mask_path is None else storage_service.read_mask(mask_path, volume.dims)
    if mask is None:
        raise InvalidArgumentException("ROI 模式需要掩膜（--mask 或描述文件中的 mask）")

    report = MetricReport()
    for name, directory in models.items():
        files = _model_files(name, directory)
        matching = [p for p in files if _prediction_stem(p) == volume_path.stem]
        if not matching and len(files) == 1:
            matching = files
        if not matching:
            raise InvalidArgumentException(
                f"模型 {name} 中找不到体数据 {volume_path.stem} 的预测", details={"path": str(directory)}
            )
        report.roi.extend(evaluate_roi(name, storage_service.read_prediction(matching[0]), mask))
    return report


def run(args: argparse.Namespace) -> int:
    models = parse_named_paths(args.predictions, "--predictions")
    first = next(iter(models.values()))
    cfg = load_config(args, fallback_dir=first if first.is_dir() else first.parent)
    out_dir = prepare_out_dir(cfg)
    prov = provenance(cfg)

    if args.phantoms is not None:
        report = evaluate_phantoms(models, args.phantoms, cfg.seed, cfg.samples_per_member)
    else:
        report = evaluate_volume(models, args.volume, args.mask)

    for table, frame in report_frames(report).items():
        storage_service.write_csv(out_dir / f"{table}.csv", frame, prov)
        logger.info(f"已写入 {table}.csv ({len(frame)} 行)")
    logger.info(f"evaluate 完成: 模型 {list(models)} -> {out_dir}")
    return 0
