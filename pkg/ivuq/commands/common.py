"""
Shared flags and helpers for the subcommands
"""
import argparse
from pathlib import Path
from typing import Any, Dict, List, Optional

from ivuq.config import ExperimentConfig, settings
from ivuq.exceptions import InvalidArgumentException
from ivuq.schemas.common import Provenance
from ivuq.schemas.ivim import BValueSchedule, PriorRanges
from ivuq.services.storage_service import storage_service
from ivuq.utils.logger import logger

CONFIG_FILE = "config.env"


def add_shared_arguments(parser: argparse.ArgumentParser) -> None:
    """--config, --seed, --workers, --out, --verbose"""
    group = parser.add_argument_group("通用参数")
    group.add_argument("--config", type=Path, default=None, help="key=value 配置文件")
    group.add_argument("--seed", type=int, default=None, help="主随机种子")
    group.add_argument("--workers", type=int, default=None, help="并行 worker 数量（默认取 IVUQ_WORKERS）")
    group.add_argument("--out", type=Path, default=None, help="输出目录")
    group.add_argument("--verbose", "-v", action="store_true", help="输出 DEBUG 日志")


def parse_int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.replace(";", ",").split(",") if v.strip()]
    except ValueError as e:
        raise InvalidArgumentException(f"无法解析整数列表: {text}") from e


def parse_named_paths(values: Optional[List[str]], flag: str) -> Dict[str, Path]:
    """``name=path`` pairs, in the order given; a bare path is named after its directory."""
    named: Dict[str, Path] = {}
    for value in values or []:
        name, sep, path = value.partition("=")
        if not sep:
            name, path = Path(value).name, value
        if not name or not path:
            raise InvalidArgumentException(f"{flag} 需要 name=path 格式", details={"value": value})
        if name in named:
            raise InvalidArgumentException(f"{flag} 名称重复: {name}", details={"name": name})
        named[name] = Path(path)
    return named


def load_config(
    args: argparse.Namespace,
    overrides: Optional[Dict[str, Any]] = None,
    fallback_dir: Optional[Path] = None,
) -> ExperimentConfig:
    """
    defaults < config file < CLI flags. Without --config, the config.env
    written by the previous step (``fallback_dir``) is used when present.
    """
    path = args.config
    if path is None and fallback_dir is not None:
        candidate = Path(fallback_dir) / CONFIG_FILE
        if candidate.is_file():
            logger.info(f"沿用上一步配置: {candidate}")
            path = candidate
    values: Dict[str, Any] = {"seed": args.seed, "out_dir": None if args.out is None else str(args.out)}
    values.update(overrides or {})
    return ExperimentConfig.load(path, values)


def resolve_workers(args: argparse.Namespace) -> int:
    workers = settings.workers if args.workers is None else args.workers
    if workers < 1:
        raise InvalidArgumentException("--workers 必须 >= 1", details={"workers": workers})
    return workers


def provenance(cfg: ExperimentConfig) -> Provenance:
    return Provenance(config_hash=cfg.config_hash, seed=cfg.seed)


def prior_ranges(cfg: ExperimentConfig) -> PriorRanges:
    return PriorRanges.from_tuples(cfg.d_range, cfg.f_range, cfg.d_star_range)


def schedule(cfg: ExperimentConfig) -> BValueSchedule:
    try:
        return BValueSchedule(values=cfg.b_values)
    except ValueError as e:
        raise InvalidArgumentException("b 值序列无效", details={"b_values": cfg.b_values, "errors": str(e)}) from e


def prepare_out_dir(cfg: ExperimentConfig) -> Path:
    """Create the output directory and write the effective config into it."""
    out_dir = Path(cfg.out_dir)
    storage_service.write_config(out_dir, cfg)
    logger.info(f"输出目录: {out_dir} (config_hash={cfg.config_hash[:12]})")
    return out_dir
