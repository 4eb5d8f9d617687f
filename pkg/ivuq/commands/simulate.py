"""
simulate: synthetic training set, train/validation split manifest and the
Shepp-Logan phantom test set.
"""
import argparse
from pathlib import Path

from ivuq.commands.common import (
    add_shared_arguments,
    load_config,
    prepare_out_dir,
    prior_ranges,
    provenance,
    resolve_workers,
    schedule,
)
from ivuq.exceptions import InvalidArgumentException
from ivuq.schemas.common import SplitManifest
from ivuq.services.storage_service import storage_service
from ivuq.services.synthdata import generate_phantom_set, sample_training_set, split_train_validation
from ivuq.utils.logger import logger

DATASET_FILE = "train.ivuqds"
DATASET_CSV = "train.csv"
SPLIT_FILE = "split.json"
PHANTOM_DIR = "phantoms"
PHANTOM_SUFFIX = ".ivuqph"


def phantom_file_name(snr: float, index: int) -> str:
    return f"phantom_snr{snr:g}_{index:03d}{PHANTOM_SUFFIX}"


def register(subparsers) -> None:
    parser = subparsers.add_parser("simulate", help="生成合成训练集与体模")
    parser.add_argument("--n", type=int, default=None, help="训练记录数 (n_train)")
    parser.add_argument(
        "--phantoms", type=int, default=None,
        help="体模总数，按 SNR 平均分配（须能被 SNR 个数整除）",
    )
    parser.add_argument("--phantoms-per-snr", type=int, default=None, help="每个 SNR 的体模数")
    parser.add_argument("--snrs", type=str, default=None, help="体模 SNR 列表，如 25,50,100")
    parser.add_argument("--phantom-size", type=int, default=None, help="体模边长（像素）")
    parser.add_argument("--noiseless", action="store_true", help="训练集不加噪声")
    parser.add_argument("--csv", action="store_true", help="额外输出训练集 CSV")
    add_shared_arguments(parser)
    parser.set_defaults(func=run)


def _phantoms_per_snr(args: argparse.Namespace, n_snrs: int):
    if args.phantoms is None:
        return args.phantoms_per_snr
    if args.phantoms_per_snr is not None:
        raise InvalidArgumentException("--phantoms 与 --phantoms-per-snr 不能同时使用")
    if args.phantoms <= 0 or args.phantoms % n_snrs:
        raise InvalidArgumentException(
            "--phantoms 必须是 SNR 个数的正整数倍",
            details={"phantoms": args.phantoms, "n_snrs": n_snrs},
        )
    return args.phantoms // n_snrs


def run(args: argparse.Namespace) -> int:
    overrides = {"n_train": args.n, "phantom_snrs": args.snrs, "phantom_size": args.phantom_size}
    cfg = load_config(args, overrides)
    per_snr = _phantoms_per_snr(args, len(cfg.phantom_snrs))
    if per_snr is not None:
        cfg = cfg.model_copy(update={"phantoms_per_snr": per_snr})
    workers = resolve_workers(args)
    out_dir = prepare_out_dir(cfg)
    prov = provenance(cfg)
    ranges, sched = prior_ranges(cfg), schedule(cfg)

    data = sample_training_set(
        cfg.n_train, ranges, sched, tuple(cfg.snr_range), cfg.seed, args.noiseless, workers
    )
    storage_service.write_dataset(out_dir / DATASET_FILE, data, prov)
    if args.csv:
        storage_service.write_dataset_csv(out_dir / DATASET_CSV, data, prov)

    train, validation = split_train_validation(data, cfg.train_fraction, cfg.seed)
    manifest = SplitManifest(
        dataset_file=DATASET_FILE,
        n_total=len(data),
        n_train=len(train),
        n_validation=len(validation),
        fraction=cfg.train_fraction,
        seed=cfg.seed,
        provenance=prov,
    )
    storage_service.write_json(out_dir / SPLIT_FILE, manifest)

    phantoms = generate_phantom_set(
        cfg.phantom_snrs, cfg.phantoms_per_snr, ranges, sched, cfg.seed, cfg.phantom_size, workers
    )
    phantom_dir = out_dir / PHANTOM_DIR
    for i, phantom in enumerate(phantoms):
        index = i % cfg.phantoms_per_snr
        storage_service.write_phantom(phantom_dir / phantom_file_name(phantom.snr, index), phantom, prov)

    logger.info(
        f"simulate 完成: {len(data)} 条训练记录 (训练 {len(train)} / 验证 {len(validation)}), "
        f"{len(phantoms)} 个体模 -> {out_dir}"
    )
    return 0


def is_phantom_file(path: Path) -> bool:
    return path.is_file() and path.suffix == PHANTOM_SUFFIX

