"""
train: fit a deep ensemble on a simulate dataset, or run a K sweep.
"""
import argparse
from pathlib import Path

import pandas as pd
from pydantic import ValidationError

from ivuq.commands.common import (
    add_shared_arguments,
    load_config,
    parse_int_list,
    prepare_out_dir,
    prior_ranges,
    provenance,
    resolve_workers,
)
from ivuq.commands.simulate import SPLIT_FILE
from ivuq.exceptions import FileFormatException
from ivuq.schemas.common import SplitManifest
from ivuq.schemas.network import HeadKind, HeadSpec, LossHistory, TrainConfig
from ivuq.services.ensemble import k_sweep, train_ensemble
from ivuq.services.prediction_service import check_schedule
from ivuq.services.storage_service import storage_service
from ivuq.services.synthdata import split_train_validation
from ivuq.utils.logger import logger
from ivuq.utils.seeding import PURPOSE_MEMBER, derive_int_seed

K_SWEEP_FILE = "k_sweep.csv"


def loss_file_name(index: int) -> str:
    return f"loss_member_{index:02d}.csv"


def register(subparsers) -> None:
    parser = subparsers.add_parser("train", help="训练深度集成")
    parser.add_argument("--data", type=Path, required=True, help="simulate 的输出目录")
    parser.add_argument("--head", choices=[k.value for k in HeadKind], default=None, help="输出头类型")
    parser.add_argument("--k", type=int, default=None, help="MDN 混合分量数")
    parser.add_argument("--members", type=int, default=None, help="集成成员数 M")
    parser.add_argument("--epochs", type=int, default=None)
    parser.add_argument("--batch-size", type=int, default=None)
    parser.add_argument("--lr", type=float, default=None, help="Adam 学习率")
    parser.add_argument("--hidden-width", type=int, default=None)
    parser.add_argument(
        "--k-sweep", nargs="?", const="", default=None,
        help="K 扫描（如 2,3,5,10,20；不带值时取配置中的 k_sweep）",
    )
    add_shared_arguments(parser)
    parser.set_defaults(func=run)


def _read_split(data_dir: Path) -> SplitManifest:
    path = data_dir / SPLIT_FILE
    try:
        return SplitManifest.model_validate_json(storage_service.read_text(path))
    except ValidationError as e:
        raise FileFormatException(f"划分清单格式错误: {path}", details={"path": str(path), "errors": str(e)}) from e


def head_spec(head: HeadKind, k: int) -> HeadSpec:
    return HeadSpec.mdn(k) if head == HeadKind.MDN else HeadSpec(kind=head, k=1)


def history_frame(history: LossHistory) -> pd.DataFrame:
    return pd.DataFrame({
        "epoch": range(1, len(history.train_loss) + 1),
        "train_loss": history.train_loss,
        "validation_loss": [float("nan") if v is None else v for v in history.validation_loss],
    })


def run(args: argparse.Namespace) -> int:
    overrides = {
        "head": args.head,
        "k": args.k,
        "ensemble_size": args.members,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "learning_rate": args.lr,
        "hidden_width": args.hidden_width,
        "k_sweep": args.k_sweep or None,
    }
    cfg = load_config(args, overrides, fallback_dir=args.data)
    workers = resolve_workers(args)

    split = _read_split(args.data)
    data = storage_service.read_dataset(args.data / split.dataset_file, prior_ranges(cfg))
    check_schedule(data.schedule, cfg.b_values, str(args.data / split.dataset_file))
    train_set, validation = split_train_validation(data, split.fraction, split.seed)
    if len(train_set) != split.n_train or len(validation) != split.n_validation:
        raise FileFormatException(
            "数据集与划分清单不一致",
            details={"n_total": len(data), "manifest_n_total": split.n_total},
        )

    out_dir = prepare_out_dir(cfg)
    prov = provenance(cfg)
    train_cfg = TrainConfig(learning_rate=cfg.learning_rate, batch_size=cfg.batch_size, epochs=cfg.epochs)
    base_seed = derive_int_seed(cfg.seed, PURPOSE_MEMBER)

    if args.k_sweep is not None:
        ks = parse_int_list(args.k_sweep) if args.k_sweep else cfg.k_sweep
        rows = k_sweep(
            ks, train_set, validation, train_cfg, cfg.ensemble_size, base_seed, cfg.hidden_width, workers
        )
        storage_service.write_csv(out_dir / K_SWEEP_FILE, pd.DataFrame(rows), prov)
        logger.info(f"K 扫描完成: K={ks} -> {out_dir / K_SWEEP_FILE}")
        return 0

    ens = train_ensemble(
        head_spec(cfg.head, cfg.k),
        train_set,
        train_cfg,
        cfg.ensemble_size,
        base_seed,
        validation,
        cfg.hidden_width,
        workers,
    )
    storage_service.write_ensemble(out_dir, ens, prov)
    for i, history in enumerate(ens.histories):
        storage_service.write_csv(out_dir / loss_file_name(i), history_frame(history), prov)
    logger.info(f"train 完成: {ens.size} 个成员 ({ens.head.kind.value}, K={ens.head.k}) -> {out_dir}")
    return 0
