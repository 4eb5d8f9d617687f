"""
ivuq command-line entry point

    python -m ivuq simulate --out runs/data
    python -m ivuq train --data runs/data --out runs/mdn
    python -m ivuq predict --model runs/mdn --input runs/data/phantoms --out runs/pred_mdn
    python -m ivuq evaluate --predictions mdn=runs/pred_mdn --phantoms runs/data/phantoms --out runs/eval
    python -m ivuq report --predictions runs/pred_mdn --out runs/report
"""
import argparse
import json
import sys
from typing import List, Optional

from ivuq.config import settings
from ivuq.exceptions import EXIT_NUMERICAL_FAILURE, EXIT_USER_ERROR, IvuqException
from ivuq.schemas.common import ErrorDetail, ErrorResponse
from ivuq.utils.logger import cleanup_old_logs, get_log_size_info, logger, set_verbose


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ivuq",
        description="IVIM 参数估计：深度集成 + 不确定性量化",
    )
    subparsers = parser.add_subparsers(dest="command", required=True, metavar="<command>")

    # Register subcommands
    from ivuq.commands import COMMANDS

    for command in COMMANDS:
        command.register(subparsers)
    return parser


def _print_error(code: str, message: str, details: Optional[dict] = None) -> None:
    response = ErrorResponse(error=ErrorDetail(code=code, message=message, details=details))
    print(json.dumps(response.model_dump(), ensure_ascii=False, default=str), file=sys.stderr)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on usage errors; those are user errors here
        return EXIT_USER_ERROR if e.code else 0

    set_verbose(args.verbose)
    if settings.log_cleanup_enabled:
        cleanup_old_logs(settings.log_cleanup_max_size_mb)
    log_info = get_log_size_info()
    logger.debug(f"日志目录信息: {log_info['file_count']} 个文件, 总大小 {log_info['total_size_mb']} MB")

    try:
        return args.func(args)
    except IvuqException as exc:
        logger.error(f"{args.command} 失败 [{exc.error_code}]: {exc.message} {exc.details}")
        _print_error(exc.error_code, exc.message, exc.details)
        return exc.exit_code
    except Exception as exc:
        logger.error(f"{args.command} 发生未处理异常: {exc}", exc_info=True)
        _print_error("INTERNAL_ERROR", "内部错误", {"type": type(exc).__name__, "error": str(exc)})
        return EXIT_NUMERICAL_FAILURE


if __name__ == "__main__":
    sys.exit(main())
