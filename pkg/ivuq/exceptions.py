from typing import Optional, Dict, Any

EXIT_OK = 0
EXIT_USER_ERROR = 1
EXIT_NUMERICAL_FAILURE = 2


class IvuqException(Exception):
    """Base exception for ivuq"""
    def __init__(
        self,
        exit_code: int,
        error_code: str,
        message: str,
        details: Optional[Dict[str, Any]] = None
    ):
        super().__init__(message)
        self.exit_code = exit_code
        self.error_code = error_code
        self.message = message
        self.details = details or {}


class InvalidArgumentException(IvuqException):
    """Bad input value or inconsistent arguments"""
    def __init__(self, message: str = "参数错误", details: Optional[Dict[str, Any]] = None):
        super().__init__(
            exit_code=EXIT_USER_ERROR,
            error_code="INVALID_ARGUMENT",
            message=message,
            details=details
        )


class DegenerateVoxelException(IvuqException):
    """Signal cannot be normalized (b=0 sample not positive)"""
    def __init__(self, message: str = "体素信号退化，无法归一化", details: Optional[Dict[str, Any]] = None):
        super().__init__(
            exit_code=EXIT_NUMERICAL_FAILURE,
            error_code="DEGENERATE_VOXEL",
            message=message,
            details=details
        )


class NumericalFailureException(IvuqException):
    """Non-finite loss or parameters during training"""
    def __init__(self, message: str = "数值计算失败", details: Optional[Dict[str, Any]] = None):
        super().__init__(
            exit_code=EXIT_NUMERICAL_FAILURE,
            error_code="NUMERICAL_FAILURE",
            message=message,
            details=details
        )


class UndefinedUncertaintyException(IvuqException):
    """Epistemic uncertainty needs at least two ensemble members"""
    def __init__(self, message: str = "集成成员少于2个，EU 无定义", details: Optional[Dict[str, Any]] = None):
        super().__init__(
            exit_code=EXIT_USER_ERROR,
            error_code="UNDEFINED_UNCERTAINTY",
            message=message,
            details=details
        )


class UndefinedRcvException(IvuqException):
    """RCV with a zero median"""
    def __init__(self, message: str = "中位数为0，RCV 无定义", details: Optional[Dict[str, Any]] = None):
        super().__init__(
            exit_code=EXIT_NUMERICAL_FAILURE,
            error_code="UNDEFINED_RCV",
            message=message,
            details=details
        )


class EmptyRoiException(IvuqException):
    """ROI mask selects no voxel"""
    def __init__(self, message: str = "ROI 为空", details: Optional[Dict[str, Any]] = None):
        super().__init__(
            exit_code=EXIT_USER_ERROR,
            error_code="EMPTY_ROI",
            message=message,
            details=details
        )


class ScheduleMismatchException(IvuqException):
    """b-value schedules of model and input differ"""
    def __init__(self, message: str = "b 值序列不匹配", details: Optional[Dict[str, Any]] = None):
        super().__init__(
            exit_code=EXIT_USER_ERROR,
            error_code="SCHEDULE_MISMATCH",
            message=message,
            details=details
        )


class MissingTruthException(IvuqException):
    """Phantom-mode evaluation without ground truth"""
    def __init__(self, message: str = "缺少真值数据", details: Optional[Dict[str, Any]] = None):
        super().__init__(
            exit_code=EXIT_USER_ERROR,
            error_code="MISSING_TRUTH",
            message=message,
            details=details
        )


class FileFormatException(IvuqException):
    """File does not match its documented binary layout"""
    def __init__(self, message: str = "文件格式错误", details: Optional[Dict[str, Any]] = None):
        super().__init__(
            exit_code=EXIT_USER_ERROR,
            error_code="INVALID_FILE",
            message=message,
            details=details
        )


class StorageException(IvuqException):
    """Filesystem failure, always with the offending path"""
    def __init__(self, message: str = "文件读写失败", details: Optional[Dict[str, Any]] = None):
        super().__init__(
            exit_code=EXIT_USER_ERROR,
            error_code="IO_ERROR",
            message=message,
            details=details
        )
