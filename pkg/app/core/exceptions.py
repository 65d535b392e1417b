"""
自定义异常类
============

定义应用级别的异常类，提供统一的错误码和上下文信息。
包含地图解析异常、采样异常、训练异常、数值异常等。

设计思路:
1. 所有异常继承 CityScoutException，携带 error_code 和 details
2. 地图文件错误带行号，便于定位
3. "无路径"等正常结果不使用异常表示
4. 集成日志记录
5. CLI 根据异常类型映射退出码
"""

from typing import Any, Dict, Optional

import structlog

# 配置日志
logger = structlog.get_logger(__name__)


class CityScoutException(Exception):
    """应用基础异常类"""

    def __init__(
        self,
        message: str,
        error_code: str = "GENERAL_ERROR",
        details: Optional[Dict[str, Any]] = None,
    ):
        self.message = message
        self.error_code = error_code
        self.details = details or {}
        super().__init__(self.message)


class ValidationError(CityScoutException):
    """数据验证异常"""

    def __init__(
        self,
        message: str = "Validation failed",
        field: Optional[str] = None,
        value: Optional[Any] = None,
        error_code: str = "VALIDATION_ERROR",
    ):
        details = {}
        if field:
            details["field"] = field
        if value is not None:
            details["value"] = str(value)

        super().__init__(message=message, error_code=error_code, details=details)


class ConfigError(ValidationError):
    """实验配置异常"""

    def __init__(self, message: str = "Invalid configuration", field: Optional[str] = None):
        super().__init__(message=message, field=field, error_code="CONFIG_ERROR")


class MapParseError(CityScoutException):
    """地图文件解析异常"""

    def __init__(
        self,
        message: str = "Malformed map file",
        path: Optional[str] = None,
        line: Optional[int] = None,
        column: Optional[int] = None,
    ):
        details: Dict[str, Any] = {}
        if path:
            details["path"] = path
        if line is not None:
            details["line"] = line
        if column is not None:
            details["column"] = column

        if line is not None:
            message = f"{message} (line {line})"

        super().__init__(message=message, error_code="MAP_PARSE_ERROR", details=details)
        self.line = line


class MapValidationError(CityScoutException):
    """地图内容不满足约束"""

    def __init__(
        self,
        message: str = "Map violates geometric invariants",
        building: Optional[int] = None,
        line: Optional[int] = None,
    ):
        details: Dict[str, Any] = {}
        if building is not None:
            details["building"] = building
        if line is not None:
            details["line"] = line
            message = f"{message} (line {line})"

        super().__init__(message=message, error_code="MAP_VALIDATION_ERROR", details=details)
        self.line = line


class SamplingExhaustedError(CityScoutException):
    """拒绝采样达到迭代上限"""

    def __init__(self, message: str = "Free-space sampling exhausted", attempts: Optional[int] = None):
        details = {}
        if attempts is not None:
            details["attempts"] = attempts
        super().__init__(message=message, error_code="SAMPLING_EXHAUSTED", details=details)


class EmptyDatasetError(CityScoutException):
    """训练集为空"""

    def __init__(self, member: Optional[int] = None):
        details = {}
        if member is not None:
            details["member"] = member
        super().__init__(
            message="Cannot train on an empty dataset",
            error_code="EMPTY_DATASET",
            details=details,
        )


class SingularSystemError(CityScoutException):
    """线性系统奇异（例如轨迹时长过短）"""

    def __init__(self, message: str = "Singular boundary-value system", duration: Optional[float] = None):
        details = {}
        if duration is not None:
            details["duration"] = duration
        super().__init__(message=message, error_code="SINGULAR_SYSTEM", details=details)


class DimensionMismatchError(CityScoutException):
    """数组维度不匹配"""

    def __init__(self, expected: Any, actual: Any):
        super().__init__(
            message=f"Dimension mismatch: expected {expected}, got {actual}",
            error_code="DIMENSION_MISMATCH",
            details={"expected": str(expected), "actual": str(actual)},
        )


class DomainError(CityScoutException):
    """数值参数超出定义域"""

    def __init__(self, message: str = "Argument outside domain", value: Optional[Any] = None):
        details = {}
        if value is not None:
            details["value"] = str(value)
        super().__init__(message=message, error_code="DOMAIN_ERROR", details=details)


class CheckpointError(CityScoutException):
    """检查点文件读写异常"""

    def __init__(self, message: str = "Invalid checkpoint", path: Optional[str] = None):
        details = {}
        if path:
            details["path"] = path
        super().__init__(message=message, error_code="CHECKPOINT_ERROR", details=details)


class OutputError(CityScoutException):
    """输出文件读写失败"""

    def __init__(self, message: str = "Cannot write output", path: Optional[str] = None):
        details = {}
        if path:
            details["path"] = path
        super().__init__(message=message, error_code="OUTPUT_ERROR", details=details)


class EpisodeAbortedError(CityScoutException):
    """实验中途失败，部分日志已落盘"""

    def __init__(self, message: str, partial_log: Optional[str] = None, step: Optional[int] = None):
        details: Dict[str, Any] = {}
        if partial_log:
            details["partial_log"] = partial_log
        if step is not None:
            details["step"] = step
        super().__init__(message=message, error_code="EPISODE_ABORTED", details=details)


def log_exception(exception: Exception, context: Optional[Dict[str, Any]] = None) -> None:
    """
    记录异常日志

    Args:
        exception: 异常对象
        context: 上下文信息
    """
    context = context or {}

    if isinstance(exception, CityScoutException):
        logger.error(
            "Application exception occurred",
            error_code=exception.error_code,
            message=exception.message,
            details=exception.details,
            **context,
        )
    else:
        logger.error(
            "Unexpected exception occurred",
            exception_type=type(exception).__name__,
            message=str(exception),
            **context,
        )


def exit_code_for(exception: Exception) -> int:
    """
    将异常映射为 CLI 退出码

    Returns:
        int: 1 表示配置/输入错误，2 表示运行期中止
    """
    if isinstance(exception, (ConfigError, MapParseError, MapValidationError)):
        return 1
    return 2
