"""
Ошибки тестбенча.

Наследуемся от встроенных исключений, чтобы снаружи можно было
ловить и наш класс, и обычный ValueError.
"""


class RffiError(Exception):
    """Базовая ошибка пакета."""


class ConfigError(RffiError, ValueError):
    """Невалидный конфиг или параметр."""


class DataError(RffiError, ValueError):
    """Проблема с входными данными (пустые выборки, не те формы)."""


class FormatError(DataError):
    """Битый файл модели/датасета."""


class UndefinedCorrelationError(DataError):
    """Корреляция не определена: одна из последовательностей константна."""


class FitError(DataError):
    """Не удалось обучить one-class границу."""


class MetricError(RffiError, ValueError):
    """Метрику нельзя посчитать (один класс, пустой вход)."""


# коды выхода CLI
EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_METRIC = 5


def exit_code_for(error: BaseException) -> int:
    """Код выхода по типу ошибки. Порядок важен, FormatError является DataError."""
    if isinstance(error, ConfigError):
        return EXIT_CONFIG
    if isinstance(error, DataError):
        return EXIT_DATA
    if isinstance(error, MetricError):
        return EXIT_METRIC
    return EXIT_UNEXPECTED
