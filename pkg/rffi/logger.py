"""
Настройка логирования с поддержкой scenario_id.

Каждый сценарий (обучение, атака, эксперимент) получает id, который
автоматически добавляется во все логи через ContextVar + Filter.
"""
import logging
import time
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Iterator, Optional

# scenario_id хранится в contextvars: доступен из любого места
# в рамках сценария без явной передачи
scenario_id_var: ContextVar[Optional[str]] = ContextVar("scenario_id", default=None)


def get_scenario_id() -> Optional[str]:
    """Текущий scenario_id или None."""
    return scenario_id_var.get()


def set_scenario_id(scenario_id: Optional[str]) -> None:
    """Устанавливает scenario_id для текущего контекста."""
    scenario_id_var.set(scenario_id)


class ScenarioIdFilter(logging.Filter):
    """
    Добавляет scenario_id в каждую запись лога.

    Если id не установлен: ставит "-".
    """

    def filter(self, record: logging.LogRecord) -> bool:
        record.scenario_id = scenario_id_var.get() or "-"
        return True


@dataclass
class ScenarioLog:
    """
    Данные для итоговой строки сценария.

    Заполняется по ходу работы и выводится в finally.
    """

    scenario_id: str
    duration_s: float = 0.0
    summary: str = ""
    error: str = ""


def setup_logger(level: str = "info") -> logging.Logger:
    """
    Настраивает логгер "rffi".

    Формат: 2025-01-15 12:30:45 | INFO | [classification/indoor] message
    """
    logger = logging.getLogger("rffi")
    logger.setLevel(getattr(logging, level.upper()))

    # чистим старые хэндлеры если есть (повторный вызов из CLI/тестов)
    logger.handlers.clear()

    handler = logging.StreamHandler()
    formatter = logging.Formatter(
        "%(asctime)s | %(levelname)s | [%(scenario_id)s] %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )
    handler.setFormatter(formatter)
    handler.addFilter(ScenarioIdFilter())
    logger.addHandler(handler)
    return logger


@contextmanager
def log_scenario(logger: logging.Logger, scenario_id: str) -> Iterator[ScenarioLog]:
    """
    Контекст сценария: выставляет scenario_id и меряет время.

    Использование:
        with log_scenario(logger, "contamination/F") as log:
            ...
            log.summary = "auc=0.61"
        # автоматически залогирует с длительностью

    Предыдущий id восстанавливается на выходе: сценарии бывают вложенными.
    """
    token = scenario_id_var.set(scenario_id)
    start = time.perf_counter()
    log = ScenarioLog(scenario_id=scenario_id)
    try:
        yield log
    except Exception as e:
        log.error = f"{type(e).__name__}: {e}"
        raise
    finally:
        log.duration_s = time.perf_counter() - start
        status = f"failed ({log.error})" if log.error else "done"
        logger.info(f"{status} in {log.duration_s:.2f}s {log.summary}".rstrip())
        scenario_id_var.reset(token)
