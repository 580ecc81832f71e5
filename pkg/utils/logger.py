import logging
import os
import sys
import time
from contextlib import contextmanager
from logging.handlers import RotatingFileHandler
from typing import Iterator, Optional

from utils.settings import settings

_FORMAT = "%(asctime)s | %(levelname)-8s | %(name)s:%(lineno)d - %(message)s"
_DATEFMT = "%Y-%m-%d %H:%M:%S"


def _resolve_level(level: Optional[int]) -> int:
    if level is not None:
        return level
    resolved = logging.getLevelName(settings.LOG_LEVEL.upper())
    return resolved if isinstance(resolved, int) else logging.INFO


def setup_logger(name: str, log_file: Optional[str] = None, level: Optional[int] = None) -> logging.Logger:
    """
    서비스별 로거 생성: 콘솔 + 회전 파일 핸들러
    :param name: 로거 이름 (서비스 이름, 예: "Cubature")
    :param log_file: 로그 파일 경로 (기본값: settings.LOG_FILE)
    :param level: 로그 레벨 (기본값: settings.LOG_LEVEL)
    :return: 설정된 로거 객체
    """
    logger = logging.getLogger(f"newtframe.{name}")

    # 이미 핸들러가 있으면 그대로 사용 (중복 출력 방지)
    if logger.handlers:
        return logger

    level = _resolve_level(level)
    logger.setLevel(level)
    formatter = logging.Formatter(_FORMAT, datefmt=_DATEFMT)

    log_file = log_file or settings.LOG_FILE
    try:
        directory = os.path.dirname(log_file)
        if directory:
            os.makedirs(directory, exist_ok=True)
        file_handler = RotatingFileHandler(
            log_file,
            maxBytes=10 * 1024 * 1024,  # 10MB
            backupCount=5,
            encoding="utf-8",
        )
        file_handler.setFormatter(formatter)
        file_handler.setLevel(level)
        logger.addHandler(file_handler)
    except (OSError, ValueError) as e:
        # 파일을 열 수 없으면 콘솔만 사용
        logging.getLogger(__name__).warning(f"🚨 로그 파일 설정 실패: {e}. 콘솔 로깅만 사용됩니다.")

    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setFormatter(formatter)
    console_handler.setLevel(level)
    logger.addHandler(console_handler)

    logger.propagate = False
    return logger


@contextmanager
def log_elapsed(logger: logging.Logger, label: str) -> Iterator[None]:
    """⏱️ 단계별 소요 시간 기록"""
    start = time.perf_counter()
    logger.info(f"🔍 {label} 시작")
    try:
        yield
    except Exception:
        logger.error(f"🚨 {label} 실패 ({time.perf_counter() - start:.2f}s)")
        raise
    logger.info(f"✅ {label} 완료 ({time.perf_counter() - start:.2f}s)")
