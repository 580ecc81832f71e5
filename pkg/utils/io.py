import os
from typing import Any, Iterable, Mapping, Optional

import orjson
import pandas as pd

from utils.errors import MissingArtifactError

_JSON_OPTIONS = orjson.OPT_SORT_KEYS | orjson.OPT_INDENT_2 | orjson.OPT_SERIALIZE_NUMPY


def write_json(path: str, payload: Any) -> str:
    """정렬된 키로 JSON 저장 (재실행 시 바이트 단위 동일)"""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(orjson.dumps(payload, option=_JSON_OPTIONS))
    return path


def read_json(path: str) -> Any:
    if not os.path.exists(path):
        raise MissingArtifactError(path)
    with open(path, "rb") as fh:
        return orjson.loads(fh.read())


def write_csv(path: str, rows: Iterable[Mapping[str, Any]], config: Optional[Mapping[str, Any]] = None) -> str:
    """행 목록을 CSV로 저장, 설정 echo는 '# ' 주석 헤더로 기록"""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    frame = pd.DataFrame(list(rows))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if config:
            fh.write("# config " + orjson.dumps(dict(config), option=orjson.OPT_SORT_KEYS).decode() + "\n")
        frame.to_csv(fh, index=False)
    return path


def read_csv(path: str) -> pd.DataFrame:
    if not os.path.exists(path):
        raise MissingArtifactError(path)
    return pd.read_csv(path, comment="#")
