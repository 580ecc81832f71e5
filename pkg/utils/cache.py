import hashlib
import os
from typing import Any, Optional

import orjson

from utils.logger import setup_logger
from utils.settings import settings

logger = setup_logger("ArtifactCache")


class ArtifactCache:
    def __init__(self, root: Optional[str] = None):
        """디스크 기반 JSON 아티팩트 캐시 (인증된 큐베이처 규칙, 네트 등)"""
        self.root = root or settings.CACHE_DIR

    def _path(self, key: str) -> str:
        digest = hashlib.sha1(key.encode("utf-8")).hexdigest()[:20]
        return os.path.join(self.root, f"{digest}.json")

    def get(self, key: str) -> Optional[Any]:
        """
        캐시 조회
        :param key: 파라미터 문자열 키
        :return: 저장된 값 또는 None
        """
        path = self._path(key)
        if not os.path.exists(path):
            logger.debug(f"ℹ️ 캐시 미스: {key}")
            return None
        try:
            with open(path, "rb") as fh:
                payload = orjson.loads(fh.read())
        except (OSError, orjson.JSONDecodeError) as e:
            logger.error(f"🚨 캐시 읽기 실패: {key}, 오류: {e}")
            return None
        if payload.get("key") != key:
            logger.warning(f"⚠️ 캐시 키 충돌: {key}")
            return None
        return payload.get("value")

    def set(self, key: str, value: Any) -> bool:
        """
        캐시 저장
        :param key: 파라미터 문자열 키
        :param value: JSON 직렬화 가능한 값
        :return: 저장 성공 여부
        """
        path = self._path(key)
        try:
            os.makedirs(self.root, exist_ok=True)
            data = orjson.dumps({"key": key, "value": value}, option=orjson.OPT_SERIALIZE_NUMPY)
            tmp = path + ".tmp"
            with open(tmp, "wb") as fh:
                fh.write(data)
            os.replace(tmp, path)
        except (OSError, TypeError, orjson.JSONEncodeError) as e:
            logger.error(f"🚨 캐시 저장 실패: {key}, 오류: {e}")
            return False
        logger.info(f"✅ 캐시 저장: {key}")
        return True

    def delete(self, key: str) -> bool:
        path = self._path(key)
        if not os.path.exists(path):
            logger.debug(f"ℹ️ 삭제할 캐시 없음: {key}")
            return False
        try:
            os.remove(path)
        except OSError as e:
            logger.error(f"🚨 캐시 삭제 실패: {key}, 오류: {e}")
            return False
        logger.info(f"✅ 캐시 삭제: {key}")
        return True
