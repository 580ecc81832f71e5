from pydantic_settings import BaseSettings

class Settings(BaseSettings):
    """🚀 newtframe 실행 환경 변수 설정"""

    # ✅ 병렬 처리 상한 (joblib n_jobs)
    NEWTFRAME_THREADS: int = 1

    # ✅ 출력 / 캐시 경로
    OUTPUT_DIR: str = "runs"
    CACHE_DIR: str = ".newtframe_cache"

    # ✅ 로그 설정
    LOG_FILE: str = "logs/newtframe.log"
    LOG_LEVEL: str = "INFO"

    class Config:
        env_file = ".env"
        env_file_encoding = "utf-8"
        extra = "forbid"  # ❌ 정의되지 않은 변수는 허용되지 않음

# 설정 인스턴스 생성
settings = Settings()
