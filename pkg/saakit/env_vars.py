from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="SAAKIT_")

    JOBS: int = 1
    LOG_LEVEL: str = "INFO"


settings = Settings()
