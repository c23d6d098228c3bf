import io
from pathlib import Path
from typing import Dict, Iterable, Optional

from pydantic_settings import BaseSettings, SettingsConfigDict
from dotenv import load_dotenv
from dotenv.parser import Binding, parse_stream


load_dotenv()  # Load environment variables from .env file


class Settings(BaseSettings):

    # Environment Settings - either "dev", "staging", or "production"
    PYTHON_ENV: str = "dev"

    # Application settings
    APP_NAME: str = "pocketdiff"
    APP_DESCRIPTION: str = "Pocket-conditioned hybrid diffusion with adaptive condition sampling"
    APP_VERSION: str = "0.1.0"
    DEBUG: bool = False

    # Logging
    LOG_LEVEL: str = "INFO"
    LOG_DIR: str = "logs"
    LOG_JSON: bool = True

    # Thread pool size for sampling and corpus generation
    NUM_WORKERS: int = 1

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )


Config = Settings()


def _binding_line(binding: Binding) -> int:
    text = binding.original.string
    return binding.original.line + text[: len(text) - len(text.lstrip())].count("\n")


def parse_key_value_pairs(lines: Iterable[str], source: str = "<inline>") -> Dict[str, str]:
    """
    Parse flat ``key=value`` text.

    Lines go through python-dotenv's parser, which handles comments, blank lines,
    quoting and ``export`` prefixes. A value may carry further comma-separated pairs
    (``anneal=arc,r=2``); its first chunk belongs to the line's key. Later keys override
    earlier ones.

    Args:
        lines: Raw text lines.
        source: Name used in error messages (usually the file path).

    Returns:
        Dict[str, str]: Raw string values keyed by config key.
    """
    from pocketdiff.api.dependencies.custom_exception import ConfigKeyError

    values: Dict[str, str] = {}
    for binding in parse_stream(io.StringIO("\n".join(lines))):
        if binding.key is None and not binding.error:
            continue
        lineno = _binding_line(binding)
        if binding.error or binding.value is None:
            raise ConfigKeyError(
                f"{source}:{lineno}: expected key=value, got '{binding.original.string.strip()}'",
                errors={"source": source, "line": lineno},
            )
        first, *rest = binding.value.split(",")
        values[binding.key.strip()] = first.strip()
        for chunk in rest:
            chunk = chunk.strip()
            if not chunk:
                continue
            if "=" not in chunk:
                raise ConfigKeyError(
                    f"{source}:{lineno}: expected key=value, got '{chunk}'",
                    errors={"source": source, "line": lineno},
                )
            key, value = chunk.split("=", 1)
            values[key.strip()] = value.strip()
    return values


def load_key_value_file(path: Optional[Path]) -> Dict[str, str]:
    """Read a ``key=value`` config file; a missing path argument yields an empty dict."""
    from pocketdiff.api.dependencies.custom_exception import ConfigKeyError

    if path is None:
        return {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigKeyError(f"Cannot read config file {path}: {e}", errors={"path": str(path)})
    return parse_key_value_pairs(text.splitlines(), source=str(path))


def dump_key_values(values: Dict[str, object]) -> str:
    """Render resolved config values as ``key=value`` lines, sorted by key."""
    return "".join(f"{key}={values[key]}\n" for key in sorted(values))
