import logging
from pathlib import Path
from typing import Union

from tenacity import RetryError, retry, stop_after_attempt, wait_exponential

from gcfdm.config import settings
from gcfdm.errors import StorageError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


@retry(
    stop=stop_after_attempt(settings.WRITE_RETRIES),
    wait=wait_exponential(multiplier=0.1, min=0.1, max=2),
)
def _write_with_retry(path: Path, payload: Union[str, bytes]) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if isinstance(payload, bytes):
            path.write_bytes(payload)
        else:
            path.write_text(payload)
    except OSError as e:
        logger.warning(f"Write to {path} failed: {str(e)}")
        raise  # Re-raise for retry


def write_file(path: PathLike, payload: Union[str, bytes]) -> Path:
    """
    Write text or bytes, retrying transient failures

    Raises:
        StorageError: if every attempt failed
    """
    path = Path(path)
    try:
        _write_with_retry(path, payload)
    except RetryError as retry_error:
        error_msg = f"Failed to write {path} after retries: {str(retry_error.last_attempt.exception())}"
        logger.error(error_msg)
        raise StorageError(error_msg)
    return path
