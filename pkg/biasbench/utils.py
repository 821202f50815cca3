import hashlib
import logging
import traceback
from collections.abc import Callable, Iterable
from concurrent.futures import ThreadPoolExecutor
from functools import lru_cache
from pathlib import Path
from typing import TypeVar

import ujson
from pydantic import BaseModel

from .models import BenchConfig

LOGGER = logging.getLogger(__name__)

T = TypeVar('T')
R = TypeVar('R')


class DuplicateFilter(logging.Filter):
    """
    Logging filter to prevent repeated warnings from flooding the log.
    When set, repeated log messages are blocked.
    This will not block alternating messages, and is module-specific.
    """

    def filter(self, record):
        current_log = (record.module, record.levelno, record.msg)
        if current_log != getattr(self, 'last_log', None):
            self.last_log = current_log
            return True
        return False


@lru_cache
def get_config() -> BenchConfig:  # pragma: no cover
    return BenchConfig()


def strex(ex: Exception, tb=False):
    """
    Generic formatter for exceptions.
    A formatted traceback is included if `tb=True`.
    """
    msg = f'{type(ex).__name__}({str(ex)})'
    if tb:
        trace = ''.join(traceback.format_exception(None, ex, ex.__traceback__))
        return f'{msg}\n\n{trace}'
    else:
        return msg


def canonical_json(value: BaseModel | dict | list) -> str:
    """Serializes to JSON with sorted keys, so equal values yield equal text."""
    if isinstance(value, BaseModel):
        value = value.model_dump(mode='json')
    return ujson.dumps(value, sort_keys=True, ensure_ascii=False, escape_forward_slashes=False)


def config_hash(value: BaseModel | dict) -> str:
    return hashlib.sha256(canonical_json(value).encode()).hexdigest()


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def write_json(path: Path, value: BaseModel | dict | list):
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(value, BaseModel):
        value = value.model_dump(mode='json')
    text = ujson.dumps(value, sort_keys=True, indent=2, ensure_ascii=False, escape_forward_slashes=False)
    path.write_text(text + '\n', encoding='utf-8')


def read_json(path: Path) -> dict | list:
    return ujson.loads(path.read_text(encoding='utf-8'))


def fan_out(func: Callable[[T], R], items: Iterable[T]) -> list[R]:
    """Applies `func` to every item, in order.

    Work is spread over `workers` threads when configured.
    Results are always returned in input order.
    """
    items = list(items)
    workers = get_config().workers
    if workers <= 1 or len(items) <= 1:
        return [func(v) for v in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, items))
