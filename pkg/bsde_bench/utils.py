"""Utility functions for logging, hashing, number formatting and thread counts."""

import hashlib
import logging
import os
from typing import Optional

logging.basicConfig(
    level=os.environ.get('BSDE_LOG_LEVEL', 'INFO').upper(),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)

def get_logger(name: str) -> logging.Logger:
    """Get a logger with the specified name."""
    return logging.getLogger(name)

logger = get_logger(__name__)


def sha256_hash(data: bytes) -> str:
    """Compute SHA256 hash of data."""
    return hashlib.sha256(data).hexdigest()


def sha256_text(text: str) -> str:
    """Compute SHA256 hash of text."""
    return sha256_hash(text.encode('utf-8'))


def format_float(value: Optional[float]) -> str:
    """Format a float with 17 significant digits (round-trips exactly)."""
    if value is None:
        return ''
    return f"{float(value):.17g}"


def resolve_threads(threads: Optional[int] = None) -> int:
    """Thread count from the argument, BSDE_THREADS, or the CPU count."""
    if threads is None:
        env_threads = os.environ.get('BSDE_THREADS')
        threads = int(env_threads) if env_threads else (os.cpu_count() or 1)
    if threads < 1:
        logger.warning(f"Thread count {threads} < 1, using 1")
        return 1
    return threads
