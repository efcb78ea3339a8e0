import logging
import logging.config
import os
import sys
import tempfile
from pathlib import Path

import numpy as np
from dotenv import load_dotenv
from tqdm import tqdm

# Load environment variables from .env file
load_dotenv()

HERE = Path(__file__).resolve().parent

DEFAULT_SEED = 20240101
DEFAULT_LOG_CONFIG = HERE / 'logging.ini'

logger = logging.getLogger('bao.config')


def env_seed(fallback=None):
    raw = os.environ.get('BAO_SEED')
    if raw is None or raw.strip() == '':
        return fallback
    try:
        return int(raw)
    except ValueError:
        raise ValueError(f'BAO_SEED must be an integer, got {raw!r}')


def env_threads(fallback=1):
    raw = os.environ.get('BAO_THREADS')
    if not raw:
        return fallback
    try:
        threads = int(raw)
    except ValueError:
        raise ValueError(f'BAO_THREADS must be an integer, got {raw!r}')
    return max(threads, 1)


def setup_logging(path=None, level=None):
    """Configure logging from an ini file, like the migration environment does."""
    path = Path(path or os.environ.get('BAO_LOG_CONFIG', DEFAULT_LOG_CONFIG))
    if path.exists():
        logging.config.fileConfig(path, disable_existing_loggers=False)
    else:
        logging.basicConfig(format='%(levelname)-5.5s [%(name)s] %(message)s')

    level = level or os.environ.get('BAO_LOG_LEVEL')
    if level:
        logging.getLogger('bao').setLevel(level.upper())
    logger.debug('logging configured from %s', path)


def make_rng(seed, *keys):
    """Counter-based stream keyed by (seed, *keys); streams never overlap."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, keys)])))


def progress(iterable=None, **kwargs):
    """tqdm bar on stderr, silent when stderr is not a terminal."""
    kwargs.setdefault('disable', not sys.stderr.isatty())
    kwargs.setdefault('leave', False)
    return tqdm(iterable, file=sys.stderr, **kwargs)


def atomic_write(path, payload):
    """Write text or bytes through a temporary file in the target directory."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = payload.encode('utf-8') if isinstance(payload, str) else payload
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f'.{path.name}.', suffix='.tmp')
    try:
        with os.fdopen(fd, 'wb') as handle:
            handle.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path
