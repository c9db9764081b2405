"""
MNIST downloader.

Fetches the gzipped IDX files from a mirror into the data directory.
Mirror and directory come from settings or the MNIST_BASE_URL /
PLASTICITY_DATA_DIR environment variables.
"""

import logging
import os
from pathlib import Path
from typing import List, Optional

import requests

from ..errors import DataError
from .pmnist import TRAIN_IMAGES, TRAIN_LABELS


logger = logging.getLogger(__name__)

DEFAULT_BASE_URL = "https://ossci-datasets.s3.amazonaws.com/mnist"

MNIST_FILES = [
    f"{TRAIN_IMAGES}.gz",
    f"{TRAIN_LABELS}.gz",
    "t10k-images-idx3-ubyte.gz",
    "t10k-labels-idx1-ubyte.gz",
]


def fetch_file(url: str, destination: Path, timeout: int = 60) -> Path:
    """Download one file, writing it only once the transfer completed"""
    try:
        resp = requests.get(url, timeout=timeout)
        resp.raise_for_status()
    except requests.RequestException as e:
        raise DataError('download', f"failed to fetch {url}: {e}", str(destination))

    tmp = destination.with_suffix(destination.suffix + '.part')
    tmp.write_bytes(resp.content)
    tmp.replace(destination)
    return destination


def fetch_mnist(data_dir: Path, base_url: Optional[str] = None,
                files: Optional[List[str]] = None, force: bool = False) -> List[Path]:
    """
    Download the MNIST IDX files that are not already present.

    Returns:
        Paths of all requested files
    """
    base_url = (base_url or os.getenv("MNIST_BASE_URL") or DEFAULT_BASE_URL).rstrip('/')
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)

    paths = []
    for name in files or MNIST_FILES:
        path = data_dir / name
        if path.exists() and not force:
            logger.info("Already present: %s", path)
        else:
            logger.info("Fetching %s/%s", base_url, name)
            fetch_file(f"{base_url}/{name}", path)
        paths.append(path)
    return paths
