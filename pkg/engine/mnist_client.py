"""
HTTP client for fetching the MNIST IDX files
"""
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import requests

from .errors import DownloadError

logger = logging.getLogger(__name__)

MNIST_FILES = (
    "train-images-idx3-ubyte.gz",
    "train-labels-idx1-ubyte.gz",
    "t10k-images-idx3-ubyte.gz",
    "t10k-labels-idx1-ubyte.gz",
)

DEFAULT_MIRRORS = (
    "https://ossci-datasets.s3.amazonaws.com/mnist",
    "https://storage.googleapis.com/cvdf-datasets/mnist",
)


class MnistClient:
    """Downloads MNIST files from the first mirror that answers"""

    def __init__(self, mirrors: Optional[Sequence[str]] = None, timeout: float = 30.0,
                 session: Optional[requests.Session] = None):
        self.mirrors: List[str] = [m.rstrip("/") for m in (mirrors or DEFAULT_MIRRORS)]
        self.timeout = timeout
        self.session = session or requests.Session()

    @classmethod
    def from_sources(cls, sources: Dict) -> "MnistClient":
        """
        Build a client from the `mnist` block of configs/sources.yaml

        Args:
            sources: Parsed sources file (may be empty)

        Returns:
            MnistClient using the configured mirrors, or the built-ins
        """
        block = (sources or {}).get("mnist", {})
        return cls(mirrors=block.get("mirrors"), timeout=float(block.get("timeout", 30.0)))

    def fetch(self, filename: str) -> bytes:
        """
        Fetch one file, trying each mirror in turn

        Raises:
            DownloadError: when every mirror fails
        """
        failures = []
        for mirror in self.mirrors:
            url = f"{mirror}/{filename}"
            try:
                response = self.session.get(url, timeout=self.timeout)
                response.raise_for_status()
                return response.content
            except requests.exceptions.RequestException as e:
                logger.warning("Mirror failed for %s: %s", url, e)
                failures.append(url)
        raise DownloadError(f"could not fetch {filename} from any of {failures}")

    def download(self, dest, overwrite: bool = False) -> List[Path]:
        """Store the four MNIST files under `dest`; existing files are kept"""
        dest = Path(dest)
        dest.mkdir(parents=True, exist_ok=True)
        written = []
        for filename in MNIST_FILES:
            target = dest / filename
            if target.exists() and not overwrite:
                logger.info("%s already present", target)
            else:
                target.write_bytes(self.fetch(filename))
                logger.info("Downloaded %s", target)
            written.append(target)
        return written
