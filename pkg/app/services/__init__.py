import hashlib
import os
from importlib import metadata


def hash_bytes_sha256(contents: bytes) -> str:
    """
    Generate a SHA-256 digest for provenance headers and stored uploads.

    Args:
        contents (bytes): The file contents to hash.

    Returns:
        str: Hex digest.
    """
    return hashlib.sha256(contents).hexdigest()


def package_version() -> str:
    """Installed package version, overridable through APP_VERSION."""
    default = "0.0.0"
    try:
        default = metadata.version("multitau-dls")
    except metadata.PackageNotFoundError:
        pass
    return os.getenv("APP_VERSION", default)
