"""Boundary-confidence temporal action detection at desk scale."""
from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("tadconf")
except PackageNotFoundError:
    __version__ = "0.0.0"
