"""Deterministic simulation of an SPDM-protected UEFI boot."""
from .codes import StatusCode, format_code

__version__ = "0.1.0"
__all__ = ["StatusCode", "format_code", "__version__"]
