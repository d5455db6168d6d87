from typing import Final

from divlab.errors import LabError

version: Final = "0.1.0"

__all__ = ["LabError", "version"]
