from typing import Optional


class VoxfuseError(Exception):
    """Base class for exceptions for this program"""

    pass


class KittiFormatError(VoxfuseError, ValueError):
    """
    Malformed KITTI artifact (point blob, calibration, label or pixmap)
    """

    def __init__(
        self,
        msg: str,
        line: Optional[int] = None,
        index: Optional[int] = None,
        key: Optional[str] = None,
    ):
        self.line = line
        self.index = index
        self.key = key
        where = []
        if line is not None:
            where.append(f"line {line}")
        if index is not None:
            where.append(f"index {index}")
        if key is not None:
            where.append(f"key '{key}'")
        if where:
            msg = f"{msg} ({', '.join(where)})"
        super().__init__(msg)


class ContractError(VoxfuseError, ValueError):
    pass


class SchemaError(VoxfuseError):
    pass


class DatabaseMissingError(VoxfuseError, FileNotFoundError):
    pass
