import hashlib
import json
import os
import pathlib
import tempfile
from typing import Iterable, List, Optional, Set, Union

from pydantic import BaseModel

from voxfuse.errors import KittiFormatError


def parse_float_fields(tokens: Iterable[str], line: Optional[int] = None) -> List[float]:
    """
    Convert whitespace separated tokens to floats

    input: ['7.215377e+02', '0.0', ...]
    output: [721.5377, 0.0, ...]
    """
    values = []
    for token in tokens:
        try:
            values.append(float(token))
        except ValueError:
            raise KittiFormatError(f"malformed float '{token}'", line=line) from None
    return values


def format_float(value: float) -> str:
    """
    Shortest decimal string that round-trips to the same float
    input: 1.8900000000000001
    output: '1.8900000000000001'
    """
    value = float(value)
    if value == 0.0:
        # keep -0.0 out of label files
        return "0.0"
    return repr(value)


def none_to_empty_string(value) -> str:
    """
    Convert value to string and None to ''
    """
    value = "" if value is None else value
    return str(value)


def write_output_to_file(file_name: Union[str, pathlib.Path], output: Union[str, bytes]):
    """
    Write to a temporary file next to the destination, then move it into place
    """
    path = pathlib.Path(file_name)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = output.encode("utf-8") if isinstance(output, str) else output
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def canonical_json(data) -> str:
    """Deterministic JSON text for manifests and reports"""
    return json.dumps(data, sort_keys=True, indent=2) + "\n"


def config_hash(model: BaseModel, exclude: Optional[Set[str]] = None) -> str:
    """SHA-256 of the canonical JSON dump of a config model"""
    payload = json.dumps(model.model_dump(mode="json", exclude=exclude), sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def derive_seed(seed: int, *keys) -> int:
    """
    Per-item seed from a run seed and identifying keys (scene id, split name...)
    Independent of processing order, so worker pools stay deterministic.
    """
    text = ":".join([str(seed), *(str(k) for k in keys)])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")
