import json
import logging
import os
import re
import tempfile

from .errors import ConfigError

logger = logging.getLogger(__name__)

_SAFE_NAME = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._-]*$")


def load_data_from_json(filename):
    """
    Loads a data bank (presets, normalization constants, defaults) from the
    `data` directory that sits next to the `Heightfusion_lib` package.
    Falls back to `./data` when run from the project root.
    """
    lib_dir = os.path.dirname(os.path.abspath(__file__))
    file_path = os.path.join(lib_dir, '..', 'data', filename)

    if not os.path.exists(file_path):
        project_root_data_path = os.path.join('data', filename)
        if os.path.exists(project_root_data_path):
            file_path = project_root_data_path
        else:
            raise ConfigError(f"Data file '{filename}' not found in expected paths.")

    try:
        with open(file_path, 'r', encoding='utf-8') as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Could not decode JSON from data file '{filename}': {e}")


def is_safe_name(name):
    """Tile identifiers must be non-empty and usable as a bare file name."""
    return bool(name) and bool(_SAFE_NAME.match(name))


def atomic_write_bytes(path, payload):
    """Write-then-rename so readers never observe a half-written file."""
    directory = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(directory):
        raise FileNotFoundError(f"Output directory '{directory}' does not exist (writing '{path}')")
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix='.tmp_', suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(payload)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise
    logger.debug("wrote %d bytes to %s", len(payload), path)


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode('utf-8'))
