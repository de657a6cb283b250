import struct
import logging
import numpy as np
from xlinfluence.enums import FILES
from xlinfluence.errors import FormatError
from xlinfluence.stores.base import Store


logger = logging.getLogger("root_logger")
HEADER = struct.Struct("<4sII")
COUNT = struct.Struct("<Q")


class ParamsFile(Store):
    """
    Little-endian binary file holding one flat parameter vector.

    Layout: magic (4 bytes), format version (uint32), length of the config
    JSON block (uint32), the UTF-8 config JSON, parameter count (uint64), then
    the float64 values.

    Example
    --------
    >>> pf = ParamsFile('PATH_TO.params')
    >>> config_json, values = pf.read()
    """

    def write(self, config_json: str, values: np.ndarray) -> None:
        block = config_json.encode("utf-8")
        values = np.ascontiguousarray(values, dtype="<f8")
        with self._replacing() as f:
            f.write(HEADER.pack(FILES.PARAMS_MAGIC.value, FILES.FORMAT_VERSION.value, len(block)))
            f.write(block)
            f.write(COUNT.pack(values.size))
            f.write(values.tobytes())
        return

    def read(self) -> tuple[str, np.ndarray]:
        """
        Raises
        --------
        FileNotFoundError:
            If the file does not exist.
        FormatError:
            On a bad magic, unknown version or truncated payload.

        Returns
        --------
        tuple[str, np.ndarray]
            The config JSON text and the float64 values.
        """
        if not self.path.is_file():
            raise FileNotFoundError(f"Parameters file not found at: {self.path}")
        data = self.path.read_bytes()
        if len(data) < HEADER.size:
            raise FormatError(f"Truncated parameters file: {self.path}")
        magic, version, block_len = HEADER.unpack_from(data, 0)
        if magic != FILES.PARAMS_MAGIC.value:
            raise FormatError(f"Bad magic {magic!r} in {self.path}")
        if version != FILES.FORMAT_VERSION.value:
            raise FormatError(f"Unsupported parameters format version {version} in {self.path}")
        pos = HEADER.size
        config_json = data[pos:pos + block_len].decode("utf-8")
        pos += block_len
        (count,) = COUNT.unpack_from(data, pos)
        pos += COUNT.size
        if len(data) - pos != 8 * count:
            raise FormatError(f"Expected {count} float64 values in {self.path}, "
                              f"found {(len(data) - pos) / 8:g}")
        values = np.frombuffer(data, dtype="<f8", count=count, offset=pos).astype(np.float64)
        return config_json, values

    @property
    def is_valid(self) -> bool:
        try:
            with open(self.path, "rb") as f:
                head = f.read(HEADER.size)
            magic, version, _ = HEADER.unpack(head)
        except (OSError, struct.error):
            return False
        return magic == FILES.PARAMS_MAGIC.value and version == FILES.FORMAT_VERSION.value
