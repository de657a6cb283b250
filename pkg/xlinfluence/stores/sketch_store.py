import json
import struct
import logging
import numpy as np
from xlinfluence.enums import FILES
from xlinfluence.errors import FormatError
from xlinfluence.stores.base import Store


logger = logging.getLogger("root_logger")
HEADER = struct.Struct("<4sIIQqBI")
DTYPES = {4: "<f4", 8: "<f8"}


class SketchFile(Store):
    """
    Gradient sketches of one corpus at one checkpoint.

    Header: magic, version, sketch dim d (uint32), row count (uint64),
    projector seed (int64), bytes per value (uint8), length of a JSON block
    (uint32) holding the provenance hashes. Rows follow in train-id order,
    row-major.
    """

    def write(self, sketches: np.ndarray, seed: int, meta: dict, dtype: str = "float32") -> None:
        if sketches.ndim != 2:
            raise ValueError(f"Sketches must be 2-D (count x d), got shape {sketches.shape}")
        width = np.dtype(dtype).itemsize
        rows = np.ascontiguousarray(sketches, dtype=DTYPES[width])
        block = json.dumps(meta, sort_keys=True).encode("utf-8")
        with self._replacing() as f:
            f.write(HEADER.pack(FILES.SKETCH_MAGIC.value, FILES.FORMAT_VERSION.value,
                                rows.shape[1], rows.shape[0], seed, width, len(block)))
            f.write(block)
            f.write(rows.tobytes())
        return

    def header(self) -> dict:
        with open(self.path, "rb") as f:
            head = f.read(HEADER.size)
            if len(head) < HEADER.size:
                raise FormatError(f"Truncated sketch file: {self.path}")
            magic, version, d, count, seed, width, block_len = HEADER.unpack(head)
            if magic != FILES.SKETCH_MAGIC.value or version != FILES.FORMAT_VERSION.value:
                raise FormatError(f"Not a sketch file (magic {magic!r}, version {version}): {self.path}")
            if width not in DTYPES:
                raise FormatError(f"Unsupported sketch value width {width} in {self.path}")
            meta = json.loads(f.read(block_len).decode("utf-8"))
        return {"d": d, "count": count, "seed": seed, "width": width,
                "meta": meta, "offset": HEADER.size + block_len}

    def read(self) -> tuple[np.ndarray, dict]:
        """
        Return the sketch rows as float64 and the header.
        """
        if not self.path.is_file():
            raise FileNotFoundError(f"Sketch file not found at: {self.path}")
        head = self.header()
        rows = np.fromfile(self.path, dtype=DTYPES[head["width"]],
                           count=head["count"] * head["d"], offset=head["offset"])
        if rows.size != head["count"] * head["d"]:
            raise FormatError(f"Truncated sketch payload in {self.path}")
        return rows.reshape(head["count"], head["d"]).astype(np.float64), head

    @property
    def is_valid(self) -> bool:
        try:
            self.header()
        except (OSError, FormatError, ValueError, struct.error):
            return False
        return True
