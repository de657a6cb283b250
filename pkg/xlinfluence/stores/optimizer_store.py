import logging
from collections import Counter
import numpy as np
from xlinfluence.errors import FormatError
from xlinfluence.stores.base import Store


logger = logging.getLogger("root_logger")


class OptimizerNPZ(Store):
    """
    AdamW state persisted as a .npz bundle.

    Attributes
    ----------
    path: pathlib.Path
        Full path to the npz file.
    schema: list[str]
        Keys expected inside the bundle.

    Example
    --------
    >>> store = OptimizerNPZ('PATH_TO_STATE.npz')
    >>> arrays = store.read()
    >>> m, v = arrays["m"], arrays["v"]
    """
    schema = ["m", "v", "step", "hyper"]

    def write(self, m: np.ndarray, v: np.ndarray, step: int, hyper: np.ndarray) -> None:
        with self._replacing() as f:
            np.savez(f, m=m, v=v, step=np.array(step, dtype=np.int64), hyper=hyper)
        return

    def read(self) -> dict[str, np.ndarray]:
        """
        Raises
        --------
        FileNotFoundError:
            If the npz file is missing.
        FormatError:
            If the keys in the bundle do not match `schema`.
        """
        if not self.path.is_file():
            raise FileNotFoundError(f"The npz file not found at: {self.path}")
        with np.load(self.path) as bundle:
            if Counter(bundle.files) != Counter(self.schema):
                raise FormatError(("Expected the following keys in the .npz file: "
                                   f"{self.schema}, but received {bundle.files}."))
            return {k: bundle[k] for k in self.schema}

    @property
    def is_valid(self) -> bool:
        try:
            with np.load(self.path) as bundle:
                return Counter(bundle.files) == Counter(self.schema)
        except Exception:
            return False
