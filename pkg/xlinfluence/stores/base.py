import os
import pathlib
from abc import ABC, abstractmethod
from contextlib import contextmanager
from typing import BinaryIO, Iterator, Union


class Store(ABC):
    """
    A single on-disk artifact with a recognizable format.

    Attributes
    ----------
    path: pathlib.Path
        Location of the artifact.
    """

    def __init__(self, path: Union[str, os.PathLike]) -> None:
        self.path = pathlib.Path(path)

    @contextmanager
    def _replacing(self) -> Iterator[BinaryIO]:
        """
        Open a sibling temp file for writing and move it over `path` on success.
        """
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_name(self.path.name + ".tmp")
        try:
            with open(tmp, "wb") as f:
                yield f
            os.replace(tmp, self.path)
        finally:
            if tmp.exists():
                tmp.unlink()

    @abstractmethod
    def read(self):
        ...

    @abstractmethod
    def write(self, *args, **kwargs) -> None:
        ...

    @property
    @abstractmethod
    def is_valid(self) -> bool:
        ...
