import os
import json
import logging
from typing import Optional, Union
import pandas as pd


logger = logging.getLogger("root_logger")


def sidecar_path(csv_path: Union[str, os.PathLike]) -> str:
    return os.path.splitext(str(csv_path))[0] + ".json"


def write_table(df: pd.DataFrame,
                csv_path: Union[str, os.PathLike],
                meta: Optional[dict] = None,
                index: bool = True
                ) -> str:
    """
    Write `df` as CSV and, when `meta` is given, a JSON sidecar next to it
    (same stem, `.json` suffix).

    Returns
    -------
    str
        The CSV path.
    """
    os.makedirs(os.path.dirname(os.path.abspath(csv_path)), exist_ok=True)
    df.to_csv(csv_path, index=index, lineterminator="\n")
    if meta is not None:
        with open(sidecar_path(csv_path), "w", encoding="utf-8") as f:
            json.dump(meta, f, indent=2, sort_keys=True, default=str)
    logger.debug(f"Wrote table {csv_path} ({len(df)} rows)")
    return str(csv_path)


def read_table(csv_path: Union[str, os.PathLike], index_col: Optional[int] = 0) -> tuple[pd.DataFrame, dict]:
    df = pd.read_csv(csv_path, index_col=index_col)
    meta = {}
    if os.path.isfile(sidecar_path(csv_path)):
        with open(sidecar_path(csv_path), encoding="utf-8") as f:
            meta = json.load(f)
    return df, meta
