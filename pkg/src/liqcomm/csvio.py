"""Fast, deterministic CSV output.

Floats are written in shortest round-trip form, dates as ISO-8601 and
missing values as empty fields.
"""

from __future__ import annotations

from pathlib import Path

import pandas as pd
import pyarrow as pa
import pyarrow.csv as pacsv


def _prepared(df: pd.DataFrame) -> pd.DataFrame:
    out = df.copy()
    for c in out.columns:
        if pd.api.types.is_datetime64_any_dtype(out[c]):
            out[c] = out[c].dt.strftime("%Y-%m-%d")
    return out.reset_index(drop=True)


def write_csv(df: pd.DataFrame, path) -> Path:
    path = Path(path)
    out = _prepared(df)
    header = ",".join(str(c) for c in out.columns) + "\n"
    try:
        table = pa.Table.from_pandas(out, preserve_index=False)
        with open(path, "wb") as fh:
            fh.write(header.encode())
            pacsv.write_csv(table, fh, pacsv.WriteOptions(include_header=False, quoting_style="none"))
    except (pa.ArrowInvalid, pa.ArrowTypeError, pa.ArrowNotImplementedError):
        # values that need quoting, or mixed object columns
        out.to_csv(path, index=False, lineterminator="\n")
    return path
