"""Wire-format helpers: epoch-microsecond timestamps and canonical values.

Attribute values travel and persist as tagged scalars — number, string,
boolean, or array-of-number — serialized as canonical JSON (sorted keys,
compact separators). Timestamps are UTC microseconds since the epoch;
durations are float milliseconds measured on the monotonic clock.
"""

from __future__ import annotations

import json
import re
import time
from typing import Any


def now_micros() -> int:
    """Wall-clock timestamp, UTC microseconds since the epoch."""
    return time.time_ns() // 1000


def canonical_json(value: Any) -> str:
    return json.dumps(
        value, sort_keys=True, separators=(",", ":"), ensure_ascii=True, allow_nan=False
    )


def valid_scalar(value: Any) -> bool:
    if isinstance(value, (bool, int, float, str)):
        return True
    if isinstance(value, (list, tuple)):
        return all(
            isinstance(x, (int, float)) and not isinstance(x, bool) for x in value
        )
    return False


_EXPONENT = re.compile(r"e([+-]?)0*(\d)")


def format_value(value: Any) -> str:
    """Render a scalar the way it reads in a tuning table.

    Small magnitudes keep scientific notation with a compact exponent
    (1e-8, not 1e-08 or 0.00000001); integers render bare; everything else
    uses the shortest round-trip float form.
    """
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if value != value or value in (float("inf"), float("-inf")):
            return repr(value)
        text = repr(value)
        if "e" not in text and value != 0 and abs(value) < 1e-3:
            mantissa, exponent = f"{value:e}".split("e")
            mantissa = mantissa.rstrip("0").rstrip(".")
            text = f"{mantissa}e{exponent}"
        return _EXPONENT.sub(lambda m: "e" + (m.group(1) if m.group(1) == "-" else "") + m.group(2), text)
    if isinstance(value, (list, tuple)):
        return "[" + ",".join(format_value(v) for v in value) + "]"
    return str(value)
