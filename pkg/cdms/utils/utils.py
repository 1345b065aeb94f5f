import re
from argparse import Namespace
from typing import Any, Dict, List, Union

DictLike = Union[Dict[str, Any], Namespace]


def to_dict(d: DictLike) -> Dict[str, Any]:
    if type(d) == Namespace:
        return vars(d)
    return dict(d)


def camel_to_snake(s: str) -> str:
    """Convert from camel-case to snake-case
    Source: https://stackoverflow.com/questions/1175208/elegant-python-function-to-convert-camelcase-to-snake-case
    """
    s = re.sub("(.)([A-Z][a-z]+)", r"\1_\2", s)
    return re.sub("([a-z0-9])([A-Z])", r"\1_\2", s).lower()


def parse_int_range(text: str) -> List[int]:
    """Parse ``"a..b"`` (inclusive), ``"a,b,c"`` or a single integer.

    Example::

        parse_int_range("1..4") == [1, 2, 3, 4]
        parse_int_range("200,400") == [200, 400]
    """
    text = text.strip()
    if ".." in text:
        lo, hi = text.split("..", 1)
        start, stop = int(lo), int(hi)
        if stop < start:
            raise ValueError(f"Empty range '{text}'")
        return list(range(start, stop + 1))
    return [int(part) for part in text.split(",") if part.strip()]
