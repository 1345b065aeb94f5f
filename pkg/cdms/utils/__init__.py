from .utils import camel_to_snake, parse_int_range  # noqa: F401
