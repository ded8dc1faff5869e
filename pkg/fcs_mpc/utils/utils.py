from typing import List


def printer(msg: str, verbose: bool):
    if verbose:
        print(msg)


def parse_values(text: str) -> List[float]:
    """Parse a comma separated list of numbers, e.g. '10,5e6'"""
    values = [float(v) for v in text.split(",") if v.strip()]
    if not values:
        raise ValueError(f"No values in '{text}'")
    return values


def value_label(value: float) -> str:
    """Short directory-safe label for a swept value: 10.0 -> '10',
    5e6 -> '5e+06'"""
    return f"{value:g}"
