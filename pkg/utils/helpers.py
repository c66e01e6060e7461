from typing import List, Sequence, Tuple


def format_float(value: float) -> str:
    """Locale-independent round-trip formatting (%.17g)"""
    return '%.17g' % value


def format_duration(seconds: float) -> str:
    """Format wall time to readable string"""
    if seconds < 1.0:
        return f"{seconds * 1000:.0f}ms"
    elif seconds < 60.0:
        return f"{seconds:.2f}s"
    else:
        minutes = int(seconds // 60)
        return f"{minutes}m {seconds - 60 * minutes:.0f}s"


def format_status(passed: bool) -> str:
    return "PASS" if passed else "FAIL"


def format_vector(values: Sequence[float]) -> str:
    return ' '.join(format_float(float(v)) for v in values)


def parse_float_list(text: str) -> List[float]:
    """Parse whitespace separated numbers"""
    return [float(token) for token in text.split()]


def parse_rows(text: str, width: int) -> List[Tuple[float, ...]]:
    """Parse ';'-separated rows of `width` numbers each"""
    rows = []
    for chunk in text.split(';'):
        chunk = chunk.strip()
        if not chunk:
            continue
        values = parse_float_list(chunk)
        if len(values) != width:
            raise ValueError(f"expected {width} numbers per row, got '{chunk}'")
        rows.append(tuple(values))
    return rows


def parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ('1', 'true', 'yes', 'on'):
        return True
    if lowered in ('0', 'false', 'no', 'off'):
        return False
    raise ValueError(f"not a boolean: '{text}'")

