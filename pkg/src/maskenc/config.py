"""Flat `key = value` config files: UTF-8 lines, `#` comments, no sections."""


class ConfigError(ValueError):
    """Malformed config text; carries the 1-based line number."""

    def __init__(self, line_no, message):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


def parse_config(text):
    """Parse config text into an ordered {key: raw string value} dict."""
    values = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(line_no, f"expected 'key = value', got {stripped!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError(line_no, "empty key")
        values[key] = value
    return values


def format_config(values):
    """Render a {key: value} dict back to config text (round-trips parse)."""
    return "".join(f"{key} = {value}\n" for key, value in values.items())


def load_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def get_typed(values, key, type_fn, default):
    """Fetch and convert values[key]; ValueError mentions the key."""
    if key not in values:
        return default
    raw = values[key]
    try:
        return type_fn(raw)
    except (TypeError, ValueError):
        raise ValueError(f"config key {key!r}: cannot parse {raw!r}") from None


def parse_bool(raw):
    lowered = raw.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")
