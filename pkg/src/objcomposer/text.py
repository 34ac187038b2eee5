"""Whitespace tokenization shared by conditioning and token selection."""

DETERMINERS = frozenset({"a", "an", "the"})
_STRIP = ".,;:!?\"'()"


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, drop surrounding punctuation."""
    tokens = [tok.strip(_STRIP) for tok in text.lower().split()]
    return [tok for tok in tokens if tok]
