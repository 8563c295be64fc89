"""Token counting.

The default counter is the byte-length approximation ceil(len/4); an exact,
backend-specific tokenizer can be plugged into the gateway and then takes
precedence everywhere token counts are reported.
"""

from __future__ import annotations

from typing import Callable

Tokenizer = Callable[[str], int]


def count_tokens(text: str) -> int:
    """Approximate token count: ceil(utf-8 byte length / 4). Empty -> 0."""
    return (len(text.encode("utf-8")) + 3) // 4
