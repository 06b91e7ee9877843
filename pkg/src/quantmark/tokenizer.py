"""Character-level tokenizer over printable ASCII plus three specials."""
from __future__ import annotations

PAD, BOS, EOS = 0, 1, 2
_FIRST = 32  # ' '
_LAST = 126  # '~'
N_SPECIAL = 3
VOCAB_SIZE = N_SPECIAL + (_LAST - _FIRST + 1)  # 98


class TokenizerError(ValueError):
    pass


def encode(text: str) -> list[int]:
    ids = []
    for pos, ch in enumerate(text):
        o = ord(ch)
        if not _FIRST <= o <= _LAST:
            raise TokenizerError(f"untokenizable character {ch!r} at position {pos}")
        ids.append(o - _FIRST + N_SPECIAL)
    return ids


def decode(ids) -> str:
    """Inverse of ``encode``; special tokens are dropped."""
    return "".join(chr(i - N_SPECIAL + _FIRST) for i in ids if i >= N_SPECIAL)
