"""Whitespace word-level tokenizer over a closed vocabulary.

The vocabulary file format is one token per line, line number = token id.
The first four lines must be the reserved specials <pad>, <bos>, <eos>,
<unk>. Encoding lowercases and maps unknown words to <unk>.
"""

from dataclasses import dataclass

from .errors import DataError
from .model import BOS_ID, EOS_ID, PAD_ID, SPECIAL_TOKENS, UNK_ID


@dataclass
class Vocabulary:
    tokens: list[str]

    def __post_init__(self):
        if len(self.tokens) < len(SPECIAL_TOKENS):
            raise DataError("vocabulary must contain at least the reserved specials")
        if tuple(self.tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise DataError(
                f"vocabulary must start with {' '.join(SPECIAL_TOKENS)}"
            )
        if len(set(self.tokens)) != len(self.tokens):
            raise DataError("vocabulary contains duplicate tokens")
        self._index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def token_id(self, token: str) -> int:
        return self._index.get(token.lower(), UNK_ID)

    def encode(self, text: str | list[str]) -> list[int]:
        words = text.split() if isinstance(text, str) else text
        return [self.token_id(w) for w in words]

    def decode(self, ids: list[int], skip_special: bool = True) -> list[str]:
        out = []
        for i in ids:
            if not 0 <= i < len(self.tokens):
                raise DataError(f"token id {i} out of range [0, {len(self.tokens)})")
            if skip_special and i in (PAD_ID, BOS_ID, EOS_ID, UNK_ID):
                continue
            out.append(self.tokens[i])
        return out

    def decode_text(self, ids: list[int], skip_special: bool = True) -> str:
        return " ".join(self.decode(ids, skip_special=skip_special))


def build_vocabulary(words) -> Vocabulary:
    """Specials followed by the sorted unique lowercased words."""
    body = sorted({w.lower() for w in words} - set(SPECIAL_TOKENS))
    return Vocabulary(list(SPECIAL_TOKENS) + body)


def save_vocabulary(vocab: Vocabulary, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tok in vocab.tokens:
            fh.write(tok + "\n")


def load_vocabulary(path) -> Vocabulary:
    with open(path, encoding="utf-8") as fh:
        tokens = [line.rstrip("\n") for line in fh if line.strip()]
    return Vocabulary(tokens)
