"""Word-level vocabulary for the template report grammar.

Special ids are fixed: PAD=0, BOS=1, EOS=2, UNK=3. Grammar words follow,
then one ``lesion-k`` word per class. On disk the vocabulary is one token per
line, line number = id.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")
GRAMMAR_WORDS = ("no", "is", "seen", "present", ".")


def lesion_word(k: int) -> str:
    return f"lesion-{k}"


@dataclass(frozen=True)
class Vocab:
    words: tuple[str, ...]

    def __post_init__(self):
        if self.words[: len(SPECIALS)] != SPECIALS:
            raise ValueError("vocabulary must start with the special tokens")
        if len(set(self.words)) != len(self.words):
            raise ValueError("duplicate words in vocabulary")
        object.__setattr__(self, "_index", {w: i for i, w in enumerate(self.words)})

    @classmethod
    def for_classes(cls, n_classes: int) -> "Vocab":
        return cls(SPECIALS + GRAMMAR_WORDS + tuple(lesion_word(k) for k in range(n_classes)))

    @property
    def n_classes(self) -> int:
        return sum(1 for w in self.words if w.startswith("lesion-"))

    def __len__(self) -> int:
        return len(self.words)

    def id(self, word: str) -> int:
        return self._index.get(word, UNK)

    def encode(self, text: str) -> tuple[int, ...]:
        """Whitespace tokenization wrapped in BOS/EOS; unknown words map to UNK."""
        return (BOS, *(self.id(w) for w in text.split()), EOS)

    def decode(self, ids) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i in (PAD, BOS):
                continue
            if i == EOS:
                break
            out.append(self.words[i] if 0 <= i < len(self.words) else SPECIALS[UNK])
        return " ".join(out)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.words) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls(tuple(Path(path).read_text(encoding="utf-8").splitlines()))
