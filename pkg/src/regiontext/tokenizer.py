"""Subword tokenizer with greedy longest-match encoding.

A vocabulary is a dense id <-> token map whose first entries are the special
tokens [PAD], [UNK], [EOS] and one begin token per task style.  Continuation
pieces carry a prefix ("##" by default); head pieces never do.  Unknown
material encodes to a single [UNK] per word rather than failing.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field

from .errors import ConfigError, ContractError

PAD_TOKEN = "[PAD]"
UNK_TOKEN = "[UNK]"
EOS_TOKEN = "[EOS]"
DEFAULT_TASK_TOKENS = ("[ObjectDet]", "[DenseCap]")
DEFAULT_CONTINUATION = "##"

_PUNCT_RE = re.compile(r"[^\w\s-]|_")
_WS_RE = re.compile(r"\s+")


def normalize_text(text: str) -> str:
    """Lowercase, strip punctuation except hyphens, collapse whitespace."""
    text = _PUNCT_RE.sub(" ", text.lower())
    return _WS_RE.sub(" ", text).strip()


@dataclass(frozen=True)
class Vocabulary:
    """Immutable token inventory; encode/decode are pure and thread-safe."""

    tokens: tuple[str, ...]
    task_tokens: tuple[str, ...] = DEFAULT_TASK_TOKENS
    continuation: str = DEFAULT_CONTINUATION
    index: dict[str, int] = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        specials = (PAD_TOKEN, UNK_TOKEN, EOS_TOKEN) + tuple(self.task_tokens)
        if len(self.task_tokens) < 1:
            raise ConfigError("vocabulary needs at least one task token")
        if self.tokens[: len(specials)] != specials:
            raise ConfigError(
                f"vocabulary must start with the specials {specials}, got {self.tokens[:len(specials)]}"
            )
        if len(set(self.tokens)) != len(self.tokens):
            dupes = sorted({t for t in self.tokens if self.tokens.count(t) > 1})
            raise ConfigError(f"duplicate tokens in vocabulary: {dupes}")
        for tok in self.tokens[len(specials):]:
            if tok in specials:
                raise ConfigError(f"special token {tok} repeated in body")
            if not tok:
                raise ConfigError("empty token in vocabulary")
        object.__setattr__(self, "index", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    @property
    def eos_id(self) -> int:
        return 2

    @property
    def task_ids(self) -> tuple[int, ...]:
        return tuple(range(3, 3 + len(self.task_tokens)))

    @property
    def num_specials(self) -> int:
        return 3 + len(self.task_tokens)

    def task_token_id(self, task_id: int) -> int:
        """Vocabulary id of begin token for 1-based task `task_id`."""
        if not 1 <= task_id <= len(self.task_tokens):
            raise ConfigError(
                f"task id {task_id} out of range; valid ids are 1..{len(self.task_tokens)}"
            )
        return 2 + task_id

    def is_special(self, token_id: int) -> bool:
        return 0 <= token_id < self.num_specials


def _word_symbols(word: str, continuation: str) -> list[str]:
    return [word[0]] + [continuation + ch for ch in word[1:]]


def build_vocab(
    corpus: list[str],
    max_size: int,
    task_tokens: tuple[str, ...] = DEFAULT_TASK_TOKENS,
    continuation: str = DEFAULT_CONTINUATION,
) -> Vocabulary:
    """Grow a subword inventory by greedy frequency-based pair merging.

    Starts from the character alphabet of the normalized corpus (so every
    corpus string stays encodable without [UNK]) and repeatedly merges the
    most frequent adjacent symbol pair until `max_size` is reached or no
    pair occurs twice.  Frequent words end up as whole tokens.
    """
    specials = [PAD_TOKEN, UNK_TOKEN, EOS_TOKEN, *task_tokens]
    words: dict[str, int] = {}
    for line in corpus:
        for w in normalize_text(line).split():
            words[w] = words.get(w, 0) + 1
    if not words:
        raise ConfigError("build_vocab: corpus is empty after normalization")

    alphabet: set[str] = set()
    for w in words:
        alphabet.update(_word_symbols(w, continuation))
    budget = max_size - len(specials)
    if budget < len(alphabet):
        raise ConfigError(
            f"build_vocab: max_size {max_size} cannot cover {len(alphabet)} "
            f"characters plus {len(specials)} specials"
        )

    inventory = sorted(alphabet)
    seqs = {w: _word_symbols(w, continuation) for w in words}
    while len(inventory) < budget:
        pair_counts: dict[tuple[str, str], int] = {}
        for w, seq in seqs.items():
            n = words[w]
            for a, b in zip(seq, seq[1:]):
                pair_counts[(a, b)] = pair_counts.get((a, b), 0) + n
        if not pair_counts:
            break
        best = min(pair_counts.items(), key=lambda kv: (-kv[1], kv[0]))
        (a, b), count = best
        if count < 2:
            break
        merged = a + b[len(continuation):]
        inventory.append(merged)
        for w, seq in seqs.items():
            out = []
            i = 0
            while i < len(seq):
                if i + 1 < len(seq) and seq[i] == a and seq[i + 1] == b:
                    out.append(merged)
                    i += 2
                else:
                    out.append(seq[i])
                    i += 1
            seqs[w] = out

    return Vocabulary(tuple(specials + inventory), tuple(task_tokens), continuation)


def encode(text: str, vocab: Vocabulary) -> list[int]:
    """Greedy longest-match-first subword encoding of normalized text.

    A word containing material that cannot be matched becomes a single
    [UNK].  Special tokens never appear in the output.
    """
    norm = normalize_text(text)
    if not norm:
        raise ContractError("encode: text is empty after normalization")
    ids: list[int] = []
    for word in norm.split():
        pieces: list[int] = []
        start = 0
        while start < len(word):
            prefix = "" if start == 0 else vocab.continuation
            match_id = None
            for end in range(len(word), start, -1):
                cand = vocab.index.get(prefix + word[start:end])
                if cand is not None and cand >= vocab.num_specials:
                    match_id = cand
                    start = end
                    break
            if match_id is None:
                pieces = [vocab.unk_id]
                break
            pieces.append(match_id)
        ids.extend(pieces)
    return ids


def decode(ids: list[int], vocab: Vocabulary) -> str:
    """Invert `encode`: drop specials, merge continuation pieces, join words."""
    words: list[str] = []
    for i in ids:
        if not 0 <= int(i) < len(vocab):
            raise IndexError(f"decode: id {i} out of range [0, {len(vocab)})")
        if vocab.is_special(int(i)):
            continue
        tok = vocab.tokens[int(i)]
        if tok.startswith(vocab.continuation) and words:
            words[-1] += tok[len(vocab.continuation):]
        elif tok.startswith(vocab.continuation):
            words.append(tok[len(vocab.continuation):])
        else:
            words.append(tok)
    return " ".join(words)


def save_vocab(vocab: Vocabulary, path) -> None:
    """One token per line, line number = id, UTF-8."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(vocab.tokens) + "\n")


def load_vocab(path, continuation: str = DEFAULT_CONTINUATION) -> Vocabulary:
    with open(path, encoding="utf-8") as fh:
        tokens = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
    if len(tokens) < 4 or tokens[:3] != [PAD_TOKEN, UNK_TOKEN, EOS_TOKEN]:
        raise ConfigError(f"vocabulary file {path} does not start with the fixed specials")
    task_tokens = []
    for tok in tokens[3:]:
        if tok.startswith("[") and tok.endswith("]"):
            task_tokens.append(tok)
        else:
            break
    if not task_tokens:
        raise ConfigError(f"vocabulary file {path} has no task tokens")
    return Vocabulary(tuple(tokens), tuple(task_tokens), continuation)


def vocab_sha256(vocab: Vocabulary) -> str:
    payload = ("\n".join(vocab.tokens) + "\n").encode("utf-8")
    return hashlib.sha256(payload).hexdigest()
