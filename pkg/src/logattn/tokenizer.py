"""Word- and character-level tokenization of LANL-style authentication lines.

Word mode emits one token per field with the two user fields split on ``@``
into name and domain, giving ten interior tokens. A value enters the shared
vocabulary only if it occurs at least ``threshold`` times within a single
field; everything else maps to the OOV token. Character mode uses the
printable ASCII characters of the comma-joined fields, delimiters included.
The time field is never tokenized.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable

SCHEMA = (
    "src_user", "dst_user", "src_pc", "dst_pc",
    "auth_type", "logon_type", "auth_orientation", "outcome",
)

# token slots in word mode, after splitting the user fields
WORD_FIELDS = (
    "src_user", "src_domain", "dst_user", "dst_domain", "src_pc", "dst_pc",
    "auth_type", "logon_type", "auth_orientation", "outcome",
)

OOV, SOS, EOS = "<oov>", "<sos>", "<eos>"
_SPECIALS = frozenset((OOV, SOS, EOS))
PRINTABLE = tuple(chr(c) for c in range(0x20, 0x7F))
SECONDS_PER_DAY = 86400
DEFAULT_MACHINE_PATTERN = re.compile(r"^(?:.*\$|C\d+)$")


class ParseError(ValueError):
    pass


class TokenizationError(ValueError):
    pass


class EmptyVocabError(ValueError):
    pass


@dataclass(frozen=True)
class RawEvent:
    seconds: int
    fields: tuple[str, ...]
    red: bool = False

    def __post_init__(self):
        if len(self.fields) != len(SCHEMA):
            raise ParseError(f"expected {len(SCHEMA)} fields, got {len(self.fields)}")

    @property
    def day(self) -> int:
        return self.seconds // SECONDS_PER_DAY

    @property
    def user(self) -> str:
        return self.fields[0]

    @property
    def red_key(self) -> tuple[int, str, str, str]:
        return (self.seconds, self.fields[0], self.fields[2], self.fields[3])


def parse_line(line: str, red_keys: set | None = None) -> RawEvent:
    """Parse ``time,src_user@dom,dst_user@dom,src_pc,dst_pc,auth,logon,orient,outcome``."""
    parts = line.rstrip("\r\n").split(",")
    if len(parts) != len(SCHEMA) + 1:
        raise ParseError(f"expected {len(SCHEMA) + 1} comma-separated values: {line!r}")
    try:
        seconds = int(parts[0])
    except ValueError:
        raise ParseError(f"bad time field {parts[0]!r}") from None
    event = RawEvent(seconds, tuple(parts[1:]))
    if red_keys and event.red_key in red_keys:
        event = RawEvent(seconds, event.fields, True)
    return event


def parse_red_line(line: str) -> tuple[int, str, str, str]:
    parts = line.strip().split(",")
    if len(parts) != 4:
        raise ParseError(f"red key needs time,user,src_pc,dst_pc: {line!r}")
    return int(parts[0]), parts[1], parts[2], parts[3]


def format_line(event: RawEvent) -> str:
    return ",".join((str(event.seconds),) + event.fields)


def split_user(value: str) -> tuple[str, str]:
    name, sep, domain = value.partition("@")
    if not sep:
        raise ParseError(f"user field without '@': {value!r}")
    return name, domain


def word_values(event: RawEvent) -> tuple[str, ...]:
    """The ten word-mode token strings of an event."""
    su, sd = split_user(event.fields[0])
    du, dd = split_user(event.fields[1])
    return (su, sd, du, dd) + event.fields[2:]


def char_string(event: RawEvent) -> str:
    return ",".join(event.fields)


def is_machine_event(event: RawEvent, pattern=DEFAULT_MACHINE_PATTERN) -> bool:
    """True when the source user name (before ``@``) matches the machine-account pattern."""
    if pattern is None:
        return False
    if isinstance(pattern, str):
        pattern = re.compile(pattern)
    name = event.fields[0].partition("@")[0]
    return pattern.search(name) is not None


def filter_machine_events(events: Iterable[RawEvent], pattern=DEFAULT_MACHINE_PATTERN):
    return (e for e in events if not is_machine_event(e, pattern))


@dataclass
class Vocabulary:
    mode: str
    tokens: list[str]
    threshold: int | None = None
    counts: dict[tuple[str, str], int] = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("word", "char"):
            raise ValueError(f"unknown vocabulary mode {self.mode!r}")
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def sos_id(self) -> int:
        return self.index[SOS]

    @property
    def eos_id(self) -> int:
        return self.index[EOS]

    @property
    def oov_id(self) -> int | None:
        return self.index.get(OOV)

    def id_of(self, token: str) -> int:
        i = self.index.get(token)
        if i is not None:
            return i
        if self.oov_id is None:
            raise TokenizationError(f"token {token!r} not in vocabulary")
        return self.oov_id

    def value_id(self, value: str) -> int:
        """Id for a raw field value; values spelled like a special token are OOV."""
        if value in _SPECIALS:
            return self.id_of(OOV)
        return self.id_of(value)

    def token_of(self, i: int) -> str:
        return self.tokens[i]


def build_vocab(events: Iterable[RawEvent], threshold: int = 40) -> Vocabulary:
    """Shared word vocabulary admitting values that reach ``threshold`` in some field."""
    if threshold < 1:
        raise ValueError("threshold must be at least 1")
    counts: Counter = Counter()
    seen = False
    for e in events:
        seen = True
        counts.update(zip(WORD_FIELDS, word_values(e)))
    if not seen:
        raise EmptyVocabError("cannot build a vocabulary from an empty event stream")
    admitted = sorted({value for (_, value), n in counts.items() if n >= threshold} - _SPECIALS)
    return Vocabulary("word", [OOV, SOS, EOS] + admitted, threshold, dict(counts))


def char_vocab() -> Vocabulary:
    return Vocabulary("char", [SOS, EOS] + list(PRINTABLE))


@dataclass
class TokenSequence:
    ids: list[int]
    user: str
    day: int
    red: bool = False
    raw: RawEvent | None = None
    line_id: int = -1

    def __len__(self) -> int:
        return len(self.ids)


def tokenize_word(event: RawEvent, vocab: Vocabulary, line_id: int = -1) -> TokenSequence:
    if vocab.mode != "word":
        raise ValueError("tokenize_word needs a word vocabulary")
    ids = [vocab.sos_id] + [vocab.value_id(v) for v in word_values(event)] + [vocab.eos_id]
    return TokenSequence(ids, event.user, event.day, event.red, event, line_id)


def tokenize_char(event: RawEvent, vocab: Vocabulary, line_id: int = -1) -> TokenSequence:
    if vocab.mode != "char":
        raise ValueError("tokenize_char needs a char vocabulary")
    text = char_string(event)
    bad = [c for c in text if not " " <= c <= "~"]
    if bad:
        raise TokenizationError(f"non-printable character {bad[0]!r} in line")
    ids = [vocab.sos_id] + [vocab.index[c] for c in text] + [vocab.eos_id]
    return TokenSequence(ids, event.user, event.day, event.red, event, line_id)


def tokenize(event: RawEvent, vocab: Vocabulary, line_id: int = -1) -> TokenSequence:
    fn = tokenize_word if vocab.mode == "word" else tokenize_char
    return fn(event, vocab, line_id)


def position_labels(vocab: Vocabulary, seq: TokenSequence) -> list[str]:
    """Human-readable label for each position of a sequence (field names or characters)."""
    if vocab.mode == "word":
        return ["SOS", *WORD_FIELDS, "EOS"]
    return ["SOS"] + [vocab.token_of(i) for i in seq.ids[1:-1]] + ["EOS"]
