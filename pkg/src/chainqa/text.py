"""Tokenization, input assembly, and the small trainable contextual encoder.

Inputs are laid out as  [CLS] B "S:" S [SEP] [SEP] "Q:" Q [SEP]  with every
token tagged by the region it came from, so downstream modules can slice the
background, situation, and question vector blocks without re-tokenizing.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import tensor as T
from .errors import InputError, StateError

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)

CLS_TOKEN = "[CLS]"
SEP_TOKEN = "[SEP]"
S_MARK_TOKEN = "S:"
Q_MARK_TOKEN = "Q:"
UNK_TOKEN = "[UNK]"
PAD_TOKEN = "[PAD]"
RESERVED_TOKENS = (CLS_TOKEN, SEP_TOKEN, S_MARK_TOKEN, Q_MARK_TOKEN, UNK_TOKEN, PAD_TOKEN)

DEFAULT_MAX_SEQ_LEN = 512


class Region(Enum):
    CLS = "CLS"
    BACKGROUND = "BACKGROUND"
    S_MARK = "S-MARK"
    SITUATION = "SITUATION"
    SEP = "SEP"
    Q_MARK = "Q-MARK"
    QUESTION = "QUESTION"


SOURCE_REGIONS = (Region.BACKGROUND, Region.SITUATION, Region.QUESTION)


@dataclass
class Token:
    text: str
    start: int
    end: int


def tokenize(text: str) -> list[Token]:
    """Lowercased whitespace/punctuation tokens with character offsets."""
    return [Token(m.group(0).lower(), m.start(), m.end()) for m in _TOKEN_RE.finditer(text)]


def detokenize(source: str, tokens: list[Token], i: int, j: int) -> str:
    """Whitespace-collapsed source slice covering tokens i..j inclusive."""
    return " ".join(source[tokens[i].start:tokens[j].end].split())


class Vocabulary:
    """Token-to-id map with fixed reserved ids, stable across save/load."""

    def __init__(self, tokens: list[str]):
        if tuple(tokens[:len(RESERVED_TOKENS)]) != RESERVED_TOKENS:
            raise StateError("vocabulary must start with the reserved tokens")
        self._tokens = list(tokens)
        self._ids = {tok: i for i, tok in enumerate(tokens)}
        if len(self._ids) != len(tokens):
            raise StateError("vocabulary contains duplicate tokens")
        self.unk_id = self._ids[UNK_TOKEN]

    @classmethod
    def build(cls, texts) -> "Vocabulary":
        """Word vocabulary from an iterable of raw strings (min frequency 1)."""
        seen = set()
        for text in texts:
            for tok in tokenize(text):
                seen.add(tok.text)
        return cls(list(RESERVED_TOKENS) + sorted(seen))

    def __len__(self) -> int:
        return len(self._tokens)

    def id_of(self, token: str) -> int:
        return self._ids.get(token, self.unk_id)

    def tokens(self) -> list[str]:
        return list(self._tokens)

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self._tokens:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path: str) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh if line != "\n"])


@dataclass
class EncodedInput:
    """Assembled token sequence plus (after encode) per-token vectors."""

    tokens: list[str]
    ids: list[int]
    regions: list[Region]
    char_offsets: list[tuple[int, int] | None]
    background: str
    situation: str
    question: str
    vectors: "T.Tensor | None" = None
    region_tokens: dict = field(default_factory=dict)  # Region -> list[Token]

    def __len__(self) -> int:
        return len(self.tokens)

    def region_indices(self, region: Region) -> list[int]:
        return [k for k, r in enumerate(self.regions) if r is region]

    def source_text(self, region: Region) -> str:
        return {Region.BACKGROUND: self.background,
                Region.SITUATION: self.situation,
                Region.QUESTION: self.question}[region]

    def span_text(self, i: int, j: int) -> str:
        """Decoded answer text for token span [i, j] of the assembled sequence.

        Spans inside one source region detokenize against that region's raw
        text; spans that cross regions (rare, always wrong for EM) fall back
        to joining token surfaces.
        """
        if not (0 <= i <= j < len(self.tokens)):
            raise InputError(f"span ({i}, {j}) out of bounds for {len(self.tokens)} tokens")
        regions = set(self.regions[i:j + 1])
        if len(regions) == 1 and (reg := regions.pop()) in SOURCE_REGIONS:
            source = self.source_text(reg)
            start = self.char_offsets[i][0]
            end = self.char_offsets[j][1]
            return " ".join(source[start:end].split())
        return " ".join(self.tokens[i:j + 1])


def assemble(background: str, situation: str, question: str, vocab: Vocabulary,
             max_seq_len: int = DEFAULT_MAX_SEQ_LEN, truncate: bool = False) -> EncodedInput:
    """Build the fixed [CLS] B S: S [SEP] [SEP] Q: Q [SEP] layout."""
    s_toks = tokenize(situation)
    q_toks = tokenize(question)
    if not q_toks:
        raise InputError("question is empty")
    if not s_toks:
        raise InputError("situation is empty")
    b_toks = tokenize(background)

    def budget_overflow() -> int:
        # layout overhead: [CLS] plus the five marker tokens
        return len(b_toks) + len(s_toks) + len(q_toks) + 6 - max_seq_len

    over = budget_overflow()
    if over > 0:
        if not truncate:
            raise InputError(
                f"sequence of {over + max_seq_len} tokens exceeds max_seq_len={max_seq_len}")
        # Drop background first, then situation from the right.
        cut = min(over, len(b_toks))
        b_toks = b_toks[:len(b_toks) - cut]
        over -= cut
        if over > 0:
            if over >= len(s_toks):
                raise InputError("cannot truncate below the situation/question minimum")
            s_toks = s_toks[:len(s_toks) - over]

    tokens: list[str] = []
    regions: list[Region] = []
    offsets: list[tuple[int, int] | None] = []

    def put(text: str, region: Region, off=None) -> None:
        tokens.append(text)
        regions.append(region)
        offsets.append(off)

    put(CLS_TOKEN, Region.CLS)
    for tok in b_toks:
        put(tok.text, Region.BACKGROUND, (tok.start, tok.end))
    put(S_MARK_TOKEN, Region.S_MARK)
    for tok in s_toks:
        put(tok.text, Region.SITUATION, (tok.start, tok.end))
    put(SEP_TOKEN, Region.SEP)
    put(SEP_TOKEN, Region.SEP)
    put(Q_MARK_TOKEN, Region.Q_MARK)
    for tok in q_toks:
        put(tok.text, Region.QUESTION, (tok.start, tok.end))
    put(SEP_TOKEN, Region.SEP)

    return EncodedInput(
        tokens=tokens,
        ids=[vocab.id_of(tok) for tok in tokens],
        regions=regions,
        char_offsets=offsets,
        background=background,
        situation=situation,
        question=question,
        region_tokens={Region.BACKGROUND: b_toks, Region.SITUATION: s_toks,
                       Region.QUESTION: q_toks},
    )


def sinusoidal_positions(n: int, width: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    dim = np.arange(width)[None, :]
    angle = pos / np.power(10000.0, (2 * (dim // 2)) / width)
    enc = np.where(dim % 2 == 0, np.sin(angle), np.cos(angle))
    return enc


def segment_ids(regions: list[Region]) -> np.ndarray:
    """Segment 0 up to and including the first [SEP]; segment 1 afterwards."""
    seg = np.zeros(len(regions), dtype=np.intp)
    first_sep = next(i for i, r in enumerate(regions) if r is Region.SEP)
    seg[first_sep + 1:] = 1
    return seg


class Encoder:
    """Embedding + sinusoidal positions + segments, then L attention blocks.

    A deliberately small stand-in for a pretrained contextual encoder; depth 0
    degenerates to (embedding + position + segment) lookups.
    """

    def __init__(self, vocab_size: int, width: int = 64, depth: int = 2, heads: int = 4,
                 ffn_mult: int = 4, rng: np.random.Generator | None = None, prefix: str = "encoder"):
        if rng is None:
            rng = np.random.default_rng(0)
        if width % heads != 0:
            raise StateError(f"encoder width {width} not divisible by heads {heads}")
        self.vocab_size = vocab_size
        self.width = width
        self.depth = depth
        self.heads = heads
        self.ffn_mult = ffn_mult
        p = prefix
        self.embed = T.init_weight(rng, f"{p}/embed", vocab_size, width)
        self.segment = T.init_weight(rng, f"{p}/segment", 2, width)
        self.blocks = []
        hidden = width * ffn_mult
        for l in range(depth):
            b = {
                "ln1_g": T.Parameter(f"{p}/block{l}/ln1_g", np.ones(width)),
                "ln1_b": T.init_bias(f"{p}/block{l}/ln1_b", width),
                "wq": T.init_weight(rng, f"{p}/block{l}/wq", width, width),
                "bq": T.init_bias(f"{p}/block{l}/bq", width),
                "wk": T.init_weight(rng, f"{p}/block{l}/wk", width, width),
                "bk": T.init_bias(f"{p}/block{l}/bk", width),
                "wv": T.init_weight(rng, f"{p}/block{l}/wv", width, width),
                "bv": T.init_bias(f"{p}/block{l}/bv", width),
                "wo": T.init_weight(rng, f"{p}/block{l}/wo", width, width),
                "bo": T.init_bias(f"{p}/block{l}/bo", width),
                "ln2_g": T.Parameter(f"{p}/block{l}/ln2_g", np.ones(width)),
                "ln2_b": T.init_bias(f"{p}/block{l}/ln2_b", width),
                "w1": T.init_weight(rng, f"{p}/block{l}/w1", width, hidden),
                "b1": T.init_bias(f"{p}/block{l}/b1", hidden),
                "w2": T.init_weight(rng, f"{p}/block{l}/w2", hidden, width),
                "b2": T.init_bias(f"{p}/block{l}/b2", width),
            }
            self.blocks.append(b)

    def parameters(self) -> list[T.Parameter]:
        params = [self.embed, self.segment]
        for b in self.blocks:
            params.extend(b.values())
        return params

    def encode(self, enc: EncodedInput) -> EncodedInput:
        """Populate enc.vectors with [n, width] contextual representations."""
        ids = np.asarray(enc.ids, dtype=np.intp)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise StateError(f"token id out of vocabulary range [0, {self.vocab_size})")
        x = T.take(self.embed.tensor, ids)
        x = T.add(x, T.Tensor(sinusoidal_positions(len(ids), self.width)))
        x = T.add(x, T.take(self.segment.tensor, segment_ids(enc.regions)))
        for b in self.blocks:
            h = T.layer_norm(x, b["ln1_g"].tensor, b["ln1_b"].tensor)
            q = T.linear(h, b["wq"].tensor, b["bq"].tensor)
            k = T.linear(h, b["wk"].tensor, b["bk"].tensor)
            v = T.linear(h, b["wv"].tensor, b["bv"].tensor)
            attn = T.attention(q, k, v, heads=self.heads)
            x = T.add(x, T.linear(attn, b["wo"].tensor, b["bo"].tensor))
            h2 = T.layer_norm(x, b["ln2_g"].tensor, b["ln2_b"].tensor)
            ff = T.linear(T.tanh(T.linear(h2, b["w1"].tensor, b["b1"].tensor)),
                          b["w2"].tensor, b["b2"].tensor)
            x = T.add(x, ff)
        enc.vectors = x
        return enc


def region_view(enc: EncodedInput, region: Region) -> tuple["T.Tensor | None", list[int]]:
    """Vector rows for one region plus their original token indices.

    An absent region (e.g. empty background) yields (None, []), not an error.
    """
    if enc.vectors is None:
        raise StateError("region_view requires an encoded input (vectors set)")
    indices = enc.region_indices(region)
    if not indices:
        return None, []
    return T.take(enc.vectors, np.asarray(indices, dtype=np.intp)), indices
