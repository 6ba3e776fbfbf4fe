"""Fixed 246-token SMILES vocabulary, tokenization and batch padding.

Token ids 0-2 are the special tokens ``<pad>``, ``<start>`` and ``<end>``.
The surface tokens are

* the 118 element symbols in atomic-number order,
* the lowercase letters a-z (aromatic atoms plus any bracket-interior letter),
* the 12 uppercase letters that are not element symbols on their own
  (chirality classes such as ``@TB1`` and ``@AL2`` stay representable),
* digits 0-9,
* ``( ) [ ] = # $ : / \\ . - + @ % * > ~`` and the reaction arrow ``>>``,
* reserved slots ``<unused0>`` ... that pad the list to a fixed size.

Two-digit ring bonds are ``%`` followed by two digit tokens.  Outside square
brackets only the organic-subset two-letter symbols ``Cl`` and ``Br`` are
matched, so ``CSc1ccccc1`` reads as S followed by aromatic c rather than
scandium.  Inside brackets every element symbol is matched.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import torch

PAD, START, END = "<pad>", "<start>", "<end>"
VOCAB_SIZE = 246

ELEMENTS = (
    "H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co Ni Cu Zn "
    "Ga Ge As Se Br Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te I Xe Cs Ba La Ce "
    "Pr Nd Pm Sm Eu Gd Tb Dy Ho Er Tm Yb Lu Hf Ta W Re Os Ir Pt Au Hg Tl Pb Bi Po At Rn "
    "Fr Ra Ac Th Pa U Np Pu Am Cm Bk Cf Es Fm Md No Lr Rf Db Sg Bh Hs Mt Ds Rg Cn Nh Fl "
    "Mc Lv Ts Og"
).split()
ORGANIC_TWO_LETTER = ("Cl", "Br")
SYMBOLS = tuple("()[]=#$:/\\.-+@%*>~")
REACTION_ARROW = ">>"

# sha256 of "\n".join(tokens); changing the list is a format break.
VOCAB_SHA256 = "d10d0ea3450504cade4841604d7ed56d89ca78f02214375f6f66c951fd51e472"


class UnknownSymbol(ValueError):
    def __init__(self, position: int, text: str):
        self.position = position
        super().__init__(f"cannot tokenize {text[position]!r} at position {position} of {text!r}")


class MalformedSequence(ValueError):
    pass


class LengthExceeded(ValueError):
    def __init__(self, index: int, length: int, limit: int):
        self.index = index
        super().__init__(f"sequence {index} has {length} tokens, exceeding global length {limit}")


def _surface_tokens() -> list[str]:
    letters_lower = [chr(c) for c in range(ord("a"), ord("z") + 1)]
    single_upper = {e for e in ELEMENTS if len(e) == 1}
    letters_upper = [chr(c) for c in range(ord("A"), ord("Z") + 1) if chr(c) not in single_upper]
    digits = [str(d) for d in range(10)]
    tokens = list(ELEMENTS) + letters_lower + letters_upper + digits + list(SYMBOLS) + [REACTION_ARROW]
    n_reserved = VOCAB_SIZE - 3 - len(tokens)
    return tokens + [f"<unused{i}>" for i in range(n_reserved)]


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    id_of: dict[str, int] = field(compare=False, repr=False)

    @property
    def pad_id(self) -> int:
        return self.id_of[PAD]

    @property
    def start_id(self) -> int:
        return self.id_of[START]

    @property
    def end_id(self) -> int:
        return self.id_of[END]

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset((self.pad_id, self.start_id, self.end_id))

    def __len__(self) -> int:
        return len(self.tokens)

    def sha256(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()


@lru_cache(maxsize=1)
def build_vocabulary() -> Vocabulary:
    tokens = (PAD, START, END, *_surface_tokens())
    if len(tokens) != VOCAB_SIZE or len(set(tokens)) != VOCAB_SIZE:
        raise RuntimeError("vocabulary construction is inconsistent")
    return Vocabulary(tokens, {tok: i for i, tok in enumerate(tokens)})


@lru_cache(maxsize=1)
def _matchers() -> tuple[dict[int, frozenset[str]], dict[int, frozenset[str]]]:
    vocab = build_vocabulary()
    singles = {t for t in vocab.tokens if len(t) == 1}
    outside = singles | set(ORGANIC_TWO_LETTER) | {REACTION_ARROW}
    inside = singles | set(ELEMENTS)

    def by_len(toks):
        out: dict[int, set[str]] = {}
        for t in toks:
            out.setdefault(len(t), set()).add(t)
        return {n: frozenset(s) for n, s in sorted(out.items(), reverse=True)}

    return by_len(outside), by_len(inside)


def tokenize_strings(smiles: str) -> list[str]:
    """Segment ``smiles`` into surface tokens by greedy longest match."""
    outside, inside = _matchers()
    out: list[str] = []
    pos, in_bracket = 0, False
    while pos < len(smiles):
        table = inside if in_bracket else outside
        for n, toks in table.items():
            piece = smiles[pos : pos + n]
            if piece in toks:
                break
        else:
            raise UnknownSymbol(pos, smiles)
        if piece == "[":
            in_bracket = True
        elif piece == "]":
            in_bracket = False
        out.append(piece)
        pos += len(piece)
    return out


def tokenize(smiles: str, vocab: Vocabulary | None = None) -> list[int]:
    """Encode ``smiles`` as ``[<start>, body..., <end>]`` token ids."""
    vocab = vocab or build_vocabulary()
    if not smiles:
        raise ValueError("cannot tokenize an empty string")
    body = [vocab.id_of[t] for t in tokenize_strings(smiles)]
    return [vocab.start_id, *body, vocab.end_id]


def detokenize(ids: Sequence[int], vocab: Vocabulary | None = None, strict: bool = True) -> str:
    """Concatenate body tokens of a sequence.

    In strict mode the sequence must start with ``<start>``, contain exactly one
    ``<end>`` and only pads after it.  Lenient mode drops a leading ``<start>``,
    truncates at the first ``<end>`` and skips stray special tokens.
    """
    vocab = vocab or build_vocabulary()
    ids = [int(i) for i in ids]
    if strict:
        _validate(ids, vocab)
    specials = vocab.special_ids
    pieces = []
    for i in ids:
        if i == vocab.end_id:
            break
        if i in specials:
            continue
        pieces.append(vocab.tokens[i])
    return "".join(pieces)


def _validate(ids: list[int], vocab: Vocabulary) -> None:
    if not ids or ids[0] != vocab.start_id:
        raise MalformedSequence("sequence must begin with <start>")
    if any(not 0 <= i < len(vocab) for i in ids):
        raise MalformedSequence("token id out of range")
    ends = [j for j, i in enumerate(ids) if i == vocab.end_id]
    if len(ends) != 1:
        raise MalformedSequence(f"expected exactly one <end>, found {len(ends)}")
    if any(i != vocab.pad_id for i in ids[ends[0] + 1 :]):
        raise MalformedSequence("non-pad token after <end>")
    if any(i in (vocab.start_id, vocab.pad_id) for i in ids[1 : ends[0]]):
        raise MalformedSequence("special token inside sequence body")


def validate_sequence(ids: Sequence[int], vocab: Vocabulary | None = None) -> None:
    _validate([int(i) for i in ids], vocab or build_vocabulary())


class PaddingStrategy(str, enum.Enum):
    DYNAMIC = "dynamic"
    GLOBAL = "global"


@dataclass
class PaddedBatch:
    ids: torch.Tensor  # (B, D) int64
    pad_mask: torch.Tensor  # (B, D) bool, True for real tokens
    strategy: PaddingStrategy
    global_len: int | None = None

    def __len__(self) -> int:
        return self.ids.shape[0]


def pad_batch(
    seqs: Sequence[Sequence[int]],
    strategy: PaddingStrategy | str = PaddingStrategy.DYNAMIC,
    global_len: int | None = None,
    vocab: Vocabulary | None = None,
) -> PaddedBatch:
    vocab = vocab or build_vocabulary()
    strategy = PaddingStrategy(strategy)
    if not seqs:
        raise ValueError("cannot pad an empty batch")
    lengths = [len(s) for s in seqs]
    if strategy is PaddingStrategy.GLOBAL:
        if global_len is None:
            raise ValueError("global padding requires global_len")
        for i, n in enumerate(lengths):
            if n > global_len:
                raise LengthExceeded(i, n, global_len)
        width = global_len
    else:
        width = max(lengths)
    ids = torch.full((len(seqs), width), vocab.pad_id, dtype=torch.long)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return PaddedBatch(ids, ids != vocab.pad_id, strategy, global_len if strategy is PaddingStrategy.GLOBAL else None)


def read_smiles_file(path: str | Path) -> list[tuple[int, str]]:
    """Return ``(line_number, smiles)`` pairs, skipping blanks and ``#`` comments."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            out.append((lineno, s.split()[0]))
    return out


def read_labeled_csv(path: str | Path, label_columns: Iterable[str] | None = None) -> tuple[list[str], list[str], list[list[float]]]:
    """Read a CSV with a ``smiles`` column and numeric label columns.

    Returns ``(smiles, label_names, labels)``.  Blank cells become NaN; callers
    decide whether NaN is acceptable.
    """
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "smiles" not in reader.fieldnames:
            raise ValueError(f"{path}: CSV must have a 'smiles' column")
        names = list(label_columns) if label_columns else [c for c in reader.fieldnames if c != "smiles"]
        missing = [c for c in names if c not in reader.fieldnames]
        if missing or not names:
            raise ValueError(f"{path}: missing label columns {missing or '(none found)'}")
        smiles, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            smiles.append(row["smiles"].strip())
            try:
                labels.append([float(row[c]) if row[c].strip() else math.nan for c in names])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: non-numeric label ({exc})") from None
    return smiles, names, labels
