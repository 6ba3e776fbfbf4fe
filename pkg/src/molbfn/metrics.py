"""Sample-quality metrics and schedule diagnostics.

``is_valid_smiles`` is a syntactic screen, not a cheminformatics sanitizer:
it checks tokenization, bracket/branch balance, ring-bond pairing, dangling
bonds and a per-atom bond-order cap for unbracketed organic-subset atoms.
Uniqueness and novelty compare raw strings (no canonicalization).
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from . import core
from . import rng as rngmod
from .schedule import ScheduleParams
from .tokenizer import ELEMENTS, UnknownSymbol, tokenize_strings

MAX_VALENCE = {"B": 3, "C": 4, "N": 3, "O": 2, "P": 5, "S": 6, "F": 1, "Cl": 1, "Br": 1, "I": 1,
               "b": 3, "c": 4, "n": 3, "o": 2, "p": 5, "s": 6}
AROMATIC_BRACKET = {"b", "c", "n", "o", "p", "s", "se", "as", "te", "si"}
BOND_ORDER = {"-": 1, "=": 2, "#": 3, "$": 4, ":": 1, "/": 1, "\\": 1}
_BRACKET_RE = re.compile(
    r"^(\d+)?([A-Z][a-z]?|[a-z]{1,2}|\*)(@(?:@|TH[12]|AL[12]|SP[123]|TB\d{1,2}|OH\d{1,2})?)?(H\d?)?([+-]{1,2}|[+-]\d{1,2})?(:\d+)?$"
)
_ELEMENT_SET = set(ELEMENTS)


def _bracket_ok(body: str) -> bool:
    m = _BRACKET_RE.match(body)
    if not m:
        return False
    sym = m.group(2)
    if sym == "*":
        return True
    if sym[0].islower():
        return sym in AROMATIC_BRACKET
    return sym in _ELEMENT_SET


def _valid_molecule(smiles: str) -> bool:
    try:
        toks = tokenize_strings(smiles)
    except UnknownSymbol:
        return False
    bonds: list[float] = []  # order sum per atom
    symbols: list[str | None] = []  # None for bracket atoms
    prev = None
    pending = None
    stack: list[tuple[int, int]] = []
    rings: dict[int, tuple[int, int | None]] = {}
    i = 0

    def connect(a, b, order):
        bonds[a] += order
        bonds[b] += order

    while i < len(toks):
        tok = toks[i]
        if tok == "[":
            try:
                close = toks.index("]", i)
            except ValueError:
                return False
            if not _bracket_ok("".join(toks[i + 1 : close])):
                return False
            sym, i = None, close
        elif tok in MAX_VALENCE or tok == "*":
            sym = tok
        else:
            sym = False
        if sym is not False:
            bonds.append(0)
            symbols.append(sym)
            cur = len(bonds) - 1
            if prev is not None:
                connect(prev, cur, pending or 1)
            elif pending is not None:
                return False
            prev, pending = cur, None
        elif tok in BOND_ORDER:
            if prev is None or pending is not None:
                return False
            pending = BOND_ORDER[tok]
        elif tok == "(":
            if prev is None or pending is not None:
                return False
            stack.append((prev, len(bonds)))
        elif tok == ")":
            if not stack or pending is not None:
                return False
            prev, n_before = stack.pop()
            if len(bonds) == n_before:
                return False  # empty branch
        elif tok.isdigit() or tok == "%":
            if tok == "%":
                digits = toks[i + 1 : i + 3]
                if len(digits) != 2 or not all(d.isdigit() for d in digits):
                    return False
                num, i = int("".join(digits)), i + 2
            else:
                num = int(tok)
            if prev is None:
                return False
            if num in rings:
                other, order0 = rings.pop(num)
                if other == prev or (order0 and pending and order0 != pending):
                    return False
                connect(other, prev, pending or order0 or 1)
            else:
                rings[num] = (prev, pending)
            pending = None
        elif tok == ".":
            if pending is not None or stack or prev is None:
                return False
            prev = None
        else:
            return False
        i += 1
    if pending is not None or stack or rings or not bonds or prev is None:
        return False
    return all(s is None or s == "*" or b <= MAX_VALENCE[s] for s, b in zip(symbols, bonds))


def is_valid_smiles(smiles: str) -> bool:
    """Syntactic validity; reaction SMILES are checked part by part."""
    if not smiles:
        return False
    if ">" in smiles:
        parts = smiles.split(">")
        if len(parts) != 3 or not parts[0] or not parts[2]:
            return False
        return all(_valid_molecule(p) for p in parts if p)
    return _valid_molecule(smiles)


def validity(smiles: Sequence[str]) -> float:
    if not smiles:
        return 0.0
    return sum(is_valid_smiles(s) for s in smiles) / len(smiles)


def uniqueness(smiles: Sequence[str]) -> float:
    if not smiles:
        raise ValueError("uniqueness of an empty list is undefined")
    return len(set(smiles)) / len(smiles)


def novelty(smiles: Sequence[str], reference: Iterable[str]) -> float:
    """Fraction of distinct generated strings absent from ``reference``."""
    if not smiles:
        raise ValueError("novelty of an empty list is undefined")
    distinct = set(smiles)
    ref = set(reference)
    return len(distinct - ref) / len(distinct)


def membership(smiles: Sequence[str], reference: Iterable[str]) -> float:
    """Fraction of generated strings (with repeats) found in ``reference``."""
    if not smiles:
        raise ValueError("membership of an empty list is undefined")
    ref = set(reference)
    return sum(s in ref for s in smiles) / len(smiles)


def summary(smiles: Sequence[str], reference: Iterable[str] | None = None) -> dict:
    out = {"n": len(smiles), "validity": validity(smiles), "uniqueness": uniqueness(smiles)}
    if reference is not None:
        ref = set(reference)
        out["novelty"] = novelty(smiles, ref)
        out["in_reference"] = membership(smiles, ref)
    return out


@dataclass
class LinearFit:
    slope: float
    intercept: float
    r_squared: float


def linear_fit(x, y) -> LinearFit:
    """Least-squares line; R² is 1 when ``y`` has no variance."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xm, ym = x.mean(), y.mean()
    sxx = ((x - xm) ** 2).sum()
    sxy = ((x - xm) * (y - ym)).sum()
    slope = sxy / sxx if sxx > 0 else 0.0
    intercept = ym - slope * xm
    ss_tot = ((y - ym) ** 2).sum()
    ss_res = ((y - (intercept + slope * x)) ** 2).sum()
    r2 = 1.0 if ss_tot <= 1e-300 * max(1.0, len(y)) else 1.0 - ss_res / ss_tot
    return LinearFit(float(slope), float(intercept), float(r2))


@dataclass
class EntropyCurve:
    t: np.ndarray
    entropy: np.ndarray
    stderr: np.ndarray
    fit: LinearFit = field(init=False)

    def __post_init__(self):
        self.fit = linear_fit(self.t, self.entropy)

    @property
    def r_squared(self) -> float:
        return self.fit.r_squared

    def points(self) -> list[tuple[float, float, float]]:
        return list(zip(self.t.tolist(), self.entropy.tolist(), self.stderr.tolist()))


def entropy_curve(params: ScheduleParams, n_points: int = 51, n_samples: int = 10_000, seed: int = 0,
                  reference_token: int = 0, chunk: int = 2_000) -> EntropyCurve:
    """Monte-Carlo expected entropy of flow-distribution samples on an even t-grid."""
    if n_points < 3:
        raise ValueError("n_points must be >= 3")
    if n_samples < 100:
        raise ValueError("n_samples must be >= 100")
    ts = np.linspace(0.0, 1.0, n_points)
    means, errs = [], []
    for j, tj in enumerate(ts):
        g = rngmod.generator(seed, "entropy", j)
        vals = []
        for start in range(0, n_samples, chunk):
            m = min(chunk, n_samples - start)
            x = torch.full((m, 1), reference_token, dtype=torch.long)
            theta = core.flow_sample(x, float(tj), params, g, dtype=torch.float64)[:, 0]
            logp = torch.log(theta.clamp_min(1e-300))
            vals.append(-(theta * logp).sum(-1))
        h = torch.cat(vals).clamp(0.0, math.log(params.k_categories)).numpy()
        means.append(h.mean())
        errs.append(h.std(ddof=1) / math.sqrt(n_samples))
    return EntropyCurve(ts, np.array(means), np.array(errs))


def cumulative_loss_linearity(losses: Sequence[tuple[float, float]]) -> float:
    """R² of a line fitted to the running sum of per-t loss estimates."""
    if len(losses) < 3:
        raise ValueError("need at least 3 points")
    t = np.array([p[0] for p in losses], dtype=np.float64)
    cum = np.cumsum([p[1] for p in losses])
    return linear_fit(t, cum).r_squared


def write_curve_csv(path: str | Path, curve: EntropyCurve) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "entropy", "stderr"])
        for row in curve.points():
            w.writerow([f"{v:.10g}" for v in row])


def write_summary_csv(path: str | Path, rows: Sequence[dict]) -> None:
    if not rows:
        raise ValueError("nothing to write")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
