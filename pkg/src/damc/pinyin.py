"""Projection of character-vocabulary logits onto the compact space of pinyin
phonetic components (initials and finals)."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import EmptyInputError

log = logging.getLogger(__name__)

INITIALS = [
    "b", "p", "m", "f", "d", "t", "n", "l", "g", "k", "h", "j", "q", "x",
    "zh", "ch", "sh", "r", "z", "c", "s", "y", "w",
]
# toneless finals; "v" stands for the umlauted u
FINALS = [
    "a", "o", "e", "ai", "ei", "ao", "ou", "an", "en", "ang", "eng", "ong",
    "er", "i", "ia", "ie", "iao", "iu", "ian", "in", "iang", "ing", "iong",
    "u", "ua", "uo", "uai", "ui", "uan", "un", "uang", "ueng",
    "v", "ve", "van", "vn",
]
NO_INITIAL = "∅"  # dedicated slot for zero-initial syllables

# longest match first so zh/ch/sh win over z/c/s
_INITIALS_BY_LENGTH = sorted(INITIALS, key=len, reverse=True)


def split_syllable(syllable: str) -> tuple[str | None, str]:
    """Split a toneless pinyin syllable into (initial or None, final).

    Raises ValueError when the remainder is not a known final."""
    ini = None
    rest = syllable
    for cand in _INITIALS_BY_LENGTH:
        if syllable.startswith(cand):
            ini, rest = cand, syllable[len(cand):]
            break
    if rest not in FINALS:
        raise ValueError(f"unknown final {rest!r} in syllable {syllable!r}")
    return ini, rest


@dataclass
class PinyinMapping:
    chars: list          # ordered character vocabulary, size V
    initials: list       # initial inventory, NO_INITIAL last
    finals: list         # final inventory
    pairs: list          # per character: (initial index, final index)

    @property
    def vocab_size(self) -> int:
        return len(self.chars)

    @property
    def component_count(self) -> int:
        return len(self.initials) + len(self.finals)


def default_table_path() -> Path:
    return Path(resources.files("damc").joinpath("data/pinyin_3000.tsv"))


def build_mapping(table_path=None, keep_tones: bool = False) -> PinyinMapping:
    """Build the character-to-component mapping from a (char, pinyin) TSV.

    Tone digits are stripped unless keep_tones is set, in which case the tone
    stays attached to the final and the component inventory grows accordingly.
    Unparseable rows are rejected with a warning."""
    path = Path(table_path) if table_path is not None else default_table_path()
    chars, pairs = [], []
    seen = set()
    finals_used = []
    finals_index = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2 or len(parts[0]) != 1:
            log.warning("rejecting malformed row %d: %r", lineno, line)
            continue
        ch, py = parts
        tone = ""
        if py and py[-1].isdigit():
            py, tone = py[:-1], py[-1]
        try:
            ini, fin = split_syllable(py)
        except ValueError as exc:
            log.warning("rejecting row %d (%s)", lineno, exc)
            continue
        if ch in seen:
            continue
        seen.add(ch)
        if keep_tones:
            fin = fin + tone
        if fin not in finals_index:
            finals_index[fin] = len(finals_used)
            finals_used.append(fin)
        ini_idx = INITIALS.index(ini) if ini is not None else len(INITIALS)
        chars.append(ch)
        pairs.append((ini_idx, finals_index[fin]))
    if not chars:
        raise EmptyInputError(f"no usable rows in {path}")
    return PinyinMapping(
        chars=chars,
        initials=INITIALS + [NO_INITIAL],
        finals=finals_used,
        pairs=pairs,
    )


def project_logits(char_logits, m: PinyinMapping) -> tuple[np.ndarray, np.ndarray]:
    """Softmax over character logits, then sum each character's probability
    into its initial and final component. Both outputs sum to 1."""
    logits = np.asarray(char_logits, dtype=np.float64)
    if logits.shape != (m.vocab_size,):
        raise ValueError(
            f"expected {m.vocab_size} logits, got shape {list(logits.shape)}"
        )
    if not np.isfinite(logits).all():
        raise ValueError("logits must be finite")
    z = logits - logits.max()
    p = np.exp(z)
    p /= p.sum()
    initial_probs = np.zeros(len(m.initials))
    final_probs = np.zeros(len(m.finals))
    for prob, (ii, fi) in zip(p, m.pairs):
        initial_probs[ii] += prob
        final_probs[fi] += prob
    return initial_probs, final_probs


def project_series(logit_rows, m: PinyinMapping) -> np.ndarray:
    """Per-frame concatenated (initial_probs, final_probs) feature rows."""
    out = [np.concatenate(project_logits(row, m)) for row in np.atleast_2d(logit_rows)]
    return np.stack(out)
