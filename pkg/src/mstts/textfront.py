"""Deterministic text front-end: toy G2P over letter-level pseudo-phonemes.

The rule table ships as a versioned text file (one grapheme/id pair per
line); letters and digits map to their own pseudo-phonemes, whitespace maps
to a word-boundary symbol and basic punctuation is dropped. This is a total,
pure function of the normalized text, which is all the rest of the system
needs from a front-end.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from typing import Tuple, Union

import numpy as np

BOS_ID = 0
EOS_ID = 1
WORD_BOUNDARY_ID = 2

_DROPPED = set(".,!?;:'\"()-")

RULES_RESOURCE = "g2p_rules.tsv"


class G2PError(ValueError):
    """Input text contains a character the rule table cannot map."""


def _load_rules() -> tuple[str, dict[str, int]]:
    text = resources.files("mstts.data").joinpath(RULES_RESOURCE).read_text()
    version = ""
    table: dict[str, int] = {}
    for line in text.splitlines():
        if line.startswith("#"):
            if not version:
                version = line.lstrip("# ").strip()
            continue
        if not line.strip():
            continue
        grapheme, pid = line.split("\t")
        table[grapheme] = int(pid)
    return version, table


RULES_VERSION, RULE_TABLE = _load_rules()
VOCAB_SIZE = max(RULE_TABLE.values()) + 1


@dataclass
class Transcript:
    """Raw text plus its normalized form (lowercase, collapsed whitespace)."""

    text: str
    normalized: str = field(init=False)

    def __post_init__(self):
        self.normalized = " ".join(self.text.lower().split())


@dataclass
class PhonemeSequence:
    ids: np.ndarray
    vocabulary_size: int = VOCAB_SIZE

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.ids.size and (self.ids.min() < 0 or self.ids.max() >= self.vocabulary_size):
            raise ValueError(f"phoneme ids outside [0, {self.vocabulary_size})")

    def __len__(self):
        return int(self.ids.size)


def g2p(t: Union[Transcript, str]) -> PhonemeSequence:
    """Map normalized text to pseudo-phoneme ids; total over the allowed charset."""
    if isinstance(t, str):
        t = Transcript(t)
    ids: list[int] = []
    for ch in t.normalized:
        if ch == " ":
            ids.append(WORD_BOUNDARY_ID)
        elif ch in RULE_TABLE:
            ids.append(RULE_TABLE[ch])
        elif ch in _DROPPED:
            continue
        else:
            raise G2PError(f"unsupported character {ch!r} (U+{ord(ch):04X})")
    return PhonemeSequence(np.asarray(ids, dtype=np.int64))


def build_text_prompt(
    prompt_transcript: Union[Transcript, str],
    target_text: Union[Transcript, str],
) -> Tuple[PhonemeSequence, int]:
    """Prepend the prompt transcript to the target text.

    Returns the joint phoneme sequence and the boundary index so synthesized
    output can be trimmed to the target region. A word-boundary symbol marks
    the seam; an empty prompt yields the target sequence with boundary 0.
    """
    prompt_ids = g2p(prompt_transcript)
    target_ids = g2p(target_text)
    if len(prompt_ids) == 0:
        return target_ids, 0
    joint = np.concatenate([prompt_ids.ids, [WORD_BOUNDARY_ID], target_ids.ids])
    return PhonemeSequence(joint), len(prompt_ids)
