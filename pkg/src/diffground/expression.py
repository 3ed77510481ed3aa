"""Referring-expression processing: full text or its core noun phrase.

FULL mode is whitespace normalization only. CORE mode hands the normalized
text to a pluggable extractor and keeps the noun phrase it returns; when
nothing is found the full expression is used and the fallback flag is set.

The reference extractor is a lexicon-light heuristic that collects the
leading noun phrase (determiners, modifiers, head nouns) and stops at the
first preposition, relative clause, verb form, or clause boundary. A
dependency-parser extractor backed by spaCy is provided for installations
that have it; the intended rule there is the noun chunk containing the
parse root, else the first noun chunk, else fallback.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from typing import Callable

from .backend import EmptyExpression

NounPhraseExtractor = Callable[[str], "str | None"]


class ExpressionMode(enum.Enum):
    FULL = "full"
    CORE = "core"


@dataclass(frozen=True)
class ReferringExpression:
    raw: str
    mode: ExpressionMode
    processed: str
    fallback: bool = False
    span: tuple[int, int] | None = None


def normalize_whitespace(text: str) -> str:
    return re.sub(r"\s+", " ", text).strip()


_DETERMINERS = {
    "a", "an", "the", "this", "that", "these", "those", "some", "any", "no",
    "my", "your", "his", "her", "its", "our", "their", "one", "two", "three",
    "four", "five", "each", "every", "both", "another", "other",
}

_STOP_WORDS = {
    # prepositions and spatial relators
    "in", "on", "at", "by", "of", "to", "from", "with", "without", "under",
    "over", "above", "below", "behind", "before", "beside", "besides",
    "between", "against", "near", "nearest", "next", "inside", "outside",
    "atop", "around", "across", "through", "into", "onto", "off", "up",
    "down", "along", "amid", "among", "beneath", "toward", "towards",
    # clause and coordination boundaries
    "and", "or", "but", "which", "who", "whose", "whom", "where", "when",
    "while", "as", "because", "if",
    # finite verb forms common in referring expressions
    "is", "are", "was", "were", "be", "being", "been", "has", "have", "had",
    "looks", "looking", "appears", "seems",
}

# -ing tokens are treated as verbs unless they are common nouns.
_ING_NOUNS = {
    "building", "painting", "drawing", "ring", "king", "thing", "string",
    "ceiling", "clothing", "wing", "sibling", "morning", "evening",
    "lightning", "earring", "railing", "awning", "pudding", "frosting",
    "icing", "swing", "spring", "sing", "wedding", "duckling", "filling",
}

_TRAILING_PUNCT = ".,;:!?"


class HeuristicNounPhraseExtractor:
    """Leading-noun-phrase heuristic; no external toolkit required."""

    def __call__(self, text: str) -> str | None:
        collected: list[str] = []
        content_seen = False
        for token in text.split():
            word = token.rstrip(_TRAILING_PUNCT).lower()
            if not word:
                break
            if word in _DETERMINERS and not content_seen:
                collected.append(token)
                continue
            if word in _STOP_WORDS:
                break
            if word.endswith("ing") and len(word) > 4 and word not in _ING_NOUNS:
                break
            if content_seen and word.endswith("ed") and len(word) > 3:
                break
            collected.append(token)
            content_seen = True
            if token[-1] in _TRAILING_PUNCT:
                break
        if not content_seen:
            return None
        phrase = " ".join(collected)
        return phrase.rstrip(_TRAILING_PUNCT)


class SpacyNounChunkExtractor:
    """Noun chunk containing the parse root, else the first noun chunk."""

    def __init__(self, model: str = "en_core_web_sm"):
        try:
            import spacy
        except ImportError as exc:
            raise ImportError(
                "SpacyNounChunkExtractor needs the 'nlp' extra: pip install diffground[nlp]"
            ) from exc
        self._nlp = spacy.load(model)

    def __call__(self, text: str) -> str | None:
        doc = self._nlp(text)
        chunks = list(doc.noun_chunks)
        if not chunks:
            return None
        for chunk in chunks:
            if chunk.root.head == chunk.root or chunk.root == chunk.root.sent.root:
                return chunk.text
        return chunks[0].text


_default_extractor = HeuristicNounPhraseExtractor()


def process(
    raw: str,
    mode: ExpressionMode = ExpressionMode.FULL,
    extractor: NounPhraseExtractor | None = None,
) -> ReferringExpression:
    """Normalize an expression and, in CORE mode, reduce it to its noun phrase."""
    normalized = normalize_whitespace(raw)
    if not normalized:
        raise EmptyExpression("expression is empty after whitespace normalization")
    if mode is ExpressionMode.FULL:
        return ReferringExpression(raw=raw, mode=mode, processed=normalized, span=(0, len(normalized)))
    phrase = (extractor or _default_extractor)(normalized)
    if phrase is None:
        return ReferringExpression(raw=raw, mode=mode, processed=normalized, fallback=True)
    start = normalized.find(phrase)
    if start < 0:
        # Extractor returned text outside the expression; treat as a miss.
        return ReferringExpression(raw=raw, mode=mode, processed=normalized, fallback=True)
    return ReferringExpression(
        raw=raw, mode=mode, processed=phrase, span=(start, start + len(phrase))
    )
