"""Modality identifiers and the closed-vocabulary text tokenizer."""
from __future__ import annotations

from .errors import UnknownModalityError

MODALITIES: tuple[str, ...] = ("RGB", "NIR", "TIR")

MODAL_WORDS = {"RGB": "visible", "NIR": "near-infrared", "TIR": "thermal-infrared"}

EOS = "<eos>"
VOCAB: tuple[str, ...] = (
    EOS, "a", "photo", "of", "person", "vehicle", "visible", "near-infrared", "thermal-infrared",
)
_TOKEN_ID = {word: i for i, word in enumerate(VOCAB)}


def check_modality(modality: str) -> str:
    if modality not in MODAL_WORDS:
        raise UnknownModalityError(f"unknown modality {modality!r}; expected one of {MODALITIES}")
    return modality


def modality_index(modality: str) -> int:
    return MODALITIES.index(check_modality(modality))


def prompt_sentence(modality: str, obj: str = "person") -> str:
    return f"a {MODAL_WORDS[check_modality(modality)]} photo of a {obj}"


def tokenize(sentence: str) -> list[int]:
    """Whitespace tokenizer; hyphenated words are single tokens. Appends <eos>."""
    try:
        return [_TOKEN_ID[w] for w in sentence.split()] + [_TOKEN_ID[EOS]]
    except KeyError as exc:
        raise UnknownModalityError(f"word {exc.args[0]!r} is outside the prompt vocabulary") from None


def word_id(word: str) -> int:
    return _TOKEN_ID[word]


def text_length(obj: str = "person") -> int:
    return len(tokenize(prompt_sentence("RGB", obj)))
