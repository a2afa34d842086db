"""Formulaic alpha factor mining with demonstration-shaped policy gradients."""
from .expr import parse_rpn, to_infix, to_rpn, tokenize
from .tokens import DEFAULT_VOCAB, Vocabulary

__all__ = ["DEFAULT_VOCAB", "Vocabulary", "parse_rpn", "to_infix", "to_rpn", "tokenize"]
__version__ = "0.1.0"
