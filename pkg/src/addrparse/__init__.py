"""Address parsing: synthetic multinational corpora, a seq2seq LSTM tagger, and its evaluation."""

from .domain import Tag, TaggedAddress, tokenize
from .errors import AddrParseError

__version__ = "0.1.0"

__all__ = ["AddrParseError", "Tag", "TaggedAddress", "tokenize", "__version__"]
