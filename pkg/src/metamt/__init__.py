"""Domain-adaptive neural machine translation with a domain-invariant
word-transmission layer and alternating meta-learning, in plain numpy."""

__version__ = "0.1.0"
