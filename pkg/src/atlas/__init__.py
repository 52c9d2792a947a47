"""Dialog structure atlas: discover a two-layer dialog structure graph from a
multi-turn corpus and drive a graph grounded conversational agent with it."""

__version__ = "0.1.0"
