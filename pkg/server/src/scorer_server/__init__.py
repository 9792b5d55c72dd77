"""Reference server for the newline-delimited JSON log-probability protocol.

Wraps either a tabular world file (for engine round-trip testing) or a
user-supplied model adapter, and answers ``cond`` / ``uncond`` / ``lm`` head
queries over a stream socket.
"""

from .backend import TabularBackend, load_adapter
from .server import ScorerServer, serve

__version__ = "0.1.0"
