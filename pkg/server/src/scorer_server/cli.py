"""The ``scorer-server`` command line."""
from __future__ import annotations

import argparse
import sys

from .backend import TabularBackend, load_adapter
from .server import serve


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scorer-server", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("serve", help="serve log-probabilities over the wire protocol")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--world", help="tabular world JSON file")
    group.add_argument("--adapter", help="module.path:factory building a model backend")
    p.add_argument("--listen", default="127.0.0.1:0", help="host:port (port 0 = ephemeral)")
    p.add_argument("--max-connections", type=int, default=None,
                   help="declare a connection limit in the handshake")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        backend = TabularBackend(args.world) if args.world else load_adapter(args.adapter)
        if args.max_connections is not None:
            backend.max_connections = args.max_connections
        serve(backend, listen=args.listen)
    except KeyboardInterrupt:
        return 0
    except (OSError, ValueError) as e:
        print(f"scorer-server: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
