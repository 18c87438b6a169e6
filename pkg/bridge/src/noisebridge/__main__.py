"""CLI: `noisebridge serve --transport stdio|tcp --port N --model toy`."""

from __future__ import annotations

import argparse
import sys

from . import server


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="noisebridge")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("serve", help="serve a bridge model")
    p.add_argument("--transport", choices=("stdio", "tcp"), default="stdio")
    p.add_argument("--port", type=int, default=0, help="tcp port (0 = ephemeral)")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--model", choices=("toy",), default="toy")
    p.add_argument("--tensor-limit", type=int, default=server.DEFAULT_TENSOR_LIMIT)
    args = parser.parse_args(argv)

    if args.transport == "stdio":
        server.serve_stdio(args.model, args.tensor_limit)
    else:
        def announce(port):
            print(f"listening on {args.host}:{port}", flush=True)

        server.serve_tcp(args.model, args.host, args.port, args.tensor_limit, announce)
    return 0


if __name__ == "__main__":
    sys.exit(main())
