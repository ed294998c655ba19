"""Command-line wrapper: teacher-export --model M --data D --out O."""

from __future__ import annotations

import argparse
import logging
import sys

from .export import export


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = argparse.ArgumentParser(
        prog="teacher-export",
        description="Export per-layer mean-pooled hidden states of a frozen "
                    "pretrained transformer into the teacher interchange format.")
    parser.add_argument("--model", required=True,
                        help="model identifier or local model directory")
    parser.add_argument("--data", required=True, help="TSV dataset path")
    parser.add_argument("--out", required=True, help="output interchange file")
    parser.add_argument("--max-len", type=int, default=128,
                        help="token truncation length (default 128)")
    parser.add_argument("--batch-size", type=int, default=16,
                        help="inference batch size (default 16)")
    args = parser.parse_args(argv)
    try:
        manifest = export(args.model, args.data, args.out,
                          max_len=args.max_len, batch_size=args.batch_size)
    except Exception as exc:  # model load, IO, or format failures
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"{args.out} ({manifest.example_count} examples, "
          f"J={manifest.num_layers}, H={manifest.hidden_dim})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
