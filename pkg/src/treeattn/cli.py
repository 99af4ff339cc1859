"""``treeattn`` command line: verify, bench, report.

Exit codes: 0 success, 1 verification failure, 2 I/O or argument error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .bench import (
    ReportError,
    SweepSpec,
    compare,
    format_report,
    parse_records,
    records_to_csv,
    records_to_json,
    run_sweep,
    write_output,
)
from .cluster import Topology, load_topology
from .numerics import DType
from .reduction import Strategy
from .verify import run_verify

DTYPE_FLAGS = {"f64": DType.FLOAT64, "f32": DType.FLOAT32, "bf16": DType.BF16EMU}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="treeattn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    v = sub.add_parser("verify", help="run the property suites")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--grid-size", type=int, default=20)
    v.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)

    b = sub.add_parser("bench", help="sweep sequence lengths and cluster sizes")
    b.add_argument("--seq-len", type=int, action="append", help="total sequence length (repeatable)")
    b.add_argument("--seq-len-per-device", type=int, action="append",
                   help="sequence length per worker; N = value * p (repeatable)")
    b.add_argument("--nodes", type=int, action="append", help="node count (repeatable)")
    b.add_argument("--gpus-per-node", type=int, default=8)
    b.add_argument("--heads", type=int, default=16)
    b.add_argument("--head-dim", type=int, default=128)
    b.add_argument("--batch", type=int, default=1)
    b.add_argument("--dtype", choices=sorted(DTYPE_FLAGS), default="bf16")
    b.add_argument("--algo", choices=["tree", "ring", "both"], default="both")
    b.add_argument("--allreduce", choices=["tree", "ring", "hier"], default="hier")
    b.add_argument("--config", help="topology file (key = value lines)")
    b.add_argument("--out", default="-")
    b.add_argument("--format", choices=["csv", "json"], default="csv")
    b.add_argument("--seed", type=int, default=0)

    r = sub.add_parser("report", help="compare tree and ring records from a bench run")
    r.add_argument("in_path")
    return parser


def cmd_verify(seed: int = 0, grid_size: int = 20, fault: bool = False) -> int:
    return run_verify(seed, grid_size, fault, out=lambda s: print(s, flush=True))


def cmd_bench(args: argparse.Namespace) -> int:
    if args.seq_len and args.seq_len_per_device:
        print("error: use either --seq-len or --seq-len-per-device", file=sys.stderr)
        return 2
    dtype = DTYPE_FLAGS[args.dtype]
    try:
        topology = load_topology(args.config) if args.config else Topology(element_bytes=dtype.itemsize)
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    try:
        spec = SweepSpec(
            seq_lens=args.seq_len_per_device or args.seq_len or [8192],
            cluster_sizes=[(n, args.gpus_per_node) for n in (args.nodes or [topology.nodes])],
            b=args.batch,
            n_h=args.heads,
            d_h=args.head_dim,
            dtype=dtype,
            algorithms=("tree", "ring") if args.algo == "both" else (args.algo,),
            seed=args.seed,
            per_device=bool(args.seq_len_per_device),
            allreduce=Strategy.parse(args.allreduce),
        )
        records, ok = run_sweep(spec, topology)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    meta = spec.metadata(topology)
    try:
        if args.format == "csv":
            write_output(records_to_csv(records, meta), args.out)
        else:
            write_output(records_to_json(records), args.out)
            if args.out != "-":
                Path(str(args.out) + ".meta.json").write_text(
                    json.dumps(meta, sort_keys=True, indent=1) + "\n", encoding="utf-8"
                )
    except OSError as e:
        print(f"error: cannot write {args.out}: {e}", file=sys.stderr)
        return 2
    if not ok:
        print("error: some cells exceed the dtype error tolerance", file=sys.stderr)
        return 1
    return 0


def cmd_report(in_path: str) -> int:
    try:
        text = Path(in_path).read_text(encoding="utf-8")
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    try:
        records = parse_records(text)
    except ReportError as e:
        print(f"error: {in_path}: {e}", file=sys.stderr)
        return 2
    print(format_report(compare(records)), end="", flush=True)
    return 0


def _dispatch(args: argparse.Namespace) -> int:
    if args.command == "verify":
        return cmd_verify(args.seed, args.grid_size, args.inject_fault)
    if args.command == "bench":
        return cmd_bench(args)
    return cmd_report(args.in_path)


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except BrokenPipeError:
        # downstream closed early (e.g. piped into head)
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return 0


if __name__ == "__main__":
    sys.exit(main())
