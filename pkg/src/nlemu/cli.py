"""Command-line entry point: ``nlemu scan|gen|eval``.

Exit status: 0 when everything is benign (or as expected), 1 when a buffer
is convicted (``scan``) or a sample contradicts its sidecar (``eval``),
2 for usage and I/O errors.
"""

from __future__ import annotations

import argparse
import sys
import time
from collections import defaultdict
from pathlib import Path

from . import __version__
from .corpus import (
    BACKGROUND_KINDS,
    VARIANTS,
    ParamError,
    SidecarError,
    SpecError,
    generate_background,
    generate_variant,
    read_corpus,
    sample_name,
    write_sample,
)
from .cpu import RegisterPolicy
from .detector import ScanConfig, scan_buffers
from .ingest import DEFAULT_CHUNK_MAX, DEFAULT_OVERLAP, FormatError, chunk_stream, load_input
from .report import BufferResult, ReportDocument

EXIT_OK = 0
EXIT_FOUND = 1
EXIT_USAGE = 2

PROFILES = ("baseline", "extended")


class UsageError(Exception):
    pass


def _positive(text: str) -> int:
    value = int(text, 0)
    if value < 1:
        raise argparse.ArgumentTypeError(f"{text} is not a positive integer")
    return value


def _nonneg(text: str) -> int:
    value = int(text, 0)
    if value < 0:
        raise argparse.ArgumentTypeError(f"{text} is negative")
    return value


def _detector_options(p: argparse.ArgumentParser, profile_default: str) -> None:
    g = p.add_argument_group("detector")
    choices = PROFILES if profile_default != "both" else PROFILES + ("both",)
    g.add_argument("--profile", choices=choices, default=profile_default,
                   help="GetPC modes: baseline (call_rel, fstenv) or extended (all four)")
    g.add_argument("--threshold", type=_positive, default=8, metavar="K",
                   help="distinct in-buffer reads after GetPC needed to convict (default 8)")
    g.add_argument("--insn-budget", type=_positive, default=8192, metavar="N",
                   help="instructions per chain (default 8192)")
    g.add_argument("--wall-budget", type=_nonneg, default=2000, metavar="MS",
                   help="milliseconds per buffer, 0 for no limit (default 2000)")
    g.add_argument("--syscall-model", choices=("on", "off"), default="off",
                   help="emulate the allocate/read-memory system calls (default off)")
    g.add_argument("--registers", choices=("zeroed", "randomized"), default="zeroed",
                   help="initial register policy; randomized draws from --seed")
    g.add_argument("--seed", type=int, default=0, metavar="S", help="seed for all randomness (default 0)")
    g.add_argument("--jobs", type=_positive, default=1, metavar="N", help="worker processes (default 1)")
    g.add_argument("--json", metavar="PATH", help="write the structured report here ('-' for stdout)")
    g.add_argument("--timing", action="store_true",
                   help="include wall time in the structured report (makes it run-dependent)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nlemu", description="Network-level emulation shellcode detector.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    scan = sub.add_parser("scan", help="emulate every offset of the inputs and report verdicts")
    scan.add_argument("inputs", nargs="+", help="files to scan ('-' for standard input)")
    scan.add_argument("--format", choices=("raw", "hex"), default="raw", help="input encoding (default raw)")
    scan.add_argument("--chunk-max", type=_positive, default=DEFAULT_CHUNK_MAX, metavar="BYTES",
                      help=f"largest buffer handed to the detector (default {DEFAULT_CHUNK_MAX})")
    scan.add_argument("--overlap", type=_nonneg, default=DEFAULT_OVERLAP, metavar="BYTES",
                      help=f"bytes shared by consecutive chunks (default {DEFAULT_OVERLAP})")
    scan.add_argument("--prefix-only", action="store_true", help="inspect only the first chunk of each input")
    scan.add_argument("--chains", action="store_true", help="include per-offset chain summaries in the report")
    _detector_options(scan, "baseline")

    gen = sub.add_parser("gen", help="write corpus samples with sidecar metadata")
    gen.add_argument("--variant", required=True, help=f"one of {', '.join(VARIANTS)}, or 'all'")
    gen.add_argument("--count", type=_positive, default=1, help="samples per variant (default 1)")
    gen.add_argument("--seed", type=int, default=0, help="first seed (default 0)")
    gen.add_argument("--out", required=True, metavar="DIR", help="output directory")
    gen.add_argument("--payload-length", type=_positive, help="payload bytes (default varies with seed)")
    gen.add_argument("--junk-density", type=float, help="junk probability in [0, 1]")

    ev = sub.add_parser("eval", help="score the detector against a corpus and background data")
    ev.add_argument("corpus", help="directory of samples and sidecars")
    ev.add_argument("--background-bytes", type=_nonneg, default=DEFAULT_CHUNK_MAX, metavar="BYTES",
                    help="bytes of each background kind to scan (default 65536, 0 to skip)")
    _detector_options(ev, "both")
    return parser


def scan_config(args, profile: str) -> ScanConfig:
    policy = RegisterPolicy.randomized(args.seed) if args.registers == "randomized" else RegisterPolicy.zeroed()
    return ScanConfig.for_profile(
        profile,
        payload_read_threshold=args.threshold,
        instruction_budget=args.insn_budget,
        wall_budget=None if args.wall_budget == 0 else float(args.wall_budget),
        register_policy=policy,
        syscall_model=args.syscall_model == "on",
    )


def _emit(doc: ReportDocument, target: str | None) -> None:
    if not target:
        return
    text = doc.to_json()
    if target == "-":
        sys.stdout.write(text)
    else:
        Path(target).write_text(text)


def _hex(v: int | None) -> str:
    return "-" if v is None else f"0x{v:08x}"


def cmd_scan(args) -> int:
    started = time.perf_counter()
    if args.overlap >= args.chunk_max:
        raise UsageError("--overlap must be smaller than --chunk-max")
    config = scan_config(args, args.profile)
    buffers = []
    for source in args.inputs:
        try:
            data = load_input(source, args.format)
        except FormatError as exc:
            raise UsageError(f"{source}: {exc}") from None
        except OSError as exc:
            raise UsageError(f"{source}: {exc.strerror or exc}") from None
        if not data:
            raise UsageError(f"{source}: empty input")
        for chunk in chunk_stream(data, args.chunk_max, args.overlap, source=source,
                                  prefix_only=args.prefix_only):
            buffers.append((f"{source}@{chunk.origin[1]}", chunk))
    reports = scan_buffers(buffers, config, jobs=args.jobs)
    results = [BufferResult.from_detection(r, with_chains=args.chains) for r in reports]
    echo = config.echo()
    echo.update(chunk_max=args.chunk_max, overlap=args.overlap, prefix_only=args.prefix_only,
                format=args.format, seed=args.seed)
    doc = ReportDocument("scan", echo, results,
                         wall_time=time.perf_counter() - started if args.timing else None)
    if args.json != "-":
        for b in results:
            line = f"{b.id}\t{b.length} bytes\t{b.verdict}"
            if b.verdict == "shellcode":
                line += f" at offset {b.offset} ({b.getpc['kind']} at {_hex(b.getpc['at_eip'])}, {b.read_count} reads)"
            if b.skipped:
                line += f"\t{b.skipped} offsets skipped (wall budget)"
            print(line)
        agg = doc.aggregate
        print(f"{agg['buffers']} buffers, {agg['convicted']} convicted, {agg['skipped_offsets']} offsets skipped")
    _emit(doc, args.json)
    return EXIT_FOUND if doc.aggregate["convicted"] else EXIT_OK


def cmd_gen(args) -> int:
    variants = VARIANTS if args.variant == "all" else (args.variant,)
    if args.variant != "all" and args.variant not in VARIANTS:
        raise UsageError(f"unknown variant {args.variant!r}; choose from {', '.join(VARIANTS)} or all")
    params = {}
    if args.payload_length is not None:
        params["payload_length"] = args.payload_length
    if args.junk_density is not None:
        params["junk_density"] = args.junk_density
    out = Path(args.out)
    try:
        samples = [generate_variant(v, s, **params) for v in variants
                   for s in range(args.seed, args.seed + args.count)]
    except (ParamError, SpecError) as exc:
        raise UsageError(str(exc)) from None
    try:
        out.mkdir(parents=True, exist_ok=True)
        for sample in samples:
            bin_path, meta_path = write_sample(sample, out)
            print(f"{bin_path.name}\t{meta_path.name}\t{len(sample.data)} bytes\t"
                  f"baseline={sample.expected_baseline_verdict}\textended={sample.expected_extended_verdict}")
    except OSError as exc:
        raise UsageError(f"cannot write to {out}: {exc.strerror or exc}") from None
    return EXIT_OK


def cmd_eval(args) -> int:
    started = time.perf_counter()
    directory = Path(args.corpus)
    if not directory.is_dir():
        raise UsageError(f"{directory}: not a directory")
    try:
        samples = read_corpus(directory)
    except SidecarError as exc:
        raise UsageError(f"malformed sidecar: {exc}") from None
    if not samples:
        raise UsageError(f"{directory}: no samples found")
    profiles = PROFILES if args.profile == "both" else (args.profile,)
    background = []
    if args.background_bytes:
        for kind in BACKGROUND_KINDS:
            data = generate_background(kind, args.background_bytes, args.seed)
            background += [(f"background:{kind}@{c.origin[1]}", c)
                           for c in chunk_stream(data, source=f"background:{kind}")]

    results: list[BufferResult] = []
    matrix: dict = {}
    mismatches: list[dict] = []
    configs = {}
    for profile in profiles:
        config = scan_config(args, profile)
        configs[profile] = config.echo()
        tasks = [(f"{profile}:{sample_name(s)}", s.data) for s in samples]
        tasks += [(f"{profile}:{name}", buf) for name, buf in background]
        reports = scan_buffers(tasks, config, jobs=args.jobs)
        rows: dict = defaultdict(lambda: {"samples": 0, "expected_shellcode": 0, "detected": 0, "mismatches": 0})
        expectations = [getattr(s, f"expected_{profile}_verdict") for s in samples]
        expectations += ["benign"] * len(background)
        groups = [s.variant for s in samples] + ["background:" + name.split(":")[1].split("@")[0]
                                                 for name, _ in background]
        for report, expected, group in zip(reports, expectations, groups):
            result = BufferResult.from_detection(report)
            results.append(result)
            row = rows[group]
            row["samples"] += 1
            row["expected_shellcode"] += expected == "shellcode"
            row["detected"] += result.verdict == "shellcode"
            if result.verdict != expected:
                row["mismatches"] += 1
                mismatches.append({"id": result.id, "expected": expected, "actual": result.verdict})
        matrix[profile] = {k: rows[k] for k in sorted(rows)}

    doc = ReportDocument("eval", {"profiles": configs, "seed": args.seed,
                                  "background_bytes": args.background_bytes},
                         results, extra={"matrix": matrix, "mismatches": mismatches},
                         wall_time=time.perf_counter() - started if args.timing else None)
    if args.json != "-":
        print(f"{'variant':<28}{'profile':<10}{'n':>5}{'expected':>10}{'detected':>10}{'benign':>8}{'mismatch':>10}")
        for profile, rows in matrix.items():
            for group, row in rows.items():
                print(f"{group:<28}{profile:<10}{row['samples']:>5}{row['expected_shellcode']:>10}"
                      f"{row['detected']:>10}{row['samples'] - row['detected']:>8}{row['mismatches']:>10}")
        print(f"{len(mismatches)} result(s) contradict expectations")
        for m in mismatches:
            print(f"  {m['id']}: expected {m['expected']}, got {m['actual']}")
    _emit(doc, args.json)
    return EXIT_FOUND if mismatches else EXIT_OK


COMMANDS = {"scan": cmd_scan, "gen": cmd_gen, "eval": cmd_eval}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"nlemu {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:  # configuration rejected by ScanConfig and friends
        print(f"nlemu {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"nlemu {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
