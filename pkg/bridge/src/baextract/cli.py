"""ba-extract: image tree in, evaluation artifacts out.

Exit codes: 0 success, 1 extraction or verification failure, 2 usage
error. The last stdout line is a machine-readable key=value summary.
"""

from __future__ import annotations

import argparse
import sys
from typing import Optional

from . import __version__
from .errors import BridgeError
from .extract import ExtractorConfig, config_from_ini, extract
from .schema_check import schema_check


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ba-extract",
        description="Extract manifest, embeddings and masks from an image "
                    "directory laid out one folder per identity.")
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    parser.add_argument("--input", required=True,
                        help="image directory, one folder per identity")
    parser.add_argument("--output", required=True,
                        help="artifact output directory")
    parser.add_argument("--config", default=None,
                        help="INI file with [extract] and [models] sections")
    parser.add_argument("--batch-size", type=int, default=None,
                        help="images per adapter batch (overrides config)")
    parser.add_argument("--verify", action="store_true",
                        help="run the byte-level schema check afterwards "
                             "and fail on findings")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.config is not None:
            config = config_from_ini(args.config, args.input, args.output,
                                     batch_size=args.batch_size)
        else:
            kwargs = {}
            if args.batch_size is not None:
                kwargs["batch_size"] = args.batch_size
            config = ExtractorConfig(input_dir=args.input,
                                     output_dir=args.output, **kwargs)
        result = extract(config)
        findings = 0
        if args.verify:
            report = schema_check(config.output_dir)
            findings = len(report.findings)
            for finding in report.findings:
                print(f"finding: {finding.subject}: {finding.detail}",
                      file=sys.stderr)
        print(f"records={result.n_records} skipped={len(result.skips)} "
              f"manifest={result.manifest_path} "
              f"embeddings={result.embeddings_path} "
              f"masks={result.masks_dir} "
              f"skip_report={result.skip_report_path} "
              f"findings={findings}")
        return 1 if findings else 0
    except (BridgeError, OSError) as exc:
        print(f"ba-extract: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
