"""``dlow-lab`` command-line entry point.

Exit codes: 0 success, 2 configuration or input error, 3 training fault.
"""

import argparse
import logging
import sys

from .config import load_config
from .errors import ConfigError, ParseError, TrainingFault
from .experiments import COMMANDS, run

EXIT_OK, EXIT_CONFIG, EXIT_TRAINING = 0, 2, 3


def _list(conv):
    def parse(text):
        try:
            return [conv(t) for t in text.replace(",", " ").split()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"not a list of numbers: {text!r}") from None

    return parse


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="dlow-lab",
        description="Train and evaluate diversifying latent mappings on synthetic motion data.",
    )
    ap.add_argument("command", choices=list(COMMANDS))
    ap.add_argument("--config", required=True, help="INI experiment config")
    ap.add_argument("--seed", type=int, help="override [run] seed")
    ap.add_argument("--out", help="override [run] out (artifact root)")
    ap.add_argument("--k", type=_list(int), help="K values, e.g. 1,2,5,10 (eval and curve-k)")
    ap.add_argument("--beta", type=_list(float), help="beta values for sweep-beta, e.g. 1,10,100")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors, which matches the config-error code
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(args.config, seed=args.seed, out=args.out, k_list=args.k, betas=args.beta)
        out_dir = run(args.command, cfg, ks=args.k)
    except (ConfigError, ParseError) as exc:
        print(f"dlow-lab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingFault as exc:
        print(f"dlow-lab: training fault: {exc}", file=sys.stderr)
        if exc.diagnostics:
            print(f"dlow-lab: diagnostics: {exc.diagnostics}", file=sys.stderr)
        return EXIT_TRAINING
    print((out_dir / "report.txt").read_text(), end="")
    print(f"artifacts: {out_dir}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
