"""Batch figure rendering driven by a sectioned config file.

Each section describes one figure:

    [population-death]
    kind = population
    input = out/population.csv
    output = figs/population_death.png
    n0 = 10
    rate = -0.5

Exit codes: 0 on success, 1 on schema mismatch or missing input (the
message names the offending file or column).
"""
from __future__ import annotations

import argparse
import configparser
import sys

from .figures import FigureSpec, SchemaError, render

__all__ = ["main", "load_specs"]


def load_specs(path: str) -> list[FigureSpec]:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    read = parser.read(path)
    if not read:
        raise SchemaError(f"config file '{path}' not found")
    specs = []
    for section in parser.sections():
        body = parser[section]
        kind = body.get("kind")
        if kind is None:
            raise SchemaError(f"section [{section}] needs a 'kind' key")
        known = {"kind", "input", "output", "n0", "rate", "title"}
        for key in body:
            if key not in known:
                raise SchemaError(f"unknown key '{key}' in section [{section}]")
        if "input" not in body or "output" not in body:
            raise SchemaError(f"section [{section}] needs 'input' and 'output'")
        specs.append(FigureSpec(
            kind=kind,
            input=body["input"],
            output=body["output"],
            n0=float(body["n0"]) if "n0" in body else None,
            rate=float(body["rate"]) if "rate" in body else None,
            title=body.get("title", section),
        ))
    if not specs:
        raise SchemaError(f"config '{path}' defines no figures")
    return specs


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="mkvb-plots",
        description="Render standard figures from the engine's CSV outputs",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("render")
    p.add_argument("--config", required=True, help="figure-list config file")
    args = parser.parse_args(argv)
    try:
        specs = load_specs(args.config)
        for spec in specs:
            summary = render(spec)
            print(f"rendered {spec.kind} -> {summary['output']}")
    except SchemaError as exc:
        print(f"mkvb-plots: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
