"""Standalone extraction script.

Loads a saved torch model (TorchScript or a pickled module), a .npz data
file with arrays "x" and "y", and writes the dataset directory.
"""

import argparse
import sys

import numpy as np
import torch

from .extract import ExtractionError, ExtractionSpec, extract


def build_parser():
    parser = argparse.ArgumentParser(prog="layerdump", description=__doc__)
    parser.add_argument("--model", required=True, help="TorchScript file or pickled nn.Module")
    parser.add_argument("--data", required=True, help=".npz with arrays x (inputs) and y (labels)")
    parser.add_argument("--layers", required=True, help="comma-separated module names to capture")
    parser.add_argument("--out", required=True, help="output dataset directory")
    parser.add_argument("--batch-size", type=int, default=64)
    parser.add_argument("--no-input", action="store_true", help="omit the raw-input layer")
    parser.add_argument("--no-logits", action="store_true", help="omit the logits layer")
    return parser


def load_model(path):
    try:
        return torch.jit.load(path, map_location="cpu")
    except Exception:
        return torch.load(path, map_location="cpu", weights_only=False)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        model = load_model(args.model)
        bundle = np.load(args.data)
        if "x" not in bundle or "y" not in bundle:
            raise ExtractionError(f"{args.data} must contain arrays 'x' and 'y'")
        spec = ExtractionSpec(
            layer_names=[s.strip() for s in args.layers.split(",") if s.strip()],
            out_dir=args.out,
            batch_size=args.batch_size,
            include_input=not args.no_input,
            include_logits=not args.no_logits,
        )
        out = extract(model, bundle["x"], bundle["y"], spec)
    except (ExtractionError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"dataset written to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
