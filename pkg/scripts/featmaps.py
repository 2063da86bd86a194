"""Dump feature maps of a randomly initialised model at the usual inspection points.

Writes stage1_block2, stage2_block2 (global block 4) and stage3_block20 (global
block 24) for the S variant, plus global block 2, which is the same map as
stage1_block2.
"""
import argparse
import sys

from scalable_vit.cli import main as cli_main


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("image", help="binary PPM input, e.g. 224x224")
    ap.add_argument("--outdir", default="featmaps")
    ap.add_argument("--variant", default="S")
    args = ap.parse_args()
    return cli_main(["featmap", "--variant", args.variant, args.image, "--stage", "1", "--block", "2",
                     "--global-block", "2", "--global-block", "4", "--global-block", "24",
                     "--outdir", args.outdir])


if __name__ == "__main__":
    sys.exit(main())
