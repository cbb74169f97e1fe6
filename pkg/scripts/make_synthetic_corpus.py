#!/usr/bin/env python3
"""Generate the synthetic benchmark corpus (5 shape classes, 5:4:3:2:1 imbalance)."""

import argparse

from fusc.synthetic import make_benchmark_corpus


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("out_dir")
    parser.add_argument("--n-images", type=int, default=2500)
    parser.add_argument("--image-size", type=int, default=32)
    parser.add_argument("--n-patients", type=int, default=50)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--no-text", action="store_true", help="skip burned-in text + sidecar")
    args = parser.parse_args()

    manifest, sidecar = make_benchmark_corpus(
        args.out_dir,
        n_images=args.n_images,
        image_size=args.image_size,
        n_patients=args.n_patients,
        seed=args.seed,
        with_text=not args.no_text,
    )
    print(f"manifest: {manifest}")
    if sidecar:
        print(f"sidecar:  {sidecar}")


if __name__ == "__main__":
    main()
