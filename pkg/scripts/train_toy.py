"""Train the small model on synthetic blobs and print the learning curve.

Runs several seeds to show the result does not hinge on one lucky draw.
"""
import argparse

from threadpoolctl import threadpool_limits

from scalable_vit.backbone import build_model
from scalable_vit.config import toy_spec
from scalable_vit.train import accuracy, blob_dataset, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--samples", type=int, default=16)
    ap.add_argument("--steps", type=int, default=200)
    args = ap.parse_args()

    with threadpool_limits(1):
        for seed in args.seeds:
            images, labels = blob_dataset(args.samples, 32, seed=seed)
            model = build_model(toy_spec(), seed=seed)
            log = train(model, images, labels, steps=args.steps, seed=seed, stop_at_perfect=False)
            curve = " ".join(f"{step}:{acc:.2f}" for step, acc in log.accuracies[:10])
            print(f"seed {seed}: params {model.num_params():,}  first 100% at step {log.steps_to_perfect}  "
                  f"final loss {log.losses[-1]:.4f}  acc {accuracy(model, images, labels):.3f}")
            print(f"  accuracy curve {curve} ...")


if __name__ == "__main__":
    main()
