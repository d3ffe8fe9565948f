"""Export scikit-learn tabular datasets into the cogsl dataset directory layout.

Features are z-scored per column. The split is a seeded class-covering draw:
one train node per class first, then the remaining train/val/test slots
uniformly. edges.csv is left empty; the initial graph for these datasets is
a cosine KNN graph built at run time.
"""
import json
import os
import sys

import numpy as np
from sklearn import datasets

SPECS = {
    "wine": (datasets.load_wine, 10, 20),
    "cancer": (datasets.load_breast_cancer, 10, 20),
    "digits": (datasets.load_digits, 50, 100),
}


def split(labels, n_train, n_val, seed):
    rng = np.random.default_rng(seed)
    train = [int(rng.choice(np.flatnonzero(labels == c))) for c in np.unique(labels)]
    rest = np.setdiff1d(np.arange(len(labels)), train)
    rest = rng.permutation(rest)
    extra = n_train - len(train)
    train += [int(i) for i in rest[:extra]]
    val = [int(i) for i in rest[extra:extra + n_val]]
    test = [int(i) for i in rest[extra + n_val:]]
    return sorted(train), sorted(val), sorted(test)


def main(out_root):
    for name, (loader, n_train, n_val) in SPECS.items():
        bunch = loader()
        x = bunch.data.astype(np.float64)
        std = x.std(axis=0)
        std[std == 0] = 1.0
        x = (x - x.mean(axis=0)) / std
        y = bunch.target.astype(np.int64)
        train, val, test = split(y, n_train, n_val, seed=0)
        d = os.path.join(out_root, name)
        os.makedirs(d, exist_ok=True)
        np.savetxt(os.path.join(d, "features.csv"), x, delimiter=",", fmt="%.10g")
        np.savetxt(os.path.join(d, "labels.csv"), y, fmt="%d")
        open(os.path.join(d, "edges.csv"), "w").close()
        with open(os.path.join(d, "splits.json"), "w") as f:
            json.dump({"train": train, "val": val, "test": test}, f)
        print(name, x.shape, len(train), len(val), len(test))


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "data")
