"""Convert a Planetoid citation dataset (the raw ind.<name>.* files) into the
cogsl dataset directory layout.

    python scripts/convert_planetoid.py path/to/planetoid/raw citeseer data/citeseer

The standard public split is kept: the first len(y) nodes train, the next 500
validate, and test.index lists the 1000 test nodes. Test indices missing from
the feature files (isolated Citeseer nodes) get zero features and appear in no
split.
"""
import json
import os
import pickle
import sys

import numpy as np
import scipy.sparse as sp


def load(raw_dir, name):
    parts = {}
    for key in ["x", "y", "tx", "ty", "allx", "ally", "graph"]:
        with open(os.path.join(raw_dir, f"ind.{name}.{key}"), "rb") as f:
            parts[key] = pickle.load(f, encoding="latin1")
    with open(os.path.join(raw_dir, f"ind.{name}.test.index")) as f:
        test_index = [int(line) for line in f if line.strip()]
    return parts, test_index


def convert(raw_dir, name, out_dir):
    p, test_index = load(raw_dir, name)
    test_sorted = np.sort(test_index)
    lo, hi = test_sorted[0], test_sorted[-1]

    tx, ty = p["tx"], p["ty"]
    if hi - lo + 1 != len(test_index):
        full_tx = sp.lil_matrix((hi - lo + 1, tx.shape[1]))
        full_tx[test_sorted - lo, :] = tx
        tx = full_tx
        full_ty = np.zeros((hi - lo + 1, ty.shape[1]))
        full_ty[test_sorted - lo, :] = ty
        ty = full_ty

    x = sp.vstack((p["allx"], tx)).tolil()
    x[test_index, :] = x[test_sorted, :]
    y = np.vstack((p["ally"], ty))
    y[test_index, :] = y[test_sorted, :]
    x = np.asarray(x.todense(), dtype=np.float64)
    labels = y.argmax(axis=1)

    n = x.shape[0]
    edges = set()
    for i, nbrs in p["graph"].items():
        for j in nbrs:
            if i != j and i < n and j < n:
                edges.add((min(i, j), max(i, j)))

    n_train = p["y"].shape[0]
    train = list(range(n_train))
    val = list(range(n_train, n_train + 500))
    test = [int(i) for i in test_sorted]

    os.makedirs(out_dir, exist_ok=True)
    np.savetxt(os.path.join(out_dir, "features.csv"), x, delimiter=",", fmt="%.10g")
    np.savetxt(os.path.join(out_dir, "labels.csv"), labels, fmt="%d")
    with open(os.path.join(out_dir, "edges.csv"), "w") as f:
        for i, j in sorted(edges):
            f.write(f"{i},{j}\n")
    with open(os.path.join(out_dir, "splits.json"), "w") as f:
        json.dump({"train": train, "val": val, "test": test}, f)
    print(name, x.shape, len(edges), "edges", len(train), len(val), len(test))


if __name__ == "__main__":
    if len(sys.argv) != 4:
        sys.exit(__doc__)
    convert(*sys.argv[1:])
