#!/usr/bin/env python3
"""Convert citation-network datasets into the plain-text layout read by `smoothgnn`.

Output directory layout:

    graph.edges   one "u v" pair per line, 0-based node ids
    features.csv  "#sparse d=<d>" header, then one line per node of "idx:value" pairs
    labels.txt    one integer class id per line
    classes.txt   class names in id order (informational)

Two input formats are supported:

  linqs      <name>.content / <name>.cites pair (the original Cora distribution)
  planetoid  ind.<name>.{x,tx,allx,y,ty,ally,graph,test.index} pickles

Examples:

    python3 scripts/convert_dataset.py linqs /path/to/cora cora data/cora
    python3 scripts/convert_dataset.py planetoid /path/to/citeseer citeseer data/citeseer
"""

import argparse
import os
import pickle
import sys

import numpy as np
import scipy.sparse as sp


def fmt(v):
    if float(v) == int(v):
        return str(int(v))
    return repr(float(v))


def write_dataset(out_dir, edges, features, labels, class_names):
    os.makedirs(out_dir, exist_ok=True)
    n, d = features.shape
    features = sp.csr_matrix(features)
    features.sort_indices()
    with open(os.path.join(out_dir, "graph.edges"), "w") as f:
        f.write("# undirected citation links, 0-based node ids\n")
        for u, v in edges:
            f.write(f"{u} {v}\n")
    with open(os.path.join(out_dir, "features.csv"), "w") as f:
        f.write(f"#sparse d={d}\n")
        for i in range(n):
            lo, hi = features.indptr[i], features.indptr[i + 1]
            pairs = (
                f"{j}:{fmt(x)}"
                for j, x in zip(features.indices[lo:hi], features.data[lo:hi])
                if x != 0
            )
            f.write(" ".join(pairs) + "\n")
    with open(os.path.join(out_dir, "labels.txt"), "w") as f:
        for y in labels:
            f.write(f"{int(y)}\n")
    with open(os.path.join(out_dir, "classes.txt"), "w") as f:
        for name in class_names:
            f.write(f"{name}\n")
    print(
        f"{out_dir}: {n} nodes, {len(edges)} edge records, "
        f"{len(class_names)} classes, {d} features"
    )


def convert_linqs(src, name, out_dir):
    ids, rows, raw_labels = [], [], []
    with open(os.path.join(src, f"{name}.content")) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            ids.append(parts[0])
            rows.append([float(x) for x in parts[1:-1]])
            raw_labels.append(parts[-1])
    index = {pid: i for i, pid in enumerate(ids)}
    class_names = sorted(set(raw_labels))
    class_id = {c: i for i, c in enumerate(class_names)}
    labels = [class_id[c] for c in raw_labels]
    edges = []
    skipped = 0
    with open(os.path.join(src, f"{name}.cites")) as f:
        for line in f:
            parts = line.split()
            if len(parts) != 2:
                continue
            if parts[0] not in index or parts[1] not in index:
                skipped += 1
                continue
            edges.append((index[parts[1]], index[parts[0]]))
    if skipped:
        print(f"skipped {skipped} links to papers without content", file=sys.stderr)
    write_dataset(out_dir, edges, np.array(rows), labels, class_names)


def load_pickle(path):
    with open(path, "rb") as f:
        return pickle.load(f, encoding="latin1")


def convert_planetoid(src, name, out_dir):
    obj = {
        key: load_pickle(os.path.join(src, f"ind.{name}.{key}"))
        for key in ("x", "y", "tx", "ty", "allx", "ally", "graph")
    }
    with open(os.path.join(src, f"ind.{name}.test.index")) as f:
        test_index = [int(line) for line in f if line.strip()]
    test_sorted = np.sort(test_index)
    tx, ty = obj["tx"], obj["ty"]
    if name == "citeseer":
        # isolated test nodes are missing from tx/ty; pad with zero rows
        full = range(min(test_index), max(test_index) + 1)
        tx_ext = sp.lil_matrix((len(full), tx.shape[1]))
        tx_ext[test_sorted - min(test_sorted), :] = tx
        tx = tx_ext
        ty_ext = np.zeros((len(full), ty.shape[1]))
        ty_ext[test_sorted - min(test_sorted), :] = ty
        ty = ty_ext
    features = sp.vstack((obj["allx"], tx)).tolil()
    features[test_index, :] = features[test_sorted, :]
    onehot = np.vstack((obj["ally"], ty))
    onehot[test_index, :] = onehot[test_sorted, :]
    # rows without a label (citeseer padding) fall back to class 0
    labels = onehot.argmax(axis=1)
    n = features.shape[0]
    edges = []
    for u, neigh in obj["graph"].items():
        for v in neigh:
            if u < n and v < n and u <= v:
                edges.append((int(u), int(v)))
    edges = sorted(set(edges))
    class_names = [f"class{c}" for c in range(onehot.shape[1])]
    write_dataset(out_dir, edges, features, labels, class_names)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("format", choices=["linqs", "planetoid"])
    parser.add_argument("src", help="directory holding the raw files")
    parser.add_argument("name", help="file prefix, e.g. cora")
    parser.add_argument("out", help="output directory")
    args = parser.parse_args()
    if args.format == "linqs":
        convert_linqs(args.src, args.name, args.out)
    else:
        convert_planetoid(args.src, args.name, args.out)


if __name__ == "__main__":
    main()
