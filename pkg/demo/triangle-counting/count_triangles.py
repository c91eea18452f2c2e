#!/usr/bin/env python3
"""Count triangles in an undirected graph given as an edge list.

Usage: count_triangles.py EDGES_FILE OUT_FILE

Uses sorted-adjacency intersection: for each edge (u, v) with u < v, count
common neighbors w > v, so every triangle is counted exactly once.
"""

import sys


def load_edges(path):
    adjacency = {}
    with open(path, "r", encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            a, b = (int(x) for x in line.split())
            if a == b:
                continue
            adjacency.setdefault(a, set()).add(b)
            adjacency.setdefault(b, set()).add(a)
    return adjacency


def count_triangles(adjacency):
    total = 0
    for u in sorted(adjacency):
        for v in sorted(adjacency[u]):
            if v <= u:
                continue
            for w in adjacency[u] & adjacency[v]:
                if w > v:
                    total += 1
    return total


def main():
    edges_file, out_file = sys.argv[1], sys.argv[2]
    count = count_triangles(load_edges(edges_file))
    with open(out_file, "w", encoding="utf-8") as handle:
        handle.write(f"{count}\n")
    print(f"triangles: {count}")


if __name__ == "__main__":
    main()
