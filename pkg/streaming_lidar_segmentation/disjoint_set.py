"""Disjoint sets with path compression, used to resolve merged cluster ids."""

from typing import Dict, Hashable, List


class DisjointSet:
    """
    Union-find over hashable elements.

    `union(keep, drop)` always leaves the root of `keep` as the representative,
    so callers decide which id survives a merge.
    """

    def __init__(self):
        self.parent: Dict[Hashable, Hashable] = {}

    def __contains__(self, x):
        return x in self.parent

    def __len__(self):
        return len(self.parent)

    def add(self, x):
        self.parent.setdefault(x, x)

    def find(self, x):
        if x not in self.parent:
            self.parent[x] = x
            return x
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, keep, drop):
        """Merge the set of `drop` into the set of `keep`; returns the surviving root"""
        root_keep = self.find(keep)
        root_drop = self.find(drop)
        if root_keep != root_drop:
            self.parent[root_drop] = root_keep
        return root_keep

    def groups(self) -> Dict[Hashable, List[Hashable]]:
        clusters: Dict[Hashable, List[Hashable]] = {}
        for x in self.parent:
            clusters.setdefault(self.find(x), []).append(x)
        return clusters

    def reset(self):
        self.parent.clear()
