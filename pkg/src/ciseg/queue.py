"""The growing, partially frozen set of learnable queries."""

from __future__ import annotations

import math

import torch
from torch import nn

INSTANCE_QUERY_RATIO = 2.5
TABLES_PER_QUERY = 2  # content feature + positional embedding


def queries_for(n_classes: int, mode: str) -> int:
    if mode == "semantic":
        return n_classes
    if mode == "instance":
        # round half up; Python's round() would send 2.5 -> 2
        return int(math.floor(INSTANCE_QUERY_RATIO * n_classes + 0.5))
    raise ValueError(f"unknown mode {mode!r}")


def param_delta(n_new: int, d_q: int, tables_per_query: int = TABLES_PER_QUERY) -> int:
    """Parameters added by ``n_new`` queries."""
    return n_new * d_q * tables_per_query


class QueryGroup(nn.Module):
    """Queries added at one continual step."""

    def __init__(self, step_index: int, class_ids, query_count: int, d_q: int, seed: int = 0):
        super().__init__()
        if query_count < 1:
            raise ValueError("query_count must be positive")
        self.step_index = step_index
        self.class_ids = tuple(int(c) for c in class_ids)
        self.query_count = query_count
        gen = torch.Generator().manual_seed(seed)
        scale = 1.0 / math.sqrt(d_q)
        self.feature_embeddings = nn.Parameter(torch.randn(query_count, d_q, generator=gen) * scale)
        self.positional_embeddings = nn.Parameter(
            torch.randn(query_count, d_q, generator=gen) * scale
        )
        self.frozen = False

    def freeze(self):
        self.frozen = True
        self.feature_embeddings.requires_grad_(False)
        self.positional_embeddings.requires_grad_(False)

    def metadata(self) -> dict:
        return {
            "step_index": self.step_index,
            "class_ids": list(self.class_ids),
            "query_count": self.query_count,
            "frozen": self.frozen,
        }

    def extra_repr(self) -> str:
        return f"step={self.step_index}, queries={self.query_count}, classes={self.class_ids}, frozen={self.frozen}"


class QueryQueue(nn.Module):
    def __init__(self, d_q: int, mode: str = "semantic"):
        super().__init__()
        self.d_q = d_q
        self.mode = mode
        self.groups = nn.ModuleList()

    @property
    def current_step(self) -> int:
        return len(self.groups) - 1

    @property
    def total_queries(self) -> int:
        return sum(g.query_count for g in self.groups)

    @property
    def class_ids(self) -> list[int]:
        """All owned classes, in learning order (the class head's column order)."""
        return [c for g in self.groups for c in g.class_ids]

    def extend(self, new_class_ids, seed: int = 0, freeze: bool = True) -> "QueryQueue":
        """Append an unfrozen group for ``new_class_ids``; freeze the older ones."""
        new = [int(c) for c in new_class_ids]
        if not new:
            raise ValueError("extend needs at least one new class")
        owned = set(self.class_ids)
        dup = sorted({c for c in new if c in owned} | {c for c in new if new.count(c) > 1})
        if dup:
            raise ValueError(f"class ids already owned by the queue: {dup}")
        if freeze:
            for g in self.groups:
                g.freeze()
        param = next(self.parameters(), None)
        group = QueryGroup(len(self.groups), new, queries_for(len(new), self.mode), self.d_q, seed)
        if param is not None:
            group.to(dtype=param.dtype)
        self.groups.append(group)
        return self

    def group_slices(self) -> list[slice]:
        out, lo = [], 0
        for g in self.groups:
            out.append(slice(lo, lo + g.query_count))
            lo += g.query_count
        return out

    def group_indices(self, k: int) -> list[int]:
        sl = self.group_slices()[k]
        return list(range(sl.start, sl.stop))

    def newest_indices(self) -> list[int]:
        return self.group_indices(len(self.groups) - 1)

    def old_indices(self) -> list[int]:
        """Queries of every group before the current step."""
        return [i for k in range(len(self.groups) - 1) for i in self.group_indices(k)]

    def frozen_index_set(self) -> set[int]:
        if not self.groups:
            raise ValueError("empty queue")
        return {i for k, g in enumerate(self.groups) if g.frozen for i in self.group_indices(k)}

    def owner(self, index: int) -> tuple[int, tuple[int, ...]]:
        """(group, owned classes) for a global query index.

        In semantic mode query j of a group owns the group's j-th class.
        """
        for k, sl in enumerate(self.group_slices()):
            if sl.start <= index < sl.stop:
                g = self.groups[k]
                if self.mode == "semantic":
                    return k, (g.class_ids[index - sl.start],)
                return k, g.class_ids
        raise IndexError(index)

    def column_mask(self) -> torch.Tensor:
        """M x (K + 1) bool: logit columns a query may score at inference.

        A query covers the classes of its own group plus no-object; columns
        follow ``class_ids`` order, so each group owns a contiguous block.
        """
        k = len(self.class_ids)
        allowed = torch.zeros(self.total_queries, k + 1, dtype=torch.bool)
        allowed[:, -1] = True
        col = 0
        for g, rows in zip(self.groups, self.group_slices()):
            allowed[rows, col : col + len(g.class_ids)] = True
            col += len(g.class_ids)
        return allowed

    def features(self) -> torch.Tensor:
        return torch.cat([g.feature_embeddings for g in self.groups], dim=0)

    def positions(self) -> torch.Tensor:
        return torch.cat([g.positional_embeddings for g in self.groups], dim=0)

    def metadata(self) -> dict:
        return {
            "d_q": self.d_q,
            "mode": self.mode,
            "current_step": self.current_step,
            "groups": [g.metadata() for g in self.groups],
        }

    @classmethod
    def from_metadata(cls, meta: dict) -> "QueryQueue":
        """Rebuild the layout (embeddings are placeholders until loaded)."""
        q = cls(meta["d_q"], meta["mode"])
        for gm in meta["groups"]:
            g = QueryGroup(gm["step_index"], gm["class_ids"], gm["query_count"], meta["d_q"])
            if gm["frozen"]:
                g.freeze()
            q.groups.append(g)
        return q
