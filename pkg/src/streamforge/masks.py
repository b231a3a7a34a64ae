"""Fake-causal visibility masks over buffer groups."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence, Union

import numpy as np

from .buffer import Group


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class GroupMask:
    layout: tuple[Group, ...]
    allowed: np.ndarray  # allowed[q, k]: query group q may attend to key group k

    def __post_init__(self):
        allowed = np.array(self.allowed, dtype=bool, copy=True)
        allowed.flags.writeable = False
        object.__setattr__(self, "allowed", allowed)
        object.__setattr__(self, "layout", tuple(self.layout))

    def __eq__(self, other):
        if not isinstance(other, GroupMask):
            return NotImplemented
        return self.layout == other.layout and np.array_equal(self.allowed, other.allowed)

    __hash__ = None

    @property
    def blocked_count(self) -> int:
        return int((~self.allowed).sum())

    def row(self, group: Group) -> np.ndarray:
        return self.allowed[self.layout.index(group)]


def build_group_mask(layout: Sequence[Group]) -> GroupMask:
    """Stream groups see everything; context groups never see the stream.

    allowed[q][k] holds iff q is a stream group or k is not.
    """
    layout = tuple(layout)
    if not layout or layout[0].kind != "Ref":
        raise LayoutError("layout must be nonempty and begin with the reference group")
    stream = np.array([g.is_stream for g in layout])
    allowed = stream[:, None] | ~stream[None, :]
    return GroupMask(layout, allowed)


def full_mask(layout: Sequence[Group]) -> GroupMask:
    """All-true mask, as used by the non-streaming full-attention baseline."""
    n = len(layout)
    return GroupMask(tuple(layout), np.ones((n, n), dtype=bool))


def expand_to_token_mask(
    mask: GroupMask, tokens_per_group: Union[Mapping[Group, int], Sequence[int]]
) -> np.ndarray:
    if isinstance(tokens_per_group, Mapping):
        missing = [str(g) for g in mask.layout if g not in tokens_per_group]
        if missing:
            raise LayoutError(f"no token count for groups {missing}")
        counts = [tokens_per_group[g] for g in mask.layout]
    else:
        counts = list(tokens_per_group)
        if len(counts) != len(mask.layout):
            raise LayoutError(f"{len(counts)} token counts for {len(mask.layout)} groups")
    if any(c < 1 for c in counts):
        raise LayoutError("token counts must be >= 1")
    group_of_token = np.repeat(np.arange(len(counts)), counts)
    return mask.allowed[np.ix_(group_of_token, group_of_token)]


def render_mask(mask: GroupMask) -> str:
    """0/1 grid with row and column group labels."""
    labels = [str(g) for g in mask.layout]
    width = max(len(s) for s in labels)
    header = " " * width + " " + " ".join(s.rjust(width) for s in labels)
    rows = [header]
    for label, row in zip(labels, mask.allowed):
        cells = " ".join(("1" if v else "0").rjust(width) for v in row)
        rows.append(f"{label.rjust(width)} {cells}")
    return "\n".join(rows)
