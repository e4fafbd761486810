"""Block packing and the masked merge tree that reduces many distances at once.

A packed ciphertext splits its N/2 slots into ``blocks`` blocks of ``width``
slots.  Packed gallery ciphertexts hold one template per block.  A query is
encrypted tiled (repeated in every block), so ``(Q - G)^2`` yields one block of
squared differences per gallery entry.

The merge tree then sums every block of many such ciphertexts together.  At
height ``t`` a node holds ``2^t`` sources.  Inside each block, source ``s``
occupies the interval ``[s*w/2^t, (s+1)*w/2^t)``, and every slot of that
interval holds a partial sum over the coordinates congruent to it modulo the
interval length.  Merging two nodes folds each by half an interval with a
single rotation (left for the first node, right for the second), masks the
valid halves and adds the two.  After ``log2(width)`` merges, slot ``b*width +
s`` holds the full block sum of source ``s``.  The cost is about two key
switches per leaf instead of ``log2(width)``, at one level per merge.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from . import he


@dataclass(frozen=True)
class BlockLayout:
    slots: int
    width: int

    def __post_init__(self):
        w = self.width
        if w < 2 or w & (w - 1) or w > self.slots:
            raise ValueError(f"block width must be a power of two in [2, {self.slots}], got {w}")

    @property
    def blocks(self) -> int:
        return self.slots // self.width

    @property
    def height(self) -> int:
        return self.width.bit_length() - 1

    def tile(self, values) -> np.ndarray:
        v = np.zeros(self.width)
        vals = np.asarray(values, dtype=np.float64).ravel()
        if vals.shape[0] > self.width:
            raise ValueError(f"{vals.shape[0]} values do not fit a block of {self.width}")
        v[: vals.shape[0]] = vals
        return np.tile(v, self.blocks)

    def slot(self, block: int, position: int) -> int:
        return block * self.width + position


def pack_blocks(cts, layout: BlockLayout, keys: he.KeySet) -> he.CipherVector:
    """Place ciphertext ``b`` (zero beyond ``width`` slots) into block ``b``."""
    nodes = list(cts)
    if not nodes or len(nodes) > layout.blocks:
        raise ValueError(f"need 1..{layout.blocks} ciphertexts, got {len(nodes)}")
    step = layout.width
    while len(nodes) > 1:
        nxt = []
        for i in range(0, len(nodes), 2):
            if i + 1 < len(nodes):
                nxt.append(he.add(nodes[i], he.rotate_slots(nodes[i + 1], -step, keys)))
            else:
                nxt.append(nodes[i])
        nodes = nxt
        step *= 2
    return nodes[0].replace(slot_count=layout.slots)


class MaskCache:
    """Encoded merge masks keyed by level, half-interval and weight (thread-safe)."""

    def __init__(self, params: he.HeParams, layout: BlockLayout):
        self.params = params
        self.layout = layout
        self._cache: dict = {}
        self._lock = threading.Lock()

    def get(self, level: int, half: int, upper: bool, weight: float) -> he.Plaintext:
        key = (level, half, upper, weight)
        with self._lock:
            hit = self._cache.get(key)
        if hit is None:
            idx = np.arange(self.layout.slots)
            lower = (idx % (2 * half)) < half
            mask = (~lower if upper else lower).astype(np.float64) * weight
            hit = he.const_plaintext(self.params, level, mask)
            with self._lock:
                self._cache.setdefault(key, hit)
        return hit


@dataclass
class _Node:
    ct: he.CipherVector
    sources: list


def _final_mask(node: _Node, upper: bool, layout: BlockLayout, weight: float, valid) -> np.ndarray:
    # last merge: node source s lands on position 2s (+1 for the upper node)
    m = np.zeros((layout.blocks, layout.width))
    for s, src in enumerate(node.sources):
        if src is not None:
            m[:, 2 * s + int(upper)] = weight * np.asarray(valid(src), dtype=np.float64)
    return m.ravel()


def _merge(a: _Node, b: _Node | None, height: int, layout: BlockLayout, keys: he.KeySet,
           masks: MaskCache, weight: float, valid) -> _Node:
    half = layout.width >> (height + 1)
    final = height + 1 == layout.height
    a2 = he.add(a.ct, he.rotate_slots(a.ct, half, keys))
    if final and valid is not None:
        terms = [(a2, _final_mask(a, False, layout, weight, valid))]
    else:
        terms = [(a2, masks.get(a2.level, half, False, weight if final else 1.0))]
    b_src = [None] * len(a.sources)
    if b is not None:
        b2 = he.add(b.ct, he.rotate_slots(b.ct, -half, keys))
        if final and valid is not None:
            terms.append((b2, _final_mask(b, True, layout, weight, valid)))
        else:
            terms.append((b2, masks.get(b2.level, half, True, weight if final else 1.0)))
        b_src = b.sources
    sources = [None] * (2 * len(a.sources))
    sources[0::2] = a.sources
    sources[1::2] = b_src
    return _Node(he.linear_combination(terms), sources)


def merge_tree(leaves, layout: BlockLayout, keys: he.KeySet, masks: MaskCache,
               weight: float = 1.0, valid=None):
    """Reduce up to ``width`` leaves into one ciphertext of block sums.

    ``leaves`` yields ``(source, ciphertext)`` pairs; all ciphertexts share a
    level.  Returns ``(root, sources)`` where ``sources[s]`` is the source whose
    block sums sit at position ``s`` of every block (None for padding).  The
    final merge multiplies by ``weight`` at no extra depth.  When ``valid`` is
    given, ``valid(source)`` returns one flag per block and unflagged blocks
    are zeroed in the same step.  Uses ``log2(width)`` levels.
    """
    H = layout.height
    stack: list[_Node | None] = [None] * (H + 1)
    count = 0

    def merge(x, y, t):
        return _merge(x, y, t, layout, keys, masks, weight, valid)

    for src, ct in leaves:
        count += 1
        if count > layout.width:
            raise ValueError(f"a merge tree takes at most {layout.width} leaves")
        node, t = _Node(ct, [src]), 0
        while stack[t] is not None:
            node = merge(stack[t], node, t)
            stack[t] = None
            t += 1
        stack[t] = node
    if count == 0:
        raise ValueError("merge tree needs at least one leaf")
    if stack[H] is not None:
        return stack[H].ct, stack[H].sources
    carry = None
    for t in range(H):
        cur = stack[t]
        if cur is not None and carry is not None:
            carry = merge(cur, carry, t)
        elif cur is not None:
            carry = merge(cur, None, t)
        elif carry is not None:
            carry = merge(carry, None, t)
    return carry.ct, carry.sources
