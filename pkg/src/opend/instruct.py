"""Spatial referring expressions for cabinet parts and the inverse parser.

Labelling is whole-set: every part coordinate on an axis is clustered
(ties within EPS_POS share a label) and the k clusters take the k-prefix
label family for that axis.  A cabinet is invalid when an axis needs more
than five labels or two parts end up with the same full description.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Optional

from . import scene

EPS_POS = 0.01

H_FAMILIES = {
    1: [None],
    2: ["left", "right"],
    3: ["left", "middle", "right"],
    4: ["left", "second-left", "second-right", "right"],
    5: ["left", "second-left", "middle", "second-right", "right"],
}
V_FAMILIES = {
    1: [None],
    2: ["bottom", "top"],
    3: ["bottom", "middle", "top"],
    4: ["bottom", "second-bottom", "second-top", "top"],
    5: ["bottom", "second-bottom", "middle", "second-top", "top"],
}


class TooManyPositions(Exception):
    """More than five distinct coordinates on one axis."""


class InvalidCabinet(Exception):
    """Algorithm rejects the layout (label overflow or duplicate description)."""


class NoMatch(Exception):
    """No part description equals the query text."""


@dataclass(frozen=True)
class Instruction:
    part_id: int
    v_label: Optional[str]
    h_label: Optional[str]
    kind: str

    @property
    def text(self) -> str:
        return render_instruction(self)


def axis_labels(coords, axis: str) -> list[Optional[str]]:
    """Assign ordinal labels to coordinates; equal-within-EPS coords share one.

    `axis` is "horizontal" (left..right along ascending y) or "vertical"
    (bottom..top along ascending z).
    """
    coords = [float(c) for c in coords]
    if not coords:
        raise ValueError("need at least one coordinate")
    order = sorted(range(len(coords)), key=lambda i: coords[i])
    cluster = [0] * len(coords)
    k = 0
    prev = coords[order[0]]
    for i in order:
        if coords[i] - prev > EPS_POS:
            k += 1
        cluster[i] = k
        prev = coords[i]
    k += 1
    if k > 5:
        raise TooManyPositions(f"{k} distinct positions on {axis} axis")
    family = (H_FAMILIES if axis == scene.HORIZONTAL else V_FAMILIES)[k]
    return [family[cluster[i]] for i in range(len(coords))]


def describe_parts(c: scene.Cabinet) -> list[Instruction]:
    """One instruction per part, or raise InvalidCabinet."""
    ys = [p.anchor[1] for p in c.parts]
    zs = [p.anchor[2] for p in c.parts]
    try:
        h_labels = axis_labels(ys, scene.HORIZONTAL)
        v_labels = axis_labels(zs, scene.VERTICAL)
    except TooManyPositions as e:
        raise InvalidCabinet(str(e)) from e
    out = [Instruction(p.id, v, h, p.kind) for p, v, h in zip(c.parts, v_labels, h_labels)]
    seen = {}
    for ins in out:
        key = (ins.v_label, ins.h_label, ins.kind)
        if key in seen:
            raise InvalidCabinet(f"parts {seen[key]} and {ins.part_id} share description {key}")
        seen[key] = ins.part_id
    return out


def render_instruction(ins: Instruction) -> str:
    words = ["open", "the"]
    for label in (ins.v_label, ins.h_label):
        if label:
            words.extend(label.split("-"))
    words.append(ins.kind)
    return " ".join(words)


def normalize(text: str) -> str:
    return re.sub(r"\s+", " ", text.strip().lower())


def ground_instruction(text: str, c: scene.Cabinet) -> int:
    """Return the part whose rendered description matches `text` exactly."""
    want = normalize(text)
    for ins in describe_parts(c):
        if normalize(ins.text) == want:
            return ins.part_id
    raise NoMatch(f"no part matches {text!r}")
