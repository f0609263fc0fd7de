"""Componentized ad creation: materials -> components -> templates -> formats.

Templates come from a maximal-rectangles packer (best-short-side-fit) run
over several insertion orders and component subsets, then filtered by the
layout design rules. Format selection ranks by eCPM = CPA x CVR x CTR.
"""

from __future__ import annotations

import hashlib
import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

log = logging.getLogger(__name__)

MATERIAL_KINDS = ("text-title", "text-description", "image", "app-package", "phone",
                  "product-link", "sitelink")

# material kind -> functional unit kinds it can be rendered as
COMPATIBILITY = {
    "text-title": ("title",),
    "text-description": ("description",),
    "image": ("image",),
    "phone": ("call-button",),
    "app-package": ("download-button",),
    "sitelink": ("sitelink-row",),
    "product-link": ("sitelink-row", "image"),
}

# unit kind -> rendered size (w, h) in layout units
COMPONENT_SIZES = {
    "title": (16, 2),
    "description": (16, 3),
    "image": (8, 5),
    "call-button": (8, 2),
    "download-button": (8, 2),
    "sitelink-row": (24, 2),
}

KIND_PRIORITY = {"title": 0, "description": 1}


class InfeasibleCanvas(ValueError):
    pass


@dataclass(frozen=True)
class Material:
    kind: str
    payload: str
    width: Optional[int] = None
    height: Optional[int] = None

    def __post_init__(self):
        if self.kind not in MATERIAL_KINDS:
            raise ValueError(f"unknown material kind {self.kind!r}")
        if not self.payload:
            raise ValueError("material payload must be non-empty")
        if self.kind == "image" and (not self.width or not self.height):
            raise ValueError("image materials need width and height")

    def to_record(self) -> dict:
        rec = {"kind": self.kind, "payload": self.payload}
        if self.width is not None:
            rec["width"] = self.width
            rec["height"] = self.height
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "Material":
        return cls(rec["kind"], rec["payload"], rec.get("width"), rec.get("height"))


@dataclass(frozen=True)
class Component:
    id: str
    material: Material
    kind: str
    w: int
    h: int

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError("component size must be positive")
        if self.kind not in COMPATIBILITY.get(self.material.kind, ()):
            raise ValueError(f"{self.material.kind} cannot render as {self.kind}")


@dataclass(frozen=True)
class Rect:
    x: float
    y: float
    w: float
    h: float

    @property
    def area(self) -> float:
        return self.w * self.h

    def intersects(self, other: "Rect") -> bool:
        return (self.x < other.x + other.w and other.x < self.x + self.w
                and self.y < other.y + other.h and other.y < self.y + self.h)

    def contains(self, other: "Rect") -> bool:
        return (other.x >= self.x and other.y >= self.y
                and other.x + other.w <= self.x + self.w and other.y + other.h <= self.y + self.h)


@dataclass(frozen=True)
class Slot:
    rect: Rect
    kind: str


@dataclass(frozen=True)
class Template:
    canvas: tuple[int, int]
    slots: tuple[Slot, ...]
    rules: tuple[str, ...] = ("title-present", "title-above-description", "min-margin")

    @property
    def id(self) -> str:
        geo = ";".join(f"{s.kind}@{s.rect.x},{s.rect.y},{s.rect.w},{s.rect.h}" for s in self.slots)
        return "t" + hashlib.sha1(f"{self.canvas}|{geo}".encode()).hexdigest()[:10]

    @property
    def kinds(self) -> tuple[str, ...]:
        return tuple(s.kind for s in self.slots)

    @property
    def fill_ratio(self) -> float:
        w, h = self.canvas
        return sum(s.rect.area for s in self.slots) / float(w * h)

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "canvas": list(self.canvas),
            "slots": [{"kind": s.kind, "x": s.rect.x, "y": s.rect.y, "w": s.rect.w, "h": s.rect.h}
                      for s in self.slots],
        }


@dataclass(frozen=True)
class AdFormat:
    id: str
    template: Template
    assignment: tuple[tuple[int, Component], ...]
    predicted: dict = field(default_factory=dict, compare=False, hash=False)

    @property
    def kinds(self) -> tuple[str, ...]:
        return self.template.kinds

    @property
    def fill_ratio(self) -> float:
        return self.template.fill_ratio

    def check(self) -> None:
        filled = {i for i, _ in self.assignment}
        if filled != set(range(len(self.template.slots))):
            raise ValueError(f"format {self.id} leaves mandatory slots empty")
        for i, comp in self.assignment:
            if comp.kind != self.template.slots[i].kind:
                raise ValueError(f"format {self.id}: slot {i} kind mismatch")

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "template": self.template.to_record(),
            "assignment": [{"slot": i, "component": c.id, "material": c.material.to_record()}
                           for i, c in self.assignment],
        }


# ---------------------------------------------------------------------------
# components


def componentize(materials: Iterable[Material], prefix: str = "c") -> tuple[list[Component], list[str]]:
    """One component per viable (material, unit kind) pairing.

    Returns the components and a report of skipped materials.
    """
    components: list[Component] = []
    skipped: list[str] = []
    for i, mat in enumerate(materials):
        kinds = COMPATIBILITY.get(mat.kind, ())
        if not kinds:
            skipped.append(f"{mat.kind}: no compatible unit")
            continue
        for kind in kinds:
            w, h = COMPONENT_SIZES[kind]
            components.append(Component(f"{prefix}{i}-{kind}", mat, kind, w, h))
    return components, skipped


# ---------------------------------------------------------------------------
# maximal rectangles packer


class MaxRectsBin:
    """Maximal-rectangles bin with best-short-side-fit placement (no rotation)."""

    def __init__(self, width: float, height: float):
        self.width = width
        self.height = height
        self.free: list[Rect] = [Rect(0, 0, width, height)]
        self.used: list[Rect] = []

    def find_position(self, w: float, h: float) -> Optional[Rect]:
        best = None
        best_key = None
        for fr in self.free:
            if w <= fr.w and h <= fr.h:
                leftover_h = fr.w - w
                leftover_v = fr.h - h
                key = (min(leftover_h, leftover_v), max(leftover_h, leftover_v), fr.y, fr.x)
                if best_key is None or key < best_key:
                    best_key = key
                    best = Rect(fr.x, fr.y, w, h)
        return best

    def insert(self, w: float, h: float) -> Optional[Rect]:
        node = self.find_position(w, h)
        if node is None:
            return None
        self._place(node)
        return node

    def _place(self, node: Rect) -> None:
        new_free: list[Rect] = []
        for fr in self.free:
            if not fr.intersects(node):
                new_free.append(fr)
                continue
            if node.x > fr.x:
                new_free.append(Rect(fr.x, fr.y, node.x - fr.x, fr.h))
            if node.x + node.w < fr.x + fr.w:
                new_free.append(Rect(node.x + node.w, fr.y, fr.x + fr.w - node.x - node.w, fr.h))
            if node.y > fr.y:
                new_free.append(Rect(fr.x, fr.y, fr.w, node.y - fr.y))
            if node.y + node.h < fr.y + fr.h:
                new_free.append(Rect(fr.x, node.y + node.h, fr.w, fr.y + fr.h - node.y - node.h))
        self.free = _prune(new_free)
        self.used.append(node)


def _prune(rects: list[Rect]) -> list[Rect]:
    rects = [r for r in rects if r.w > 0 and r.h > 0]
    keep = []
    for i, a in enumerate(rects):
        contained = False
        for j, b in enumerate(rects):
            if i != j and b.contains(a) and (a != b or j < i):
                contained = True
                break
        if not contained:
            keep.append(a)
    return keep


def _insertion_orders(sizes: Sequence[tuple[float, float]], priority: Sequence[int]) -> list[list[int]]:
    idx = range(len(sizes))
    keys = [
        lambda i: (-sizes[i][0] * sizes[i][1], priority[i], i),       # area
        lambda i: (-sizes[i][1], -sizes[i][0], priority[i], i),       # height
        lambda i: (-sizes[i][0], -sizes[i][1], priority[i], i),       # width
        lambda i: (priority[i], i),                                   # given order
        lambda i: (-max(sizes[i]), -min(sizes[i]), priority[i], i),   # long side
        lambda i: (-min(sizes[i]), -max(sizes[i]), priority[i], i),   # short side
    ]
    return [sorted(idx, key=k) for k in keys]


def pack_rectangles(width: float, height: float, sizes: Sequence[tuple[float, float]],
                    priority: Optional[Sequence[int]] = None,
                    fixed: Optional[dict[int, Rect]] = None) -> list[list[Optional[Rect]]]:
    """Pack ``sizes`` with every insertion order; one placement list per order.

    Items in ``fixed`` are placed first at the given rectangles.
    """
    priority = list(priority) if priority is not None else [0] * len(sizes)
    fixed = fixed or {}
    results = []
    for order in _insertion_orders(sizes, priority):
        bin_ = MaxRectsBin(width, height)
        placed: list[Optional[Rect]] = [None] * len(sizes)
        for i, rect in fixed.items():
            bin_._place(rect)
            placed[i] = rect
        for i in order:
            if i in fixed:
                continue
            w, h = sizes[i]
            placed[i] = bin_.insert(w, h)
        results.append(placed)
    return results


def best_fill(width: float, height: float, sizes: Sequence[tuple[float, float]],
              max_exhaustive: int = 10, max_permutations: int = 720) -> tuple[float, list[Optional[Rect]]]:
    """Heuristic search for the fullest packing.

    Every insertion order is tried on every subset of the items (small inputs)
    or on the subsets reached by greedily dropping one item at a time. Small
    inputs that still leave space get a bounded pass over explicit orderings.
    """
    n = len(sizes)
    area = float(width * height)
    best: tuple[float, list[Optional[Rect]]] = (0.0, [None] * n)

    def consider(subset: Sequence[int]) -> float:
        nonlocal best
        sub = [sizes[i] for i in subset]
        top = 0.0
        for placed in pack_rectangles(width, height, sub):
            fill = sum(r.area for r in placed if r is not None) / area
            top = max(top, fill)
            if fill > best[0] + 1e-12:
                full = [None] * n
                for i, r in zip(subset, placed):
                    full[i] = r
                best = (fill, full)
        return top

    if n <= max_exhaustive:
        for r in range(n, 0, -1):
            for subset in itertools.combinations(range(n), r):
                if sum(sizes[i][0] * sizes[i][1] for i in subset) <= best[0] * area:
                    continue
                consider(subset)
                if best[0] >= 1.0 - 1e-12:
                    return best
        # Restarts over explicit orderings of the full item list.
        for perm in itertools.islice(itertools.permutations(range(n)), max_permutations):
            bin_ = MaxRectsBin(width, height)
            placed: list[Optional[Rect]] = [None] * n
            for i in perm:
                placed[i] = bin_.insert(*sizes[i])
            fill = sum(r.area for r in placed if r is not None) / area
            if fill > best[0] + 1e-12:
                best = (fill, placed)
                if fill >= 1.0 - 1e-12:
                    break
        return best

    current = list(range(n))
    score = consider(current)
    while len(current) > 1:
        trials = [(consider([j for j in current if j != i]), i) for i in current]
        top, drop = max(trials, key=lambda t: (t[0], -t[1]))
        if top <= score:
            break
        score = top
        current.remove(drop)
    return best


# ---------------------------------------------------------------------------
# templates


def check_design_rules(t: Template, min_margin: float = 1.0) -> list[str]:
    """Names of violated rules (empty list -> valid)."""
    problems = []
    W, H = t.canvas
    canvas = Rect(0, 0, W, H)
    for s in t.slots:
        if not canvas.contains(s.rect):
            problems.append("outside-canvas")
    for a, b in itertools.combinations(t.slots, 2):
        if a.rect.intersects(b.rect):
            problems.append("overlap")
        else:
            gap = _gap(a.rect, b.rect)
            if 0 < gap < min_margin:
                problems.append("min-margin")
    titles = [s for s in t.slots if s.kind == "title"]
    if len(titles) != 1:
        problems.append("title-present")
    else:
        title = titles[0].rect
        for s in t.slots:
            if s.kind == "description" and s.rect.y < title.y + title.h:
                problems.append("title-above-description")
    return problems


def _gap(a: Rect, b: Rect) -> float:
    dx = max(b.x - (a.x + a.w), a.x - (b.x + b.w), 0)
    dy = max(b.y - (a.y + a.h), a.y - (b.y + b.h), 0)
    return max(dx, dy)


def generate_templates(canvas: tuple[int, int], components: Sequence[Component],
                       max_templates: int = 8, min_margin: float = 1.0) -> list[Template]:
    W, H = canvas
    tw, th = COMPONENT_SIZES["title"]
    dw, dh = COMPONENT_SIZES["description"]
    if not (tw <= W and dw <= W and th + dh <= H):
        raise InfeasibleCanvas(f"canvas {canvas} cannot hold a title above a description")

    usable = [c for c in components if c.w <= W and c.h <= H and c.w * c.h <= W * H]
    dropped = len(components) - len(usable)
    if dropped:
        log.debug("dropped %d components larger than the canvas", dropped)

    # One representative per (kind, size); templates are about geometry.
    reps: dict[tuple[str, int, int], Component] = {}
    for c in usable:
        reps.setdefault((c.kind, c.w, c.h), c)
    items = sorted(reps, key=lambda k: (KIND_PRIORITY.get(k[0], 2), k))
    mandatory = [k for k in items if k[0] in ("title", "description")]
    optional = [k for k in items if k not in mandatory]

    subsets = []
    for r in range(len(optional), -1, -1):
        subsets.extend(itertools.combinations(optional, r))

    seen: set[str] = set()
    templates: list[Template] = []
    for subset in subsets:
        chosen = mandatory + list(subset)
        sizes = [(k[1], k[2]) for k in chosen]
        prio = [KIND_PRIORITY.get(k[0], 2) for k in chosen]
        # free packing, plus a pass with the title stacked over the description at the top left
        stacked = {}
        if len(mandatory) == 2:
            stacked = {0: Rect(0, 0, tw, th), 1: Rect(0, th, dw, dh)}
        packings = pack_rectangles(W, H, sizes, prio)
        if stacked:
            packings += pack_rectangles(W, H, sizes, prio, stacked)
        candidates = []
        for placed in packings:
            slots = tuple(sorted(
                (Slot(r, k[0]) for r, k in zip(placed, chosen) if r is not None),
                key=lambda s: (s.rect.y, s.rect.x, s.kind),
            ))
            t = Template((W, H), slots)
            if check_design_rules(t, min_margin):
                continue
            candidates.append(t)
        candidates.sort(key=lambda t: (-t.fill_ratio, t.id))
        for t in candidates:
            if t.id not in seen:
                seen.add(t.id)
                templates.append(t)
        if len(templates) >= max_templates:
            break
    return templates[:max_templates]


def build_formats(owner: str, templates: Sequence[Template], components: Sequence[Component]) -> list[AdFormat]:
    formats = []
    for t in templates:
        assignment = []
        used: set[str] = set()
        for i, slot in enumerate(t.slots):
            match = next((c for c in components if c.kind == slot.kind and c.id not in used
                          and c.w <= slot.rect.w and c.h <= slot.rect.h), None)
            if match is None:
                break
            used.add(match.id)
            assignment.append((i, match))
        else:
            fmt = AdFormat(f"{owner}:{t.id}", t, tuple(assignment))
            fmt.check()
            formats.append(fmt)
    return formats


def evaluate_templates(templates: Sequence[Template], predict_ctr: Callable[[object, Template], float],
                       contexts: Sequence[object], min_margin: float = 1.0) -> list[tuple[Template, float]]:
    """Mean predicted CTR of each valid template over ``contexts``, best first."""
    scored = []
    for t in templates:
        if check_design_rules(t, min_margin):
            continue
        score = sum(predict_ctr(ctx, t) for ctx in contexts) / len(contexts) if contexts else 0.0
        scored.append((t, score))
    scored.sort(key=lambda ts: (-ts[1], ts[0].id))
    return scored


def select_format(formats: Sequence[AdFormat], target_cpa: float, context: object,
                  predict: Callable[[object, AdFormat], tuple[float, float]]) -> AdFormat:
    """Pick the format maximizing target_cpa x pcvr x pctr; ties go to the smaller id."""
    if not formats:
        raise ValueError("no formats to select from")
    best, best_score = None, None
    for fmt in sorted(formats, key=lambda f: f.id):
        ctr, cvr = predict(context, fmt)
        score = target_cpa * cvr * ctr
        if best_score is None or score > best_score:
            best, best_score = fmt, score
    return best
