"""Per-sample decision paths, JSON export and SVG tree figures."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from xml.sax.saxutils import escape

import numpy as np

from . import tensor as T
from .model import STTreeModel
from .tensor import Tensor


class ExplanationError(RuntimeError):
    pass


@dataclass
class NodeRecord:
    i: int
    similarity: float
    to_left: float
    side: str  # "left" | "right"
    patch_index: int
    span: tuple[int, int]  # [start, end) in raw timestamps


@dataclass
class DecisionPath:
    sample_id: str
    predicted: int
    true: int | None
    nodes: list[NodeRecord]
    rho: list[float]  # leaves in index order 2^d .. 2^(d+1)-1
    leaf_distribution: list[float]  # mixed class distribution
    leaf: int = 0  # leaf reached by the hard path
    class_names: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "predicted": self.predicted,
            "true": self.true,
            "nodes": [
                {
                    "i": n.i,
                    "similarity": n.similarity,
                    "to_left": n.to_left,
                    "side": n.side,
                    "patch_index": n.patch_index,
                    "span": [n.span[0], n.span[1]],
                }
                for n in self.nodes
            ],
            "rho": list(self.rho),
            "leaf_distribution": list(self.leaf_distribution),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DecisionPath":
        nodes = [NodeRecord(n["i"], n["similarity"], n["to_left"], n["side"], n["patch_index"],
                            (n["span"][0], n["span"][1])) for n in d["nodes"]]
        depth = len(nodes)
        leaf = 1
        for n in nodes:
            leaf = 2 * leaf + (n.side == "right")
        return cls(d["sample_id"], d["predicted"], d["true"], nodes, list(d["rho"]),
                   list(d["leaf_distribution"]), leaf if depth else 0)


DECISION_PATH_SCHEMA = {
    "type": "object",
    "required": ["sample_id", "predicted", "true", "nodes", "rho", "leaf_distribution"],
    "additionalProperties": False,
    "properties": {
        "sample_id": {"type": "string"},
        "predicted": {"type": "integer", "minimum": 0},
        "true": {"type": ["integer", "null"], "minimum": 0},
        "nodes": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["i", "similarity", "to_left", "side", "patch_index", "span"],
                "additionalProperties": False,
                "properties": {
                    "i": {"type": "integer", "minimum": 1},
                    "similarity": {"type": "number", "minimum": 0},
                    "to_left": {"type": "number", "minimum": 0, "maximum": 1},
                    "side": {"enum": ["left", "right"]},
                    "patch_index": {"type": "integer", "minimum": 0},
                    "span": {"type": "array", "items": {"type": "integer", "minimum": 0},
                             "minItems": 2, "maxItems": 2},
                },
            },
        },
        "rho": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}},
        "leaf_distribution": {"type": "array",
                              "items": {"type": "number", "minimum": 0, "maximum": 1}},
    },
}


def patch_span(j: int, proto_size: int, patch_width: int, length: int) -> tuple[int, int]:
    """Raw time span [start, end) covered by prototype window ``j``, clipped to ``length``."""
    start = min(patch_width * j, length - 1)
    end = min(patch_width * (j + proto_size), length)
    return start, max(end, start + 1)


def explain(model: STTreeModel, x, labels=None, sample_ids=None,
            original_length: int | None = None) -> list[DecisionPath]:
    """Decision paths for a batch ``x`` of shape (B, C, L) (or one (C, L) series)."""
    if model.tree is None:
        raise ExplanationError("model has no tree to explain")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    b = x.shape[0]
    length = original_length or x.shape[2]
    try:
        with T.no_grad():
            out = model.forward(Tensor(x))
    except T.NonFiniteError as exc:
        raise ExplanationError(f"model produced non-finite values: {exc}") from None
    y_hat = out.y_hat.data
    if not np.all(np.isfinite(y_hat)):
        raise ExplanationError("model produced non-finite probabilities")
    trav = out.traversal
    tree = model.tree
    width = model.config.encoder.patch_width
    rho = trav.rho_matrix()
    paths = []
    for s in range(b):
        nodes = []
        i = 1
        while i in tree.branches:
            r = trav.routes[i]
            tl = float(r.to_left.data[s])
            side = "left" if tl >= 1.0 - tl else "right"
            j = int(r.best_patch_index[s])
            nodes.append(NodeRecord(i, float(r.similarity.data[s]), tl, side, j,
                                    patch_span(j, tree.proto_size, width, length)))
            i = 2 * i if side == "left" else 2 * i + 1
        true = None if labels is None else int(labels[s])
        sid = str(s) if sample_ids is None else str(sample_ids[s])
        paths.append(DecisionPath(sid, int(np.argmax(y_hat[s])), true, nodes,
                                  [float(v) for v in rho[s]], [float(v) for v in y_hat[s]], i))
    return paths


def dumps(path: DecisionPath) -> str:
    return json.dumps(path.to_dict(), indent=2) + "\n"


def export_json(path: DecisionPath, file) -> None:
    with open(file, "w", encoding="utf-8") as fh:
        fh.write(dumps(path))


def load_json(file) -> DecisionPath:
    with open(file, encoding="utf-8") as fh:
        return DecisionPath.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# SVG


@dataclass(frozen=True)
class Layout:
    depth: int
    slot_w: float = 170.0
    panel_w: float = 150.0
    panel_h: float = 80.0
    level_h: float = 140.0
    margin: float = 6.0
    top: float = 30.0
    leaf_h: float = 44.0

    @property
    def width(self) -> float:
        return self.slot_w * 2 ** self.depth

    @property
    def tree_height(self) -> float:
        return self.top + self.level_h * self.depth + self.leaf_h + 20.0

    def centre(self, heap: int) -> tuple[float, float]:
        level = heap.bit_length() - 1
        pos = heap - 2 ** level
        slot = self.width / 2 ** level
        return slot * (pos + 0.5), self.top + level * self.level_h

    def panel_origin(self, heap: int) -> tuple[float, float]:
        cx, y = self.centre(heap)
        return cx - self.panel_w / 2, y

    def span_px(self, heap: int, span: tuple[int, int], length: int) -> tuple[float, float]:
        """x-offset and width of a highlighted raw-time span inside node ``heap``'s plot."""
        x0, _ = self.panel_origin(heap)
        inner = self.panel_w - 2 * self.margin
        return x0 + self.margin + inner * span[0] / length, inner * (span[1] - span[0]) / length


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _series_polylines(series: np.ndarray, x0: float, y0: float, w: float, h: float) -> list[str]:
    lo, hi = float(series.min()), float(series.max())
    scale = (hi - lo) or 1.0
    n = series.shape[1]
    out = []
    for c, ch in enumerate(series):
        pts = " ".join(
            f"{_fmt(x0 + w * t / max(n - 1, 1))},{_fmt(y0 + h - h * (v - lo) / scale)}"
            for t, v in enumerate(ch)
        )
        out.append(f'<polyline class="series" points="{pts}" fill="none" '
                   f'stroke="#4a6fa5" stroke-opacity="{0.9 if c == 0 else 0.45}" stroke-width="0.8"/>')
    return out


def tree_svg_elements(path: DecisionPath, series: np.ndarray, depth: int, layout: Layout,
                      y_offset: float = 0.0, class_names=None) -> list[str]:
    series = np.asarray(series, dtype=np.float64)
    length = series.shape[1]
    on_path = {n.i: n for n in path.nodes}
    els = [f'<g class="tree" transform="translate(0,{_fmt(y_offset)})">',
           f'<text x="8" y="18" font-size="13">sample {escape(path.sample_id)}: '
           f'predicted {escape(_label(path.predicted, class_names))}'
           + (f", true {escape(_label(path.true, class_names))}" if path.true is not None else "")
           + "</text>"]
    n_branch = 2 ** depth - 1
    for heap in range(2, 2 ** (depth + 1)):
        parent = heap // 2
        px, py = layout.centre(parent)
        cx, cy = layout.centre(heap)
        side = "left" if heap % 2 == 0 else "right"
        prob = None
        rec = on_path.get(parent)
        if rec is not None:
            prob = rec.to_left if side == "left" else 1.0 - rec.to_left
        hard = rec is not None and rec.side == side
        els.append(f'<line class="edge" x1="{_fmt(px)}" y1="{_fmt(py + layout.panel_h)}" '
                   f'x2="{_fmt(cx)}" y2="{_fmt(cy)}" stroke="{"#d9480f" if hard else "#999"}" '
                   f'stroke-width="{2 if hard else 1}"/>')
        if prob is not None:
            mx, my = (px + cx) / 2, (py + layout.panel_h + cy) / 2
            els.append(f'<text class="edge-label" x="{_fmt(mx)}" y="{_fmt(my)}" font-size="11" '
                       f'text-anchor="middle">{side[0].upper()} {prob:.3f}</text>')
    for heap in range(1, n_branch + 1):
        x0, y0 = layout.panel_origin(heap)
        rec = on_path.get(heap)
        els.append(f'<g class="branch-panel" data-node="{heap}">')
        els.append(f'<rect x="{_fmt(x0)}" y="{_fmt(y0)}" width="{_fmt(layout.panel_w)}" '
                   f'height="{_fmt(layout.panel_h)}" fill="white" stroke="#333"/>')
        m = layout.margin
        if rec is not None:
            hx, hw = layout.span_px(heap, rec.span, length)
            els.append(f'<rect class="prototype-span" data-start="{rec.span[0]}" data-end="{rec.span[1]}" '
                       f'x="{_fmt(hx)}" y="{_fmt(y0 + m)}" width="{_fmt(hw)}" '
                       f'height="{_fmt(layout.panel_h - 2 * m)}" fill="orange" fill-opacity="0.45"/>')
        els.extend(_series_polylines(series, x0 + m, y0 + m, layout.panel_w - 2 * m,
                                     layout.panel_h - 2 * m))
        label = f"node {heap}" + (f"  sim {rec.similarity:.3f}" if rec is not None else "")
        els.append(f'<text x="{_fmt(x0 + 3)}" y="{_fmt(y0 - 3)}" font-size="10">{label}</text>')
        els.append("</g>")
    for li, heap in enumerate(range(2 ** depth, 2 ** (depth + 1))):
        cx, cy = layout.centre(heap)
        bold = heap == path.leaf
        rho = path.rho[li] if li < len(path.rho) else float("nan")
        els.append(f'<text class="leaf-label" data-leaf="{heap}" x="{_fmt(cx)}" y="{_fmt(cy + 14)}" '
                   f'font-size="11" text-anchor="middle" font-weight="{"bold" if bold else "normal"}">'
                   f'leaf {heap}: rho {rho:.3f}</text>')
    els.append("</g>")
    return els


def _label(idx, class_names):
    if idx is None:
        return "?"
    if class_names and 0 <= idx < len(class_names):
        return str(class_names[idx])
    return str(idx)


def render_svg(paths: list[DecisionPath], series: list[np.ndarray], depth: int,
               class_names=None) -> str:
    if not paths:
        raise ValueError("need at least one instance")
    layout = Layout(depth)
    h = layout.tree_height
    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{_fmt(layout.width)}" '
        f'height="{_fmt(h * len(paths))}" font-family="sans-serif">',
    ]
    for k, (p, s) in enumerate(zip(paths, series)):
        parts.extend(tree_svg_elements(p, s, depth, layout, k * h, class_names))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def render_tree_figure(model: STTreeModel, instances, file, labels=None, sample_ids=None,
                       original_length: int | None = None, class_names=None) -> list[DecisionPath]:
    """Write an SVG with one annotated tree per instance; returns the paths drawn."""
    x = np.asarray(instances, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.shape[0] < 1:
        raise ValueError("need at least one instance")
    length = original_length or x.shape[2]
    paths = explain(model, x, labels, sample_ids, length)
    svg = render_svg(paths, [xi[:, :length] for xi in x], model.config.depth, class_names)
    with open(file, "w", encoding="utf-8") as fh:
        fh.write(svg)
    return paths


def replay_similarity(signal: np.ndarray, prototype: np.ndarray, j: int, eps: float = 1e-4) -> float:
    """Similarity of the window starting at ``j``, recomputed with a direct loop."""
    k = len(prototype)
    d = math.sqrt(sum((float(signal[j + t]) - float(prototype[t])) ** 2 for t in range(k)))
    return math.log(1.0 + 1.0 / (d + eps))
