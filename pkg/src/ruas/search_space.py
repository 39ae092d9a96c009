"""Distillation-cell search space: primitives, mixed cell, genotypes, discrete cells.

Cell topology (5 nodes)::

    n0 = stem(x)
    n1 = e0(n0), n2 = e1(n1), n3 = e2(n2)
    n4 = e3(n3) + n0 + n1 + n2        # fixed distillation links
    out = head(n4)

Only the four sequential edges e0..e3 are searched.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

PRIMITIVES = ("C1", "C3", "RC1", "RC3", "DC3_2", "RDC3_2", "SC")
# kind -> (kernel, dilation, residual)
_SPEC = {
    "C1": (1, 1, False),
    "C3": (3, 1, False),
    "RC1": (1, 1, True),
    "RC3": (3, 1, True),
    "DC3_2": (3, 2, False),
    "RDC3_2": (3, 2, True),
}
NUM_EDGES = 4
NUM_NODES = 5
LEAK = 0.05
MODULE_TAGS = ("IEM", "NRM")


class GenotypeFormatError(ValueError):
    pass


def _init_conv(conv: nn.Conv2d, generator: torch.Generator | None, scale: float = 1.0):
    fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
    with torch.no_grad():
        w = torch.randn(conv.weight.shape, generator=generator, dtype=conv.weight.dtype)
        conv.weight.copy_(w * math.sqrt(2.0 / fan_in) * scale)
        conv.bias.zero_()


def _conv(cin, cout, k, dilation, dtype):
    return nn.Conv2d(cin, cout, k, padding=dilation * (k - 1) // 2, dilation=dilation, dtype=dtype)


class Primitive(nn.Module):
    def __init__(self, kind: str, width: int, generator=None, dtype=torch.float64):
        super().__init__()
        if kind not in PRIMITIVES:
            raise GenotypeFormatError(f"unknown primitive {kind!r}")
        self.kind = kind
        self.width = width
        if kind == "SC":
            self.conv = None
        else:
            k, d, self.residual = _SPEC[kind]
            self.conv = _conv(width, width, k, d, dtype)
            _init_conv(self.conv, generator)

    def forward(self, x):
        if x.shape[1] != self.width:
            raise ValueError(f"{self.kind}: expected {self.width} channels, got {x.shape[1]}")
        if self.conv is None:
            return x
        out = F.leaky_relu(self.conv(x), LEAK)
        return x + out if self.residual else out


def primitive_forward(kind: str, weights: dict | None, x: torch.Tensor) -> torch.Tensor:
    """Stateless form of :class:`Primitive`; ``weights`` holds ``weight``/``bias``."""
    if kind not in PRIMITIVES:
        raise GenotypeFormatError(f"unknown primitive {kind!r}")
    if kind == "SC":
        return x
    k, d, residual = _SPEC[kind]
    w = weights["weight"]
    if w.shape[1] != x.shape[1]:
        raise ValueError(f"{kind}: kernel expects {w.shape[1]} channels, got {x.shape[1]}")
    out = F.leaky_relu(F.conv2d(x, w, weights["bias"], padding=d * (k - 1) // 2, dilation=d), LEAK)
    return x + out if residual else out


def relax(logits: torch.Tensor) -> torch.Tensor:
    return F.softmax(logits, dim=-1)


class _CellBase(nn.Module):
    def __init__(self, in_ch, out_ch, width, generator, dtype, head_scale):
        super().__init__()
        self.in_ch, self.out_ch, self.width = in_ch, out_ch, width
        self.stem = _conv(in_ch, width, 3, 1, dtype)
        self.head = _conv(width, out_ch, 3, 1, dtype)
        _init_conv(self.stem, generator)
        _init_conv(self.head, generator, scale=head_scale)

    def _run(self, x, edge_fn):
        if x.shape[1] != self.in_ch:
            raise ValueError(f"cell expects {self.in_ch} input channels, got {x.shape[1]}")
        nodes = [self.stem(x)]
        for i in range(NUM_EDGES):
            nodes.append(edge_fn(i, nodes[-1]))
        last = nodes[-1] + nodes[0] + nodes[1] + nodes[2]
        return self.head(last)


class MixedCell(_CellBase):
    """Super-network cell; every searched edge holds all seven primitives."""

    def __init__(self, in_ch, out_ch, width, generator=None, dtype=torch.float64, head_scale=0.1):
        super().__init__(in_ch, out_ch, width, generator, dtype, head_scale)
        self.edges = nn.ModuleList(
            nn.ModuleList(Primitive(k, width, generator, dtype) for k in PRIMITIVES)
            for _ in range(NUM_EDGES)
        )

    def forward(self, x, alpha):
        probs = relax(alpha)

        def edge(i, h):
            return sum(p * op(h) for p, op in zip(probs[i], self.edges[i]))

        return self._run(x, edge)


class DiscreteCell(_CellBase):
    def __init__(self, genotype: "Genotype", in_ch, out_ch, generator=None,
                 dtype=torch.float64, head_scale=0.1):
        super().__init__(in_ch, out_ch, genotype.width, generator, dtype, head_scale)
        self.genotype = genotype
        self.edges = nn.ModuleList(Primitive(k, genotype.width, generator, dtype) for k in genotype.ops)

    def forward(self, x, alpha=None):
        return self._run(x, lambda i, h: self.edges[i](h))


def new_alpha(dtype=torch.float64) -> torch.Tensor:
    return torch.zeros(NUM_EDGES, len(PRIMITIVES), dtype=dtype, requires_grad=True)


def mixed_cell_forward(cell: MixedCell, alpha, weights: dict | None, x):
    """Evaluate ``cell`` with architecture ``alpha`` and (optionally) substitute weights."""
    if weights is None:
        return cell(x, alpha)
    return torch.func.functional_call(cell, weights, (x, alpha))


@dataclass(frozen=True)
class Genotype:
    ops: tuple[str, ...]
    width: int
    module: str

    def __post_init__(self):
        if self.module not in MODULE_TAGS:
            raise GenotypeFormatError(f"module tag must be one of {MODULE_TAGS}, got {self.module!r}")
        bad = [op for op in self.ops if op not in PRIMITIVES]
        if bad:
            raise GenotypeFormatError(f"unknown primitive(s) {bad}; expected names from {PRIMITIVES}")
        if len(self.ops) != NUM_EDGES:
            raise GenotypeFormatError(f"expected {NUM_EDGES} edge ops, got {len(self.ops)}")
        if not isinstance(self.width, int) or self.width < 1:
            raise GenotypeFormatError(f"width must be a positive integer, got {self.width!r}")

    def to_text(self) -> str:
        doc = {"module": self.module, "width": self.width, "edges": list(self.ops)}
        return json.dumps(doc, indent=2) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Genotype":
        try:
            doc = json.loads(text)
            return cls(tuple(doc["edges"]), doc["width"], doc["module"])
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise GenotypeFormatError(f"malformed genotype document: {exc}") from exc

    @classmethod
    def parse(cls, spec: str, width: int, module: str) -> "Genotype":
        """Inline form used on the command line: ``"C3,RC1,SC,C3"``."""
        return cls(tuple(s.strip() for s in spec.split(",")), width, module)


def derive_genotype(alpha: torch.Tensor, width: int, module: str) -> Genotype:
    """Per-edge argmax of the relaxed weights; ties go to the earliest primitive."""
    probs = relax(alpha.detach()).tolist()
    ops = []
    for row in probs:
        best = max(row)
        ops.append(PRIMITIVES[row.index(best)])
    return Genotype(tuple(ops), width, module)


def instantiate_discrete(genotype: Genotype, source: MixedCell | None = None, generator=None,
                         in_ch: int | None = None, out_ch: int | None = None,
                         dtype=torch.float64) -> DiscreteCell:
    """Build a single-path cell. Kernels are copied from ``source`` when given."""
    if source is not None:
        in_ch, out_ch = source.in_ch, source.out_ch
        if source.width != genotype.width:
            raise GenotypeFormatError("genotype width differs from source cell width")
    if in_ch is None or out_ch is None:
        raise ValueError("in_ch/out_ch required without a source cell")
    cell = DiscreteCell(genotype, in_ch, out_ch, generator=generator, dtype=dtype)
    if source is not None:
        with torch.no_grad():
            cell.stem.load_state_dict(source.stem.state_dict())
            cell.head.load_state_dict(source.head.state_dict())
            for i, kind in enumerate(genotype.ops):
                src = source.edges[i][PRIMITIVES.index(kind)]
                cell.edges[i].load_state_dict(src.state_dict())
    return cell
