"""Central-difference verification of hand-written backward passes."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..sparse import SparseTensor
from .layers import BatchNorm
from .module import Module

# relative error denominator floor; gradients below this are compared absolutely
REL_FLOOR = 1e-6
EPSILONS = (1e-6, 1e-5, 1e-7)


@dataclass
class TensorCheck:
    name: str
    checks: int
    max_rel_err: float
    max_abs_err: float

    def passed(self, tol: float) -> bool:
        return self.max_rel_err < tol


@dataclass
class GradcheckReport:
    tol: float
    tensors: list[TensorCheck] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(t.passed(self.tol) for t in self.tensors)

    def per_layer(self) -> dict[str, float]:
        """Max relative error grouped by owning layer (parameter name minus its leaf)."""
        out: dict[str, float] = {}
        for t in self.tensors:
            layer = t.name.rsplit(".", 1)[0] if "." in t.name else t.name
            out[layer] = max(out.get(layer, 0.0), t.max_rel_err)
        return out

    def failures(self) -> list[TensorCheck]:
        return [t for t in self.tensors if not t.passed(self.tol)]

    def format(self) -> str:
        lines = [f"{'layer':<40} {'max rel err':>12}  status"]
        for layer, err in self.per_layer().items():
            lines.append(f"{layer:<40} {err:12.3e}  {'PASS' if err < self.tol else 'FAIL'}")
        lines.append(f"overall: {'PASS' if self.ok else 'FAIL'} (tol {self.tol:g})")
        return "\n".join(lines)


def rel_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), REL_FLOOR)


def gradcheck(
    network: Module,
    x: SparseTensor,
    loss: Callable[[SparseTensor], tuple[float, np.ndarray]] | None = None,
    *,
    entries: int = 3,
    tol: float = 1e-4,
    seed: int = 0,
) -> GradcheckReport:
    """Compare analytic and central-difference gradients for every parameter and the input.

    Each tensor gets one random-direction check (covers every entry at once)
    plus ``entries`` sampled coordinates. A check that fails is retried with
    other step sizes to rule out ReLU kinks; the best estimate is kept.
    The network must be in float64 and expose ``forward``/``backward``.
    """
    rng = np.random.default_rng(seed)
    if x.features.dtype != np.float64:
        raise TypeError("gradcheck requires float64 features")
    if loss is None:
        probe = None

        def loss(out: SparseTensor):
            nonlocal probe
            if probe is None:
                probe = np.random.default_rng(seed + 1).standard_normal(out.features.shape)
            return float((out.features * probe).sum()), probe

    bns = [m for m in network.modules() if isinstance(m, BatchNorm)]
    tracked = [bn.track_running_stats for bn in bns]
    for bn in bns:
        bn.track_running_stats = False
    try:
        network.zero_grad()
        out = network.forward(x)
        _, g = loss(out)
        grad_x = network.backward(g)

        def evaluate(features: np.ndarray) -> float:
            return loss(network.forward(x.replace(features)))[0]

        def numeric(values: np.ndarray, d: np.ndarray, eps: float) -> float:
            original = values.copy()
            values[...] = original + eps * d
            plus = evaluate(feats_ref[0])
            values[...] = original - eps * d
            minus = evaluate(feats_ref[0])
            values[...] = original
            return (plus - minus) / (2 * eps)

        feats_ref = [x.features.copy()]
        report = GradcheckReport(tol=tol)

        def check_tensor(name: str, values: np.ndarray, grad: np.ndarray, frozen: bool = False):
            if frozen:
                # frozen tensors must receive exactly zero gradient
                leak = float(np.abs(grad).max()) if grad.size else 0.0
                report.tensors.append(TensorCheck(name, 1, 0.0 if leak == 0 else np.inf, leak))
                return
            results = []
            probes = [rng.standard_normal(values.shape)]
            flat_idx = rng.choice(values.size, size=min(entries, values.size), replace=False)
            for i in flat_idx:
                d = np.zeros(values.shape)
                d.flat[i] = 1.0
                probes.append(d)
            for d in probes:
                analytic = float((grad * d).sum())
                best = None
                for eps in EPSILONS:
                    num = numeric(values, d, eps)
                    err = rel_error(analytic, num)
                    if best is None or err < best[0]:
                        best = (err, abs(analytic - num))
                    if err < tol:
                        break
                results.append(best)
            report.tensors.append(
                TensorCheck(name, len(results), max(r[0] for r in results), max(r[1] for r in results))
            )

        for name, p in network.named_parameters():
            check_tensor(name, p.values, p.grad, p.frozen)
        check_tensor("input", feats_ref[0], grad_x)
        return report
    finally:
        for bn, t in zip(bns, tracked):
            bn.track_running_stats = t


def scattered_sites(n_sites: int, channels: int = 3, seed: int = 0, extent: int | None = None) -> SparseTensor:
    """A float64 single-scene input with ``n_sites`` distinct sites spread over a wide box.

    Spreading matters: packed sites collapse to one or two voxels at coarse
    strides, where batch-normalised activations sit exactly on the ReLU kink
    and central differences become meaningless.
    """
    rng = np.random.default_rng(seed)
    extent = extent or 2 * n_sites
    if extent**3 < n_sites:
        raise ValueError("extent too small for the requested site count")
    flat = rng.choice(extent**3, size=n_sites, replace=False)
    coords = np.zeros((n_sites, 4), np.int64)
    coords[:, 1:] = np.stack(np.unravel_index(flat, (extent,) * 3), axis=1)
    return SparseTensor.from_points(coords, rng.standard_normal((n_sites, channels)))
