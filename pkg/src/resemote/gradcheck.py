"""Central finite-difference oracle for the analytic backward passes."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .functional import kink_probe
from .tensor import NonFiniteError, Tensor


@dataclass
class GradcheckResult:
    max_rel_error: float
    checked: int
    excluded: int
    worst_input: int = -1
    worst_index: tuple[int, ...] = field(default_factory=tuple)

    def passed(self, tol: float) -> bool:
        return self.checked > 0 and self.max_rel_error <= tol


def _same_pattern(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def gradcheck(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-4,
    seed: int = 0,
    max_coords: int | None = None,
    floor: float = 1e-6,
) -> GradcheckResult:
    """Compare analytic gradients of ``fn`` against central differences.

    ``fn`` is re-evaluated with each coordinate of each input nudged by +/-eps;
    the inputs must be float64 tensors that ``fn`` closes over. A non-scalar
    output is reduced with a fixed random projection first. A coordinate is
    excluded when the nudge changes any relu mask or max-pool argmax, i.e. the
    probe straddles a kink. Relative error per coordinate is
    |a - n| / max(|a|, |n|, floor); the floor keeps gradients that are exactly
    zero in theory (a bias feeding a training-mode batch norm, say) from turning
    finite-difference roundoff into a large relative error.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    for i, t in enumerate(inputs):
        if t.dtype != np.float64:
            raise TypeError(f"gradcheck input {i} must be float64, got {t.dtype}")
    # separate stream so the projection never coincides with seed-derived test inputs
    rng = np.random.default_rng([seed, 0x9C])

    for t in inputs:
        t.requires_grad = True
        t.zero_grad()
    with kink_probe() as base_pattern:
        out = fn()
    projection = rng.standard_normal(out.shape) if out.size > 1 else np.ones(out.shape)
    out.backward(projection)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    def objective() -> tuple[float, list[np.ndarray]]:
        with kink_probe() as pattern:
            y = fn()
        return float(np.sum(y.data.astype(np.float64) * projection)), pattern

    coords = [(i, j) for i, t in enumerate(inputs) for j in range(t.size)]
    if max_coords is not None and max_coords < len(coords):
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[k] for k in sorted(pick)]

    result = GradcheckResult(0.0, 0, 0)
    for i, j in coords:
        flat = inputs[i].data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + eps
        f_plus, p_plus = objective()
        flat[j] = orig - eps
        f_minus, p_minus = objective()
        flat[j] = orig
        if not (_same_pattern(p_plus, base_pattern) and _same_pattern(p_minus, base_pattern)):
            result.excluded += 1
            continue
        numeric = (f_plus - f_minus) / (2 * eps)
        if not np.isfinite(numeric):
            raise NonFiniteError(f"finite-difference estimate is non-finite at input {i}, index {j}")
        a = float(analytic[i].reshape(-1)[j])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        result.checked += 1
        if rel > result.max_rel_error:
            result.max_rel_error = rel
            result.worst_input = i
            result.worst_index = tuple(int(v) for v in np.unravel_index(j, inputs[i].shape))
    for t in inputs:
        t.zero_grad()
    return result


# ---------------------------------------------------------------- layer suite

LAYER_TOL = 1e-4
MODEL_TOL = 1e-3
COMPOSITES = ("se_block", "residual_block[projection]", "residual_block[identity]")


@dataclass
class SuiteEntry:
    name: str
    worst: float
    tol: float
    checked: int
    excluded: int

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.worst <= self.tol


def _layer_cases(seed: int) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    from . import functional as F
    from .model import ModelConfig, build, make_residual_block, make_se_block

    rng = np.random.default_rng(seed)

    def t(*shape):
        return Tensor(rng.standard_normal(shape), dtype=np.float64)

    x = t(2, 3, 6, 6)
    w, b = t(4, 3, 3, 3), t(4)
    gamma, beta = t(3), t(3)
    stats = F.RunningStats(rng.standard_normal(3), rng.uniform(0.5, 2.0, 3))
    y = t(2, 3, 6, 6)
    scale = t(2, 3, 1, 1)
    xin, lw, lb = t(5, 6), t(4, 6), t(4)
    logits = t(3, 7)
    labels = rng.integers(0, 7, 3)

    se, se_params = make_se_block(8, 4, seed)
    f0 = t(2, 8, 4, 4)
    res, res_params, res_stats = make_residual_block(8, 16, 2, seed)
    rid, rid_params, _ = make_residual_block(8, 8, 1, seed + 1)
    # 8x8 input leaves 32 values per channel for the strided block's batch norms;
    # with only 8 the statistics are so curved that eps=1e-4 truncation dominates
    r_in = t(2, 8, 8, 8)
    for p in se_params + res_params + rid_params:
        p.data = p.data.astype(np.float64)
    for s in res_stats.values():
        s.mean, s.var = s.mean.astype(np.float64), s.var.astype(np.float64)

    model = build(ModelConfig.tiny(seed=seed)).astype(np.float64)
    m_in = t(4, 3, 8, 8)
    m_labels = rng.integers(0, 7, 4)

    return {
        "conv2d": (lambda: F.conv2d(x, w, b, stride=2, padding=1), [x, w, b]),
        "batch_norm2d[train]": (lambda: F.batch_norm2d(x, gamma, beta, F.RunningStats.fresh(3, np.float64), True), [x, gamma, beta]),
        "batch_norm2d[eval]": (lambda: F.batch_norm2d(x, gamma, beta, stats, False), [x, gamma, beta]),
        "relu": (lambda: F.relu(x), [x]),
        "sigmoid": (lambda: F.sigmoid(x), [x]),
        "max_pool2d": (lambda: F.max_pool2d(x), [x]),
        "global_average_pool": (lambda: F.global_average_pool(x), [x]),
        "adaptive_average_pool": (lambda: F.adaptive_average_pool(x, 1, 1), [x]),
        "channel_scale": (lambda: F.channel_scale(x, scale), [x, scale]),
        "add": (lambda: F.add(x, y), [x, y]),
        "linear": (lambda: F.linear(xin, lw, lb), [xin, lw, lb]),
        "softmax_cross_entropy": (lambda: F.softmax_cross_entropy(logits, labels)[0], [logits]),
        "se_block": (lambda: se(f0)[0], [f0] + se_params),
        "residual_block[projection]": (lambda: res(r_in, True), [r_in] + res_params),
        "residual_block[identity]": (lambda: rid(r_in, True), [r_in] + rid_params),
        "end_to_end": (lambda: F.softmax_cross_entropy(model(m_in), m_labels)[0], [m_in] + model.parameters()),
    }


def run_suite(seeds: int = 20, model_coords: int = 100, composite_coords: int | None = 400, eps: float = 1e-4) -> list[SuiteEntry]:
    """Worst relative error per layer over ``seeds`` random draws.

    Primitive layers are checked on every coordinate; the SE and residual blocks
    on a seeded sample of ``composite_coords`` and the end-to-end model on
    ``model_coords`` coordinates per seed.
    """
    entries: dict[str, SuiteEntry] = {}
    for seed in range(seeds):
        for name, (fn, inputs) in _layer_cases(seed).items():
            composite = name == "end_to_end"
            coords = model_coords if composite else composite_coords if name in COMPOSITES else None
            res = gradcheck(fn, inputs, eps=eps, seed=seed, max_coords=coords)
            e = entries.setdefault(name, SuiteEntry(name, 0.0, MODEL_TOL if composite else LAYER_TOL, 0, 0))
            e.worst = max(e.worst, res.max_rel_error)
            e.checked += res.checked
            e.excluded += res.excluded
    return list(entries.values())
