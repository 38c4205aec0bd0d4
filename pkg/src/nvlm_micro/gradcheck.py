"""Central finite-difference gradient checking.

The numeric side only ever calls the forward function; it shares no code with
:func:`nvlm_micro.autodiff.backward`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .autodiff import Tensor, backward

# Denominator floor for the relative error.  Central differences at h=1e-5 on
# an O(1) loss carry ~1e-10 absolute noise, so gradients below 1e-6 are in
# effect compared absolutely (|a - n| <= tol * 1e-6).
REL_FLOOR = 1e-6


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_FLOOR)
    return np.abs(analytic - numeric) / denom


def numeric_grad(
    fn: Callable[[], float], param: Tensor, index: tuple[int, ...], h: float = 1e-5
) -> float:
    base = param.data
    plus = base.copy()
    plus[index] += h
    minus = base.copy()
    minus[index] -= h
    try:
        param.assign(plus)
        f_plus = fn()
        param.assign(minus)
        f_minus = fn()
    finally:
        param.assign(base)
    return (f_plus - f_minus) / (2.0 * h)


@dataclass
class GroupResult:
    name: str
    max_rel_error: float
    n_checked: int
    passed: bool


@dataclass
class GradCheckReport:
    tolerance: float
    groups: list[GroupResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return bool(self.groups) and all(g.passed for g in self.groups)

    def lines(self) -> list[str]:
        out = []
        for g in self.groups:
            status = "PASS" if g.passed else "FAIL"
            out.append(f"{status} {g.name:<32} max_rel={g.max_rel_error:.3e} n={g.n_checked}")
        return out


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    groups: Mapping[str, list[str]] | None = None,
    *,
    h: float = 1e-5,
    tol: float = 1e-3,
    max_entries: int | None = 12,
    seed: int = 0,
) -> GradCheckReport:
    """Compare backprop gradients against central differences.

    ``max_entries`` caps how many coordinates of each tensor are probed
    (sampled without replacement with a fixed seed); ``None`` probes all.
    Parameters are grouped for reporting by ``groups`` (group -> names);
    by default every tensor is its own group.
    """
    for p in params.values():
        p.zero_grad()
    loss = loss_fn()
    backward(loss)
    analytic = {k: (p.grad if p.grad is not None else np.zeros(p.shape)) for k, p in params.items()}

    def f() -> float:
        return float(loss_fn().data)

    rng = np.random.default_rng(seed)
    per_param: dict[str, tuple[float, int]] = {}
    for name, p in params.items():
        n = p.size
        flat = np.arange(n) if max_entries is None or n <= max_entries else rng.choice(
            n, size=max_entries, replace=False
        )
        errs = []
        for k in np.sort(flat):
            idx = np.unravel_index(k, p.shape)
            num = numeric_grad(f, p, idx, h)
            errs.append(relative_error(np.array(analytic[name][idx]), np.array(num)).item())
        per_param[name] = (max(errs) if errs else 0.0, len(errs))

    if groups is None:
        groups = {k: [k] for k in params}
    report = GradCheckReport(tolerance=tol)
    for gname, names in groups.items():
        if not names:
            continue
        worst = max(per_param[n][0] for n in names)
        count = sum(per_param[n][1] for n in names)
        report.groups.append(GroupResult(gname, worst, count, worst <= tol))
    for p in params.values():
        p.zero_grad()
    return report


def model_gradcheck(arch: str, config=None, seed: int = 0, *, tol: float = 1e-3, h: float = 1e-5,
                    max_entries: int | None = 12, gate: float = 0.3) -> GradCheckReport:
    """Finite-difference check of every trainable parameter group of a toy model.

    Gates are opened to ``gate`` first; at the zero-gate initialisation the
    cross-attention internals receive exactly zero gradient and the check
    would be vacuous for them.
    """
    from .corpus import make_glyphs, render
    from .model import NVLMModel, TrainingExample

    model = NVLMModel(arch, config, seed)
    model.set_gates(gate)
    image = render("12", make_glyphs(seed=seed), scale=model.config.encoder.tile_size // 8)
    ex = TrainingExample("hi", "ab", image)
    names = model.trainable_names(stage=2)
    params = {n: model.params[n] for n in names}
    groups = {g: [n for n in ns if n in params] for g, ns in model.param_groups().items()}
    return check_gradients(lambda: model.forward(ex)[1], params, groups, h=h, tol=tol,
                           max_entries=max_entries, seed=seed)
