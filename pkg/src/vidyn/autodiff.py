"""Differentiation utilities: reverse-mode gradients, forward-mode JVPs, and
finite-difference verification.

Training runs in float32 by default; gradient verification is meant to run on
float64 tensors, where central differences are a trustworthy oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import torch

from .errors import NonFiniteError, ShapeError

Graph = Callable[[torch.Tensor], torch.Tensor]


def resolve_dtype(name: str) -> torch.dtype:
    if name in ("float32", "f32"):
        return torch.float32
    if name in ("float64", "f64"):
        return torch.float64
    raise ValueError(f"unknown dtype {name!r} (expected float32 or float64)")


def reverse_gradient(
    loss: torch.Tensor, params: Mapping[str, torch.Tensor]
) -> dict[str, torch.Tensor]:
    """Gradient of a scalar loss with respect to each named parameter.

    Parameters that the loss does not depend on (or frozen ones) get zero
    gradients. Raises :class:`NonFiniteError` naming the offending tensor if
    the loss or any gradient is non-finite.
    """
    if loss.numel() != 1:
        raise ShapeError(f"loss must be scalar, got shape {tuple(loss.shape)}")
    if not torch.isfinite(loss).all():
        raise NonFiniteError("loss is not finite")
    names = list(params.keys())
    tensors = [params[n] for n in names]
    active = [(n, t) for n, t in zip(names, tensors) if t.requires_grad]
    grads: dict[str, torch.Tensor] = {n: torch.zeros_like(t) for n, t in zip(names, tensors)}
    if active:
        computed = torch.autograd.grad(
            loss, [t for _, t in active], allow_unused=True, retain_graph=False
        )
        for (name, tensor), g in zip(active, computed):
            if g is None:
                continue
            if not torch.isfinite(g).all():
                raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
            grads[name] = g
    return grads


def forward_jvp(f: Graph, x: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Directional derivative (df/dx)(x) . v via forward-mode AD.

    The Jacobian is never materialized; cost is roughly one extra forward pass.
    """
    if v.shape != x.shape:
        raise ShapeError(
            f"direction shape {tuple(v.shape)} does not match input shape {tuple(x.shape)}"
        )
    _, tangent = torch.func.jvp(f, (x,), (v,))
    return tangent


def finite_difference_gradient(
    f: Graph, x: torch.Tensor, eps: float = 1e-5
) -> torch.Tensor:
    """Central-difference gradient of a scalar-valued f, element by element.

    Deliberately naive: this is the independent oracle that the AD path is
    checked against, so it shares no code with it.
    """
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


@dataclass
class GradCheckReport:
    """Outcome of comparing reverse-mode gradients against finite differences."""

    max_rel_error: float
    tol: float
    passed: bool
    failing_indices: list[tuple[int, ...]] = field(default_factory=list)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} max_rel_error={self.max_rel_error:.3e} tol={self.tol:.1e}"


def grad_check(
    f: Graph,
    x: torch.Tensor,
    tol: float = 1e-3,
    eps: float = 1e-5,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare the reverse-mode gradient of scalar f at x with central differences.

    `floor` guards the relative error against division by near-zero gradients.
    """
    xg = x.detach().clone().requires_grad_(True)
    out = f(xg)
    if out.numel() != 1:
        raise ShapeError(f"grad_check requires scalar output, got {tuple(out.shape)}")
    g_ad = reverse_gradient(out, {"x": xg})["x"]
    g_fd = finite_difference_gradient(f, x, eps=eps)
    denom = torch.maximum(torch.maximum(g_ad.abs(), g_fd.abs()), torch.full_like(g_ad, floor))
    rel = (g_ad - g_fd).abs() / denom
    max_rel = float(rel.max()) if rel.numel() else 0.0
    failing = [tuple(int(j) for j in idx) for idx in torch.nonzero(rel > tol)]
    return GradCheckReport(
        max_rel_error=max_rel, tol=tol, passed=len(failing) == 0, failing_indices=failing
    )


def _projection(shape, seed: int, dtype) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    return torch.randn(shape, generator=g, dtype=dtype)


def primitive_op_cases(dtype: torch.dtype = torch.float64):
    """(name, scalar graph, input shape) triples covering every primitive op.

    Each graph maps one input tensor to a scalar via the op under test followed
    by a fixed random projection, so gradients are non-uniform.
    """
    w_mat = _projection((6, 5), 11, dtype)
    w_conv = _projection((4, 3, 3, 3), 12, dtype)
    w_conv1 = _projection((4, 3, 1, 1), 13, dtype)
    w_lin = _projection((7, 5), 14, dtype)
    b_lin = _projection((7,), 15, dtype)
    other = _projection((3, 4, 5), 16, dtype)

    def proj(t: torch.Tensor, seed: int = 17) -> torch.Tensor:
        p = _projection(t.shape, seed, t.dtype)
        return (t * p).sum()

    cases = [
        ("matmul", lambda x: proj(x @ w_mat), (4, 6)),
        (
            "conv2d_stride2_pad1",
            lambda x: proj(torch.nn.functional.conv2d(x, w_conv, stride=2, padding=1)),
            (2, 3, 8, 8),
        ),
        (
            "conv2d_1x1",
            lambda x: proj(torch.nn.functional.conv2d(x, w_conv1)),
            (2, 3, 6, 6),
        ),
        ("linear", lambda x: proj(torch.nn.functional.linear(x, w_lin, b_lin)), (3, 5)),
        ("softmax_axis", lambda x: proj(torch.softmax(x, dim=1)), (4, 6)),
        ("add", lambda x: proj(x + other), (3, 4, 5)),
        ("sub", lambda x: proj(x - other), (3, 4, 5)),
        ("mul", lambda x: proj(x * other), (3, 4, 5)),
        ("div", lambda x: proj(x / (other.abs() + 0.5)), (3, 4, 5)),
        ("exp", lambda x: proj(torch.exp(x)), (4, 5)),
        ("log", lambda x: proj(torch.log(x.abs() + 0.5)), (4, 5)),
        ("tanh", lambda x: proj(torch.tanh(x)), (4, 5)),
        ("relu", lambda x: proj(torch.relu(x)), (4, 5)),
        ("softplus", lambda x: proj(torch.nn.functional.softplus(x)), (4, 5)),
        ("sum", lambda x: x.sum(), (3, 4)),
        ("mean", lambda x: proj(x.mean(dim=1)), (3, 4)),
        ("max_reduce", lambda x: proj(x.max(dim=1).values), (3, 7)),
        ("reshape", lambda x: proj(x.reshape(2, 10)), (4, 5)),
        ("broadcast", lambda x: proj((x.unsqueeze(0) + other).sum(dim=0)), (4, 5)),
        ("concat", lambda x: proj(torch.cat([x, x * 2.0], dim=1)), (3, 4)),
        ("slice", lambda x: proj(x[:, 1:4]), (3, 6)),
    ]
    return cases


def run_verification(
    tol: float = 1e-3,
    n_instances: int = 10,
    seed: int = 0,
    dtype: torch.dtype = torch.float64,
) -> list[tuple[str, GradCheckReport]]:
    """Grad-check every primitive op on `n_instances` random inputs in [-2, 2].

    Returns the worst report per op (fixed seeds, so the run is reproducible).
    """
    results = []
    for case_idx, (name, f, shape) in enumerate(primitive_op_cases(dtype)):
        worst: GradCheckReport | None = None
        for k in range(n_instances):
            g = torch.Generator().manual_seed(seed * 100_000 + case_idx * 100 + k)
            x = (torch.rand(shape, generator=g, dtype=dtype) - 0.5) * 4.0
            report = grad_check(f, x, tol=tol)
            if worst is None or report.max_rel_error > worst.max_rel_error:
                worst = report
        assert worst is not None
        results.append((name, worst))
    return results
