"""Shared test utilities: central finite differences and toy inputs."""
from __future__ import annotations

import numpy as np
import torch


def sample_parameter_entries(module: torch.nn.Module, n: int, seed: int = 0):
    """``n`` (name, param, flat_index) triples, spread over every parameter tensor."""
    rng = np.random.default_rng(seed)
    params = [(name, p) for name, p in module.named_parameters() if p.requires_grad]
    picks = []
    if n < len(params):
        # fewer entries than tensors: one entry from each of n distinct tensors
        for i in sorted(rng.choice(len(params), size=n, replace=False)):
            name, p = params[i]
            picks.append((name, p, int(rng.integers(p.numel()))))
        return picks
    # at least one entry per tensor, the rest weighted by size
    for name, p in params:
        picks.append((name, p, int(rng.integers(p.numel()))))
    sizes = np.array([p.numel() for _, p in params], dtype=float)
    for i in rng.choice(len(params), size=max(n - len(picks), 0), p=sizes / sizes.sum()):
        name, p = params[i]
        picks.append((name, p, int(rng.integers(p.numel()))))
    return picks


def finite_difference_check(loss_fn, module: torch.nn.Module, n: int = 100,
                            steps=(1e-6,), atol: float = 1e-5, seed: int = 0,
                            rtol: float = 1e-5):
    """Compare autograd with central differences on sampled parameter entries.

    ``loss_fn`` must be deterministic and return a float64 scalar. With
    several ``steps`` (largest first) the estimate is refined until two
    consecutive steps agree to ``rtol``: a ReLU or max-pool kink inside the interval
    spoils the central estimate, and shrinking the step moves it out.
    Agreement allows for round-off in the loss itself, which grows like
    eps * |loss| / h. If no pair agrees the smallest step is used. Estimates
    far below ``atol`` are taken as zero rather than refined into round-off.
    Returns a list of (name, analytic, numeric, rel_err).
    """
    module.zero_grad()
    base = loss_fn()
    base.backward()
    noise = 16 * np.finfo(np.float64).eps * max(abs(base.item()), 1.0)
    out = []
    with torch.no_grad():
        for name, p, idx in sample_parameter_entries(module, n, seed):
            # index by position so channels-last parameters work too
            pos = tuple(int(i) for i in np.unravel_index(idx, p.shape))
            analytic = float(p.grad[pos])
            orig = float(p[pos])
            prev = None
            for h in steps:
                p[pos] = orig + h
                up = float(loss_fn())
                p[pos] = orig - h
                down = float(loss_fn())
                p[pos] = orig
                numeric = (up - down) / (2 * h)
                if prev is not None and (abs(numeric - prev) <= rtol * abs(prev) + noise / h
                                         or max(abs(numeric), abs(prev)) < 1e-2 * atol):
                    numeric = prev
                    break
                prev = numeric
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), atol)
            out.append((name, analytic, numeric, rel))
    return out


def input_gradient_check(fn, x: torch.Tensor, n: int = 30, h: float = 1e-6, seed: int = 0):
    """Relative errors of d sum(fn(x)) / dx at ``n`` random input entries."""
    x = x.clone().requires_grad_(True)
    fn(x).sum().backward()
    g = x.grad.view(-1)
    rng = np.random.default_rng(seed)
    errs = []
    with torch.no_grad():
        flat = x.detach().view(-1).clone()
        for idx in rng.choice(flat.numel(), size=min(n, flat.numel()), replace=False):
            xp, xm = flat.clone(), flat.clone()
            xp[idx] += h
            xm[idx] -= h
            num = (fn(xp.view_as(x)).sum() - fn(xm.view_as(x)).sum()).item() / (2 * h)
            a = g[idx].item()
            errs.append(abs(a - num) / max(abs(a), abs(num), 1e-7))
    return errs


def frozen_teacher_loss(net, inputs, target, weights=None):
    """Total-loss closure whose distillation teacher is a fixed snapshot.

    The training objective blocks gradients through the main detector inside
    the KL and feature terms, so the finite-difference oracle has to hold the
    teacher constant as well; otherwise it differentiates a different function.
    """
    from medsnet.losses import LossWeights, feature_loss, kl_loss, loss1
    from medsnet.model import DetectorOutputSet

    weights = weights or LossWeights()
    with torch.no_grad():
        ref = net(*inputs)
    main, feat = ref.main_prob.clone(), ref.main_features.clone()

    def fn():
        out = net(*inputs)
        student = DetectorOutputSet(main, feat, out.aux_probs, out.aux_features)
        return loss1(out, target, weights) + kl_loss(student, weights) + feature_loss(student, weights)

    return fn


ACCEPTANCE_LINES: list[str] = []


def report_criterion(number, ok: bool, detail: str) -> bool:
    """Record and print one pass/fail line; the summary hook repeats them at the end."""
    line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok
