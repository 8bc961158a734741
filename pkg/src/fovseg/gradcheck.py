"""Finite-difference validation of the analytic gradients.

Central differences with a configurable step are compared against one
reverse-mode pass for every parameter scalar, on a deliberately tiny
double-precision model so the whole sweep stays fast.
"""

from __future__ import annotations

import numpy as np
import torch

from .model import ModelConfig, Segmenter, build_model, init_parameters, make_token_batch
from .sampler import Patch, PatchSpec
from .training import sparse_bce
from .geometry import GaussianPrompt

GRADCHECK_CONFIG = ModelConfig(d_model=8, n_heads=1, n_blocks=1,
                               pe_hidden=8, patch_sizes=(1, 2))


def make_check_problem(config: ModelConfig = GRADCHECK_CONFIG, seed: int = 0,
                       n_tokens: int = 8, n_queries: int = 4):
    """A tiny double-precision model plus one fixed forward problem.

    The final linear layer is re-randomized: its usual zero init would
    zero out every upstream gradient and make the check vacuous.
    """
    model = build_model(config, seed=seed).double()
    init_parameters(model.decoder.out, seed=seed + 17)
    model.double()
    rng = np.random.default_rng(seed + 1)
    prompt = GaussianPrompt.from_moments(8.0, 8.0, np.diag([9.0, 4.0]))
    patches = []
    for i in range(n_tokens):
        size = config.patch_sizes[i % len(config.patch_sizes)]
        spec = PatchSpec(center_x=rng.uniform(2, 14), center_y=rng.uniform(2, 14),
                         size=size, resolution_index=config.patch_sizes.index(size))
        patches.append(Patch(spec=spec,
                             pixels=rng.random((size, size, 3)).astype(np.float32)))
    batch = make_token_batch([patches], [prompt], dtype=torch.float64)
    query = torch.as_tensor(rng.uniform(-2, 2, size=(1, n_queries, 2)),
                            dtype=torch.float64)
    targets = torch.as_tensor(rng.integers(0, 2, size=(1, n_queries)),
                              dtype=torch.float64)
    return model, batch, query, targets


def loss_value(model, batch, query, targets) -> torch.Tensor:
    return sparse_bce(model(batch, query), targets)


def finite_difference_report(model: Segmenter, batch, query, targets,
                             h: float = 1e-5, floor: float = 1e-6):
    """Max relative error between analytic and central-difference gradients.

    Returns (max_rel_err, per_parameter dict).  Relative error uses
    max(|analytic|, |numeric|, floor) in the denominator.  The floor must
    sit above the finite-difference cancellation noise (about
    eps * |loss| / h, around 1e-11 here): softmax attention has parameters
    with mathematically zero gradients, e.g. any bias added uniformly to
    the keys, where the numeric estimate is pure rounding noise.
    """
    model.zero_grad(set_to_none=True)
    loss = loss_value(model, batch, query, targets)
    loss.backward()
    analytic = {name: (p.grad.detach().clone() if p.grad is not None
                       else torch.zeros_like(p))
                for name, p in model.named_parameters()}

    per_param = {}
    worst = 0.0
    with torch.no_grad():
        for name, param in model.named_parameters():
            flat = param.view(-1)
            grad_fd = torch.zeros_like(flat)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss_value(model, batch, query, targets).item()
                flat[i] = orig - h
                down = loss_value(model, batch, query, targets).item()
                flat[i] = orig
                grad_fd[i] = (up - down) / (2.0 * h)
            an = analytic[name].view(-1)
            denom = torch.maximum(torch.maximum(an.abs(), grad_fd.abs()),
                                  torch.tensor(floor, dtype=an.dtype))
            rel = ((an - grad_fd).abs() / denom).max().item()
            per_param[name] = rel
            worst = max(worst, rel)
    return worst, per_param
