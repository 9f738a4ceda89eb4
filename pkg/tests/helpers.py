"""Shared toy instance and gradient-check driver."""

from __future__ import annotations

import numpy as np

from gbrec.autodiff import finite_difference_check
from gbrec.graph import GroupBuyRecord, SocialGraph
from gbrec.model import ModelSpec, MultiViewModel, init_params, make_batch


def toy_records():
    return [
        GroupBuyRecord(0, 0, (1, 2)),
        GroupBuyRecord(0, 1, (1,)),
        GroupBuyRecord(1, 2, (0, 3)),
        GroupBuyRecord(2, 3, (4,)),
        GroupBuyRecord(3, 4, (1, 4)),
        GroupBuyRecord(4, 5, (3,)),
        GroupBuyRecord(1, 0, (2,)),
        GroupBuyRecord(2, 1, (0,)),
    ]


def toy_social():
    return SocialGraph.from_edges(5, [(0, 1), (0, 2), (1, 2), (1, 3), (2, 4), (3, 4), (0, 3), (1, 4)])


def toy_model(seed=0, init_std=0.3, d=4, K=2, H=2, **flags):
    """5 users, 6 items; parameters drawn away from the all-ones fusion start."""
    spec = ModelSpec(5, 6, d, K, H, **flags)
    records = toy_records()
    social = toy_social()
    model = MultiViewModel(spec, records, social)
    rng = np.random.default_rng(seed)
    store = init_params(spec, rng, init_std)
    for name in ("w_init", "w_part", "w_item"):
        store.params[name] += rng.normal(0.0, 0.3, size=d)
    batch = make_batch(records, social)
    return model, store, batch


def gradcheck_all(model, store, batch, lam1=0.5, lam2=1e-3, tolerance=1e-4, n_samples=None):
    """Finite-difference report for every parameter tensor of the full objective."""

    def f(s):
        parts, grads = model.loss_and_grad(s, batch, lam1, lam2, include_l2_grad=True)
        return parts.total, grads

    return [finite_difference_check(f, store, name, tolerance=tolerance, n_samples=n_samples) for name in store.names()]
