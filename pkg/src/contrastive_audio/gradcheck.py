"""Finite-difference verification of every autodiff primitive and of the
full encoder -> projection -> bilinear -> contrastive-loss graph."""

from __future__ import annotations

import zlib

import numpy as np

from . import autodiff as ad
from .model import ModelConfig, bilinear_similarity, contrastive_loss, encoder_forward, init_params, project

__all__ = ["PRIMITIVES", "check_primitives", "check_full_graph", "run_all"]

# name -> (input shapes, op); each op maps a list of tensors to a tensor
PRIMITIVES = {
    "matmul": ([(3, 4), (4, 2)], lambda t: ad.matmul(t[0], t[1])),
    "transpose": ([(3, 4)], lambda t: ad.transpose(t[0])),
    "add": ([(3, 4), (4,)], lambda t: ad.add(t[0], t[1])),
    "mul": ([(3, 4), (3, 4)], lambda t: ad.mul(t[0], t[1])),
    "tanh": ([(5,)], lambda t: ad.tanh(t[0])),
    "relu": ([(6,)], lambda t: ad.relu(t[0])),
    "reshape": ([(2, 6)], lambda t: ad.reshape(t[0], (3, 4))),
    "conv2d": ([(2, 2, 7, 6), (3, 2, 3, 3), (3,)], lambda t: ad.conv2d(t[0], t[1], t[2])),
    "avg_pool2d": ([(2, 2, 5, 7)], lambda t: ad.avg_pool2d(t[0], 2)),
    "global_mean_pool": ([(2, 3, 4, 5)], lambda t: ad.global_mean_pool(t[0])),
    "softmax_cross_entropy": ([(4, 5)], lambda t: ad.softmax_cross_entropy(t[0], [0, 3, 4, 1])),
    "tensor_sum": ([(3, 3)], lambda t: ad.tensor_sum(t[0])),
    "scalar_mean": ([(3, 3)], lambda t: ad.scalar_mean(t[0])),
}

# small double-precision model for the whole-graph check: h_dim = proj_dim = 8
GRAPH_CONFIG = ModelConfig(input_frames=16, input_mels=16, channels=(4, 8), proj_dim=8,
                           n_classes=2, dtype="float64")
GRAPH_BATCH = 4
GRAPH_EPS = 1e-5
GRAPH_SCALE_FLOOR = 1e-3


def _away_from_zero(x, margin=1e-3):
    # keeps relu inputs off the kink so central differences stay smooth
    return np.where(np.abs(x) < margin, 2 * margin * np.sign(x + 1e-12), x)


def check_primitives(seed=0):
    """Max relative error per primitive, each reduced by a random readout."""
    errors = {}
    for name, (shapes, op) in PRIMITIVES.items():
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        params = [_away_from_zero(rng.standard_normal(s)) for s in shapes]
        readout = rng.standard_normal(op([ad.Tensor(p) for p in params]).shape)

        def f(ts, op=op, readout=readout):
            return ad.tensor_sum(ad.mul(op(ts), readout))

        errors[name] = ad.grad_check(f, params)
    return errors


def check_full_graph(seed=0, config=GRAPH_CONFIG, batch=GRAPH_BATCH, eps=GRAPH_EPS,
                     scale_floor=GRAPH_SCALE_FLOOR):
    """Max relative error of the pretraining loss w.r.t. every trainable tensor.

    Round-off in the differences grows like 1/eps (about 2e-10 absolute at
    eps=1e-6 on this graph, 3e-11 at 1e-5), so the graph uses eps=1e-5 and
    floors the denominator at ``scale_floor`` times the tensor's largest
    gradient.
    """
    rng = np.random.default_rng([seed, 1])
    params = init_params(config, rng)
    # a nonzero W so the bilinear path carries gradient
    params["bilinear.W"] = rng.standard_normal(params["bilinear.W"].shape) * 0.5
    names = [n for n in params.names() if not n.startswith("clf.")]
    shape = (batch, config.input_frames, config.input_mels)
    anchors, positives = rng.standard_normal(shape), rng.standard_normal(shape)

    def f(ts):
        p = dict(zip(names, ts))
        h = encoder_forward(np.concatenate([anchors, positives]), p, config)
        z = project(h, p["proj.w"], p["proj.b"])
        za = ad.matmul(np.eye(2 * batch)[:batch], z)
        zp = ad.matmul(np.eye(2 * batch)[batch:], z)
        return contrastive_loss(bilinear_similarity(za, zp, p["bilinear.W"]))

    return ad.grad_check(f, [params[n] for n in names], eps=eps, scale_floor=scale_floor)


def run_all(seed=0):
    """All checks as ``{label: max relative error}``."""
    errors = {f"primitive:{k}": v for k, v in check_primitives(seed).items()}
    errors["graph:encoder-projection-bilinear-loss"] = check_full_graph(seed)
    return errors
