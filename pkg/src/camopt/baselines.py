"""Hand-designed optimizers: experts, comparison points, and the
finite-cache quadratic-attention ablation.

Every stepper maps (state, gradient tree, lr) to (new state, update tree)
with additive updates, mirroring the learned optimizer's contract.
"""

from dataclasses import dataclass, replace

import numpy as np

from . import lopt

LR_GRID = (1e-1, 3e-2, 1e-2, 3e-3, 1e-3, 3e-4, 1e-4)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
RMSPROP_DECAY = 0.9
RMSPROP_EPS = 1e-8


def _check_grads(grads):
    for name, g in grads.items():
        if not np.isfinite(np.asarray(g)).all():
            raise ValueError(f"leaf {name}: gradient contains non-finite values")


def _zeros_like_tree(shapes):
    return {name: np.zeros(shape) for name, shape in shapes.items()}


@dataclass(frozen=True)
class AdamState:
    step: int
    m: dict
    v: dict


def adam_init(shapes):
    return AdamState(step=0, m=_zeros_like_tree(shapes), v=_zeros_like_tree(shapes))


def adam_step(state, grads, lr, beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS):
    """Bias-corrected update -lr * mhat / (sqrt(vhat) + eps)."""
    _check_grads(grads)
    t = state.step + 1
    m, v, updates = {}, {}, {}
    for name, g in grads.items():
        g = np.asarray(g, dtype=np.float64)
        m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        mhat = m[name] / (1.0 - beta1**t)
        vhat = v[name] / (1.0 - beta2**t)
        updates[name] = -lr * mhat / (np.sqrt(vhat) + eps)
    return AdamState(step=t, m=m, v=v), updates


@dataclass(frozen=True)
class RmsPropState:
    v: dict


def rmsprop_init(shapes):
    return RmsPropState(v=_zeros_like_tree(shapes))


def rmsprop_step(state, grads, lr, decay=RMSPROP_DECAY, eps=RMSPROP_EPS):
    _check_grads(grads)
    v, updates = {}, {}
    for name, g in grads.items():
        g = np.asarray(g, dtype=np.float64)
        v[name] = decay * state.v[name] + (1.0 - decay) * g * g
        updates[name] = -lr * g / (np.sqrt(v[name]) + eps)
    return RmsPropState(v=v), updates


def sgd_init(shapes):
    return None


def sgd_step(state, grads, lr):
    _check_grads(grads)
    return None, {name: -lr * np.asarray(g, dtype=np.float64)
                  for name, g in grads.items()}


BASELINES = {
    "adam": (adam_init, adam_step),
    "rmsprop": (rmsprop_init, rmsprop_step),
    "sgd": (sgd_init, sgd_step),
}


def baseline_state_arrays(kind, state):
    """Named arrays capturing a baseline state for checkpointing."""
    if kind == "sgd":
        return []
    items = [("step", np.array([float(getattr(state, "step", 0))]))]
    for field in ("m", "v"):
        tree = getattr(state, field, None)
        if tree is not None:
            for name in sorted(tree):
                items.append((f"{field}.{name}", np.asarray(tree[name])))
    return items


def baseline_state_from_arrays(kind, shapes, arrays):
    if kind == "sgd":
        return None
    arrays = dict(arrays)
    if kind == "adam":
        return AdamState(step=int(arrays["step"][0]),
                         m={n: arrays[f"m.{n}"] for n in shapes},
                         v={n: arrays[f"v.{n}"] for n in shapes})
    if kind == "rmsprop":
        return RmsPropState(v={n: arrays[f"v.{n}"] for n in shapes})
    raise ValueError(f"unknown baseline {kind!r}")


@dataclass(frozen=True)
class AttentionCache:
    """FIFO history of per-layer input tokens, newest last; h=None keeps all."""

    layers: tuple
    h: int | None


def cached_attention_init(weights, h=None):
    if weights.cam_config.heads != 1:
        raise ValueError("cached attention supports single-head cells only")
    if h is not None and h < 1:
        raise ValueError("cache length must be at least 1")
    return AttentionCache(layers=tuple(() for _ in weights.cam_layers), h=h)


def cached_attention_optimizer_step(weights, cache, grads):
    """Quadratic softmax attention over the cached gradient history.

    Per layer: append the current token, evict FIFO beyond h, attend the
    newest query over every cached key exactly (no random features), and
    add the mixed value back as a residual. The final latent goes through
    the learned optimizer's output MLP. Cache entries are plain constants.
    """
    _check_grads(grads)
    names = sorted(grads)
    shapes = {n: np.shape(grads[n]) for n in names}
    flat = np.concatenate(
        [np.asarray(grads[n], dtype=np.float64).reshape(-1) for n in names])
    x = lopt.preprocess_gradient(flat)
    new_layers = []
    for layer, history in zip(weights.cam_layers, cache.layers):
        tokens = history + (x,)
        if cache.h is not None and len(tokens) > cache.h:
            tokens = tokens[len(tokens) - cache.h:]
        q = x @ layer.w_q.data.T
        keys = np.stack([tok @ layer.w_k.data.T for tok in tokens])
        values = np.stack([tok @ layer.w_v.data.T for tok in tokens])
        logits = np.einsum("bq,tbq->tb", q, keys)
        logits -= logits.max(axis=0, keepdims=True)
        weights_t = np.exp(logits)
        weights_t /= weights_t.sum(axis=0, keepdims=True)
        x = x + np.einsum("tb,tbd->bd", weights_t, values)
        new_layers.append(tokens)
    mlp = weights.out_mlp
    hidden = np.maximum(x @ mlp.w1.data.T + mlp.b1.data, 0.0)
    delta = (hidden @ mlp.w2.data.T + mlp.b2.data) * weights.scale.data
    updates = {}
    lo = 0
    for name in names:
        size = int(np.prod(shapes[name], dtype=np.int64))
        updates[name] = delta[lo:lo + size].reshape(shapes[name])
        lo += size
    return replace(cache, layers=tuple(new_layers)), updates
