"""Learned optimizer built on temporal memory cells.

Three application modes over a tree of named parameter leaves:

  coordinate: every scalar parameter is an independent memory cell fed
      its own preprocessed gradient token; weights are shared across
      coordinates, so the per-step cost is one batched cell update.
  tensor: each leaf is pooled into a few meta-tokens, the cells run over
      those, and a fixed-size summary is broadcast back to all parameter
      tokens; memory per leaf is constant once the leaf is large.
  super: a router fixed at memory creation sends large leaves through a
      light coordinate-wise bundle and the rest through the tensor-wise
      one.
"""

import logging
from dataclasses import dataclass, replace

import numpy as np

from . import cam, rf, topo
from .autodiff import ShapeMismatchError, Tensor, matmul
from .rng import derive_seed, make_generator

log = logging.getLogger(__name__)

MODE_COORDINATE = "coordinate"
MODE_TENSOR = "tensor"
MODE_SUPER = "super"

PREPROCESS_SHARPNESS = 10.0
SUPER_THRESHOLD = 4096
SCALE_INIT = 0.01
MLP_HIDDEN = 16


def preprocess_gradient(g):
    """Map gradients to bounded (log-magnitude, sign) tokens.

    Entries with |g| >= e^-p become (log|g|/p, sign(g)); smaller ones use
    the linear branch (-1, e^p * g), with p = 10. Accepts scalars or
    arrays; the token axis is appended last.
    """
    g = np.asarray(g, dtype=np.float64)
    if not np.isfinite(g).all():
        raise ValueError("gradient contains NaN or infinite entries")
    p = PREPROCESS_SHARPNESS
    big = np.abs(g) >= np.exp(-p)
    mag = np.where(big, np.abs(g), 1.0)
    first = np.where(big, np.log(mag) / p, -1.0)
    second = np.where(big, np.sign(g), np.exp(p) * g)
    return np.stack([first, second], axis=-1)


@dataclass(frozen=True)
class OutputMlp:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


def init_output_mlp(d_in, run_seed, name, hidden=MLP_HIDDEN):
    gen = make_generator(run_seed, f"lopt-mlp-{name}")
    return OutputMlp(
        w1=Tensor(gen.standard_normal((hidden, d_in)) / np.sqrt(d_in),
                  requires_grad=True),
        b1=Tensor(np.zeros(hidden), requires_grad=True),
        w2=Tensor(gen.standard_normal((1, hidden)) / np.sqrt(hidden),
                  requires_grad=True),
        b2=Tensor(np.zeros(1), requires_grad=True),
    )


def mlp_apply(mlp, x):
    hidden = (matmul(x, mlp.w1.T) + mlp.b1).relu()
    return matmul(hidden, mlp.w2.T) + mlp.b2


@dataclass(frozen=True)
class LearnedOptimizerWeights:
    """One mode's learnable bundle: cells, optional encoders, output head."""

    mode: str
    cam_config: cam.CamConfig
    cam_features: list
    cam_layers: list
    hpe_config: topo.HpeConfig | None
    topo_weights: topo.TopoWeights | None
    out_mlp: OutputMlp
    scale: Tensor


@dataclass(frozen=True)
class SuperWeights:
    coordinate: LearnedOptimizerWeights
    tensor: LearnedOptimizerWeights
    threshold: float


def init_coordinate_weights(run_seed=0, light=False, discount=0.1, r=16,
                            mechanism=rf.FAVOR_PLUS, rho=None):
    name = "coordinate-light" if light else "coordinate"
    config = cam.CamConfig(input_dim=topo.REPR_DIM,
                           qk_dim=8 if light else 16,
                           heads=1, r=r, discount=discount,
                           mechanism=mechanism, rho=rho,
                           num_layers=1 if light else 2,
                           seed=derive_seed(run_seed, f"lopt-{name}-cam"))
    return LearnedOptimizerWeights(
        mode=MODE_COORDINATE,
        cam_config=config,
        cam_features=cam.build_stack_features(config),
        cam_layers=cam.init_weights(config, run_seed=run_seed),
        hpe_config=None,
        topo_weights=None,
        out_mlp=init_output_mlp(topo.REPR_DIM, run_seed, name),
        scale=Tensor(np.asarray(SCALE_INIT), requires_grad=True),
    )


def init_tensor_weights(run_seed=0, hpe_config=None, latent_dim=8,
                        discount=0.1, r=16, mechanism=rf.FAVOR_PLUS, rho=None):
    if hpe_config is None:
        hpe_config = topo.HpeConfig(latent_dim=latent_dim)
    config = cam.CamConfig(input_dim=hpe_config.latent_dim, qk_dim=16,
                           heads=1, r=r, discount=discount,
                           mechanism=mechanism, rho=rho, num_layers=2,
                           seed=derive_seed(run_seed, "lopt-tensor-cam"))
    return LearnedOptimizerWeights(
        mode=MODE_TENSOR,
        cam_config=config,
        cam_features=cam.build_stack_features(config),
        cam_layers=cam.init_weights(config, run_seed=run_seed),
        hpe_config=hpe_config,
        topo_weights=topo.init_topo_weights(hpe_config, run_seed=run_seed),
        out_mlp=init_output_mlp(topo.REPR_DIM + hpe_config.latent_dim,
                                run_seed, "tensor"),
        scale=Tensor(np.asarray(SCALE_INIT), requires_grad=True),
    )


def init_super_weights(run_seed=0, threshold=SUPER_THRESHOLD, **tensor_kw):
    return SuperWeights(coordinate=init_coordinate_weights(run_seed, light=True),
                        tensor=init_tensor_weights(run_seed, **tensor_kw),
                        threshold=float(threshold))


@dataclass(frozen=True)
class OptimizerMemory:
    """Cell states for one parameter tree; shapes pin the expected tree."""

    mode: str
    shapes: dict
    coordinate: tuple | None
    tensor: dict | None
    routing: dict | None


def tree_shapes(tree):
    out = {}
    for name, leaf in tree.items():
        data = leaf.data if isinstance(leaf, Tensor) else np.asarray(leaf)
        out[name] = data.shape
    return out


def _numel(shape):
    return int(np.prod(shape, dtype=np.int64))


def init_memory(weights, shapes):
    shapes = {name: tuple(shape) for name, shape in shapes.items()}
    if isinstance(weights, SuperWeights):
        routing = {}
        for name in sorted(shapes):
            n = _numel(shapes[name])
            routing[name] = MODE_COORDINATE if n > weights.threshold else MODE_TENSOR
            log.info("super routing: leaf %s (%d params) -> %s",
                     name, n, routing[name])
        cw = {n: s for n, s in shapes.items() if routing[n] == MODE_COORDINATE}
        tw = {n: s for n, s in shapes.items() if routing[n] == MODE_TENSOR}
        return OptimizerMemory(
            mode=MODE_SUPER, shapes=shapes,
            coordinate=_coordinate_states(weights.coordinate, cw) if cw else None,
            tensor=_tensor_states(weights.tensor, tw) if tw else None,
            routing=routing)
    if weights.mode == MODE_COORDINATE:
        return OptimizerMemory(MODE_COORDINATE, shapes,
                               _coordinate_states(weights, shapes), None, None)
    return OptimizerMemory(MODE_TENSOR, shapes, None,
                           _tensor_states(weights, shapes), None)


def _coordinate_states(weights, shapes):
    total = sum(_numel(s) for s in shapes.values())
    return tuple(cam.stack_init(weights.cam_config, batch=total))


def _tensor_states(weights, shapes):
    out = {}
    for name in sorted(shapes):
        tokens = topo.meta_token_count(_numel(shapes[name]), weights.hpe_config)
        out[name] = tuple(cam.stack_init(weights.cam_config, batch=tokens))
    return out


def _check_tree(shapes, grads):
    if sorted(shapes) != sorted(grads):
        raise ValueError(
            f"gradient tree {sorted(grads)} does not match memory tree "
            f"{sorted(shapes)}")
    for name, shape in shapes.items():
        got = np.shape(grads[name])
        if got != shape:
            raise ShapeMismatchError(
                f"leaf {name}: gradient shape {got} does not match {shape}")


def coordinate_step(weights, memory, grads):
    """One shared-cell update over every scalar parameter."""
    _check_tree(memory.shapes, grads)
    names = sorted(grads)
    flat = np.concatenate(
        [np.asarray(grads[n], dtype=np.float64).reshape(-1) for n in names])
    tokens = Tensor(preprocess_gradient(flat))
    states, out = cam.cam_forward_batch(list(memory.coordinate),
                                        weights.cam_layers, tokens,
                                        weights.cam_config, weights.cam_features)
    delta = mlp_apply(weights.out_mlp, out) * weights.scale
    updates = {}
    lo = 0
    for name in names:
        size = _numel(memory.shapes[name])
        updates[name] = delta[lo:lo + size].reshape(memory.shapes[name])
        lo += size
    return replace(memory, coordinate=tuple(states)), updates


def tensor_step(weights, memory, grads):
    """Per-leaf pooled update: encode, run cells, summarize, broadcast."""
    _check_tree(memory.shapes, grads)
    new_states = {}
    updates = {}
    for name in sorted(grads):
        g = np.asarray(grads[name], dtype=np.float64)
        seq = topo.make_repr_seq(g)
        meta = topo.hpe(seq, weights.topo_weights, weights.hpe_config)
        states, out = cam.cam_forward_batch(list(memory.tensor[name]),
                                            weights.cam_layers, meta,
                                            weights.cam_config,
                                            weights.cam_features)
        summary = topo.spe(out, weights.topo_weights.summarizer)
        enriched = topo.broadcast_concat(seq.tokens, summary)
        delta = mlp_apply(weights.out_mlp, enriched) * weights.scale
        updates[name] = delta.reshape(g.shape)
        new_states[name] = tuple(states)
    return replace(memory, tensor=new_states), updates


def super_step(weights, memory, grads):
    """Route each leaf per the memory's fixed routing, merge updates."""
    _check_tree(memory.shapes, grads)
    updates = {}
    new_cw, new_tw = memory.coordinate, memory.tensor
    cw = {n: grads[n] for n in grads if memory.routing[n] == MODE_COORDINATE}
    tw = {n: grads[n] for n in grads if memory.routing[n] == MODE_TENSOR}
    if cw:
        sub = OptimizerMemory(MODE_COORDINATE,
                              {n: memory.shapes[n] for n in cw},
                              memory.coordinate, None, None)
        sub, ups = coordinate_step(weights.coordinate, sub, cw)
        new_cw = sub.coordinate
        updates.update(ups)
    if tw:
        sub = OptimizerMemory(MODE_TENSOR, {n: memory.shapes[n] for n in tw},
                              None, memory.tensor, None)
        sub, ups = tensor_step(weights.tensor, sub, tw)
        new_tw = sub.tensor
        updates.update(ups)
    return replace(memory, coordinate=new_cw, tensor=new_tw), updates


def optimizer_step(weights, memory, grads):
    if memory.mode == MODE_SUPER:
        return super_step(weights, memory, grads)
    if memory.mode == MODE_COORDINATE:
        return coordinate_step(weights, memory, grads)
    return tensor_step(weights, memory, grads)


def apply_updates(params, updates):
    """Additive application; the update sign lives inside the head MLP."""
    if sorted(params) != sorted(updates):
        raise ValueError("update tree does not match parameter tree")
    out = {}
    for name in params:
        p = params[name] if isinstance(params[name], Tensor) else Tensor(params[name])
        u = updates[name]
        if p.shape != u.shape:
            raise ShapeMismatchError(
                f"leaf {name}: update shape {u.shape} does not match "
                f"parameter shape {p.shape}")
        out[name] = p + u
    return out


def detach_memory(memory):
    co = memory.coordinate
    if co is not None:
        co = tuple(cam.detach_state(s) for s in co)
    te = memory.tensor
    if te is not None:
        te = {name: tuple(cam.detach_state(s) for s in states)
              for name, states in te.items()}
    return replace(memory, coordinate=co, tensor=te)


def named_parameters(weights, prefix=""):
    """Learnable tensors with stable names, lexicographic by construction."""
    if isinstance(weights, SuperWeights):
        return (named_parameters(weights.coordinate, prefix + "cw.")
                + named_parameters(weights.tensor, prefix + "tw."))
    out = []
    for i, layer in enumerate(weights.cam_layers):
        for field in ("w_q", "w_k", "w_v"):
            out.append((f"{prefix}cam{i}.{field}", getattr(layer, field)))
    if weights.topo_weights is not None:
        bundles = (("level0", weights.topo_weights.level0),
                   ("pool", weights.topo_weights.pool),
                   ("spe", weights.topo_weights.summarizer))
        for bname, bundle in bundles:
            for field in ("w_q", "w_k", "w_v", "w1", "b1", "w2", "b2"):
                out.append((f"{prefix}topo.{bname}.{field}",
                            getattr(bundle, field)))
    for field in ("w1", "b1", "w2", "b2"):
        out.append((f"{prefix}mlp.{field}", getattr(weights.out_mlp, field)))
    out.append((f"{prefix}scale", weights.scale))
    return out


def optimizer_parameters(weights):
    return [tensor for _, tensor in named_parameters(weights)]


def load_parameters(weights, arrays, prefix=""):
    """Rebuild a weights bundle with tensors taken from a name->array map."""
    if isinstance(weights, SuperWeights):
        return SuperWeights(
            coordinate=load_parameters(weights.coordinate, arrays, prefix + "cw."),
            tensor=load_parameters(weights.tensor, arrays, prefix + "tw."),
            threshold=weights.threshold)

    def take(name, old):
        arr = np.asarray(arrays[name], dtype=np.float64)
        if arr.shape != old.shape:
            raise ShapeMismatchError(
                f"parameter {name}: stored shape {arr.shape} does not match "
                f"{old.shape}")
        return Tensor(arr, requires_grad=True)

    layers = []
    for i, layer in enumerate(weights.cam_layers):
        layers.append(replace(
            layer, **{f: take(f"{prefix}cam{i}.{f}", getattr(layer, f))
                      for f in ("w_q", "w_k", "w_v")}))
    topo_weights = weights.topo_weights
    if topo_weights is not None:
        rebuilt = {}
        for bname, bundle in (("level0", topo_weights.level0),
                              ("pool", topo_weights.pool),
                              ("spe", topo_weights.summarizer)):
            rebuilt[bname] = replace(
                bundle, **{f: take(f"{prefix}topo.{bname}.{f}", getattr(bundle, f))
                           for f in ("w_q", "w_k", "w_v", "w1", "b1", "w2", "b2")})
        topo_weights = topo.TopoWeights(level0=rebuilt["level0"],
                                        pool=rebuilt["pool"],
                                        summarizer=rebuilt["spe"])
    out_mlp = replace(weights.out_mlp,
                      **{f: take(f"{prefix}mlp.{f}", getattr(weights.out_mlp, f))
                         for f in ("w1", "b1", "w2", "b2")})
    return replace(weights, cam_layers=layers, topo_weights=topo_weights,
                   out_mlp=out_mlp,
                   scale=take(f"{prefix}scale", weights.scale))


def memory_arrays(memory):
    """Flat named arrays capturing every cell state, t counters included."""
    items = []
    if memory.coordinate is not None:
        for i, state in enumerate(memory.coordinate):
            for name, arr in cam.serialize_state(state):
                items.append((f"coordinate.layer{i}.{name}", arr))
    if memory.tensor is not None:
        for leaf in sorted(memory.tensor):
            for i, state in enumerate(memory.tensor[leaf]):
                for name, arr in cam.serialize_state(state):
                    items.append((f"tensor.{leaf}.layer{i}.{name}", arr))
    return items


def load_memory(weights, shapes, arrays):
    """Rebuild memory for the given tree and fill it from named arrays."""
    memory = init_memory(weights, shapes)
    if isinstance(weights, SuperWeights):
        cw_config = weights.coordinate.cam_config
        tw_config = weights.tensor.cam_config
    else:
        cw_config = tw_config = weights.cam_config

    def fill(config, state, prefix):
        items = [(name, arrays[prefix + name])
                 for name, _ in cam.serialize_state(state)]
        return cam.state_from_arrays(config, items)

    co = memory.coordinate
    if co is not None:
        co = tuple(fill(cw_config, s, f"coordinate.layer{i}.")
                   for i, s in enumerate(co))
    te = memory.tensor
    if te is not None:
        te = {leaf: tuple(fill(tw_config, s, f"tensor.{leaf}.layer{i}.")
                          for i, s in enumerate(states))
              for leaf, states in te.items()}
    return replace(memory, coordinate=co, tensor=te)
