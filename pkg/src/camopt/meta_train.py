"""Meta-training for the learned optimizer: sampled optimizees, random
coordinate scaling, truncated unrolls, and a hybrid objective mixing the
optimizee's own loss with imitation of a tuned first-moment/second-moment
expert."""

from dataclasses import dataclass

import numpy as np

from . import baselines, datasets, lopt
from .autodiff import Tensor, backward, matmul, softmax_cross_entropy
from .rng import derive_seed, make_generator

MLP_LAYER_RANGE = (1, 2)
MLP_WIDTH_RANGE = (20, 40)
MLP_ACTIVATIONS = ("sigmoid", "relu")
ATTN_LAYER_RANGE = (1, 3)
ATTN_HEAD_RANGE = (1, 3)
ATTN_HIDDEN_RANGE = (16, 64)
ATTN_MLP_RANGE = (16, 64)
ATTN_HEAD_DIM_RANGE = (8, 16)
ATTN_TOKENS = 4


class MetaTrainDiverged(RuntimeError):
    """Raised when the meta-loss turns non-finite; carries a diagnostic
    record describing where the run died."""

    def __init__(self, message, record):
        super().__init__(message)
        self.record = record


@dataclass(frozen=True)
class MetaTrainConfig:
    horizon: int = 100
    truncation: int = 5
    meta_lr: float = 3e-4
    expert_lr: float = 3e-2
    alpha: float = 1.0
    scaling_sigma: float = 3.0
    batch_size: int = 64
    outer_iterations: int = 5000
    seed: int = 0
    mode: str = lopt.MODE_COORDINATE
    optimizee_kinds: tuple = ("mlp",)
    task: str = "two_gaussians"

    def __post_init__(self):
        if self.horizon < 1 or self.truncation < 1:
            raise ValueError("horizon and truncation must be positive")
        if self.horizon % self.truncation != 0:
            raise ValueError(f"truncation {self.truncation} must divide "
                             f"horizon {self.horizon}")
        for kind in self.optimizee_kinds:
            if kind not in ("mlp", "attention", "quadratic"):
                raise ValueError(f"unknown optimizee kind {kind!r}")


@dataclass(frozen=True)
class Optimizee:
    """A trainable target: named parameters, a loss, and a batch sampler.

    loss_fn(params, batch) must return a scalar Tensor; sample_batch(rng, n)
    returns whatever loss_fn expects as a batch (None for analytic
    objectives)."""

    kind: str
    spec: dict
    params: dict
    loss_fn: object
    sample_batch: object


@dataclass(frozen=True)
class RolloutRecord:
    outer_iteration: int
    optimizee_kind: str
    task_losses: list
    imitation_mses: list
    meta_loss: float
    seed: int


def _init_linear(gen, out_dim, in_dim):
    w = gen.standard_normal((out_dim, in_dim)) / np.sqrt(in_dim)
    return (Tensor(w, requires_grad=True),
            Tensor(np.zeros(out_dim), requires_grad=True))


def sample_optimizee_spec(seed, kinds=("mlp",)):
    gen = make_generator(seed, "optimizee-spec")
    kind = kinds[gen.integers(0, len(kinds))]
    if kind == "mlp":
        layers = int(gen.integers(MLP_LAYER_RANGE[0], MLP_LAYER_RANGE[1] + 1))
        widths = tuple(int(gen.integers(MLP_WIDTH_RANGE[0],
                                        MLP_WIDTH_RANGE[1] + 1))
                       for _ in range(layers))
        activation = MLP_ACTIVATIONS[gen.integers(0, len(MLP_ACTIVATIONS))]
        return {"kind": kind, "widths": widths, "activation": activation}
    if kind == "attention":
        return {"kind": kind,
                "layers": int(gen.integers(ATTN_LAYER_RANGE[0],
                                           ATTN_LAYER_RANGE[1] + 1)),
                "heads": int(gen.integers(ATTN_HEAD_RANGE[0],
                                          ATTN_HEAD_RANGE[1] + 1)),
                "hidden": int(gen.integers(ATTN_HIDDEN_RANGE[0],
                                           ATTN_HIDDEN_RANGE[1] + 1)),
                "mlp": int(gen.integers(ATTN_MLP_RANGE[0],
                                        ATTN_MLP_RANGE[1] + 1)),
                "head_dim": int(gen.integers(ATTN_HEAD_DIM_RANGE[0],
                                             ATTN_HEAD_DIM_RANGE[1] + 1))}
    if kind == "quadratic":
        return {"kind": kind}
    raise ValueError(f"unknown optimizee kind {kind!r}")


def _build_mlp(task, spec, seed):
    gen = make_generator(seed, "optimizee-init")
    dims = [task.input_dim] + list(spec["widths"]) + [task.num_classes]
    params = {}
    for i in range(len(dims) - 1):
        w, b = _init_linear(gen, dims[i + 1], dims[i])
        params[f"w{i}"] = w
        params[f"b{i}"] = b
    depth = len(dims) - 1
    activation = spec["activation"]

    def loss_fn(p, batch):
        x, y = batch
        h = Tensor(x)
        for i in range(depth):
            h = matmul(h, p[f"w{i}"].T) + p[f"b{i}"]
            if i < depth - 1:
                h = h.sigmoid() if activation == "sigmoid" else h.relu()
        return softmax_cross_entropy(h, y)

    return params, loss_fn


def _softmax_last(z):
    shift = Tensor(z.data.max(axis=-1, keepdims=True))
    e = (z - shift).exp()
    return e / e.sum(axis=-1, keepdims=True)


def _build_attention(task, spec, seed):
    """Tiny quadratic-attention classifier: the input splits into a fixed
    number of tokens, runs through exact-softmax attention blocks with
    residual MLPs, then mean-pools into a linear head."""
    gen = make_generator(seed, "optimizee-init")
    token_dim = -(-task.input_dim // ATTN_TOKENS)
    hidden, heads, head_dim = spec["hidden"], spec["heads"], spec["head_dim"]
    params = {}
    params["embed.w"], params["embed.b"] = _init_linear(gen, hidden, token_dim)
    for i in range(spec["layers"]):
        for nm, out_d, in_d in (("wq", heads * head_dim, hidden),
                                ("wk", heads * head_dim, hidden),
                                ("wv", heads * head_dim, hidden),
                                ("wo", hidden, heads * head_dim),
                                ("m1", spec["mlp"], hidden),
                                ("m2", hidden, spec["mlp"])):
            w, b = _init_linear(gen, out_d, in_d)
            params[f"layer{i}.{nm}.w"] = w
            params[f"layer{i}.{nm}.b"] = b
    params["head.w"], params["head.b"] = _init_linear(gen, task.num_classes,
                                                      hidden)
    layers = spec["layers"]
    pad = ATTN_TOKENS * token_dim - task.input_dim
    inv_sqrt = 1.0 / np.sqrt(head_dim)

    def loss_fn(p, batch):
        x, y = batch
        if pad:
            x = np.concatenate([x, np.zeros((len(x), pad))], axis=1)
        h = Tensor(x.reshape(len(x), ATTN_TOKENS, token_dim))
        h = matmul(h, p["embed.w"].T) + p["embed.b"]
        b = h.shape[0]
        for i in range(layers):
            def proj(nm):
                z = matmul(h, p[f"layer{i}.{nm}.w"].T) + p[f"layer{i}.{nm}.b"]
                z = z.reshape(b, ATTN_TOKENS, heads, head_dim)
                return z.transpose((0, 2, 1, 3))
            q, k, v = proj("wq"), proj("wk"), proj("wv")
            logits = matmul(q, k.transpose((0, 1, 3, 2))) * inv_sqrt
            att = matmul(_softmax_last(logits), v)
            att = att.transpose((0, 2, 1, 3)).reshape(b, ATTN_TOKENS,
                                                      heads * head_dim)
            h = h + matmul(att, p[f"layer{i}.wo.w"].T) + p[f"layer{i}.wo.b"]
            m = (matmul(h, p[f"layer{i}.m1.w"].T) + p[f"layer{i}.m1.b"]).relu()
            h = h + matmul(m, p[f"layer{i}.m2.w"].T) + p[f"layer{i}.m2.b"]
        pooled = h.mean(axis=1)
        logits = matmul(pooled, p["head.w"].T) + p["head.b"]
        return softmax_cross_entropy(logits, y)

    return params, loss_fn


def make_quadratic_optimizee(dim, seed):
    """Diagonal quadratic bowl with a random curvature and optimum."""
    gen = make_generator(seed, "optimizee-init")
    curvature = np.exp(gen.uniform(-1.0, 1.0, size=dim))
    target = gen.standard_normal(dim)
    x0 = Tensor(gen.standard_normal(dim), requires_grad=True)

    def loss_fn(p, batch):
        del batch
        diff = p["x"] - Tensor(target)
        return (Tensor(curvature) * diff * diff).sum() * 0.5

    return Optimizee(kind="quadratic",
                     spec={"kind": "quadratic", "dim": dim},
                     params={"x": x0}, loss_fn=loss_fn,
                     sample_batch=lambda rng, n: None)


def build_optimizee(task, spec, seed):
    if spec["kind"] == "quadratic":
        dim = task.dim if isinstance(task, datasets.QuadraticTask) else 8
        return make_quadratic_optimizee(dim, seed)
    builders = {"mlp": _build_mlp, "attention": _build_attention}
    params, loss_fn = builders[spec["kind"]](task, spec, seed)
    return Optimizee(kind=spec["kind"], spec=spec, params=params,
                     loss_fn=loss_fn, sample_batch=task.sample_batch)


def sample_optimizee(task, seed, kinds=("mlp",)):
    return build_optimizee(task, sample_optimizee_spec(seed, kinds), seed)


def random_scaling(shapes, sigma, rng):
    """Per-coordinate reparameterization factors exp(U(-sigma, sigma))."""
    return {name: np.exp(rng.uniform(-sigma, sigma, size=shape))
            for name, shape in sorted(shapes.items())}


def scaled_loss(loss_fn, scales):
    """Wrap a loss so the optimizer works in y with x = scale * y."""

    def wrapped(params, batch):
        rescaled = {name: p * Tensor(scales[name]) if name in scales else p
                    for name, p in params.items()}
        return loss_fn(rescaled, batch)

    return wrapped


def _as_constant_params(params):
    return {name: Tensor(np.asarray(p.data if isinstance(p, Tensor) else p))
            for name, p in params.items()}


def parameter_gradients(params, loss_fn, batch):
    """Gradient of loss_fn at params as plain arrays, off the live tape."""
    leaves = {name: Tensor(p.data if isinstance(p, Tensor) else p,
                           requires_grad=True)
              for name, p in params.items()}
    grads = backward(loss_fn(leaves, batch))
    out = {}
    for name, leaf in leaves.items():
        g = grads.get(leaf)
        out[name] = np.array(g.data) if g is not None else np.zeros(leaf.shape)
    return out


def unroll_segment(step_fn, memory, params, loss_fn, batches, expert_state,
                   expert_lr, alpha):
    """Run one truncation segment, returning the traced segment loss.

    Each step draws gradients at the current iterate, applies the learned
    update (traced), accumulates the post-step loss on the same batch, and
    marches the expert along the learned trajectory to produce imitation
    targets."""
    task_terms = []
    imit_terms = []
    task_vals = []
    imit_vals = []
    total_coords = sum(int(np.prod(p.shape)) for p in params.values())
    for batch in batches:
        grads = parameter_gradients(params, loss_fn, batch)
        memory, updates = step_fn(memory, grads)
        expert_state, expert_updates = baselines.adam_step(
            expert_state, grads, expert_lr)
        params = {name: params[name] + updates[name] for name in params}
        step_loss = loss_fn(params, batch)
        task_terms.append(step_loss)
        task_vals.append(float(step_loss.data))
        sq = None
        for name in sorted(updates):
            diff = updates[name] - Tensor(expert_updates[name])
            term = (diff * diff).sum()
            sq = term if sq is None else sq + term
        imit = sq * (1.0 / total_coords)
        imit_terms.append(imit)
        imit_vals.append(float(imit.data))
    total = task_terms[0]
    for term in task_terms[1:]:
        total = total + term
    if alpha != 0.0:
        imit_total = imit_terms[0]
        for term in imit_terms[1:]:
            imit_total = imit_total + term
        total = total + imit_total * alpha
    return memory, params, expert_state, total, task_vals, imit_vals


def rollout_learned(weights, optimizee, steps, batch_size=64, seed=0):
    """Apply the learned optimizer for a fixed number of steps, off-tape.

    Returns steps + 1 loss values: entry t is the loss on the batch drawn at
    step t evaluated before that step's update, and the last entry is the
    loss after the final update on one more fresh batch."""
    batch_rng = make_generator(seed, "eval-batches")
    shapes = lopt.tree_shapes(optimizee.params)
    memory = lopt.init_memory(weights, shapes)
    params = _as_constant_params(optimizee.params)
    losses = []
    for _ in range(steps):
        batch = optimizee.sample_batch(batch_rng, batch_size)
        losses.append(float(optimizee.loss_fn(params, batch).data))
        grads = parameter_gradients(params, optimizee.loss_fn, batch)
        memory, updates = lopt.optimizer_step(weights, memory, grads)
        params = {name: Tensor(params[name].data + updates[name].data)
                  for name in params}
        memory = lopt.detach_memory(memory)
    batch = optimizee.sample_batch(batch_rng, batch_size)
    losses.append(float(optimizee.loss_fn(params, batch).data))
    return losses


def rollout_baseline(kind, lr, optimizee, steps, batch_size=64, seed=0):
    """Baseline-optimizer twin of rollout_learned: same batches, same init."""
    init, step = baselines.BASELINES[kind]
    batch_rng = make_generator(seed, "eval-batches")
    state = init(lopt.tree_shapes(optimizee.params))
    params = _as_constant_params(optimizee.params)
    losses = []
    for _ in range(steps):
        batch = optimizee.sample_batch(batch_rng, batch_size)
        losses.append(float(optimizee.loss_fn(params, batch).data))
        grads = parameter_gradients(params, optimizee.loss_fn, batch)
        state, updates = step(state, grads, lr)
        params = {name: Tensor(params[name].data + updates[name])
                  for name in params}
    batch = optimizee.sample_batch(batch_rng, batch_size)
    losses.append(float(optimizee.loss_fn(params, batch).data))
    return losses


def meta_train(config, weights=None, task=None, optimizee_factory=None):
    """Train learned-optimizer weights; returns (weights, rollout records)."""
    if weights is None:
        if config.mode == lopt.MODE_COORDINATE:
            weights = lopt.init_coordinate_weights(run_seed=config.seed)
        elif config.mode == lopt.MODE_TENSOR:
            weights = lopt.init_tensor_weights(run_seed=config.seed)
        else:
            weights = lopt.init_super_weights(run_seed=config.seed)
    if task is None:
        task = datasets.synthetic_task(config.task,
                                       derive_seed(config.seed, "meta-task"))
    meta_state = baselines.adam_init(
        {name: t.shape for name, t in lopt.named_parameters(weights)})
    records = []
    segments = config.horizon // config.truncation
    for outer in range(config.outer_iterations):
        seed_o = derive_seed(config.seed, f"meta-outer-{outer}")
        if optimizee_factory is not None:
            optimizee = optimizee_factory(outer, seed_o)
        else:
            optimizee = sample_optimizee(task, seed_o, config.optimizee_kinds)
        shapes = lopt.tree_shapes(optimizee.params)
        scales = random_scaling(shapes, config.scaling_sigma,
                                make_generator(seed_o, "meta-random-scaling"))
        loss_fn = scaled_loss(optimizee.loss_fn, scales)
        batch_rng = make_generator(seed_o, "meta-batches")
        memory = lopt.init_memory(weights, shapes)
        expert_state = baselines.adam_init(shapes)
        params = _as_constant_params(optimizee.params)
        task_losses = []
        imit_mses = []
        meta_loss = 0.0
        for segment in range(segments):
            batches = [optimizee.sample_batch(batch_rng, config.batch_size)
                       for _ in range(config.truncation)]

            def step_fn(mem, grads):
                return lopt.optimizer_step(weights, mem, grads)

            memory, params, expert_state, total, tvals, ivals = \
                unroll_segment(step_fn, memory, params, loss_fn, batches,
                               expert_state, config.expert_lr, config.alpha)
            if not np.isfinite(total.data):
                diag = {"outer_iteration": outer, "segment": segment,
                        "optimizee_kind": optimizee.kind, "seed": seed_o,
                        "meta_loss": float(total.data),
                        "task_losses": task_losses + tvals,
                        "imitation_mses": imit_mses + ivals}
                raise MetaTrainDiverged(
                    f"meta-loss became non-finite at outer iteration {outer}, "
                    f"segment {segment}", diag)
            meta_grads = backward(total)
            named = lopt.named_parameters(weights)
            grad_map = {}
            for name, tensor in named:
                g = meta_grads.get(tensor)
                grad_map[name] = (np.array(g.data) if g is not None
                                  else np.zeros(tensor.shape))
            meta_state, meta_updates = baselines.adam_step(
                meta_state, grad_map, config.meta_lr)
            arrays = {name: tensor.data + meta_updates[name]
                      for name, tensor in named}
            weights = lopt.load_parameters(weights, arrays)
            memory = lopt.detach_memory(memory)
            params = _as_constant_params(params)
            meta_loss += float(total.data)
            task_losses.extend(tvals)
            imit_mses.extend(ivals)
        records.append(RolloutRecord(outer_iteration=outer,
                                     optimizee_kind=optimizee.kind,
                                     task_losses=task_losses,
                                     imitation_mses=imit_mses,
                                     meta_loss=meta_loss, seed=seed_o))
    return weights, records
