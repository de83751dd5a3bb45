"""camopt command line.

Subcommands: meta-train (learn optimizer weights from a config file),
optimize (race a checkpoint against hand-designed baselines), memlab
(associative-memory and kernel experiments), ingest (IDX image/label
pairs to npy arrays). Exit codes: 0 success, 1 runtime failure, 2 usage
error. All outputs land in --out with a manifest.json; every CSV and
JSONL row carries the manifest hash."""

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .. import baselines, datasets, lopt, memory_lab, meta_train, rf
from ..autodiff import Tensor
from ..rng import derive_seed, make_generator
from . import checkpoint as checkpoint_mod
from .config import ConfigError, args_manifest, load_config

TASK_KINDS = ("two_gaussians", "spiral", "gaussian_mixture", "quadratic")


def _err(message):
    print(message, file=sys.stderr)


def _write_manifest(out_dir, manifest, digest):
    os.makedirs(out_dir, exist_ok=True)
    payload = dict(manifest)
    payload["manifest_hash"] = digest
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(payload, handle, sort_keys=True, indent=2)
        handle.write("\n")
    return path


def _write_csv(out_dir, name, header, rows):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return path


def _parallel_map(fn, items, threads):
    """Map preserving item order; identical results at any thread count."""
    if threads <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def parse_baseline_grid(text):
    """Parse "adam:3e-2,sgd:1e-2" into [("adam", 0.03), ("sgd", 0.01)]."""
    grid = []
    if not text:
        return grid
    for item in text.split(","):
        item = item.strip()
        name, sep, raw = item.partition(":")
        if not sep:
            raise ValueError(f"baseline {item!r}: expected name:learning_rate")
        if name not in baselines.BASELINES:
            known = ", ".join(sorted(baselines.BASELINES))
            raise ValueError(f"baseline {item!r}: unknown optimizer {name!r} "
                             f"(known: {known})")
        try:
            lr = float(raw)
        except ValueError:
            raise ValueError(f"baseline {item!r}: bad learning rate {raw!r}")
        if not np.isfinite(lr) or lr <= 0.0:
            raise ValueError(f"baseline {item!r}: learning rate must be "
                             f"positive, got {raw!r}")
        grid.append((name, lr))
    return grid


def parse_task_spec(spec, seed):
    """Build a task from "kind" or "kind:dim" (e.g. quadratic:12)."""
    name, sep, arg = spec.partition(":")
    if name not in TASK_KINDS:
        raise ValueError(f"task {spec!r}: unknown task kind {name!r} "
                         f"(known: {', '.join(TASK_KINDS)})")
    kwargs = {}
    if sep:
        if name == "spiral":
            raise ValueError(f"task {spec!r}: spiral takes no dimension")
        try:
            kwargs["dim"] = int(arg)
        except ValueError:
            raise ValueError(f"task {spec!r}: bad dimension {arg!r}")
        if kwargs["dim"] < 1:
            raise ValueError(f"task {spec!r}: dimension must be positive")
    return datasets.synthetic_task(name, seed, **kwargs)


# ---------------------------------------------------------------- meta-train


def cmd_meta_train(args):
    try:
        config = load_config(args.config)
    except ConfigError as exc:
        _err(str(exc))
        return 2
    seed = args.seed if args.seed is not None else config.seed
    out_dir = args.out if args.out is not None else config.out_dir
    meta_config = meta_train.MetaTrainConfig(
        **{**config.meta.__dict__, "seed": seed})
    manifest, digest = args_manifest("meta-train",
                                     {"config": config.text}, seed)
    _write_manifest(out_dir, manifest, digest)
    try:
        weights, records = meta_train.meta_train(meta_config)
    except meta_train.MetaTrainDiverged as exc:
        _err(f"meta-training diverged: {exc}")
        _err(json.dumps(exc.record, sort_keys=True, default=float))
        return 1
    curve_path = os.path.join(out_dir, "meta_train.jsonl")
    with open(curve_path, "w", encoding="utf-8") as handle:
        for record in records:
            row = {"manifest": digest,
                   "outer": record.outer_iteration,
                   "optimizee": record.optimizee_kind,
                   "meta_loss": record.meta_loss,
                   "task_losses": record.task_losses,
                   "imitation_mses": record.imitation_mses,
                   "seed": record.seed}
            handle.write(json.dumps(row, sort_keys=True) + "\n")
    ckpt = checkpoint_mod.weights_to_checkpoint(
        weights, seed, next_outer=meta_config.outer_iterations)
    ckpt_path = os.path.join(out_dir, "checkpoint.mnemo")
    checkpoint_mod.save_checkpoint(ckpt_path, ckpt)
    print(f"wrote {ckpt_path} and {curve_path} "
          f"({len(records)} outer iterations)")
    return 0


# ------------------------------------------------------------------ optimize


def _parameter_hash(params):
    digest = hashlib.sha256()
    for name in sorted(params):
        digest.update(name.encode("utf-8"))
        digest.update(np.ascontiguousarray(params[name].data).tobytes())
    return digest.hexdigest()


def _optimize_rollout(step_fn, state, optimizee, steps, batch_size, seed):
    """Shared loop: same init and same batch order for every optimizer.

    step_fn(state, grads) -> (state, name->update array). Returns
    (step, train loss before the update, validation loss after it) rows."""
    batch_rng = make_generator(seed, "optimize-batches")
    val_batch = optimizee.sample_batch(make_generator(seed, "optimize-val"),
                                       batch_size)
    params = {name: Tensor(np.array(tensor.data))
              for name, tensor in optimizee.params.items()}
    rows = []
    for step in range(steps):
        batch = optimizee.sample_batch(batch_rng, batch_size)
        train = float(optimizee.loss_fn(params, batch).data)
        grads = meta_train.parameter_gradients(params, optimizee.loss_fn,
                                               batch)
        state, updates = step_fn(state, grads)
        params = {name: Tensor(params[name].data + np.asarray(updates[name]))
                  for name in params}
        val = float(optimizee.loss_fn(params, val_batch).data)
        rows.append((step, train, val))
    return rows


def cmd_optimize(args):
    if args.steps < 0:
        _err("--steps must be >= 0")
        return 2
    try:
        grid = parse_baseline_grid(args.baselines)
    except ValueError as exc:
        _err(str(exc))
        return 2
    if not os.path.isfile(args.checkpoint):
        _err(f"checkpoint file not found: {args.checkpoint}")
        return 2
    try:
        ckpt = checkpoint_mod.load_checkpoint(args.checkpoint)
    except checkpoint_mod.CheckpointError as exc:
        _err(str(exc))
        return 1
    if args.mode is not None and args.mode != ckpt.mode:
        _err(f"checkpoint mode {ckpt.mode!r} does not match requested "
             f"mode {args.mode!r}")
        return 2
    try:
        weights, _, _ = checkpoint_mod.weights_from_checkpoint(ckpt)
    except (checkpoint_mod.CheckpointError, ValueError) as exc:
        _err(f"{args.checkpoint}: {exc}")
        return 1
    try:
        task = parse_task_spec(args.task, derive_seed(args.seed,
                                                      "optimize-task"))
    except ValueError as exc:
        _err(str(exc))
        return 2
    optimizee_seed = derive_seed(args.seed, "optimize-optimizee")
    if isinstance(task, datasets.QuadraticTask):
        optimizee = meta_train.build_optimizee(task, {"kind": "quadratic"},
                                               optimizee_seed)
    else:
        optimizee = meta_train.sample_optimizee(task, optimizee_seed)
    manifest, digest = args_manifest(
        "optimize",
        {"checkpoint": os.path.basename(args.checkpoint), "task": args.task,
         "steps": args.steps, "baselines": args.baselines,
         "batch_size": args.batch_size}, args.seed)
    _write_manifest(args.out, manifest, digest)
    param_hash = _parameter_hash(optimizee.params)

    def learned_step(memory, grads):
        memory, updates = lopt.optimizer_step(weights, memory, grads)
        return (lopt.detach_memory(memory),
                {name: update.data for name, update in updates.items()})

    shapes = lopt.tree_shapes(optimizee.params)
    runs = [("learned", "", learned_step, lopt.init_memory(weights, shapes))]
    for kind, lr in grid:
        init, step = baselines.BASELINES[kind]

        def baseline_step(state, grads, _step=step, _lr=lr):
            return _step(state, grads, _lr)

        runs.append((kind, repr(lr), baseline_step, init(shapes)))
    rows = []
    for label, lr_text, step_fn, state in runs:
        for step, train, val in _optimize_rollout(
                step_fn, state, optimizee, args.steps, args.batch_size,
                args.seed):
            rows.append([label, lr_text, step, train, val, param_hash,
                         digest])
    path = _write_csv(args.out, "optimize.csv",
                      ["optimizer", "lr", "step", "train_loss", "val_loss",
                       "param_hash", "manifest"], rows)
    print(f"wrote {path} ({len(runs)} optimizers x {args.steps} steps, "
          f"init hash {param_hash[:12]})")
    return 0


# -------------------------------------------------------------------- memlab


def cmd_memlab_retrieval(args):
    manifest, digest = args_manifest(
        "memlab-retrieval",
        {"n": args.n, "count": args.count, "rho": args.rho,
         "tau_sep": args.tau_sep, "r": args.r, "trials": args.trials,
         "rf_rho": args.rf_rho}, args.seed)
    try:
        results = memory_lab.retrieval_experiment(
            n_dim=args.n, count=args.count, rho=args.rho,
            tau_sep=args.tau_sep, r=args.r, trials=args.trials,
            seed=args.seed, rf_rho=args.rf_rho, max_steps=args.max_steps)
    except ValueError as exc:
        _err(str(exc))
        return 1
    _write_manifest(args.out, manifest, digest)
    rows = [[res.n_dim, res.count, res.rho, res.tau_sep, res.r,
             res.mechanism, res.success_rate, res.wall_time, digest]
            for res in results]
    path = _write_csv(args.out, "retrieval.csv",
                      ["N", "M", "rho", "tau_sep", "r", "mechanism",
                       "success_rate", "wall_time", "manifest"], rows)
    rates = ", ".join(f"{res.kind}={res.success_rate:.3f}"
                      for res in results)
    print(f"wrote {path} ({rates})")
    return 0


def cmd_memlab_sign_check(args):
    manifest, digest = args_manifest(
        "memlab-sign-check",
        {"n": args.n, "count": args.count, "rho": args.rho,
         "tau_sep": args.tau_sep, "r": args.r, "draws": args.draws,
         "configs": args.configs, "rf_rho": args.rf_rho}, args.seed)
    try:
        report = memory_lab.theorem1_sign_check(
            n_dim=args.n, count=args.count, tau_sep=args.tau_sep,
            rho=args.rho, num_draws=args.draws, num_configs=args.configs,
            r=args.r, rf_rho=args.rf_rho, seed=args.seed)
    except ValueError as exc:
        _err(str(exc))
        return 1
    _write_manifest(args.out, manifest, digest)
    row = [args.n, args.count, args.rho, args.tau_sep, args.r, "favor_pp",
           report.agreement_rate, report.conclusive_count,
           len(report.configs), report.wall_time, digest]
    path = _write_csv(args.out, "sign_check.csv",
                      ["N", "M", "rho", "tau_sep", "r", "mechanism",
                       "sign_rate", "conclusive", "total", "wall_time",
                       "manifest"], [row])
    print(f"wrote {path} ({report.conclusive_count}/{len(report.configs)} "
          f"conclusive, agreement {report.agreement_rate})")
    return 0


def cmd_memlab_variance(args):
    if args.corrupt < 1:
        _err("--corrupt must be >= 1 (the flipped coordinate is drawn "
             "from the corrupted set)")
        return 2
    manifest, digest = args_manifest(
        "memlab-variance",
        {"n": args.n, "count": args.count, "tau_sep": args.tau_sep,
         "corrupt": args.corrupt, "rho": args.rho, "r": args.r,
         "draws": args.draws}, args.seed)
    gen = make_generator(args.seed, "variance-patterns")
    try:
        if args.count == 2 and args.tau_sep == 1.0:
            pattern_set = memory_lab.antipodal_pair(args.n, gen)
        else:
            pattern_set = memory_lab.sample_pattern_set(
                args.n, args.count, args.tau_sep, gen)
        query, flipped = memory_lab.corrupt(pattern_set.patterns[0],
                                            args.corrupt, gen)
        flip_index = int(flipped[0])
        t0 = time.perf_counter()
        closed = memory_lab.variance_closed_form(
            pattern_set.patterns, query, flip_index, args.rho, args.r)
        sampled = memory_lab.mc_delta_energy_variance(
            pattern_set.patterns, query, flip_index, args.rho, args.r,
            args.draws, seed=args.seed)
        wall = time.perf_counter() - t0
    except ValueError as exc:
        _err(str(exc))
        return 1
    _write_manifest(args.out, manifest, digest)
    ratio = sampled / closed
    row = [args.n, args.count, args.rho, args.tau_sep, args.r, "favor_pp",
           ratio, wall, digest]
    path = _write_csv(args.out, "variance.csv",
                      ["N", "M", "rho", "tau_sep", "r", "mechanism",
                       "variance_ratio", "wall_time", "manifest"], [row])
    print(f"wrote {path} (monte carlo / closed form = {ratio:.4f})")
    return 0


def _parse_grid(text, converter, flag):
    values = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        try:
            values.append(converter(item))
        except ValueError:
            raise ValueError(f"{flag}: bad value {item!r}")
    if not values:
        raise ValueError(f"{flag}: empty grid")
    return values


def cmd_memlab_kernel_bench(args):
    try:
        r_grid = _parse_grid(args.r_grid, int, "--r-grid")
    except ValueError as exc:
        _err(str(exc))
        return 2
    manifest, digest = args_manifest(
        "memlab-kernel-bench",
        {"n": args.n, "pairs": args.pairs, "draws": args.draws,
         "r_grid": args.r_grid, "rf_rho": args.rf_rho}, args.seed)
    _write_manifest(args.out, manifest, digest)
    gen = make_generator(args.seed, "kernel-bench-pairs")
    points = []
    for _ in range(args.pairs):
        pair = []
        for _ in range(2):
            vec = gen.standard_normal(args.n)
            vec *= gen.uniform(0.0, 2.0) / np.linalg.norm(vec)
            pair.append(vec)
        points.append(tuple(pair))
    mechanisms = (rf.FAVOR_PLUS, rf.HYPERBOLIC, rf.FAVOR_PP)
    items = [(mech, r, pid) for mech in mechanisms for r in r_grid
             for pid in range(args.pairs)]

    def run_item(item):
        mech, r, pid = item
        x, y = points[pid]
        rho = args.rf_rho if mech == rf.FAVOR_PP else None
        t0 = time.perf_counter()
        estimates = []
        for draw in range(args.draws):
            spec = rf.RfSpec(mechanism=mech, r=r, input_dim=args.n, rho=rho,
                             seed=derive_seed(
                                 args.seed, f"kernel-{mech}-{r}-{pid}-{draw}"))
            proj = rf.sample_projections(spec)
            estimates.append(rf.kernel_estimate(proj, x, y, rho=rho))
        exact = float(np.exp(x @ y))
        rel_error = abs(float(np.mean(estimates)) - exact) / exact
        return [mech, r, pid, rel_error, time.perf_counter() - t0, digest]

    rows = _parallel_map(run_item, items, args.threads)
    path = _write_csv(args.out, "kernel_bench.csv",
                      ["mechanism", "r", "pair", "rel_error", "wall_time",
                       "manifest"], rows)
    print(f"wrote {path} ({len(rows)} rows)")
    return 0


def cmd_memlab_cam_bench(args):
    try:
        tau_grid = _parse_grid(args.tau_grid, float, "--tau-grid")
        r_grid = _parse_grid(args.r_grid, int, "--r-grid")
        h_grid = _parse_grid(args.h_grid, int, "--h-grid")
    except ValueError as exc:
        _err(str(exc))
        return 2
    manifest, digest = args_manifest(
        "memlab-cam-bench",
        {"tau_grid": args.tau_grid, "r_grid": args.r_grid,
         "h_grid": args.h_grid, "steps": args.steps, "dim": args.dim},
        args.seed)
    _write_manifest(args.out, manifest, digest)
    stream_rng = make_generator(args.seed, "cam-bench-stream")
    stream = [{"g": stream_rng.standard_normal(args.dim)}
              for _ in range(args.steps)]
    reference_weights = lopt.init_coordinate_weights(run_seed=args.seed,
                                                     light=True)

    def cache_updates(h):
        cache = baselines.cached_attention_init(reference_weights, h=h)
        outs = []
        for grads in stream:
            cache, updates = baselines.cached_attention_optimizer_step(
                reference_weights, cache, grads)
            outs.append(updates["g"])
        return outs

    reference = cache_updates(None)
    rows = []
    for tau in tau_grid:
        for r in r_grid:
            weights = lopt.init_coordinate_weights(
                run_seed=args.seed, light=True, discount=tau, r=r)
            memory = lopt.init_memory(weights, {"g": (args.dim,)})
            t0 = time.perf_counter()
            deviation = 0.0
            for grads, expected in zip(stream, reference):
                memory, updates = lopt.optimizer_step(weights, memory, grads)
                memory = lopt.detach_memory(memory)
                deviation = max(deviation, float(np.max(
                    np.abs(updates["g"].data - expected))))
            rows.append(["cam", tau, r, "", deviation,
                         time.perf_counter() - t0, digest])
    for h in h_grid:
        t0 = time.perf_counter()
        deviation = max(float(np.max(np.abs(got - expected)))
                        for got, expected in zip(cache_updates(h), reference))
        rows.append(["cache", "", "", h, deviation,
                     time.perf_counter() - t0, digest])
    path = _write_csv(args.out, "cam_bench.csv",
                      ["kind", "tau", "r", "h", "deviation", "wall_time",
                       "manifest"], rows)
    print(f"wrote {path} ({len(rows)} rows)")
    return 0


# -------------------------------------------------------------------- ingest


def cmd_ingest(args):
    for path in (args.images, args.labels):
        if not os.path.isfile(path):
            _err(f"input file not found: {path}")
            return 2
    try:
        images = datasets.load_idx_images(args.images)
        labels = datasets.load_idx_labels(args.labels)
    except ValueError as exc:
        _err(str(exc))
        return 1
    if len(images) != len(labels):
        _err(f"{args.images} holds {len(images)} images but "
             f"{args.labels} holds {len(labels)} labels")
        return 1
    manifest, digest = args_manifest(
        "ingest", {"images": os.path.basename(args.images),
                   "labels": os.path.basename(args.labels)}, args.seed)
    _write_manifest(args.out, manifest, digest)
    order = make_generator(args.seed, "mnist-shuffle").permutation(len(images))
    os.makedirs(args.out, exist_ok=True)
    image_path = os.path.join(args.out, "images.npy")
    label_path = os.path.join(args.out, "labels.npy")
    np.save(image_path, images[order])
    np.save(label_path, labels[order])
    print(f"wrote {image_path} and {label_path} "
          f"({len(images)} examples, {images.shape[1]} features)")
    return 0


# -------------------------------------------------------------------- parser


def build_parser():
    parser = argparse.ArgumentParser(
        prog="camopt",
        description="learned optimizer with compact associative memory")
    sub = parser.add_subparsers(dest="command", required=True)

    mt = sub.add_parser("meta-train", help="meta-train optimizer weights")
    mt.add_argument("--config", required=True, help="INI config file")
    mt.add_argument("--seed", type=int, default=None,
                    help="override the config file seed")
    mt.add_argument("--out", default=None,
                    help="output directory (default: config out_dir)")
    mt.set_defaults(func=cmd_meta_train)

    opt = sub.add_parser("optimize",
                         help="run a checkpoint against baselines")
    opt.add_argument("--checkpoint", required=True)
    opt.add_argument("--task", required=True,
                     help="kind or kind:dim (two_gaussians, spiral, "
                          "gaussian_mixture, quadratic)")
    opt.add_argument("--steps", type=int, required=True)
    opt.add_argument("--baselines", default="",
                     help="comma list like adam:1e-3,sgd:1e-2")
    opt.add_argument("--batch-size", type=int, default=64)
    opt.add_argument("--mode", default=None,
                     choices=[lopt.MODE_COORDINATE, lopt.MODE_TENSOR,
                              lopt.MODE_SUPER],
                     help="require the checkpoint to hold this mode")
    opt.add_argument("--seed", type=int, default=0)
    opt.add_argument("--out", default=".")
    opt.set_defaults(func=cmd_optimize)

    memlab = sub.add_parser("memlab", help="associative-memory experiments")
    memsub = memlab.add_subparsers(dest="memlab_command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=".")

    ret = memsub.add_parser("retrieval",
                            help="pattern recovery under flip dynamics")
    ret.add_argument("--n", type=int, default=16)
    ret.add_argument("--count", type=int, default=3)
    ret.add_argument("--rho", type=float, default=0.1,
                     help="corruption fraction (floor(rho*n) bits)")
    ret.add_argument("--tau-sep", type=float, default=0.5)
    ret.add_argument("--r", type=int, default=4096)
    ret.add_argument("--trials", type=int, default=20)
    ret.add_argument("--rf-rho", type=float, default=None)
    ret.add_argument("--max-steps", type=int, default=None)
    common(ret)
    ret.set_defaults(func=cmd_memlab_retrieval)

    sign = memsub.add_parser("sign-check",
                             help="energy-difference sign agreement")
    sign.add_argument("--n", type=int, default=16)
    sign.add_argument("--count", type=int, default=2)
    sign.add_argument("--rho", type=float, default=0.125)
    sign.add_argument("--tau-sep", type=float, default=1.0)
    sign.add_argument("--r", type=int, default=64)
    sign.add_argument("--draws", type=int, default=40000)
    sign.add_argument("--configs", type=int, default=4)
    sign.add_argument("--rf-rho", type=float, default=None)
    common(sign)
    sign.set_defaults(func=cmd_memlab_sign_check)

    var = memsub.add_parser("variance",
                            help="closed-form vs monte-carlo variance")
    var.add_argument("--n", type=int, default=4)
    var.add_argument("--count", type=int, default=1)
    var.add_argument("--tau-sep", type=float, default=0.5)
    var.add_argument("--corrupt", type=int, default=1,
                     help="corrupted bits; the first one is re-flipped")
    var.add_argument("--rho", type=float, required=True)
    var.add_argument("--r", type=int, default=256)
    var.add_argument("--draws", type=int, default=20000)
    common(var)
    var.set_defaults(func=cmd_memlab_variance)

    kb = memsub.add_parser("kernel-bench",
                           help="kernel error per mechanism and r")
    kb.add_argument("--n", type=int, default=4)
    kb.add_argument("--pairs", type=int, default=5)
    kb.add_argument("--draws", type=int, default=100)
    kb.add_argument("--r-grid", default="16,64,256")
    kb.add_argument("--rf-rho", type=float, default=0.5)
    kb.add_argument("--threads", type=int, default=1)
    common(kb)
    kb.set_defaults(func=cmd_memlab_kernel_bench)

    cb = memsub.add_parser("cam-bench",
                           help="cell deviation from exact cached attention")
    cb.add_argument("--tau-grid", default="0,0.1,1")
    cb.add_argument("--r-grid", default="16,64")
    cb.add_argument("--h-grid", default="4,16,64")
    cb.add_argument("--steps", type=int, default=64)
    cb.add_argument("--dim", type=int, default=6)
    common(cb)
    cb.set_defaults(func=cmd_memlab_cam_bench)

    ing = sub.add_parser("ingest", help="convert IDX files to npy arrays")
    ing.add_argument("--images", required=True)
    ing.add_argument("--labels", required=True)
    ing.add_argument("--seed", type=int, default=0)
    ing.add_argument("--out", default=".")
    ing.set_defaults(func=cmd_ingest)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except OSError as exc:
        _err(str(exc))
        return 1


if __name__ == "__main__":
    sys.exit(main())
