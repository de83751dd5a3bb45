"""Run configuration and provenance.

A run is described by a small INI file with two sections:

    [run]
    seed = 0
    out_dir = runs/demo
    threads = 1

    [meta_train]
    mode = coordinate
    horizon = 100
    truncation = 5
    meta_lr = 3e-4
    expert_lr = 3e-2
    alpha = 1.0
    scaling_sigma = 3.0
    batch_size = 64
    outer_iterations = 5000
    optimizee_kinds = mlp
    task = two_gaussians

Every key is validated against its documented range before any compute
runs, and unknown sections or keys are rejected so typos fail loudly.
The raw file text is hashed into the run manifest that every output row
carries."""

import configparser
import hashlib
import json
import os
import subprocess
from dataclasses import dataclass

from .. import lopt
from .. import meta_train


class ConfigError(ValueError):
    """A config file is missing, malformed, or holds an out-of-range value."""


RUN_KEYS = ("seed", "out_dir", "threads")
META_KEYS = ("mode", "horizon", "truncation", "meta_lr", "expert_lr",
             "alpha", "scaling_sigma", "batch_size", "outer_iterations",
             "optimizee_kinds", "task")
MODES = (lopt.MODE_COORDINATE, lopt.MODE_TENSOR, lopt.MODE_SUPER)
OPTIMIZEE_KINDS = ("mlp", "attention", "quadratic")
TASKS = ("two_gaussians", "spiral", "gaussian_mixture", "quadratic")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    out_dir: str
    threads: int
    meta: meta_train.MetaTrainConfig
    text: str


def _fail(section, key, raw, want):
    raise ConfigError(f"[{section}] {key}: expected {want}, got {raw!r}")


def _get_int(parser, section, key, default, minimum):
    raw = parser.get(section, key, fallback=None)
    if raw is None:
        return default
    try:
        value = int(raw)
    except ValueError:
        _fail(section, key, raw, f"an integer >= {minimum}")
    if value < minimum:
        _fail(section, key, raw, f"an integer >= {minimum}")
    return value


def _get_float(parser, section, key, default, minimum, exclusive=False):
    raw = parser.get(section, key, fallback=None)
    if raw is None:
        return default
    bound = f"> {minimum}" if exclusive else f">= {minimum}"
    try:
        value = float(raw)
    except ValueError:
        _fail(section, key, raw, f"a number {bound}")
    bad = value <= minimum if exclusive else value < minimum
    if not (value == value) or bad:
        _fail(section, key, raw, f"a number {bound}")
    return value


def _get_choice(parser, section, key, default, choices):
    raw = parser.get(section, key, fallback=None)
    if raw is None:
        return default
    value = raw.strip()
    if value not in choices:
        _fail(section, key, raw, "one of " + ", ".join(choices))
    return value


def parse_config(text):
    """Validate INI text and return an ExperimentConfig."""
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    for section in parser.sections():
        if section not in ("run", "meta_train"):
            raise ConfigError(f"unknown section [{section}]")
        allowed = RUN_KEYS if section == "run" else META_KEYS
        for key in parser.options(section):
            if key not in allowed:
                raise ConfigError(f"[{section}] {key}: unknown key")
    seed = _get_int(parser, "run", "seed", 0, 0)
    out_dir = parser.get("run", "out_dir", fallback=".")
    threads = _get_int(parser, "run", "threads", 1, 1)

    horizon = _get_int(parser, "meta_train", "horizon", 100, 1)
    truncation = _get_int(parser, "meta_train", "truncation", 5, 1)
    if horizon % truncation != 0:
        raise ConfigError(f"[meta_train] truncation: {truncation} must "
                          f"divide horizon {horizon}")
    kinds_raw = parser.get("meta_train", "optimizee_kinds", fallback="mlp")
    kinds = tuple(k.strip() for k in kinds_raw.split(",") if k.strip())
    if not kinds:
        _fail("meta_train", "optimizee_kinds", kinds_raw,
              "a comma-separated list of " + ", ".join(OPTIMIZEE_KINDS))
    for kind in kinds:
        if kind not in OPTIMIZEE_KINDS:
            _fail("meta_train", "optimizee_kinds", kind,
                  "one of " + ", ".join(OPTIMIZEE_KINDS))
    meta = meta_train.MetaTrainConfig(
        horizon=horizon,
        truncation=truncation,
        meta_lr=_get_float(parser, "meta_train", "meta_lr", 3e-4, 0.0,
                           exclusive=True),
        expert_lr=_get_float(parser, "meta_train", "expert_lr", 3e-2, 0.0,
                             exclusive=True),
        alpha=_get_float(parser, "meta_train", "alpha", 1.0, 0.0),
        scaling_sigma=_get_float(parser, "meta_train", "scaling_sigma",
                                 3.0, 0.0),
        batch_size=_get_int(parser, "meta_train", "batch_size", 64, 1),
        outer_iterations=_get_int(parser, "meta_train", "outer_iterations",
                                  5000, 0),
        seed=seed,
        mode=_get_choice(parser, "meta_train", "mode",
                         lopt.MODE_COORDINATE, MODES),
        optimizee_kinds=kinds,
        task=_get_choice(parser, "meta_train", "task", "two_gaussians",
                         TASKS),
    )
    return ExperimentConfig(seed=seed, out_dir=out_dir, threads=threads,
                            meta=meta, text=text)


def load_config(path):
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as handle:
        return parse_config(handle.read())


def git_revision():
    """Current commit hash, or "unknown" outside a git checkout."""
    try:
        proc = subprocess.run(["git", "rev-parse", "HEAD"],
                              capture_output=True, text=True, timeout=10)
    except OSError:
        return "unknown"
    if proc.returncode != 0:
        return "unknown"
    return proc.stdout.strip()


def run_manifest(config_text, seed):
    """Provenance record and its hash; the hash goes on every output row."""
    manifest = {
        "config_hash": hashlib.sha256(config_text.encode("utf-8")).hexdigest(),
        "git_rev": git_revision(),
        "seed": int(seed),
    }
    digest = hashlib.sha256(
        json.dumps(manifest, sort_keys=True).encode("utf-8")).hexdigest()
    return manifest, digest


def args_manifest(command, params, seed):
    """Manifest for commands configured by flags instead of a file."""
    text = command + "".join(f" {key}={params[key]}"
                             for key in sorted(params))
    return run_manifest(text, seed)
