import json
import os
import struct

import numpy as np
import pytest

from camopt import datasets, lopt, meta_train
from camopt.harness import checkpoint as ckpt_mod
from camopt.harness import cli
from camopt.harness.config import (ConfigError, load_config, parse_config,
                                   run_manifest)
from camopt.rng import make_generator, state_to_array

CONFIG_TEMPLATE = """\
[run]
seed = 7
out_dir = {out_dir}

[meta_train]
mode = coordinate
horizon = 4
truncation = 2
batch_size = 4
outer_iterations = 2
optimizee_kinds = quadratic
task = quadratic
"""


def write_config(tmp_path, name="run.ini", out_dir=None):
    out_dir = out_dir or str(tmp_path / "run")
    path = tmp_path / name
    path.write_text(CONFIG_TEMPLATE.format(out_dir=out_dir))
    return str(path), out_dir


def read_bytes(path):
    with open(path, "rb") as handle:
        return handle.read()


# ----------------------------------------------------------------- config


def test_parse_config_fields():
    config = parse_config(CONFIG_TEMPLATE.format(out_dir="somewhere"))
    assert config.seed == 7
    assert config.out_dir == "somewhere"
    assert config.threads == 1
    assert config.meta.horizon == 4
    assert config.meta.truncation == 2
    assert config.meta.outer_iterations == 2
    assert config.meta.optimizee_kinds == ("quadratic",)
    assert config.meta.task == "quadratic"
    assert config.meta.mode == lopt.MODE_COORDINATE
    assert config.meta.meta_lr == 3e-4


def test_parse_config_defaults_match_meta_train_defaults():
    config = parse_config("")
    assert config.meta == meta_train.MetaTrainConfig(seed=0)


@pytest.mark.parametrize("text,fragment", [
    ("[meta_train]\nhorizon = 0\n", "[meta_train] horizon"),
    ("[meta_train]\nhorizon = ten\n", "[meta_train] horizon"),
    ("[meta_train]\nmeta_lr = 0\n", "[meta_train] meta_lr"),
    ("[meta_train]\nalpha = -1\n", "[meta_train] alpha"),
    ("[meta_train]\nmode = turbo\n", "[meta_train] mode"),
    ("[meta_train]\ntask = chess\n", "[meta_train] task"),
    ("[meta_train]\noptimizee_kinds = mlp,robot\n", "optimizee_kinds"),
    ("[meta_train]\nhorizon = 10\ntruncation = 4\n", "must divide"),
    ("[meta_train]\nhorizont = 5\n", "unknown key"),
    ("[experiment]\nseed = 1\n", "unknown section"),
    ("[run]\nseed = -1\n", "[run] seed"),
    ("[run]\nthreads = 0\n", "[run] threads"),
])
def test_parse_config_rejects_bad_values(text, fragment):
    with pytest.raises(ConfigError, match=None) as excinfo:
        parse_config(text)
    assert fragment in str(excinfo.value)


def test_load_config_missing_file_names_path(tmp_path):
    missing = str(tmp_path / "nope.ini")
    with pytest.raises(ConfigError) as excinfo:
        load_config(missing)
    assert missing in str(excinfo.value)


def test_run_manifest_deterministic():
    manifest_a, digest_a = run_manifest("text", 3)
    manifest_b, digest_b = run_manifest("text", 3)
    assert manifest_a == manifest_b
    assert digest_a == digest_b
    assert manifest_a["seed"] == 3
    _, digest_c = run_manifest("text", 4)
    assert digest_c != digest_a


# ------------------------------------------------------------- checkpoint


def advanced_memory(weights):
    memory = lopt.init_memory(weights, {"p": (4,)})
    grads = {"p": np.arange(4.0) / 4.0}
    memory, _ = lopt.optimizer_step(weights, memory, grads)
    return lopt.detach_memory(memory)


def test_checkpoint_roundtrip_bit_identity(tmp_path):
    weights = lopt.init_coordinate_weights(run_seed=3)
    ckpt = ckpt_mod.weights_to_checkpoint(weights, seed=3, next_outer=5,
                                          memory=advanced_memory(weights))
    path = str(tmp_path / "w.mnemo")
    ckpt_mod.save_checkpoint(path, ckpt)
    loaded = ckpt_mod.load_checkpoint(path)
    assert loaded.version == ckpt_mod.VERSION
    assert loaded.mode == lopt.MODE_COORDINATE
    assert set(loaded.sections) == {"weights", "memory", "rng"}
    for section, arrays in ckpt.sections.items():
        assert set(loaded.sections[section]) == set(arrays)
        for name, arr in arrays.items():
            got = loaded.sections[section][name]
            assert got.shape == np.asarray(arr).shape
            assert got.dtype == np.asarray(arr).dtype
            assert got.tobytes() == np.asarray(arr).tobytes()
    second = str(tmp_path / "w2.mnemo")
    ckpt_mod.save_checkpoint(second, loaded)
    assert read_bytes(second) == read_bytes(path)


def test_checkpoint_rng_words_match_derivation(tmp_path):
    weights = lopt.init_coordinate_weights(run_seed=11)
    ckpt = ckpt_mod.weights_to_checkpoint(weights, seed=11, next_outer=2)
    words = ckpt.sections["rng"]["philox"]
    expected = state_to_array(make_generator(11, "meta-outer-2"))
    assert words.dtype == np.uint64
    assert np.array_equal(words, expected)


def test_checkpoint_preserves_scalar_shape(tmp_path):
    ckpt = ckpt_mod.Checkpoint(version=1, mode="coordinate",
                               sections={"weights": {"s": np.array(0.25)}})
    path = str(tmp_path / "s.mnemo")
    ckpt_mod.save_checkpoint(path, ckpt)
    loaded = ckpt_mod.load_checkpoint(path).sections["weights"]["s"]
    assert loaded.shape == ()
    assert loaded == 0.25


def test_checkpoint_restores_weights(tmp_path):
    weights = lopt.init_coordinate_weights(run_seed=3)
    arrays = {name: tensor.data + 0.5
              for name, tensor in lopt.named_parameters(weights)}
    weights = lopt.load_parameters(weights, arrays)
    path = str(tmp_path / "w.mnemo")
    ckpt_mod.save_checkpoint(
        path, ckpt_mod.weights_to_checkpoint(weights, seed=3, next_outer=4))
    restored, seed, outer = ckpt_mod.weights_from_checkpoint(
        ckpt_mod.load_checkpoint(path))
    assert seed == 3
    assert outer == 4
    originals = dict(lopt.named_parameters(weights))
    for name, tensor in lopt.named_parameters(restored):
        assert tensor.data.tobytes() == originals[name].data.tobytes()


def test_checkpoint_bad_magic(tmp_path):
    path = str(tmp_path / "bad.mnemo")
    with open(path, "wb") as handle:
        handle.write(b"NOTME1" + b"\x00" * 16)
    with pytest.raises(ckpt_mod.CheckpointError) as excinfo:
        ckpt_mod.load_checkpoint(path)
    message = str(excinfo.value)
    assert "bad magic at byte 0" in message
    assert "b'MNEMO1'" in message
    assert "b'NOTME1'" in message


def test_checkpoint_truncation_reports_offset(tmp_path):
    weights = lopt.init_coordinate_weights(run_seed=0)
    full = ckpt_mod.checkpoint_bytes(
        ckpt_mod.weights_to_checkpoint(weights, seed=0))
    path = str(tmp_path / "cut.mnemo")
    with open(path, "wb") as handle:
        handle.write(full[:len(full) // 2])
    with pytest.raises(ckpt_mod.CheckpointError,
                       match=rf"truncated at byte {len(full) // 2}"):
        ckpt_mod.load_checkpoint(path)


def test_checkpoint_trailing_bytes_rejected(tmp_path):
    weights = lopt.init_coordinate_weights(run_seed=0)
    full = ckpt_mod.checkpoint_bytes(
        ckpt_mod.weights_to_checkpoint(weights, seed=0))
    path = str(tmp_path / "pad.mnemo")
    with open(path, "wb") as handle:
        handle.write(full + b"xyz")
    with pytest.raises(ckpt_mod.CheckpointError, match="3 trailing bytes"):
        ckpt_mod.load_checkpoint(path)


# -------------------------------------------------------------- cli parsing


def test_parse_baseline_grid():
    assert cli.parse_baseline_grid("adam:3e-2") == [("adam", 0.03)]
    assert cli.parse_baseline_grid("adam:1e-3,sgd:1e-2,rmsprop:3e-4") == [
        ("adam", 1e-3), ("sgd", 1e-2), ("rmsprop", 3e-4)]
    assert cli.parse_baseline_grid("") == []
    for bad in ("adam", "foo:1e-2", "adam:fast", "adam:-0.1", "adam:0"):
        with pytest.raises(ValueError, match="baseline"):
            cli.parse_baseline_grid(bad)


def test_parse_task_spec():
    task = cli.parse_task_spec("quadratic:6", seed=0)
    assert isinstance(task, datasets.QuadraticTask)
    assert task.optimum.shape == (6,)
    source = cli.parse_task_spec("two_gaussians:5", seed=0)
    assert source.input_dim == 5
    with pytest.raises(ValueError, match="spiral takes no dimension"):
        cli.parse_task_spec("spiral:3", seed=0)
    with pytest.raises(ValueError, match="unknown task kind"):
        cli.parse_task_spec("mnist", seed=0)
    with pytest.raises(ValueError, match="bad dimension"):
        cli.parse_task_spec("quadratic:big", seed=0)


def test_cli_unknown_command_usage_exit():
    with pytest.raises(SystemExit) as excinfo:
        cli.main(["explode"])
    assert excinfo.value.code == 2


# -------------------------------------------------------------- meta-train


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    tmp_path = tmp_path_factory.mktemp("meta")
    config_path, out_dir = write_config(tmp_path)
    assert cli.main(["meta-train", "--config", config_path]) == 0
    return config_path, out_dir


def test_meta_train_missing_config_exit_2(tmp_path, capsys):
    missing = str(tmp_path / "absent.ini")
    assert cli.main(["meta-train", "--config", missing]) == 2
    assert missing in capsys.readouterr().err


def test_meta_train_invalid_config_exit_2(tmp_path, capsys):
    path = tmp_path / "bad.ini"
    path.write_text("[meta_train]\nhorizon = 0\n")
    assert cli.main(["meta-train", "--config", str(path)]) == 2
    assert "[meta_train] horizon" in capsys.readouterr().err


def test_meta_train_outputs(trained_run):
    _, out_dir = trained_run
    names = sorted(os.listdir(out_dir))
    assert names == ["checkpoint.mnemo", "manifest.json", "meta_train.jsonl"]
    manifest = json.loads(read_bytes(os.path.join(out_dir, "manifest.json")))
    assert set(manifest) == {"config_hash", "git_rev", "seed",
                             "manifest_hash"}
    assert manifest["seed"] == 7
    rows = [json.loads(line) for line in
            read_bytes(os.path.join(out_dir, "meta_train.jsonl"))
            .decode().splitlines()]
    assert [row["outer"] for row in rows] == [0, 1]
    for row in rows:
        assert row["manifest"] == manifest["manifest_hash"]
        assert row["optimizee"] == "quadratic"
        assert len(row["task_losses"]) == 4
    ckpt = ckpt_mod.load_checkpoint(os.path.join(out_dir, "checkpoint.mnemo"))
    assert ckpt.mode == lopt.MODE_COORDINATE
    assert int(ckpt.sections["rng"]["next_outer"][0]) == 2


def test_meta_train_same_seed_byte_identical(trained_run, tmp_path):
    config_path, out_dir = trained_run
    other = str(tmp_path / "again")
    assert cli.main(["meta-train", "--config", config_path,
                     "--out", other]) == 0
    for name in ("meta_train.jsonl", "checkpoint.mnemo", "manifest.json"):
        assert read_bytes(os.path.join(other, name)) == \
            read_bytes(os.path.join(out_dir, name)), name


def test_meta_train_seed_override_changes_outputs(trained_run, tmp_path):
    config_path, out_dir = trained_run
    other = str(tmp_path / "seeded")
    assert cli.main(["meta-train", "--config", config_path, "--seed", "9",
                     "--out", other]) == 0
    assert read_bytes(os.path.join(other, "meta_train.jsonl")) != \
        read_bytes(os.path.join(out_dir, "meta_train.jsonl"))
    manifest = json.loads(read_bytes(os.path.join(other, "manifest.json")))
    assert manifest["seed"] == 9


# ---------------------------------------------------------------- optimize


def read_csv(path):
    lines = read_bytes(path).decode().splitlines()
    header = lines[0].split(",")
    return header, [line.split(",") for line in lines[1:]]


def test_optimize_races_baselines(trained_run, tmp_path):
    _, run_dir = trained_run
    out = str(tmp_path / "opt")
    assert cli.main(["optimize",
                     "--checkpoint", os.path.join(run_dir, "checkpoint.mnemo"),
                     "--task", "quadratic:5", "--steps", "2",
                     "--baselines", "adam:3e-2,sgd:1e-2",
                     "--batch-size", "4", "--out", out]) == 0
    header, rows = read_csv(os.path.join(out, "optimize.csv"))
    assert header == ["optimizer", "lr", "step", "train_loss", "val_loss",
                      "param_hash", "manifest"]
    assert [row[0] for row in rows] == ["learned", "learned",
                                        "adam", "adam", "sgd", "sgd"]
    assert len(set(row[5] for row in rows)) == 1
    manifest = json.loads(read_bytes(os.path.join(out, "manifest.json")))
    assert set(row[6] for row in rows) == {manifest["manifest_hash"]}
    for row in rows:
        assert np.isfinite(float(row[3]))
        assert np.isfinite(float(row[4]))
    first_train = set(row[3] for row in rows if row[2] == "0")
    assert len(first_train) == 1


def test_optimize_zero_steps_header_only(trained_run, tmp_path):
    _, run_dir = trained_run
    out = str(tmp_path / "opt0")
    assert cli.main(["optimize",
                     "--checkpoint", os.path.join(run_dir, "checkpoint.mnemo"),
                     "--task", "quadratic", "--steps", "0",
                     "--out", out]) == 0
    header, rows = read_csv(os.path.join(out, "optimize.csv"))
    assert header[0] == "optimizer"
    assert rows == []


def test_optimize_mode_mismatch(trained_run, tmp_path, capsys):
    _, run_dir = trained_run
    rc = cli.main(["optimize",
                   "--checkpoint", os.path.join(run_dir, "checkpoint.mnemo"),
                   "--task", "quadratic", "--steps", "1",
                   "--mode", "tensor", "--out", str(tmp_path)])
    assert rc == 2
    err = capsys.readouterr().err
    assert "'coordinate'" in err and "'tensor'" in err


def test_optimize_usage_errors(trained_run, tmp_path, capsys):
    _, run_dir = trained_run
    ckpt = os.path.join(run_dir, "checkpoint.mnemo")
    assert cli.main(["optimize", "--checkpoint", ckpt, "--task", "quadratic",
                     "--steps", "1", "--baselines", "foo:1e-2",
                     "--out", str(tmp_path)]) == 2
    assert cli.main(["optimize", "--checkpoint", str(tmp_path / "no.mnemo"),
                     "--task", "quadratic", "--steps", "1",
                     "--out", str(tmp_path)]) == 2
    assert cli.main(["optimize", "--checkpoint", ckpt, "--task", "waffles",
                     "--steps", "1", "--out", str(tmp_path)]) == 2
    capsys.readouterr()


# ------------------------------------------------------------------ memlab


def test_memlab_retrieval_rho_zero(tmp_path):
    out = str(tmp_path / "ret")
    assert cli.main(["memlab", "retrieval", "--n", "10", "--count", "2",
                     "--rho", "0", "--tau-sep", "0.5", "--r", "64",
                     "--trials", "4", "--out", out]) == 0
    header, rows = read_csv(os.path.join(out, "retrieval.csv"))
    assert header == ["N", "M", "rho", "tau_sep", "r", "mechanism",
                      "success_rate", "wall_time", "manifest"]
    regular = [row for row in rows if row[5] == "exact"]
    assert len(regular) == 1
    assert float(regular[0][6]) == 1.0
    assert {row[5] for row in rows} == {"exact", "favor_pp"}


def test_memlab_retrieval_infeasible_exit_1(tmp_path, capsys):
    rc = cli.main(["memlab", "retrieval", "--n", "10", "--count", "2",
                   "--rho", "0.3", "--tau-sep", "0.5", "--r", "64",
                   "--trials", "2", "--out", str(tmp_path)])
    assert rc == 1
    assert "must be below tau_sep/2" in capsys.readouterr().err


def test_memlab_variance_guard_exit_1(tmp_path, capsys):
    rc = cli.main(["memlab", "variance", "--rho", "0.5",
                   "--out", str(tmp_path)])
    assert rc == 1
    err = capsys.readouterr().err
    assert "variance formula diverges (requires rho > 8/9)" in err


def test_memlab_variance_ratio(tmp_path):
    out = str(tmp_path / "var")
    assert cli.main(["memlab", "variance", "--rho", "0.95", "--n", "4",
                     "--count", "1", "--corrupt", "3", "--r", "256",
                     "--draws", "20000", "--out", out]) == 0
    header, rows = read_csv(os.path.join(out, "variance.csv"))
    assert header[6] == "variance_ratio"
    ratio = float(rows[0][6])
    assert 0.6 < ratio < 1.5


def test_memlab_sign_check_writes_summary(tmp_path):
    out = str(tmp_path / "sc")
    assert cli.main(["memlab", "sign-check", "--n", "8", "--count", "2",
                     "--tau-sep", "1.0", "--rho", "0.125", "--r", "32",
                     "--draws", "2000", "--configs", "2",
                     "--rf-rho", "0.45", "--out", out]) == 0
    header, rows = read_csv(os.path.join(out, "sign_check.csv"))
    assert header == ["N", "M", "rho", "tau_sep", "r", "mechanism",
                      "sign_rate", "conclusive", "total", "wall_time",
                      "manifest"]
    assert len(rows) == 1
    assert rows[0][5] == "favor_pp"
    assert int(rows[0][8]) == 2


def test_memlab_kernel_bench_rows_and_threads(tmp_path):
    outs = []
    for threads, name in ((1, "kb1"), (3, "kb3")):
        out = str(tmp_path / name)
        assert cli.main(["memlab", "kernel-bench", "--n", "4",
                         "--pairs", "2", "--draws", "10",
                         "--r-grid", "8,32", "--threads", str(threads),
                         "--out", out]) == 0
        outs.append(out)
    tables = []
    for out in outs:
        header, rows = read_csv(os.path.join(out, "kernel_bench.csv"))
        assert header == ["mechanism", "r", "pair", "rel_error", "wall_time",
                          "manifest"]
        assert len(rows) == 3 * 2 * 2
        tables.append([row[:4] for row in rows])
    assert tables[0] == tables[1]


def test_memlab_cam_bench_structure(tmp_path):
    out = str(tmp_path / "cb")
    assert cli.main(["memlab", "cam-bench", "--tau-grid", "0,1",
                     "--r-grid", "8,64", "--h-grid", "4,16",
                     "--steps", "16", "--dim", "5", "--out", out]) == 0
    header, rows = read_csv(os.path.join(out, "cam_bench.csv"))
    assert header[:5] == ["kind", "tau", "r", "h", "deviation"]
    cam_rows = [row for row in rows if row[0] == "cam"]
    cache_rows = [row for row in rows if row[0] == "cache"]
    assert len(cam_rows) == 4
    assert len(cache_rows) == 2
    # a cache as long as the stream trims nothing, so it matches h=inf
    full = [row for row in cache_rows if row[3] == "16"]
    assert float(full[0][4]) == 0.0
    for row in cam_rows:
        assert float(row[4]) > 0.0


# ------------------------------------------------------------------ ingest


def write_idx(path, magic, dims, payload):
    with open(path, "wb") as handle:
        handle.write(struct.pack(">I", magic))
        for dim in dims:
            handle.write(struct.pack(">I", dim))
        handle.write(payload)


def test_ingest_roundtrip(tmp_path):
    images = str(tmp_path / "imgs.idx")
    labels = str(tmp_path / "labs.idx")
    write_idx(images, 0x00000803, (4, 2, 3), bytes(range(24)))
    write_idx(labels, 0x00000801, (4,), bytes([0, 1, 1, 0]))
    out = str(tmp_path / "ing")
    assert cli.main(["ingest", "--images", images, "--labels", labels,
                     "--out", out]) == 0
    data = np.load(os.path.join(out, "images.npy"))
    assert data.shape == (4, 6)
    assert data.max() <= 1.0
    assert np.load(os.path.join(out, "labels.npy")).shape == (4,)
    assert os.path.isfile(os.path.join(out, "manifest.json"))


def test_ingest_bad_magic_positional(tmp_path, capsys):
    images = str(tmp_path / "imgs.idx")
    labels = str(tmp_path / "labs.idx")
    write_idx(images, 0xDEADBEEF, (1, 2, 3), bytes(6))
    write_idx(labels, 0x00000801, (1,), bytes([0]))
    rc = cli.main(["ingest", "--images", images, "--labels", labels,
                   "--out", str(tmp_path)])
    assert rc == 1
    err = capsys.readouterr().err
    assert "bad magic at byte 0" in err
    assert "0xdeadbeef" in err


def test_ingest_count_mismatch(tmp_path, capsys):
    images = str(tmp_path / "imgs.idx")
    labels = str(tmp_path / "labs.idx")
    write_idx(images, 0x00000803, (2, 2, 2), bytes(8))
    write_idx(labels, 0x00000801, (3,), bytes([0, 1, 0]))
    rc = cli.main(["ingest", "--images", images, "--labels", labels,
                   "--out", str(tmp_path)])
    assert rc == 1
    assert "2 images but" in capsys.readouterr().err


def test_ingest_missing_file_exit_2(tmp_path, capsys):
    rc = cli.main(["ingest", "--images", str(tmp_path / "none.idx"),
                   "--labels", str(tmp_path / "none2.idx"),
                   "--out", str(tmp_path)])
    assert rc == 2
    assert "none.idx" in capsys.readouterr().err
