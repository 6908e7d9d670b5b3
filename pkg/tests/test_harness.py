import numpy as np
import pytest

from capsseg.data import gen_shapes_2d, save_dataset
from capsseg.harness import commands as C
from capsseg.harness.checkpoint import (Checkpoint, ConfigMismatch, ManifestMismatch, decode_checkpoint,
                                        encode_checkpoint, load_checkpoint, save_checkpoint)
from capsseg.harness.cli import main
from capsseg.harness.config import ConfigError, TrainConfig, config_hash, load_config, parse_config_text
from capsseg.data.io import FormatError
from capsseg.training import CSV_HEADER, batch_indices, kfold_split, split_dataset


@pytest.fixture(scope="module")
def shapes_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("shapes")
    save_dataset(root, gen_shapes_2d(0, 10, 16))
    return root


def cfg_for(data, out, **kw):
    base = dict(dataset=str(data), out=str(out), max_iterations=6, eval_interval=2, lr=1e-3)
    base.update(kw)
    return TrainConfig(**base)


# ------------------------------------------------------------------ config


def test_config_defaults_and_overrides(tmp_path):
    empty = tmp_path / "empty.cfg"
    empty.write_text("")
    assert load_config(str(empty)) == TrainConfig()
    f = tmp_path / "a.cfg"
    f.write_text("lr = 0.01  # comment\nseed = 4\n")
    cfg = load_config(str(f), {"lr": "0.5"})
    assert cfg.lr == 0.5 and cfg.seed == 4
    assert load_config(None, {"deterministic": "false"}).deterministic is False


def test_config_errors_name_the_problem(tmp_path):
    f = tmp_path / "bad.cfg"
    f.write_text("foo = 1\n")
    with pytest.raises(ConfigError, match="foo"):
        load_config(str(f))
    with pytest.raises(ConfigError, match=":2:"):
        parse_config_text("lr = 1\nseed = x\n", "c")
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(arch="unet")


def test_config_hash_ignores_volatile_fields():
    a = TrainConfig()
    assert config_hash(a) == config_hash(a.with_overrides(max_iterations=9, out="elsewhere"))
    assert config_hash(a) != config_hash(a.with_overrides(lr=0.5))
    assert len(config_hash(a)) == 8


# ------------------------------------------------------------------ checkpoint


def test_checkpoint_round_trip_and_errors(tmp_path):
    rng = np.random.default_rng(0)
    ck = Checkpoint({"b.w": rng.normal(size=(4, 2)), "a.w": rng.normal(size=3)}, {"step": np.array(3.0)}, b"12345678")
    buf = encode_checkpoint(ck)
    back = decode_checkpoint(buf)
    assert list(back.params) == ["b.w", "a.w"]
    assert encode_checkpoint(back) == buf
    save_checkpoint(tmp_path / "c.cpsc", ck)
    assert (tmp_path / "c.cpsc").read_bytes() == buf
    with pytest.raises(ConfigMismatch):
        load_checkpoint(tmp_path / "c.cpsc", expect_hash=b"87654321")
    for cut in (2, 6, 20, len(buf) - 3):
        with pytest.raises(FormatError):
            decode_checkpoint(buf[:cut])
    with pytest.raises(FormatError):
        decode_checkpoint(b"NOPE" + buf[4:])


def test_tampered_dims_are_a_manifest_mismatch(tmp_path, shapes_dir):
    run = C.cmd_train(cfg_for(shapes_dir, tmp_path / "r", max_iterations=0))
    buf = bytearray(run.checkpoint.read_bytes())
    ck = decode_checkpoint(bytes(buf))
    name, arr = next((k, v) for k, v in ck.params.items() if v.ndim >= 2 and v.shape[0] != v.shape[1])
    header = len(name.encode()).to_bytes(2, "little") + name.encode()
    at = bytes(buf).index(header) + len(header) + 2  # past dtype and rank
    buf[at:at + 8] = bytes(buf[at + 4:at + 8]) + bytes(buf[at:at + 4])  # swap the first two extents
    run.checkpoint.write_bytes(bytes(buf))
    with pytest.raises(ManifestMismatch):
        C.cmd_eval(str(run.checkpoint), str(shapes_dir), load_config(str(tmp_path / "r" / "config.txt")))


# ------------------------------------------------------------------ training


def test_batch_indices_cover_epochs():
    seen = np.concatenate([batch_indices(10, 3, 7, t) for t in range(10)])
    assert sorted(seen[:10].tolist()) == list(range(10))
    assert np.array_equal(batch_indices(10, 3, 7, 4), batch_indices(10, 3, 7, 4))


def test_split_is_seeded():
    ds = gen_shapes_2d(0, 10, 16)
    a, b = split_dataset(ds, 3)
    assert len(a) == 8 and len(b) == 2
    assert a.names == split_dataset(ds, 3)[0].names


def test_kfold_partitions_the_dataset():
    ds = gen_shapes_2d(0, 10, 16)
    vals = [kfold_split(ds, 3, 4, f) for f in range(4)]
    held = sorted(n for _, v in vals for n in v.names)
    assert held == sorted(ds.names)
    for tr, v in vals:
        assert not set(tr.names) & set(v.names) and len(tr) + len(v) == 10
    with pytest.raises(ValueError):
        kfold_split(ds, 3, 4, 4)
    with pytest.raises(ConfigError):
        TrainConfig(folds=4, fold=5)


def test_zero_iterations_keeps_initialization(tmp_path, shapes_dir):
    cfg = cfg_for(shapes_dir, tmp_path, max_iterations=0)
    run = C.cmd_train(cfg)
    assert run.metrics_csv.read_text() == CSV_HEADER + "\n"
    ck = load_checkpoint(run.checkpoint)
    from capsseg.architectures import init_params

    init = init_params(run.spec, cfg.seed).arrays()
    assert all(np.array_equal(ck.params[k], v) for k, v in init.items())


def test_training_is_deterministic_and_resumable(tmp_path, shapes_dir):
    a = C.cmd_train(cfg_for(shapes_dir, tmp_path / "a"))
    b = C.cmd_train(cfg_for(shapes_dir, tmp_path / "b"))
    assert a.checkpoint.read_bytes() == b.checkpoint.read_bytes()
    assert a.metrics_csv.read_bytes() == b.metrics_csv.read_bytes()
    lines = a.metrics_csv.read_text().splitlines()
    assert lines[0] == CSV_HEADER and len(lines) == 1 + 2 * 3
    # stop mid-interval, then continue
    C.cmd_train(cfg_for(shapes_dir, tmp_path / "c", max_iterations=3))
    c = C.cmd_train(cfg_for(shapes_dir, tmp_path / "c"), resume=str(tmp_path / "c" / C.CHECKPOINT))
    assert c.checkpoint.read_bytes() == a.checkpoint.read_bytes()
    assert c.metrics_csv.read_bytes() == a.metrics_csv.read_bytes()


def test_resume_with_other_config_is_refused(tmp_path, shapes_dir):
    run = C.cmd_train(cfg_for(shapes_dir, tmp_path / "a", max_iterations=2))
    with pytest.raises(ConfigMismatch):
        C.cmd_train(cfg_for(shapes_dir, tmp_path / "b", lr=0.5), resume=str(run.checkpoint))


def test_eval_ground_truth_and_background(tmp_path, shapes_dir):
    from capsseg.metrics import seg_metrics
    from capsseg.data import load_dataset

    ds = load_dataset(shapes_dir)
    assert seg_metrics(ds.masks(), ds.masks(), 2).dice == [1.0, 1.0]
    assert seg_metrics(np.zeros_like(ds.masks()), ds.masks(), 2).dice[1] == 0.0
    run = C.cmd_train(cfg_for(shapes_dir, tmp_path, max_iterations=0))
    cfg = load_config(str(tmp_path / "config.txt"))
    m = C.cmd_eval(str(run.checkpoint), str(shapes_dir), cfg)
    rows = (tmp_path / "eval.csv").read_text().splitlines()
    assert rows[0] == C.EVAL_HEADER and rows[-1].startswith("mean,") and len(rows) == 4
    assert all(0 <= d <= 1 for d in m.dice)


def test_robustness_refuses_2d(tmp_path, shapes_dir):
    run = C.cmd_train(cfg_for(shapes_dir, tmp_path, max_iterations=0))
    with pytest.raises(C.UnsupportedModel):
        C.cmd_robustness(str(run.checkpoint), str(shapes_dir), load_config(str(tmp_path / "config.txt")), [0], ["z"])


def test_sensitivity_schema(tmp_path, shapes_dir):
    run = C.cmd_train(cfg_for(shapes_dir, tmp_path, max_iterations=0))
    rows = C.cmd_sensitivity(str(run.checkpoint), str(shapes_dir), load_config(str(tmp_path / "config.txt")))
    assert rows[0] == "sample,p_label_change,mean_abs_change"
    assert len(rows) == 12 and rows[-1].startswith("mean,")
    for r in rows[1:]:
        p, m = map(float, r.split(",")[1:])
        assert 0 <= p <= 1 and m >= 0


def test_pretrain_command(tmp_path, shapes_dir):
    cfg = cfg_for(shapes_dir, tmp_path / "p", ssl_steps=4, ssl_log_interval=2, ssl_lr=1e-2)
    res = C.cmd_pretrain(cfg, "identity")
    assert res["csv"].read_text().splitlines() == ["iter,split,loss_pretext", "2,pretrain,0", "4,pretrain,0"]
    res = C.cmd_pretrain(cfg, "all")
    again = C.cmd_pretrain(cfg.with_overrides(out=str(tmp_path / "q")), "all")
    assert res["checkpoint"].read_bytes() == again["checkpoint"].read_bytes()
    fine = C.cmd_train(cfg_for(shapes_dir, tmp_path / "f", max_iterations=2, pretrained=str(res["checkpoint"])))
    assert fine.result.state.iteration == 2
    with pytest.raises(ValueError):
        C.parse_transforms("mirror", 1)


# ------------------------------------------------------------------ command line


def test_cli_round_trip(tmp_path, capsys):
    data = tmp_path / "d"
    assert main(["gen-data", "--out", str(data), "--count", "6", "--size", "16", "--seed", "1"]) == 0
    out = tmp_path / "run"
    assert main(["train", "--dataset", str(data), "--out", str(out), "--max-iterations", "2", "--eval-interval",
                 "1"]) == 0
    assert main(["eval", "--checkpoint", str(out / C.CHECKPOINT), "--out", str(out)]) == 0
    assert "class,dice,precision,recall" in capsys.readouterr().out
    assert main(["robustness", "--checkpoint", str(out / C.CHECKPOINT)]) == 2
    assert main(["train", "--dataset", str(data), "--out", str(out), "--lr", "abc"]) == 2
    assert "lr" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["train", "--bogus", "1"])
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.cpsc")]) == 2
