import hashlib
import shutil

import numpy as np
import pytest

from geoscore.cli import main, read_config_file, UsageError
from geoscore.training import load_checkpoint

SMALL = """\
# tiny run for tests
side = 32
train_count = 12
validation_count = 4
test_normal_count = 4
test_abnormal_count = 4
filters = 4,8,8,16
latent_dim = 8
batch_size = 4
steps = 6
lambda = 0.5
"""


@pytest.fixture
def config_file(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text(SMALL)
    return p


@pytest.fixture
def data_dir(tmp_path, config_file):
    out = tmp_path / "data"
    assert main(["gen-data", "--config", str(config_file), "--seed", "7", "--out", str(out)]) == 0
    return out


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode() + p.read_bytes())
    return h.hexdigest()


def test_gen_data_writes_manifest_and_is_reproducible(tmp_path, config_file, data_dir, capsys):
    assert (data_dir / "manifest.tsv").is_file()
    assert (data_dir / "run_config.txt").is_file()
    assert "seed = 7" in (data_dir / "run_config.txt").read_text()
    again = tmp_path / "again"
    assert main(["gen-data", "--config", str(config_file), "--seed", "7", "--out", str(again)]) == 0
    assert _digest(data_dir) == _digest(again)
    assert "train 12" in capsys.readouterr().out


def test_gen_data_requires_out():
    assert main(["gen-data", "--seed", "7"]) == 2


def test_unknown_config_key_is_usage_error(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("not_a_key = 3\n")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert not (tmp_path / "x").exists()


def test_invalid_config_value_is_rejected_before_side_effects(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("train_count = 0\n")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert not (tmp_path / "x").exists()


def test_read_config_file_types(config_file):
    values = read_config_file(config_file)
    assert values["filters"] == (4, 8, 8, 16)
    assert values["lam"] == 0.5
    with pytest.raises(UsageError):
        read_config_file(config_file.parent / "missing.cfg")


def test_full_pipeline(tmp_path, config_file, data_dir, capsys):
    cfg = ["--config", str(config_file), "--seed", "7"]
    pre = tmp_path / "pre"
    assert main(["pretrain", *cfg, "--data", str(data_dir), "--out", str(pre)]) == 0
    assert (pre / "model.ckpt").is_file()
    rows = (pre / "train_log.tsv").read_text().splitlines()
    assert len(rows) - 1 == 6

    mt = tmp_path / "mt"
    assert main(["train", *cfg, "--data", str(data_dir), "--init", str(pre / "model.ckpt"), "--out", str(mt)]) == 0
    assert load_checkpoint(mt / "model.ckpt").step == 6

    base = tmp_path / "vae"
    assert main(["train", *cfg, "--data", str(data_dir), "--from-scratch", "--freeze-geo", "--out", str(base)]) == 0

    ev = tmp_path / "eval"
    capsys.readouterr()
    code = main(
        ["eval", *cfg, "--data", str(data_dir), "--out", str(ev),
         "--checkpoint", f"multitask={mt / 'model.ckpt'}", "--checkpoint", f"vae={base / 'model.ckpt'}"]
    )
    assert code == 0
    report = capsys.readouterr().out
    assert report.splitlines()[0].split() == ["method", "AUROC", "AUPR", "DSC"]
    assert report.splitlines()[1].startswith("multitask")
    assert "±" in report
    assert (ev / "report.txt").read_text() == report
    header = (ev / "scores_vae.tsv").read_text().splitlines()[0]
    assert header == "slice_id\tlabel\ts_g\ts_r\ts_g_norm\ts_r_norm\tcombined"
    assert len((ev / "scores_vae.tsv").read_text().splitlines()) == 1 + 8

    # rerun: identical scores and report
    ev2 = tmp_path / "eval2"
    main(["eval", *cfg, "--data", str(data_dir), "--out", str(ev2),
          "--checkpoint", f"multitask={mt / 'model.ckpt'}", "--checkpoint", f"vae={base / 'model.ckpt'}"])
    assert (ev2 / "scores_multitask.tsv").read_bytes() == (ev / "scores_multitask.tsv").read_bytes()

    # lambda endpoints pick one score channel each
    for lam in ("0", "1"):
        out = tmp_path / f"lam{lam}"
        assert main(["eval", *cfg, "--data", str(data_dir), "--out", str(out), "--lambda", lam,
                     "--checkpoint", f"m={mt / 'model.ckpt'}"]) == 0
    rows0 = [r.split("\t") for r in (tmp_path / "lam0" / "scores_m.tsv").read_text().splitlines()[1:]]
    rows1 = [r.split("\t") for r in (tmp_path / "lam1" / "scores_m.tsv").read_text().splitlines()[1:]]
    assert all(r[6] == r[4] for r in rows0)
    assert all(r[6] == r[5] for r in rows1)


def test_pretrain_is_reproducible_and_resumable(tmp_path, config_file, data_dir):
    cfg = ["--config", str(config_file), "--seed", "3"]
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["pretrain", *cfg, "--data", str(data_dir), "--out", str(a)]) == 0
    assert main(["pretrain", *cfg, "--data", str(data_dir), "--out", str(b)]) == 0
    assert (a / "train_log.tsv").read_bytes() == (b / "train_log.tsv").read_bytes()
    assert (a / "model.ckpt").read_bytes() == (b / "model.ckpt").read_bytes()

    part = tmp_path / "part"
    assert main(["pretrain", *cfg, "--steps", "2", "--data", str(data_dir), "--out", str(part)]) == 0
    assert main(["pretrain", *cfg, "--data", str(data_dir), "--out", str(part),
                 "--resume", str(part / "model.ckpt")]) == 0
    assert load_checkpoint(part / "model.ckpt").step == 6
    assert (part / "train_log.tsv").read_bytes() == (a / "train_log.tsv").read_bytes()
    full, resumed = load_checkpoint(a / "model.ckpt").model, load_checkpoint(part / "model.ckpt").model
    for x, y in zip(full.parameters(), resumed.parameters()):
        assert np.array_equal(x.detach().numpy(), y.detach().numpy())


def test_pretrain_rejects_abnormal_training_rows(tmp_path, config_file, data_dir, capsys):
    bad = tmp_path / "bad_data"
    shutil.copytree(data_dir, bad)
    manifest = bad / "manifest.tsv"
    lines = manifest.read_text().splitlines()
    lines[1] = lines[1].replace("\tnormal\t-\t", "\tabnormal\tmasks/x.pgm\t")
    manifest.write_text("\n".join(lines) + "\n")
    code = main(["pretrain", "--config", str(config_file), "--data", str(bad), "--out", str(tmp_path / "o")])
    assert code == 1
    assert "NormalsOnlyViolation" in capsys.readouterr().err


def test_train_flag_conflicts(tmp_path, config_file, data_dir):
    args = ["train", "--config", str(config_file), "--data", str(data_dir), "--out", str(tmp_path / "o")]
    assert main([*args, "--init", "x.ckpt", "--from-scratch"]) == 2
    assert main(args) == 2


def test_train_rejects_zero_epsilon(tmp_path, config_file, data_dir):
    args = ["train", "--config", str(config_file), "--data", str(data_dir), "--out", str(tmp_path / "o")]
    assert main([*args, "--from-scratch", "--epsilon", "0"]) == 2


def test_eval_missing_checkpoint(tmp_path, config_file, data_dir):
    code = main(["eval", "--config", str(config_file), "--data", str(data_dir), "--out", str(tmp_path / "o"),
                 "--checkpoint", str(tmp_path / "nope.ckpt")])
    assert code == 1


def test_inputs_are_not_modified(tmp_path, config_file, data_dir):
    cfg = ["--config", str(config_file)]
    before = _digest(data_dir)
    pre = tmp_path / "pre"
    main(["pretrain", *cfg, "--data", str(data_dir), "--out", str(pre)])
    ckpt_bytes = (pre / "model.ckpt").read_bytes()
    main(["train", *cfg, "--data", str(data_dir), "--init", str(pre / "model.ckpt"), "--out", str(tmp_path / "mt")])
    assert _digest(data_dir) == before
    assert (pre / "model.ckpt").read_bytes() == ckpt_bytes
