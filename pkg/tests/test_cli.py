import pytest

from fmri4d.cli import build_parser, main

SMALL_MODEL = ["--model.init_filters", "2", "--model.growth_rate", "2", "--model.gru_hidden", "2",
               "--train.crop_length", "3", "--stride", "3"]


def run(argv, capsys):
    try:
        code = main([str(a) for a in argv])
    except SystemExit as e:  # argparse usage errors
        code = e.code
    out = capsys.readouterr()
    return code, out.out, out.err


def _fields(line):
    return dict(kv.split("=", 1) for kv in line.split())


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "d"
    code = main(["synth", "--out", str(out), "--data.shape", "6,6,6,12", "--subjects-per-class", "3",
                 "--data.val_per_class", "1", "--data.test_per_class", "2", "--amplitude", "3", "--seed", "7"])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = main(["train", "--manifest", str(dataset / "manifest.tsv"), "--variant", "convgru", "--epochs", "1",
                 "--out", str(out)] + SMALL_MODEL)
    assert code == 0
    return out


def test_help_lists_defaults():
    text = build_parser()._subparsers._group_actions[0].choices["train"].format_help()
    assert "(default: 0.0001)" in text and "--train.epochs" in text and "--resume" in text


def test_no_command_is_usage_error(capsys):
    assert run([], capsys)[0] == 1
    assert run(["train", "--no-such-flag"], capsys)[0] == 1


def test_synth_is_reproducible(tmp_path, capsys):
    outs = []
    for d in ("a", "b"):
        code, out, _ = run(["synth", "--out", tmp_path / d, "--data.shape", "4,4,4,8", "--subjects-per-class", "2",
                            "--seed", "7"], capsys)
        assert code == 0
        outs.append(out.replace(str(tmp_path / d), "X"))
    assert outs[0] == outs[1]
    for name in ("manifest.tsv", "sub-0000.t4df", "sub-0003.t4df"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_synth_rejects_empty_class(tmp_path, capsys):
    code, _, err = run(["synth", "--out", tmp_path / "e", "--subjects-per-class", "0"], capsys)
    assert code != 0 and "error" in err


def test_train_one_epoch(trained):
    log = (trained / "train.log").read_text().splitlines()
    assert [l.split()[:2] for l in log] == [["epoch=1", "split=train"], ["epoch=1", "split=val"]]
    metrics = _fields((trained / "metrics.txt").read_text().splitlines()[-1])
    assert 0.0 <= float(metrics["f1"]) <= 1.0 and metrics["subjects"] == "4"
    assert {"best.ckpt", "last.ckpt", "config.txt"} <= {p.name for p in trained.iterdir()}


def test_train_unknown_variant(dataset, capsys):
    code, _, err = run(["train", "--manifest", dataset / "manifest.tsv", "--variant", "cnn5d"], capsys)
    assert code == 1
    for v in ("cnn3d-tc", "cnn3d-ms", "convgru-cnn3d", "cnn4d"):
        assert v in err


def test_train_missing_manifest_is_data_error(tmp_path, capsys):
    assert run(["train", "--manifest", tmp_path / "none.tsv"], capsys)[0] == 2


def test_config_file_and_flag_precedence(dataset, tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("train.epochs = 2\ntrain.lr = 0.5\nmodel.variant = cnn3d-ms\n")
    out = tmp_path / "r"
    code, _, _ = run(["train", "--config", cfg, "--manifest", dataset / "manifest.tsv", "--lr", "0.001",
                      "--out", out] + SMALL_MODEL, capsys)
    assert code == 0
    saved = dict(l.split(" = ") for l in (out / "config.txt").read_text().splitlines())
    assert saved["train.epochs"] == "2" and saved["train.lr"] == "0.001" and saved["model.variant"] == "cnn3d-ms"
    cfg.write_text("train.depth = 3\n")
    code, _, err = run(["train", "--config", cfg, "--manifest", dataset / "manifest.tsv"], capsys)
    assert code == 1 and "train.depth" in err


def test_resume_appends(dataset, trained, tmp_path, capsys):
    out = tmp_path / "r2"
    code, text, _ = run(["train", "--manifest", dataset / "manifest.tsv", "--variant", "convgru", "--epochs", "2",
                         "--resume", trained / "last.ckpt", "--out", out] + SMALL_MODEL, capsys)
    assert code == 0 and "resumed" in text and "epoch=2 split=val" in text


def test_eval_stride_changes_crop_count(dataset, trained, capsys):
    counts = {}
    for stride in (1, 8):
        code, out, _ = run(["eval", "--checkpoint", trained / "best.ckpt", "--manifest", dataset / "manifest.tsv",
                            "--stride", stride], capsys)
        assert code == 0
        counts[stride] = _fields(out.splitlines()[-1])["crops_per_subject"]
    # T = 12, window 3: floor((12 - 3) / s) + 1
    assert counts == {1: "10", 8: "2"}


def test_eval_variant_mismatch(dataset, trained, capsys):
    code, _, err = run(["eval", "--checkpoint", trained / "best.ckpt", "--manifest", dataset / "manifest.tsv",
                        "--variant", "cnn4d"], capsys)
    assert code == 1 and "convGRU-CNN3D" in err


def test_eval_bad_checkpoint(dataset, tmp_path, capsys):
    bad = tmp_path / "x.ckpt"
    bad.write_bytes(b"garbage!")
    code, _, err = run(["eval", "--checkpoint", bad, "--manifest", dataset / "manifest.tsv"], capsys)
    assert code == 1 and "not a checkpoint" in err


def test_gradcheck_passes(capsys):
    code, out, _ = run(["gradcheck", "--variant", "cnn3d-tc", "--max-entries", "2"], capsys)
    assert code == 0
    assert _fields(out.splitlines()[-1])["status"] == "pass"


def test_gradcheck_injected_fault_exits_3(capsys):
    code, out, err = run(["gradcheck", "--variant", "cnn3d-ms", "--max-entries", "2", "--inject-fault", "conv"], capsys)
    assert code == 3 and "status=FAIL" in out and "numerical failure" in err


def test_gradcheck_bad_variant(capsys):
    assert run(["gradcheck", "--variant", "cnn5d"], capsys)[0] == 1


def test_bench_empty_sweep(tmp_path, capsys):
    sweep = tmp_path / "sweep.txt"
    sweep.write_text("# nothing here\n\n")
    code, out, _ = run(["bench", "--sweep", sweep], capsys)
    assert code == 0 and "rows=0" in out


def test_bench_pointwise(capsys):
    code, out, _ = run(["bench", "--case", "pointwise", "--repeats", "1"], capsys)
    assert code == 0
    rows = [_fields(l) for l in out.splitlines() if l.startswith("case=")]
    assert rows and all(r["equal"] == "1" and r["case"] == "pointwise" for r in rows)


def test_bench_bad_case(capsys):
    code, _, err = run(["bench", "--case", "rank=4,depth=2"], capsys)
    assert code == 1 and "depth" in err


def test_inspect(dataset, trained, capsys):
    code, out, _ = run(["inspect", dataset / "sub-0000.t4df", dataset / "manifest.tsv", trained / "best.ckpt"],
                       capsys)
    assert code == 0
    lines = out.splitlines()
    t4df = _fields(lines[0])
    assert t4df["format"] == "T4DF" and t4df["shape"] == "6x6x6x12" and t4df["dtype"] == "float32"
    assert "format=manifest records=12" in out and "split=test controls=2 asd=2" in out
    assert "variant=convGRU-CNN3D" in out and "param/gru.W_z.weight float32 2x1x3x3x3" in out


def test_inspect_unreadable(tmp_path, capsys):
    junk = tmp_path / "junk.bin"
    junk.write_bytes(b"\xff\xfe\x00binary")
    assert run(["inspect", junk], capsys)[0] == 2
