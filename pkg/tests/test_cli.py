import numpy as np
import pytest

from crackmamba import cli, data

SUBCOMMANDS = ["gen-data", "train", "eval", "infer", "scan-viz", "ablate"]
TINY_OVERRIDES = ["--stage_dims", "4,4,4,4", "--stage_depths", "1,1,1,1", "--input_size", "32",
                  "--state_dim", "2", "--epochs", "2", "--batch_size", "4", "--lr0", "1e-3"]


@pytest.mark.parametrize("sub", SUBCOMMANDS)
def test_help_exits_zero(sub, capsys):
    with pytest.raises(SystemExit) as info:
        cli.main([sub, "--help"])
    assert info.value.code == 0
    assert "usage:" in capsys.readouterr().out


def test_usage_errors_exit_1(tmp_path, capsys):
    assert cli.main([]) == 1
    assert cli.main(["scan-viz", "--kind", "zz", "--height", "3", "--width", "3", "--out", "x"]) == 1
    assert cli.main(["train", "--data", str(tmp_path), "--momentum", "0.9"]) == 1
    assert "momentum" in capsys.readouterr().err
    assert cli.main(["train", "--lr0"]) == 1


def test_missing_files_exit_2(tmp_path):
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--data", str(tmp_path)]) == 2
    (tmp_path / "bad.ckpt").write_bytes(b"junk")
    assert cli.main(["infer", "--checkpoint", str(tmp_path / "bad.ckpt"),
                     "--image", "x.ppm", "--out", "y.pgm"]) == 2


def test_config_parsing(tmp_path):
    (tmp_path / "run.cfg").write_text("# comment\nlr0 = 3e-4\nepochs=7  # trailing\n\ndata=d\n")
    cfg = cli.load_run_config(tmp_path / "run.cfg", ["--epochs=9"])
    assert (cfg.train.lr0, cfg.train.epochs, cfg.paths["data"]) == (3e-4, 9, "d")
    assert "epochs=9" in cfg.lines()
    with pytest.raises(ValueError, match="line 2"):
        cli.parse_config_text("a=1\nnot a pair\n")


def test_scan_viz_s1(tmp_path):
    out = tmp_path / "s1.pgm"
    assert cli.main(["scan-viz", "--kind", "s1", "--height", "3", "--width", "3", "--out", str(out)]) == 0
    px = data.read_pnm(out).ravel()
    assert list(np.argsort(np.argsort(px))) == [0, 1, 5, 2, 4, 6, 3, 7, 8]
    assert px.min() == 0 and px.max() == 255


def test_gen_data_reproducible(tmp_path):
    for d in ("a", "b"):
        assert cli.main(["gen-data", "--out", str(tmp_path / d), "--count", "40", "--size", "16", "--seed", "2"]) == 0
    a, b = (tmp_path / "a" / "manifest.tsv").read_bytes(), (tmp_path / "b" / "manifest.tsv").read_bytes()
    assert a == b and a.count(b"noncrack") == 10


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    assert cli.main(["gen-data", "--out", str(root / "d"), "--count", "12", "--size", "32", "--seed", "1"]) == 0
    for k in range(2):
        args = ["train", "--data", str(root / "d"), "--checkpoint", str(root / f"m{k}.ckpt"),
                "--log", str(root / f"log{k}.txt")] + TINY_OVERRIDES
        assert cli.main(args) == 0
    return root


def test_train_outputs_reproducible(trained):
    def body(k):   # the two runs differ only in their own output paths
        return [line for line in (trained / f"log{k}.txt").read_text().splitlines()
                if not line.startswith(("# checkpoint=", "# log="))]
    assert body(0) == body(1)
    assert (trained / "m0.ckpt").read_bytes() == (trained / "m1.ckpt").read_bytes()
    log = (trained / "log0.txt").read_text().splitlines()
    assert "# lr0=0.001" in log and "# epochs=2" in log
    assert len([line for line in log if not line.startswith("#")]) == 2


def test_eval_table_and_threads(trained, capsys):
    base = ["eval", "--checkpoint", str(trained / "m0.ckpt"), "--data", str(trained / "d"), "--split", "all"]
    capsys.readouterr()
    assert cli.main(base) == 0
    one = capsys.readouterr().out
    assert cli.main(base + ["--threads", "3"]) == 0
    assert capsys.readouterr().out == one
    rows = [line.split("\t") for line in one.splitlines()]
    assert rows[0] == ["metric", "value"]
    assert [r[0] for r in rows[1:]] == ["images", "iou_background", "iou_crack", "miou", "f1", "sensitivity"]
    assert rows[1][1] == "12" and all(0 <= float(r[1]) <= 1 for r in rows[2:])


def test_infer_writes_binary_mask(trained):
    img = trained / "d" / "images" / "00003.ppm"
    out = trained / "pred.pgm"
    assert cli.main(["infer", "--checkpoint", str(trained / "m0.ckpt"), "--image", str(img), "--out", str(out)]) == 0
    px = data.read_pnm(out)
    assert px.shape == (32, 32) and set(np.unique(px)) <= {0, 255}


def test_ablate_table_goes_to_current_stdout(trained, capsys):
    capsys.readouterr()
    assert cli.main(["ablate", "--data", str(trained / "d"), "--epochs", "1"] + TINY_OVERRIDES[:-6]) == 0
    out = capsys.readouterr().out
    table = [line for line in out.splitlines() if not line.startswith("#")]
    assert table[0] == "variant\tparams\tval_miou\tval_f1" and len(table) == 6
