import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from edunet.cli import main
from edunet.data import load_dataset
from edunet.metrics import CSV_COLUMNS, parse_metrics_csv


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "data"), "--n", "4", "--size", "32", "--seed", "1"]) == 0
    code = main(
        ["train", "--data", str(root / "data"), "--out", str(root / "run"), "--epochs", "1", "--quiet",
         "--set", "model.input_size=32,32"]
    )
    assert code == 0
    return root


def test_synth_writes_loadable_pairs(workspace):
    samples = load_dataset(workspace / "data", 3)
    assert len(samples) == 4 and samples[0].image.shape == (32, 32)
    assert (workspace / "data" / "synth.txt").exists()


def test_synth_is_byte_reproducible(tmp_path):
    for name in ("a", "b"):
        main(["synth", "--out", str(tmp_path / name), "--n", "2", "--size", "32"])
    for f in ("images/synth_0000.png", "masks/synth_0001.png"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_synth_zero_creates_dirs(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "e"), "--n", "0"]) == 0
    assert (tmp_path / "e" / "images").is_dir() and (tmp_path / "e" / "masks").is_dir()


def test_train_artifacts(workspace):
    run = workspace / "run"
    for name in ("config.txt", "best.edun", "last.edun", "train_log.csv"):
        assert (run / name).exists()
    assert (run / "train_log.csv").read_text().startswith("epoch,train_loss,val_loss,lr\n")
    assert "model.use_mcega = true" in (run / "config.txt").read_text()


def test_train_rerun_reproduces_log(workspace, tmp_path):
    main(["train", "--data", str(workspace / "data"), "--out", str(tmp_path), "--epochs", "1", "--quiet",
          "--set", "model.input_size=32,32"])
    assert (tmp_path / "train_log.csv").read_bytes() == (workspace / "run" / "train_log.csv").read_bytes()
    assert (tmp_path / "last.edun").read_bytes() == (workspace / "run" / "last.edun").read_bytes()


def test_eval_csv_to_stdout(workspace, capsys):
    assert main(["eval", "--ckpt", str(workspace / "run" / "best.edun"), "--data", str(workspace / "data")]) == 0
    out = capsys.readouterr()
    assert out.out.splitlines()[0].split(",") == CSV_COLUMNS
    assert "k=1" in out.err


def test_eval_folds_to_file(workspace, tmp_path):
    dest = tmp_path / "m.csv"
    code = main(["eval", "--ckpt", str(workspace / "run" / "best.edun"), "--data", str(workspace / "data"),
                 "--folds", "2", "--out", str(dest), "--dataset", "synth", "--output", "local"])
    assert code == 0
    rows = parse_metrics_csv(dest.read_text())
    assert {r["fold"] for r in rows} == {"0", "1", "mean±std"}
    assert {r["dataset"] for r in rows} == {"synth"}
    assert (tmp_path / "m.csv.config.txt").exists()


def test_infer_mask_and_heatmap(workspace, tmp_path):
    image = workspace / "data" / "images" / "synth_0000.png"
    out = tmp_path / "pred.png"
    args = ["infer", "--ckpt", str(workspace / "run" / "best.edun"), "--image", str(image), "--out", str(out),
            "--heatmap", "local.dec2"]
    assert main(args) == 0
    first = out.read_bytes()
    with Image.open(out) as im:
        assert im.mode == "P" and im.size == (32, 32)
        assert np.asarray(im).max() < 3
    with Image.open(tmp_path / "pred_heatmap.png") as im:
        assert im.mode == "L"
    assert main(args) == 0
    assert out.read_bytes() == first


def test_infer_resizes_arbitrary_image(workspace, tmp_path):
    img = tmp_path / "odd.png"
    Image.fromarray(np.random.default_rng(0).integers(0, 255, (40, 50), dtype=np.uint8), mode="L").save(img)
    assert main(["infer", "--ckpt", str(workspace / "run" / "best.edun"), "--image", str(img), "--out", str(tmp_path / "o.png")]) == 0
    with Image.open(tmp_path / "o.png") as im:
        assert im.size == (50, 40)


def test_infer_unknown_layer_is_usage_error(workspace, tmp_path):
    image = workspace / "data" / "images" / "synth_0000.png"
    code = main(["infer", "--ckpt", str(workspace / "run" / "best.edun"), "--image", str(image),
                 "--out", str(tmp_path / "p.png"), "--heatmap", "bogus"])
    assert code == 1


def test_missing_checkpoint_exit_code(tmp_path, capsys):
    assert main(["eval", "--ckpt", str(tmp_path / "none.edun"), "--data", str(tmp_path)]) == 2
    assert "cannot read checkpoint" in capsys.readouterr().err


def test_missing_data_exit_code(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nothing"), "--out", str(tmp_path / "o")]) == 2


@pytest.mark.parametrize(
    "extra", [["--global-only", "--local-only"], ["--local-only", "--no-mcega"], ["--set", "train.bogus=1"]]
)
def test_conflicting_or_bad_flags(workspace, tmp_path, extra):
    code = main(["train", "--data", str(workspace / "data"), "--out", str(tmp_path), "--epochs", "0"] + extra)
    assert code == 1


def test_argparse_errors_exit_one():
    with pytest.raises(SystemExit) as exc:
        main(["train"])
    assert exc.value.code == 1


def test_gradcheck_subset(capsys):
    assert main(["gradcheck", "--ops", "relu,conv2d,softmax"]) == 0
    out = capsys.readouterr().out
    assert "3/3 passed" in out


def test_gradcheck_fault_injection_fails():
    assert main(["gradcheck", "--ops", "linear", "--inject-fault"]) == 3


def test_gradcheck_unknown_op():
    assert main(["gradcheck", "--ops", "nope"]) == 1


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "edunet", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "gradcheck" in proc.stdout
