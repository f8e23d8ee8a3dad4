import numpy as np
import pytest

from dptn.cli import main
from dptn.pnm import read_pnm

TINY_CFG = """\
res = 16x16
width = 2
disc_width = 2
n_res = 1
ptm_blocks = 1
batch_size = 2
holdout = 2
eval_every = 2
steps = 2
dtype = float64
"""


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.cfg").write_text(TINY_CFG)
    assert main(["train", "--config", str(root / "tiny.cfg"), "--out", str(root / "run")]) == 0
    return root


def test_train_writes_checkpoint_and_curves(trained):
    run = trained / "run"
    assert (run / "model.ckpt").exists() and (run / "curves.tsv").exists()


def test_eval_and_dump(trained, tmp_path):
    assert main(["eval", "--checkpoint", str(trained / "run" / "model.ckpt"), "--n-test", "3",
                 "--dump", "2", "--out", str(tmp_path)]) == 0
    rows = [l for l in (tmp_path / "metrics.tsv").read_text().splitlines() if not l.startswith("#")]
    assert rows[0].split("\t") == ["n_samples", "ssim", "psnr", "psnr_cap", "params"]
    assert rows[1].split("\t")[0] == "3"
    samples = sorted((tmp_path / "images").iterdir())
    assert len(samples) == 2
    files = sorted(p.name for p in samples[0].iterdir())
    # 4 images plus blocks x heads attention maps (1 x 2 here), centre query of the 4x4 grid
    assert files == ["ttb0_head0_q2_2.pgm", "ttb0_head1_q2_2.pgm",
                     "x_s.ppm", "x_s_rec.ppm", "x_t.ppm", "x_t_gen.ppm"]
    assert read_pnm(samples[0] / "x_t_gen.ppm").shape == (3, 16, 16)


def test_attn_dump_is_reproducible(trained, tmp_path):
    args = ["attn-dump", "--checkpoint", str(trained / "run" / "model.ckpt"), "--seeds", "5,6",
            "--query", "1,3"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    a = sorted((tmp_path / "a").rglob("*.pgm"))
    b = sorted((tmp_path / "b").rglob("*.pgm"))
    assert len(a) == 4 and [p.name for p in a] == [p.name for p in b]
    assert all(x.read_bytes() == y.read_bytes() for x, y in zip(a, b))
    img = read_pnm(a[0])
    assert img.shape == (4, 4) and img.max() == 1.0


def test_gen_data(tmp_path):
    assert main(["gen-data", "--n", "3", "--res", "32x24", "--seed", "4", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "manifest.tsv").read_text().splitlines()
    assert len(lines) == 3 and lines[0].endswith("\t32\t24")
    sample = tmp_path / f"sample_{lines[0].split()[0]}"
    assert read_pnm(sample / "x_s.ppm").shape == (3, 32, 24)
    assert len((sample / "keypoints.tsv").read_text().splitlines()) == 1 + 2 * 18


def test_gradcheck_subset(tmp_path):
    assert main(["gradcheck", "--ops", "softmax,conv2d", "--out", str(tmp_path)]) == 0
    table = (tmp_path / "gradcheck.tsv").read_text().splitlines()
    assert table[0] == "op\tmax_rel_error\tpass" and len(table) == 3


@pytest.mark.parametrize("argv", [
    [],
    ["fly"],
    ["train", "--out", "x", "--bogus"],
    ["train", "--out", "x", "--res", "32by32"],
    ["ablate", "--out", "x", "--seeds", "1,a"],
    ["gradcheck", "--ops", "not_an_op"],
    ["ablate", "--out", "x", "--variants", "full,wo_magic"],
])
def test_usage_errors_exit_1(argv, capsys):
    assert main(argv) == 1
    assert capsys.readouterr().err


def test_bad_config_value_is_usage_error(tmp_path):
    (tmp_path / "c.cfg").write_text("lr = -3\n")
    assert main(["train", "--config", str(tmp_path / "c.cfg"), "--out", str(tmp_path)]) == 1


def test_runtime_errors_exit_2(tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.ckpt"), "--out", str(tmp_path)]) == 2
    (tmp_path / "junk.ckpt").write_bytes(b"junk")
    assert main(["attn-dump", "--checkpoint", str(tmp_path / "junk.ckpt"), "--out", str(tmp_path)]) == 2
