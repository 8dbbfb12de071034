import numpy as np
import pytest

from ocusynth.cli import run_cli
from ocusynth.dataset import read_manifest
from ocusynth.imaging import load_png, save_png
from ocusynth.procedural import annotate_by_intensity


TINY_TOML = """
out_dir = "{out}"
seed = 0

[synthesis]
latent_dim = 8
output_resolution = 16
channel_schedule = {{ 4 = 16, 8 = 16, 16 = 8 }}

[train]
batch_size = 8
total_kimgs = 0.08
checkpoint_every_kimg = 1000.0
ema_halflife_kimg = 0.02
seed = 0

[smg]
members = 2
max_epochs = 2
seed = 0

[segmenter]
batch_size = 4
max_epochs = 2
base_channels = 8
seed = 0

[data]
source = "procedural"
n_train = 24
resolution = 16
seed = 0
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def config_path(workdir):
    path = workdir / "run.toml"
    path.write_text(TINY_TOML.format(out=workdir / "run"))
    return path


@pytest.fixture(scope="module")
def gan_checkpoint(workdir, config_path):
    rc = run_cli(["train-gan", "--config", str(config_path)])
    assert rc == 0
    ckpts = sorted((workdir / "run" / "gan").glob("ckpt_*.pt"))
    assert ckpts
    return ckpts[-1]


class TestUsageContract:
    def test_unknown_subcommand_exits_2(self, capsys):
        assert run_cli(["frobnicate"]) == 2

    def test_unknown_flag_exits_2(self):
        assert run_cli(["render-procedural", "--out", "x", "--bogus", "1"]) == 2

    def test_missing_config_file_exits_2_with_path(self, capsys, tmp_path):
        rc = run_cli(["train-gan", "--config", str(tmp_path / "nope.toml")])
        assert rc == 2
        assert "nope.toml" in capsys.readouterr().err

    def test_unknown_config_key_rejected(self, capsys, tmp_path):
        bad = tmp_path / "bad.toml"
        bad.write_text("[train]\nbatch_sizee = 4\n")
        rc = run_cli(["train-gan", "--config", str(bad)])
        assert rc == 2
        assert "batch_sizee" in capsys.readouterr().err


class TestRenderProcedural:
    def test_creates_layout_and_prints_hash(self, tmp_path, capsys):
        rc = run_cli(["render-procedural", "--n", "4", "--seed", "3",
                      "--resolution", "16", "--out", str(tmp_path / "ds")])
        assert rc == 0
        printed = capsys.readouterr().out.strip()
        manifest = read_manifest(tmp_path / "ds")
        assert printed == manifest.content_hash
        assert (tmp_path / "ds" / "images" / "000000_vis.png").is_file()
        assert (tmp_path / "ds" / "masks" / "000000.png").is_file()

    def test_byte_identical_across_runs(self, tmp_path, capsys):
        for name in ("a", "b"):
            assert run_cli(["render-procedural", "--n", "3", "--seed", "5",
                            "--resolution", "16", "--out", str(tmp_path / name)]) == 0
        ma = read_manifest(tmp_path / "a")
        mb = read_manifest(tmp_path / "b")
        assert ma.content_hash == mb.content_hash
        for rec in ma.records:
            assert (tmp_path / "a" / rec.vis).read_bytes() == (tmp_path / "b" / rec.vis).read_bytes()
            assert (tmp_path / "a" / rec.mask).read_bytes() == (tmp_path / "b" / rec.mask).read_bytes()


class TestPipeline:
    def test_synth_writes_pairs(self, gan_checkpoint, tmp_path):
        rc = run_cli(["synth", "--ckpt", str(gan_checkpoint), "--seeds", "1,2",
                      "--out", str(tmp_path / "s")])
        assert rc == 0
        assert (tmp_path / "s" / "1_vis.png").is_file()
        assert (tmp_path / "s" / "2_nir.png").is_file()

    def test_composite_files(self, gan_checkpoint, tmp_path):
        rc = run_cli(["composite", "--ckpt", str(gan_checkpoint), "--seeds", "4",
                      "--out", str(tmp_path / "c")])
        assert rc == 0
        img = load_png(tmp_path / "c" / "4_composite.png")
        assert img.shape == (16, 16, 3)

    def test_style_mix_grid(self, gan_checkpoint, tmp_path):
        out = tmp_path / "grid.png"
        rc = run_cli(["style-mix", "--ckpt", str(gan_checkpoint), "--crossover", "16",
                      "--seeds", "1,2", "--out", str(out)])
        assert rc == 0
        grid = load_png(out)
        assert grid.shape[0] > 16 * 3  # 3x3 cells plus separators

    def test_full_annotation_smg_dataset_seg_eval_chain(self, gan_checkpoint, config_path,
                                                        workdir, capsys):
        # 1. unlabeled pairs for annotation
        annot_root = workdir / "annot"
        rc = run_cli(["gen-dataset", "--config", str(config_path), "--ckpt",
                      str(gan_checkpoint), "--n", "2", "--seed", "0",
                      "--out", str(annot_root)])
        assert rc == 0
        capsys.readouterr()

        # 2. scripted annotation standing in for the UI
        manifest = read_manifest(annot_root)
        from ocusynth.dataset import load_png as _  # noqa: F401
        from ocusynth.generator import BimodalPair
        import torch

        for rec in manifest.records:
            vis = load_png(annot_root / rec.vis).astype(np.float32) / 127.5 - 1.0
            nir = load_png(annot_root / rec.nir).astype(np.float32) / 127.5 - 1.0
            pair = BimodalPair(vis=torch.from_numpy(vis.transpose(2, 0, 1)),
                               nir=torch.from_numpy(nir).unsqueeze(0))
            mask = annotate_by_intensity(pair)
            (annot_root / "masks").mkdir(exist_ok=True)
            save_png(annot_root / "masks" / f"{rec.id}.png", mask.astype(np.uint8))

        # 3. SMG training on the annotated records
        smg_path = workdir / "smg.pt"
        rc = run_cli(["train-smg", "--config", str(config_path), "--ckpt",
                      str(gan_checkpoint), "--dataset", str(annot_root),
                      "--out", str(smg_path)])
        assert rc == 0
        capsys.readouterr()

        # 4. labeled triplets, deterministic across runs
        hashes = []
        for name in ("d1", "d2"):
            rc = run_cli(["gen-dataset", "--config", str(config_path), "--ckpt",
                          str(gan_checkpoint), "--smg", str(smg_path), "--n", "6",
                          "--seed", "11", "--out", str(workdir / name)])
            assert rc == 0
            hashes.append(capsys.readouterr().out.strip())
        assert hashes[0] == hashes[1]
        assert read_manifest(workdir / "d1").content_hash == hashes[0]

        # 5. segmenter training and evaluation on the triplets
        seg_path = workdir / "seg.pt"
        rc = run_cli(["train-seg", "--config", str(config_path), "--train",
                      str(workdir / "d1"), "--val", str(workdir / "d2"),
                      "--modality", "VIS", "--out", str(seg_path)])
        assert rc == 0
        capsys.readouterr()

        csv_path = workdir / "report.csv"
        rc = run_cli(["eval", "--model", str(seg_path), "--dataset", str(workdir / "d2"),
                      "--out", str(csv_path)])
        assert rc == 0
        out = capsys.readouterr().out
        assert "iou" in out
        lines = csv_path.read_text().splitlines()
        assert lines[0].startswith("id,")
        assert len(lines) == 1 + 6 + 2  # header, rows, mean, std

    def test_gen_dataset_missing_ckpt_fails_cleanly(self, tmp_path, capsys):
        rc = run_cli(["gen-dataset", "--ckpt", str(tmp_path / "no.pt"), "--n", "1",
                      "--out", str(tmp_path / "x")])
        assert rc == 2
        assert "no.pt" in capsys.readouterr().err
