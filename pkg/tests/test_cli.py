"""CLI surface: subcommands, exit codes, manifests."""

import json
import subprocess
import sys

import numpy as np

from maskgrid.cli import main
from maskgrid.masks import MaskGrid
from maskgrid import netpbm


def test_make_dataset_writes_corpus_and_manifest(tmp_path):
    out = tmp_path / "corpus"
    rc = main(
        ["make-dataset", "--out", str(out), "--kind", "mixed", "--count", "5",
         "--extent", "32", "--seed", "3"]
    )
    assert rc == 0
    ppms = sorted(out.glob("*.ppm"))
    assert len(ppms) == 5
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "make-dataset"
    assert manifest["seeds"] == {"seed": 3}
    img = netpbm.read_ppm(ppms[0])
    assert img.shape == (3, 32, 32)


def test_make_masks_writes_pgms(tmp_path):
    out = tmp_path / "masks"
    rc = main(
        ["make-masks", "--out", str(out), "--kind", "box80", "--count", "2",
         "--extent", "64", "--seed", "1"]
    )
    assert rc == 0
    pgms = sorted(out.glob("*.pgm"))
    assert len(pgms) == 2
    mask = MaskGrid.load_pgm(pgms[0])
    assert (1 - mask.values).sum() == 51 * 51


def test_config_error_exit_code(tmp_path):
    rc = main(
        ["train-vq", "--set", "image_size=60", "--set", "stages=3",
         "--set", f"workdir={tmp_path}"]
    )
    assert rc == 2


def test_bad_set_syntax_exit_code(tmp_path):
    rc = main(["train-vq", "--set", "imagesize:64"])
    assert rc == 2


def test_unknown_key_exit_code():
    rc = main(["train-vq", "--set", "bogus=1"])
    assert rc == 2


def test_missing_checkpoint_exit_code(tmp_path):
    img = tmp_path / "x.ppm"
    netpbm.write_ppm(img, np.zeros((3, 64, 64), dtype=np.uint8))
    maskp = tmp_path / "m.pgm"
    MaskGrid.full((64, 64)).save_pgm(maskp)
    rc = main(
        ["inpaint", "--image", str(img), "--mask", str(maskp),
         "--out", str(tmp_path / "out"), "--seed", "1",
         "--set", f"workdir={tmp_path / 'nowhere'}"]
    )
    assert rc == 3


def test_missing_vq_checkpoint_for_encoder_stage(tmp_path):
    rc = main(
        ["train-encoder", "--set", f"workdir={tmp_path / 'empty'}",
         "--set", "dataset_count=4", "--set", "encoder_steps=1"]
    )
    assert rc == 3


def test_console_entry_point_help():
    proc = subprocess.run(
        [sys.executable, "-m", "maskgrid.cli", "--help"],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0
    assert "inpaint" in proc.stdout
