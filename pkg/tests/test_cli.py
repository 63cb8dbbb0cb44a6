"""End-to-end command-line runs on small corpora."""
from __future__ import annotations

import csv
import subprocess
import sys

import numpy as np
import pytest

from panoroom import cli
from panoroom.cli import EXIT_ALL_FAILED, EXIT_CONFIG, EXIT_OK, main, worker_count
from panoroom.errors import ConfigError
from panoroom.layout import load_layout
from panoroom.metrics import iou_3d


@pytest.fixture(autouse=True)
def _one_worker(monkeypatch):
    monkeypatch.setenv("PANOROOM_THREADS", "1")


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    mp = pytest.MonkeyPatch()
    mp.setenv("PANOROOM_THREADS", "1")
    assert main(["synth", "--out", str(d), "--rooms", "10", "--seed", "7"]) == EXIT_OK
    mp.undo()
    return d


@pytest.fixture(scope="module")
def recon(corpus, tmp_path_factory):
    d = tmp_path_factory.mktemp("recon")
    mp = pytest.MonkeyPatch()
    mp.setenv("PANOROOM_THREADS", "1")
    assert main(["reconstruct", "--corpus", str(corpus), "--out", str(d), "--overlay"]) == EXIT_OK
    mp.undo()
    return d


# -- synth -------------------------------------------------------------------------------------

def test_synth_layout(corpus):
    rows = _rows(corpus / "manifest.csv")
    assert tuple(rows[0]) == cli.MANIFEST_HEADER and len(rows) == 11
    for r in rows[1:]:
        assert (corpus / "rooms" / f"{r[0]}.layout").is_file()
        assert (corpus / "maps" / f"{r[0]}_edge.prm").is_file()
        assert (corpus / "maps" / f"{r[0]}_corner.prm").is_file()


def test_synth_byte_identical(corpus, tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--rooms", "10", "--seed", "7"]) == EXIT_OK
    assert _tree(tmp_path) == _tree(corpus)


def test_synth_two_hundred_rooms(tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--rooms", "200", "--width", "64", "--height", "32"]) == EXIT_OK
    assert len(_rows(tmp_path / "manifest.csv")) == 201


def test_synth_fixed_corners(tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--rooms", "3", "--corners", "8"]) == EXIT_OK
    assert all(r[1] == "8" for r in _rows(tmp_path / "manifest.csv")[1:])


def test_odd_corner_count_is_config_error(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path), "--corners", "5"]) == EXIT_CONFIG
    assert "corners" in capsys.readouterr().err


def test_unknown_flag_is_hard_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--out", str(tmp_path), "--bogus", "1"])
    assert exc.value.code == 2


def test_config_file_and_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("rooms = 2\ncorners = 6\n")
    out = tmp_path / "c"
    assert main(["synth", "--config", str(cfg), "--out", str(out), "--rooms", "3"]) == EXIT_OK
    rows = _rows(out / "manifest.csv")[1:]
    assert len(rows) == 3 and all(r[1] == "6" for r in rows)


def test_missing_config_file(tmp_path):
    assert main(["synth", "--config", str(tmp_path / "none.cfg"), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_help_lists_every_flag(capsys):
    parser = cli.build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    for name, p in sub.choices.items():
        text = p.format_help()
        for action in p._actions:
            for flag in action.option_strings:
                assert flag in text, (name, flag)
    with pytest.raises(SystemExit) as exc:
        main(["reconstruct", "--help"])
    assert exc.value.code == 0
    assert "--overlay" in capsys.readouterr().out


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "panoroom.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("synth", "render-gt", "corrupt", "reconstruct", "evaluate", "map-metrics"):
        assert cmd in out.stdout


# -- threads ---------------------------------------------------------------------------------

def test_thread_cap(monkeypatch):
    monkeypatch.setenv("PANOROOM_THREADS", "1")
    assert worker_count() == 1
    monkeypatch.setenv("PANOROOM_THREADS", "zero")
    with pytest.raises(ConfigError):
        worker_count()


def test_parallel_output_matches_serial(corpus, tmp_path, monkeypatch):
    monkeypatch.setenv("PANOROOM_THREADS", "2")
    monkeypatch.setattr(cli.os, "cpu_count", lambda: 2)
    assert main(["synth", "--out", str(tmp_path), "--rooms", "10", "--seed", "7"]) == EXIT_OK
    assert _tree(tmp_path) == _tree(corpus)


# -- render-gt / corrupt -----------------------------------------------------------------------

def test_render_gt_reproduces_maps(corpus, tmp_path):
    assert main(["render-gt", "--corpus", str(corpus), "--out", str(tmp_path)]) == EXIT_OK
    assert _tree(tmp_path) == _tree(corpus)


def test_corrupt_is_seeded(corpus, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    flags = ["--sigma", "0.1", "--spurious", "0.05", "--dropout", "0.2"]
    assert main(["corrupt", "--corpus", str(corpus), "--out", str(a), *flags]) == EXIT_OK
    assert main(["corrupt", "--corpus", str(corpus), "--out", str(b), *flags]) == EXIT_OK
    assert _tree(a) == _tree(b)
    edge = "maps/room_00000_edge.prm"
    assert _tree(a)[edge] != _tree(corpus)[edge]


def test_corrupt_needs_corpus(tmp_path):
    assert main(["corrupt", "--corpus", str(tmp_path / "none"), "--out", str(tmp_path)]) == EXIT_CONFIG


# -- reconstruct ---------------------------------------------------------------------------------

def test_reconstruct_clean_corpus(corpus, recon):
    rows = _rows(recon / "report.csv")
    assert tuple(rows[0]) == cli.REPORT_HEADER
    assert len(rows) == 11 and all(r[1] == "ok" for r in rows[1:])
    assert len(list(recon.glob("*.layout"))) == 10
    assert len(list((recon / "overlays").glob("*.png"))) == 10
    for r in rows[1:]:
        iou = iou_3d(load_layout(recon / f"{r[0]}.layout"), load_layout(corpus / "rooms" / f"{r[0]}.layout"))
        assert iou >= 0.9


def test_overlay_colours(recon):
    from PIL import Image

    img = np.asarray(Image.open(recon / "overlays" / "room_00000.png"))
    assert img.shape == (128, 256, 3)
    colours = {tuple(c) for c in img.reshape(-1, 3)}
    assert cli.YELLOW in colours and cli.GREEN in colours


def test_reconstruct_byte_identical(corpus, recon, tmp_path):
    assert main(["reconstruct", "--corpus", str(corpus), "--out", str(tmp_path), "--overlay"]) == EXIT_OK
    assert _tree(tmp_path) == _tree(recon)


def test_other_seed_still_accurate(corpus, recon, tmp_path):
    assert main(["reconstruct", "--corpus", str(corpus), "--out", str(tmp_path), "--seed", "3"]) == EXIT_OK
    ious = [iou_3d(load_layout(p), load_layout(corpus / "rooms" / p.name)) for p in sorted(tmp_path.glob("*.layout"))]
    assert len(ious) == 10 and np.mean(ious) >= 0.95


def test_missing_map_is_per_image_error(corpus, tmp_path, capsys):
    broken = tmp_path / "broken"
    assert main(["synth", "--out", str(broken), "--rooms", "3", "--seed", "7"]) == EXIT_OK
    (broken / "maps" / "room_00001_corner.prm").unlink()
    out = tmp_path / "out"
    assert main(["reconstruct", "--corpus", str(broken), "--out", str(out)]) == EXIT_OK
    rows = {r[0]: r for r in _rows(out / "report.csv")[1:]}
    assert rows["room_00001"][1] == "error" and "room_00001_corner.prm" in rows["room_00001"][4]
    assert rows["room_00000"][1] == "ok" and rows["room_00002"][1] == "ok"
    assert "room_00001" in capsys.readouterr().err


def test_all_failed_exit_code(tmp_path):
    broken = tmp_path / "broken"
    assert main(["synth", "--out", str(broken), "--rooms", "2"]) == EXIT_OK
    for p in (broken / "maps").glob("*_edge.prm"):
        p.unlink()
    assert main(["reconstruct", "--corpus", str(broken), "--out", str(tmp_path / "out")]) == EXIT_ALL_FAILED


# -- evaluate --------------------------------------------------------------------------------------

def test_evaluate_gt_against_itself(corpus, tmp_path):
    out = tmp_path / "self.csv"
    assert main(["evaluate", "--pred", str(corpus), "--gt", str(corpus), "--out", str(out)]) == EXIT_OK
    rows = _rows(out)
    assert len(rows) == 12
    for r in rows[1:]:
        assert float(r[1]) == 1.0 and float(r[2]) == 0.0 and float(r[3]) == 0.0 and float(r[4]) == 0.0


def test_evaluate_mean_row(corpus, recon, tmp_path):
    out = tmp_path / "eval.csv"
    assert main(["evaluate", "--pred", str(recon), "--gt", str(corpus), "--out", str(out)]) == EXIT_OK
    rows = _rows(out)
    assert tuple(rows[0]) == ("id", "iou3d", "ce_pct", "pe_ss_pct", "pe_cs_pct")
    assert len(rows) == 12 and rows[-1][0] == "mean"
    body = np.array([[float(x) for x in r[1:]] for r in rows[1:-1]])
    np.testing.assert_allclose([float(x) for x in rows[-1][1:]], body.mean(axis=0), rtol=0, atol=1e-12)


def test_evaluate_stdout_and_repeatable(corpus, recon, capsys):
    assert main(["evaluate", "--pred", str(recon), "--gt", str(corpus)]) == EXIT_OK
    first = capsys.readouterr().out
    assert main(["evaluate", "--pred", str(recon), "--gt", str(corpus)]) == EXIT_OK
    assert capsys.readouterr().out == first and first.startswith("id,iou3d")


def test_evaluate_counts_failures(tmp_path):
    broken = tmp_path / "broken"
    assert main(["synth", "--out", str(broken), "--rooms", "2", "--seed", "7"]) == EXIT_OK
    (broken / "maps" / "room_00001_edge.prm").unlink()
    out = tmp_path / "out"
    assert main(["reconstruct", "--corpus", str(broken), "--out", str(out)]) == EXIT_OK
    csv_path = tmp_path / "e.csv"
    assert main(["evaluate", "--pred", str(out), "--gt", str(broken), "--out", str(csv_path)]) == EXIT_OK
    row = {r[0]: r for r in _rows(csv_path)}["room_00001"]
    assert [float(x) for x in row[1:]] == [0.0, 100.0, 100.0, 100.0]


def test_evaluate_id_mismatch(corpus, recon, tmp_path):
    partial = tmp_path / "partial"
    partial.mkdir()
    for p in sorted(recon.glob("*.layout"))[:5]:
        (partial / p.name).write_bytes(p.read_bytes())
    assert main(["evaluate", "--pred", str(partial), "--gt", str(corpus)]) == EXIT_CONFIG


# -- map-metrics -----------------------------------------------------------------------------------

def test_map_metrics_identity(corpus, tmp_path):
    out = tmp_path / "m.csv"
    assert main(["map-metrics", "--pred", str(corpus), "--gt", str(corpus), "--out", str(out)]) == EXIT_OK
    rows = _rows(out)
    assert tuple(rows[0]) == cli.MAP_HEADER and len(rows) == 12
    for r in rows[1:]:
        assert [float(x) for x in r[1:]] == [1.0, 1.0, 1.0, 1.0]


def test_map_metrics_zero_prediction(corpus, tmp_path):
    from panoroom.maps import ProbabilityMap, load_map, save_map

    zero = tmp_path / "zero"
    zero.mkdir()
    for p in (corpus / "maps").glob("*_corner.prm"):
        m = load_map(p)
        save_map(ProbabilityMap(m.grid, np.zeros(m.grid.shape), m.channel), zero / p.name)
    out = tmp_path / "m.csv"
    assert main(["map-metrics", "--pred", str(zero), "--gt", str(corpus), "--channel", "corner",
                 "--out", str(out)]) == EXIT_OK
    rows = _rows(out)
    for r in rows[1:]:
        assert float(r[2]) == 0.0
    body = np.array([[float(x) for x in r[1:]] for r in rows[1:-1]])
    np.testing.assert_allclose([float(x) for x in rows[-1][1:]], body.mean(axis=0), rtol=0, atol=1e-12)


def test_map_metrics_dimension_mismatch(corpus, tmp_path):
    small = tmp_path / "small"
    assert main(["synth", "--out", str(small), "--rooms", "10", "--seed", "7", "--width", "64",
                 "--height", "32"]) == EXIT_OK
    assert main(["map-metrics", "--pred", str(small), "--gt", str(corpus)]) == EXIT_CONFIG
