"""``panoroom`` command-line front end.

Exit codes: 0 success, 1 every image failed, 2 configuration error.
``PANOROOM_THREADS`` caps the number of worker processes of batch commands;
outputs always follow manifest order.
"""
from __future__ import annotations

import argparse
import csv
import io
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import astuple, dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, build_config, load_config_file
from .errors import ConfigError, PanoRoomError
from .layout import LayoutModel, load_layout, save_layout
from .maps import (Channel, MapMetrics, load_map, map_metrics, render_edge_mask, render_gt_maps, save_map)
from .metrics import evaluate, reports_csv
from .solver import reconstruct
from .sphere import EquirectGrid
from .synth import RoomSpec, corpus_specs, corrupt_maps, room_seed, sample_room

EXIT_OK = 0
EXIT_ALL_FAILED = 1
EXIT_CONFIG = 2

MANIFEST = "manifest.csv"
MANIFEST_HEADER = ("id", "corner_count", "seed", "camera_height", "width", "height")
REPORT = "report.csv"
REPORT_HEADER = ("id", "status", "corners", "hypotheses", "message")
MAP_HEADER = ("id", "precision", "recall", "f1", "accuracy")

YELLOW = (255, 230, 0)
GREEN = (0, 200, 0)


# -- parallel map ---------------------------------------------------------------

def worker_count() -> int:
    """Processes for batch work: CPU count, capped by ``PANOROOM_THREADS``."""
    n = os.cpu_count() or 1
    raw = os.environ.get("PANOROOM_THREADS", "").strip()
    if raw:
        try:
            cap = int(raw)
        except ValueError as exc:
            raise ConfigError(f"PANOROOM_THREADS must be an integer, got {raw!r}") from exc
        if cap < 1:
            raise ConfigError("PANOROOM_THREADS must be at least 1")
        n = min(n, cap)
    return n


def ordered_map(fn, items) -> list:
    """``[fn(x) for x in items]``, spread over worker processes when allowed."""
    items = list(items)
    n = min(worker_count(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


# -- corpus I/O -------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestRow:
    id: str
    corner_count: int
    seed: int
    camera_height: float
    width: int
    height: int


def room_id(index: int) -> str:
    return f"room_{index:05d}"


def write_manifest(path: Path, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MANIFEST_HEADER)
    for r in rows:
        w.writerow(astuple(r))
    path.write_text(buf.getvalue(), encoding="utf-8")


def read_manifest(corpus: Path) -> list[ManifestRow]:
    path = corpus / MANIFEST
    if not path.is_file():
        raise ConfigError(f"no {MANIFEST} in {corpus}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_HEADER:
            raise ConfigError(f"{path}: unexpected header {reader.fieldnames}")
        try:
            return [ManifestRow(r["id"], int(r["corner_count"]), int(r["seed"]), float(r["camera_height"]),
                                int(r["width"]), int(r["height"])) for r in reader]
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{path}: malformed row: {exc}") from exc


def _layout_dir(d: Path) -> Path:
    return d / "rooms" if (d / "rooms").is_dir() else d


def _map_dir(d: Path) -> Path:
    return d / "maps" if (d / "maps").is_dir() else d


_SUFFIX = {Channel.EDGE: "edge", Channel.CORNER: "corner"}


def _map_path(d: Path, ident: str, channel: Channel) -> Path:
    return d / f"{ident}_{_SUFFIX[channel]}.prm"


def _need_dir(path: str | None, flag: str) -> Path:
    if path is None:
        raise ConfigError(f"{flag} is required")
    p = Path(path)
    if not p.is_dir():
        raise ConfigError(f"{flag}: no such directory: {p}")
    return p


def _need_out(path: str | None) -> Path:
    if path is None:
        raise ConfigError("--out is required")
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create {p}: {exc}") from exc
    return p


# -- synth / render-gt / corrupt ---------------------------------------------------------

def _synth_one(job):
    spec, ident, out, cfg = job
    model = sample_room(spec)
    save_layout(model, out / "rooms" / f"{ident}.layout")
    _render_one((ident, model, out, cfg))
    return ManifestRow(ident, model.n_corners, spec.seed, cfg.camera_height, cfg.width, cfg.height)


def _render_one(job):
    ident, model, out, cfg = job
    edge, corner = render_gt_maps(model, cfg.grid(), cfg.line_thickness, cfg.blur_sigma)
    save_map(edge, _map_path(out / "maps", ident, Channel.EDGE))
    save_map(corner, _map_path(out / "maps", ident, Channel.CORNER))


def cmd_synth(cfg: RunConfig) -> int:
    out = _need_out(cfg.out)
    base = RoomSpec(camera_height=cfg.camera_height)
    if cfg.corners:
        specs = [replace(base, corner_count=cfg.corners, seed=room_seed(cfg.seed, i)) for i in range(cfg.rooms)]
    else:
        specs = corpus_specs(cfg.rooms, cfg.seed, cfg.complex_only, base=base)
    (out / "rooms").mkdir(exist_ok=True)
    (out / "maps").mkdir(exist_ok=True)
    rows = ordered_map(_synth_one, [(s, room_id(i), out, cfg) for i, s in enumerate(specs)])
    write_manifest(out / MANIFEST, rows)
    counts = {}
    for r in rows:
        counts[r.corner_count] = counts.get(r.corner_count, 0) + 1
    mix = " ".join(f"{k}:{counts[k]}" for k in sorted(counts))
    print(f"wrote {len(rows)} rooms to {out} (corners {mix or '-'})")
    return EXIT_OK


def cmd_render_gt(cfg: RunConfig) -> int:
    corpus = _need_dir(cfg.corpus, "--corpus")
    out = _need_out(cfg.out) if cfg.out else corpus
    rows = read_manifest(corpus)
    (out / "maps").mkdir(exist_ok=True)
    jobs = [(r.id, load_layout(corpus / "rooms" / f"{r.id}.layout"), out, cfg) for r in rows]
    ordered_map(_render_one, jobs)
    if out != corpus:
        _copy_rooms(corpus, out, rows)
    write_manifest(out / MANIFEST, [replace(r, width=cfg.width, height=cfg.height) for r in rows])
    print(f"rendered {len(rows)} map pairs at {cfg.width}x{cfg.height} into {out}")
    return EXIT_OK


def _copy_rooms(src: Path, dst: Path, rows) -> None:
    (dst / "rooms").mkdir(exist_ok=True)
    for r in rows:
        name = f"{r.id}.layout"
        (dst / "rooms" / name).write_bytes((src / "rooms" / name).read_bytes())


def _corrupt_one(job):
    ident, index, src, out, cfg = job
    edge = load_map(_map_path(src / "maps", ident, Channel.EDGE))
    corner = load_map(_map_path(src / "maps", ident, Channel.CORNER))
    edge, corner = corrupt_maps(edge, corner, cfg.noise(), seed=room_seed(cfg.seed, index))
    save_map(edge, _map_path(out / "maps", ident, Channel.EDGE))
    save_map(corner, _map_path(out / "maps", ident, Channel.CORNER))


def cmd_corrupt(cfg: RunConfig) -> int:
    corpus = _need_dir(cfg.corpus, "--corpus")
    out = _need_out(cfg.out)
    if out.resolve() == corpus.resolve():
        raise ConfigError("--out must differ from --corpus")
    rows = read_manifest(corpus)
    (out / "maps").mkdir(exist_ok=True)
    ordered_map(_corrupt_one, [(r.id, i, corpus, out, cfg) for i, r in enumerate(rows)])
    _copy_rooms(corpus, out, rows)
    write_manifest(out / MANIFEST, rows)
    n = cfg.noise()
    print(f"corrupted {len(rows)} map pairs into {out} (sigma {n.gaussian_sigma}, "
          f"spurious {n.spurious_edge_fraction}, dropout {n.dropout_fraction})")
    return EXIT_OK


# -- reconstruct ----------------------------------------------------------------------------

def overlay_image(edge, pred: LayoutModel, gt: LayoutModel | None, scale: int = 2) -> np.ndarray:
    """RGB image: the edge map in grey, gt edges green, predicted edges yellow on top."""
    grid = edge.grid
    base = np.rint(np.clip(edge.values, 0, 1) * 110).astype(np.uint8)
    img = np.repeat(base[:, :, None], 3, axis=2)
    img = np.kron(img, np.ones((scale, scale, 1), dtype=np.uint8))
    big = EquirectGrid(grid.width * scale, grid.height * scale)
    if gt is not None:
        img[render_edge_mask(gt, big, 1.0) > 0] = GREEN
    img[render_edge_mask(pred, big, 1.0) > 0] = YELLOW
    return img


def _reconstruct_one(job):
    row, corpus, out, cfg = job
    maps = _map_dir(corpus)
    try:
        edge = load_map(_map_path(maps, row.id, Channel.EDGE))
        corner = load_map(_map_path(maps, row.id, Channel.CORNER))
    except FileNotFoundError as exc:
        return row.id, "error", 0, 0, f"missing map file {Path(exc.filename).name}"
    except PanoRoomError as exc:
        return row.id, "error", 0, 0, f"{type(exc).__name__}: {exc}"
    solver = replace(cfg.solver(), camera_height=row.camera_height)
    try:
        rec = reconstruct(edge, corner, cfg.ransac(), solver)
    except (PanoRoomError, ValueError) as exc:
        return row.id, "error", 0, 0, f"{type(exc).__name__}: {exc}"
    save_layout(rec.model, out / f"{row.id}.layout")
    if cfg.overlay:
        from PIL import Image

        gt_path = corpus / "rooms" / f"{row.id}.layout"
        gt = load_layout(gt_path) if gt_path.is_file() else None
        Image.fromarray(overlay_image(edge, rec.model, gt), mode="RGB").save(out / "overlays" / f"{row.id}.png")
    return row.id, "ok", rec.model.n_corners, rec.n_hypotheses, ""


def cmd_reconstruct(cfg: RunConfig) -> int:
    corpus = _need_dir(cfg.corpus, "--corpus")
    out = _need_out(cfg.out)
    rows = read_manifest(corpus)
    if cfg.overlay:
        (out / "overlays").mkdir(exist_ok=True)
    t0 = time.perf_counter()
    results = ordered_map(_reconstruct_one, [(r, corpus, out, cfg) for r in rows])
    dt = time.perf_counter() - t0
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    w.writerows(results)
    (out / REPORT).write_text(buf.getvalue(), encoding="utf-8")
    failed = [r for r in results if r[1] != "ok"]
    for ident, _, _, _, msg in failed:
        print(f"{ident}: {msg}", file=sys.stderr)
    print(f"reconstructed {len(rows) - len(failed)}/{len(rows)} rooms into {out} "
          f"({dt / max(len(rows), 1):.3f} s per image)")
    if rows and len(failed) == len(rows):
        return EXIT_ALL_FAILED
    return EXIT_OK


# -- evaluate / map-metrics ----------------------------------------------------------------------

def _failed_ids(pred: Path) -> set[str]:
    path = pred / REPORT
    if not path.is_file():
        return set()
    with path.open(newline="", encoding="utf-8") as fh:
        return {r["id"] for r in csv.DictReader(fh) if r.get("status") != "ok"}


def _gt_ids(gt: Path) -> list[str]:
    if (gt / MANIFEST).is_file():
        return [r.id for r in read_manifest(gt)]
    return sorted(p.stem for p in _layout_dir(gt).glob("*.layout"))


def _evaluate_one(job):
    ident, pred_path, gt_path, cfg = job
    pred = load_layout(pred_path) if pred_path is not None else None
    return ident, evaluate(pred, load_layout(gt_path), cfg.eval_grid())


def _emit(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
        return
    p = Path(out)
    if p.parent and not p.parent.is_dir():
        raise ConfigError(f"--out: no such directory: {p.parent}")
    p.write_text(text, encoding="utf-8")


def _check_ids(pred_ids: set[str], gt_ids: list[str]) -> None:
    extra = sorted(pred_ids - set(gt_ids))
    missing = sorted(set(gt_ids) - pred_ids)
    if extra or missing:
        raise ConfigError(f"prediction and gt ids differ: missing {missing[:5]}, unexpected {extra[:5]}")


def cmd_evaluate(cfg: RunConfig) -> int:
    pred = _layout_dir(_need_dir(cfg.pred, "--pred"))
    gt = _need_dir(cfg.gt, "--gt")
    ids = _gt_ids(gt)
    found = {p.stem for p in pred.glob("*.layout")}
    failed = _failed_ids(pred) - found
    _check_ids(found | failed, ids)
    gdir = _layout_dir(gt)
    jobs = [(i, None if i in failed else pred / f"{i}.layout", gdir / f"{i}.layout", cfg) for i in ids]
    _emit(reports_csv(ordered_map(_evaluate_one, jobs)), cfg.out)
    return EXIT_OK


def _map_one(job):
    ident, pdir, gdir, cfg = job
    ch = Channel.EDGE if cfg.channel == "edge" else Channel.CORNER
    return ident, map_metrics(load_map(_map_path(pdir, ident, ch)), load_map(_map_path(gdir, ident, ch)),
                              cfg.bin_threshold)


def map_metrics_csv(rows) -> str:
    """CSV text: one row per ``(id, MapMetrics)`` and a final ``mean`` row."""
    rows = list(rows)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MAP_HEADER)
    sums = np.zeros(4)
    for ident, m in rows:
        vals = astuple(m)
        sums += vals
        w.writerow([ident] + [repr(float(v)) for v in vals])
    if rows:
        w.writerow(["mean"] + [repr(float(v)) for v in astuple(MapMetrics(*(sums / len(rows))))])
    return buf.getvalue()


def cmd_map_metrics(cfg: RunConfig) -> int:
    pdir = _map_dir(_need_dir(cfg.pred, "--pred"))
    gdir = _map_dir(_need_dir(cfg.gt, "--gt"))
    suffix = f"_{cfg.channel}.prm"
    ids = sorted(p.name[:-len(suffix)] for p in gdir.glob(f"*{suffix}"))
    _check_ids({p.name[:-len(suffix)] for p in pdir.glob(f"*{suffix}")}, ids)
    _emit(map_metrics_csv(ordered_map(_map_one, [(i, pdir, gdir, cfg) for i in ids])), cfg.out)
    return EXIT_OK


# -- argument parsing --------------------------------------------------------------------------------

_D = RunConfig()
_COMMANDS = {
    "synth": cmd_synth,
    "render-gt": cmd_render_gt,
    "corrupt": cmd_corrupt,
    "reconstruct": cmd_reconstruct,
    "evaluate": cmd_evaluate,
    "map-metrics": cmd_map_metrics,
}


def _opt(p, name, kind, text):
    """Flag whose absence leaves the setting to the config file or the default."""
    dest = name.replace("-", "_")
    if kind is bool:
        p.add_argument(f"--{name}", dest=dest, action=argparse.BooleanOptionalAction, default=None,
                       help=f"{text} (default: {str(getattr(_D, dest)).lower()})")
        return
    default = getattr(_D, dest)
    shown = "" if default is None else f" (default: {default})"
    p.add_argument(f"--{name}", dest=dest, type=kind, default=None, metavar=name.upper().replace("-", "_"),
                   help=text + shown)


def _common(p):
    p.add_argument("--config", metavar="FILE", default=None,
                   help="key = value settings file; command-line flags override it")
    _opt(p, "seed", int, "base random seed")


def _grid_opts(p):
    _opt(p, "width", int, "map width in pixels")
    _opt(p, "height", int, "map height in pixels")
    _opt(p, "line-thickness", float, "edge line thickness in pixels")
    _opt(p, "blur-sigma", float, "Gaussian blur of rendered maps in pixels")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="panoroom", description="Manhattan room layouts from panoramic edge and "
                                     "corner probability maps.",
                                     epilog="Exit codes: 0 success, 1 every image failed, 2 configuration error. "
                                     "PANOROOM_THREADS caps worker processes.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", help="generate a synthetic corpus with ground-truth maps")
    _common(p)
    _opt(p, "out", str, "corpus directory to write")
    _opt(p, "rooms", int, "number of rooms")
    _opt(p, "corners", int, "fixed corner count (4, 6, 8, 10 or 12); 0 draws the default mix")
    _opt(p, "complex-only", bool, "draw only non-box rooms in the default mix")
    _opt(p, "camera-height", float, "camera height above the floor in metres")
    _grid_opts(p)

    p = sub.add_parser("render-gt", help="re-render ground-truth maps from corpus layouts")
    _common(p)
    _opt(p, "corpus", str, "corpus directory to read")
    _opt(p, "out", str, "output corpus directory (default: overwrite the input maps)")
    _grid_opts(p)

    p = sub.add_parser("corrupt", help="write a noisy copy of a corpus")
    _common(p)
    _opt(p, "corpus", str, "corpus directory to read")
    _opt(p, "out", str, "corpus directory to write")
    _opt(p, "sigma", float, "additive Gaussian noise standard deviation")
    _opt(p, "spurious", float, "fraction of background pixels turned into false edges")
    _opt(p, "dropout", float, "fraction of structure pixels zeroed")

    p = sub.add_parser("reconstruct", help="recover a layout for every room of a corpus")
    _common(p)
    _opt(p, "corpus", str, "corpus directory with manifest.csv and maps/")
    _opt(p, "out", str, "directory for <id>.layout files and report.csv")
    _opt(p, "overlay", bool, "also write overlays/<id>.png (prediction yellow, ground truth green)")
    _opt(p, "ransac-iterations", int, "RANSAC iterations per line")
    _opt(p, "inlier-tol", float, "RANSAC inlier tolerance in radians")
    _opt(p, "edge-threshold", float, "edge probability kept as line evidence")
    _opt(p, "max-lines", int, "lines RANSAC extracts before the frame sweep")
    _opt(p, "max-corners", int, "largest corner count considered")
    _opt(p, "max-hypotheses", int, "hypotheses scored per image")
    _opt(p, "refine", bool, "final least-squares fit of the wireframe to the edge map")
    _opt(p, "level", bool, "assume an upright camera (estimate yaw only)")
    _opt(p, "denoise", bool, "suppress background noise in the maps first")

    p = sub.add_parser("evaluate", help="score predicted layouts against ground truth")
    _common(p)
    _opt(p, "pred", str, "directory of predicted <id>.layout files (with report.csv)")
    _opt(p, "gt", str, "ground-truth corpus or layout directory")
    _opt(p, "out", str, "CSV file to write (default: stdout)")
    _opt(p, "eval-width", int, "width of the grid for corner and pixel errors")
    _opt(p, "eval-height", int, "height of the grid for corner and pixel errors")

    p = sub.add_parser("map-metrics", help="precision, recall, F1 and accuracy of predicted maps")
    _common(p)
    _opt(p, "pred", str, "directory of predicted <id>_<channel>.prm maps (or a corpus)")
    _opt(p, "gt", str, "ground-truth map directory (or a corpus)")
    _opt(p, "out", str, "CSV file to write (default: stdout)")
    _opt(p, "channel", str, "map channel to compare: edge or corner")
    _opt(p, "bin-threshold", float, "probability threshold for binarising both maps")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    values = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    try:
        file_values = load_config_file(args.config) if args.config else {}
        cfg = build_config(file_values, values)
        return _COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"panoroom: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PanoRoomError, ValueError, OSError) as exc:
        print(f"panoroom: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
