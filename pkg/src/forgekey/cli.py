"""``forgekey`` command line: train, unlearn, eval, export, gen-data.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 file format
error, 1 anything else.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time

import numpy as np

from . import backbone
from .checkpoint import atomic_write, load_model, save_model
from .config import TrainConfig, load_run_config
from .datagen import SyntheticSpec, generate, load_dataset, sample_forget, save_dataset
from .errors import ConfigError, DataError, ForgekeyError
from .harness import evaluate_unlearning, retrain_oracle
from .inference import FusionStrategy, neighbor_weights
from .membank import delete, retrieve_many
from .nncore import Tensor, no_grad

log = logging.getLogger("forgekey")

EPOCH_COLUMNS = ("epoch", "train_loss", "val_acc", "lr", "p_s_probe")


# --- small file helpers -------------------------------------------------------------


def read_ids(path) -> list[int]:
    """One decimal id per line; blank lines are ignored."""
    out = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(int(line))
            except ValueError:
                raise DataError(f"{path}:{n}: {line!r} is not a decimal id") from None
    return out


def write_ids(path, ids) -> None:
    atomic_write(path, "".join(f"{int(i)}\n" for i in ids).encode())


def write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    atomic_write(path, buf.getvalue().encode())


def _fmt(x) -> str:
    return f"{x:.6g}" if isinstance(x, float) else str(x)


def seed_override(config: TrainConfig) -> TrainConfig:
    raw = os.environ.get("FORGEKEY_SEED")
    if raw is None or raw == "":
        return config
    try:
        return config.replace(seed=int(raw))
    except ValueError:
        raise ConfigError(f"FORGEKEY_SEED={raw!r} is not an integer") from None


# --- SVG ------------------------------------------------------------------------------

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")


class _Frame:
    """Maps data coordinates into a fixed plotting box."""

    def __init__(self, xs, ys, width=480, height=360, pad=40):
        self.w, self.h, self.pad = width, height, pad
        self.x0, self.x1 = _span(xs)
        self.y0, self.y1 = _span(ys)

    def x(self, v):
        return self.pad + (v - self.x0) / (self.x1 - self.x0) * (self.w - 2 * self.pad)

    def y(self, v):
        return self.h - self.pad - (v - self.y0) / (self.y1 - self.y0) * (self.h - 2 * self.pad)

    def axes(self, title: str, xlabel: str, ylabel: str) -> list[str]:
        p, w, h = self.pad, self.w, self.h
        return [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
            f'<rect width="{w}" height="{h}" fill="white"/>',
            f'<line x1="{p}" y1="{h - p}" x2="{w - p}" y2="{h - p}" stroke="black"/>',
            f'<line x1="{p}" y1="{p}" x2="{p}" y2="{h - p}" stroke="black"/>',
            f'<text x="{w / 2:.1f}" y="{p / 2:.1f}" text-anchor="middle" font-size="13">{_esc(title)}</text>',
            f'<text x="{w / 2:.1f}" y="{h - 8}" text-anchor="middle" font-size="11">{_esc(xlabel)}</text>',
            f'<text x="12" y="{h / 2:.1f}" font-size="11" transform="rotate(-90 12 {h / 2:.1f})" '
            f'text-anchor="middle">{_esc(ylabel)}</text>',
            f'<text x="{p}" y="{h - p + 14}" font-size="9">{self.x0:.3g}</text>',
            f'<text x="{w - p}" y="{h - p + 14}" font-size="9" text-anchor="end">{self.x1:.3g}</text>',
            f'<text x="{p - 4}" y="{h - p}" font-size="9" text-anchor="end">{self.y0:.3g}</text>',
            f'<text x="{p - 4}" y="{p + 4}" font-size="9" text-anchor="end">{self.y1:.3g}</text>',
        ]


def _span(vals):
    vals = np.asarray(vals, dtype=np.float64)
    vals = vals[np.isfinite(vals)]
    if vals.size == 0:
        return 0.0, 1.0
    lo, hi = float(vals.min()), float(vals.max())
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    return lo, hi


def _esc(text: str) -> str:
    return str(text).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def scatter_svg(xy: np.ndarray, labels, title: str) -> str:
    fr = _Frame(xy[:, 0], xy[:, 1])
    out = fr.axes(title, "PC1", "PC2")
    for (x, y), c in zip(xy.tolist(), np.asarray(labels).tolist()):
        out.append(f'<circle cx="{fr.x(x):.2f}" cy="{fr.y(y):.2f}" r="2.5" '
                   f'fill="{_PALETTE[int(c) % len(_PALETTE)]}" fill-opacity="0.7"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def lines_svg(x, series: dict, title: str, xlabel: str) -> str:
    ys = np.concatenate([np.asarray(v, dtype=np.float64) for v in series.values()])
    fr = _Frame(x, ys)
    out = fr.axes(title, xlabel, "value")
    for j, (name, vals) in enumerate(series.items()):
        pts = [(xi, yi) for xi, yi in zip(x, vals) if np.isfinite(yi)]
        color = _PALETTE[j % len(_PALETTE)]
        coords = " ".join(f"{fr.x(a):.2f},{fr.y(b):.2f}" for a, b in pts)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        out.append(f'<text x="{fr.w - fr.pad + 2}" y="{fr.pad + 12 * j}" font-size="9" '
                   f'fill="{color}">{_esc(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def pca_2d(x: np.ndarray) -> np.ndarray:
    """Project rows onto the top two principal axes (sign fixed by the largest loading)."""
    x = np.asarray(x, dtype=np.float64)
    xc = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(xc, full_matrices=False)
    comps = vt[:2]
    if len(comps) < 2:
        comps = np.vstack([comps, np.zeros((2 - len(comps), x.shape[1]))])
    signs = np.sign(comps[np.arange(2), np.abs(comps).argmax(axis=1)])
    comps = comps * np.where(signs == 0, 1.0, signs)[:, None]
    return xc @ comps.T


# --- commands -------------------------------------------------------------------------


def _dataset_from_run(run: dict):
    if run["data_dir"] is not None:
        return load_dataset(run["data_dir"], run["train"].dims.classes)
    return generate(SyntheticSpec.from_dict(run["dataset"]))


def cmd_train(args) -> int:
    run = load_run_config(args.config)
    config = seed_override(run["train"])
    dataset = _dataset_from_run(run)
    if run["forget_ids_out"]:
        ids = sample_forget(dataset, run["forget_rate"], run["stratified"], config.seed)
        write_ids(run["forget_ids_out"], ids)
    t0 = time.perf_counter()
    if args.forget_ids:
        model = retrain_oracle(config, dataset, read_ids(args.forget_ids))
    else:
        from .trainer import train

        model = train(config, dataset)
    log.info("trained in %.1f s", time.perf_counter() - t0)
    save_model(args.out, model)
    csv_path = run["epoch_log"] or args.out + ".epochs.csv"
    write_csv(csv_path, EPOCH_COLUMNS, [[_fmt(h[c]) for c in EPOCH_COLUMNS] for h in model.history])
    print(f"wrote {args.out} ({len(model.history)} epochs, log {csv_path})")
    return 0


def cmd_unlearn(args) -> int:
    model = load_model(args.ckpt)
    ids = read_ids(args.forget_ids)
    t0 = time.perf_counter()
    removed = delete(model.memory, ids)
    elapsed = time.perf_counter() - t0
    save_model(args.out, model)
    print(f"deleted {removed} entries in {elapsed:.6f} s; live {model.memory.live_count}")
    return 0


def cmd_eval(args) -> int:
    model = load_model(args.ckpt)
    oracle = load_model(args.oracle) if args.oracle else None
    dataset = load_dataset(args.data, model.dims.classes)
    forget = read_ids(args.forget_ids)
    strategy = FusionStrategy(args.strategy, args.k if args.k is not None else model.config.k_infer,
                              args.tau if args.tau is not None else model.config.tau)
    report = evaluate_unlearning(model, oracle, dataset, forget, seed=args.seed, strategy=strategy)
    text = report.to_json()
    if args.report:
        atomic_write(args.report, (text + "\n").encode())
    print(text)
    return 0


def _class_features(model, data) -> np.ndarray:
    """Class-token features of each sample paired with its own memory value."""
    mem, dims = model.memory, model.dims
    feats = []
    with no_grad():
        for s in range(0, len(data), 256):
            part = slice(s, s + 256)
            z = backbone.embed_patches(model.params, data.images[part], dims)
            ex = backbone.adapter(model.params, Tensor(mem.values[mem.rows(data.ids[part])]))
            seq = backbone.assemble_input(model.params, z, ex, backbone.BOTH)
            feats.append(backbone.encode_sequence(model.params, seq, dims).data)
    return np.concatenate(feats)


def export_tokens2d(model, dataset, out_dir, _args) -> list[str]:
    mem = model.memory
    live = mem.live_ids()
    train = dataset.split("train")
    label_of = dict(zip(train.ids.tolist(), train.labels.tolist()))
    missing = [int(i) for i in live if int(i) not in label_of]
    if missing:
        raise DataError(f"memory ids missing from the dataset train split: {missing[:5]}")
    labels = [label_of[int(i)] for i in live]
    written = []
    xy = pca_2d(mem.values[mem.rows(live)])
    written += _write_2d(out_dir, "values2d", live, xy, labels, "exemplar values (PCA)")
    data = train.by_ids(live)
    xy = pca_2d(_class_features(model, data))
    written += _write_2d(out_dir, "features2d", data.ids, xy, data.labels, "class-token features (PCA)")
    return written


def _write_2d(out_dir, stem, ids, xy, labels, title) -> list[str]:
    csv_path = os.path.join(out_dir, stem + ".csv")
    svg_path = os.path.join(out_dir, stem + ".svg")
    write_csv(csv_path, ("id", "x", "y", "label"),
              [[int(i), f"{a:.6g}", f"{b:.6g}", int(c)] for i, (a, b), c in zip(ids, xy.tolist(), labels)])
    atomic_write(svg_path, scatter_svg(xy, labels, title).encode())
    return [csv_path, svg_path]


def export_neighbors(model, dataset, out_dir, args) -> list[str]:
    strategy = FusionStrategy(args.strategy, args.k or model.config.k_infer, model.config.tau)
    forget = read_ids(args.forget_ids) if args.forget_ids else []
    train = dataset.split("train")
    if forget:
        queries = train.by_ids(forget[:args.queries])
    else:
        queries = dataset.split("test")
        queries = queries.subset(np.arange(min(args.queries, len(queries))))
    keys = model.encoder.encode_many(queries.images)
    states = [("pre", model.memory)]
    if forget:
        post = model.memory.copy()
        delete(post, forget)
        states.append(("post", post))
    rows = []
    for name, mem in states:
        for qid, nb in zip(queries.ids.tolist(), retrieve_many(mem, keys, strategy.K)):
            w = neighbor_weights(nb.sims, strategy)
            for rank, (nid, sim, wt) in enumerate(zip(nb.ids.tolist(), nb.sims.tolist(), w.tolist()), 1):
                rows.append([qid, name, rank, nid, f"{sim:.8g}", f"{wt:.8g}"])
    path = os.path.join(out_dir, "neighbors.csv")
    write_csv(path, ("query_id", "state", "rank", "neighbor_id", "similarity", "weight"), rows)
    return [path]


def export_curves(model, _dataset, out_dir, _args) -> list[str]:
    hist = model.history
    if not hist:
        raise DataError("checkpoint has no training history to plot")
    csv_path = os.path.join(out_dir, "curves.csv")
    write_csv(csv_path, EPOCH_COLUMNS, [[_fmt(h[c]) for c in EPOCH_COLUMNS] for h in hist])
    x = [h["epoch"] for h in hist]
    written = [csv_path]
    for stem, cols in (("loss", ("train_loss", "p_s_probe")), ("accuracy", ("val_acc",))):
        series = {c: [float(h[c]) for h in hist] for c in cols}
        path = os.path.join(out_dir, f"curves_{stem}.svg")
        atomic_write(path, lines_svg(x, series, stem, "epoch").encode())
        written.append(path)
    return written


EXPORTS = {"tokens2d": export_tokens2d, "neighbors": export_neighbors, "curves": export_curves}


def cmd_export(args) -> int:
    if args.kind not in EXPORTS:
        raise ConfigError(f"unknown export kind {args.kind!r}; choose from {', '.join(EXPORTS)}")
    model = load_model(args.ckpt)
    dataset = load_dataset(args.data, model.dims.classes) if args.data else None
    if dataset is None and args.kind != "curves":
        raise ConfigError(f"export {args.kind} needs --data")
    os.makedirs(args.out, exist_ok=True)
    for path in EXPORTS[args.kind](model, dataset, args.out, args):
        print(path)
    return 0


def cmd_gen_data(args) -> int:
    with open(args.spec) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.spec}: invalid JSON ({exc})") from None
    ds = generate(SyntheticSpec.from_dict(raw))
    save_dataset(ds, args.out)
    counts = {s: int((ds.splits == s).sum()) for s in ("train", "val", "test")}
    print(f"wrote {len(ds)} samples to {args.out} {counts}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="forgekey", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a run config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--forget-ids", help="exclude these ids (retrain oracle)")
    t.set_defaults(func=cmd_train)

    u = sub.add_parser("unlearn", help="delete memory entries from a checkpoint")
    u.add_argument("--ckpt", required=True)
    u.add_argument("--forget-ids", required=True)
    u.add_argument("--out", required=True)
    u.set_defaults(func=cmd_unlearn)

    e = sub.add_parser("eval", help="unlearning metrics report")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--oracle")
    e.add_argument("--data", required=True)
    e.add_argument("--forget-ids", required=True)
    e.add_argument("--strategy", default="ensemble", choices=["ensemble", "softmax", "rank"])
    e.add_argument("--k", type=int)
    e.add_argument("--tau", type=float)
    e.add_argument("--seed", type=int, default=0, help="seed for the test-split halving")
    e.add_argument("--report")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export", help="CSV/SVG exports")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--data")
    x.add_argument("--kind", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--forget-ids")
    x.add_argument("--strategy", default="ensemble", choices=["ensemble", "softmax", "rank"])
    x.add_argument("--k", type=int)
    x.add_argument("--queries", type=int, default=50)
    x.set_defaults(func=cmd_export)

    g = sub.add_parser("gen-data", help="write a synthetic dataset directory")
    g.add_argument("--spec", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ForgekeyError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - last-resort exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
