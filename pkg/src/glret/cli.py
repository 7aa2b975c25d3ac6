"""Command-line entry point: gen, train, recipe, embed, knn, eval, ensemble.

Dataset directory written by ``gen``::

    meta.json                       generator settings, class counts
    {train,val,query,index}.npy     float32 feature matrices
    {train,val,query,index}.csv     id,label,true_label,tag per row
    truth.csv                       id,images  (query -> relevant index ids)

Prediction and truth CSVs use the Kaggle layout: header ``id,images`` and a
space-separated id list per row.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import embstore, knncore, retmetrics
from .ensemble import concat_weighted
from .mlhead import (
    LabeledEmbeddings,
    TrainConfig,
    extract_embeddings,
    gen_synthetic,
    init_head,
    read_glrh,
    reinit_classifier,
    train,
    write_glrh,
)

SPLITS = ("train", "val", "query", "index")
VIEWS = {"clean-only": "clean-only", "clean": "clean-only", "full-noisy": "full-noisy", "full": "full-noisy", "noisy": "full-noisy"}


class CLIError(Exception):
    pass


def subseed(seed: int, *path: int) -> int:
    """Deterministic 64-bit child seed of ``seed`` along ``path``."""
    return int(np.random.SeedSequence([seed, *path]).generate_state(1, dtype=np.uint64)[0])


# ---------------------------------------------------------------- file helpers


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(text)


def write_id_lists(path, rows: dict[str, list[str]]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "images"])
    for q, ids in rows.items():
        w.writerow([q, " ".join(ids)])
    _write_text(Path(path), buf.getvalue())


def read_id_lists(path) -> dict[str, list[str]]:
    """Read an ``id,images`` CSV into {id: [ids...]}, rejecting malformed rows."""
    out: dict[str, list[str]] = {}
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["id", "images"]:
            raise CLIError(f"{path}: expected header 'id,images', got {header}")
        for n, row in enumerate(reader, start=2):
            if len(row) != 2 or not row[0]:
                raise CLIError(f"{path}:{n}: malformed row {row}")
            if row[0] in out:
                raise CLIError(f"{path}:{n}: duplicate id {row[0]!r}")
            out[row[0]] = row[1].split()
    return out


def read_ids(path) -> list[str]:
    """Ids from a CSV with an ``id`` column, or one id per line."""
    with open(path, encoding="utf-8", newline="") as f:
        rows = [r for r in csv.reader(f) if r]
    if rows and rows[0] and rows[0][0] == "id":
        return [r[0] for r in rows[1:]]
    return [r[0] for r in rows]


def _write_split(out: Path, name: str, ids, features, labels, true_labels, clean) -> None:
    np.save(out / f"{name}.npy", np.ascontiguousarray(features, dtype="<f4"), allow_pickle=False)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "label", "true_label", "tag"])
    for row in zip(ids, labels, true_labels, clean):
        w.writerow([row[0], int(row[1]), int(row[2]), "clean" if row[3] else "noisy"])
    _write_text(out / f"{name}.csv", buf.getvalue())


@dataclass
class Dataset:
    path: Path
    meta: dict
    splits: dict[str, tuple[list[str], np.ndarray, np.ndarray, np.ndarray, np.ndarray]]

    def labeled(self, split: str) -> LabeledEmbeddings:
        _, feats, labels, _, clean = self.splits[split]
        return LabeledEmbeddings.from_arrays(feats, labels, clean)

    def view(self, name: str) -> tuple[LabeledEmbeddings, int]:
        """Training data and class count for a dataset view."""
        data = self.labeled("train")
        if VIEWS[name] == "clean-only":
            return data.subset(data.clean), int(self.meta["clean_classes"])
        return data, int(self.meta["classes"])


def load_dataset(path) -> Dataset:
    path = Path(path)
    try:
        meta = json.loads((path / "meta.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CLIError(f"{path}: not a dataset directory (meta.json missing)") from None
    splits = {}
    for name in SPLITS:
        feats = np.load(path / f"{name}.npy", allow_pickle=False)
        with open(path / f"{name}.csv", encoding="utf-8", newline="") as f:
            rows = list(csv.DictReader(f))
        if len(rows) != feats.shape[0]:
            raise CLIError(f"{path}/{name}: {len(rows)} rows in csv but {feats.shape[0]} feature rows")
        splits[name] = (
            [r["id"] for r in rows],
            feats.reshape(len(rows), int(meta["dim_in"])),
            np.array([int(r["label"]) for r in rows], dtype=np.int64),
            np.array([int(r["true_label"]) for r in rows], dtype=np.int64),
            np.array([r["tag"] == "clean" for r in rows], dtype=bool),
        )
    return Dataset(path, meta, splits)


# ---------------------------------------------------------------- gen


def cmd_gen(args) -> int:
    if args.samples_min > args.samples_max:
        raise CLIError("--samples-min exceeds --samples-max")
    if args.min_class_samples < 1 or args.query_per_class < 1 or args.index_per_class < 1:
        raise CLIError("--min-class-samples, --query-per-class and --index-per-class must be >= 1")
    ds = gen_synthetic(
        args.classes,
        args.dim_in,
        (args.samples_min, args.samples_max),
        args.noise_sigma,
        args.label_noise,
        args.seed,
        clean_classes=args.clean_classes,
    )
    true = ds.true_labels
    rng = np.random.default_rng([args.seed, 100])
    assign = np.full(true.shape[0], "train", dtype=object)
    held_out = args.query_per_class + args.index_per_class
    for c in range(ds.num_classes):
        members = rng.permutation(np.flatnonzero(true == c))
        if len(members) < args.min_class_samples:
            continue
        pos = 0
        if c < ds.clean_classes:
            assign[members[0]] = "val"
            pos = 1
        # keep at least one training sample per class
        if len(members) - pos > held_out:
            assign[members[pos : pos + args.query_per_class]] = "query"
            assign[members[pos + args.query_per_class : pos + held_out]] = "index"

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    d = ds.data
    prefix = {"train": "t", "val": "v", "query": "q", "index": "x"}
    split_ids = {}
    for name in SPLITS:
        rows = np.flatnonzero(assign == name)
        ids = [f"{prefix[name]}{i:06d}" for i in rows]
        split_ids[name] = (ids, rows)
        if name == "train":
            labels, clean = d.labels[rows], d.clean[rows]
        else:
            # held-out samples carry their true class
            labels, clean = true[rows], true[rows] < ds.clean_classes
        _write_split(out, name, ids, d.features[rows], labels, true[rows], clean)

    q_ids, q_rows = split_ids["query"]
    x_ids, x_rows = split_ids["index"]
    by_class: dict[int, list[str]] = {}
    for i, r in zip(x_ids, x_rows):
        by_class.setdefault(int(true[r]), []).append(i)
    write_id_lists(out / "truth.csv", {q: by_class.get(int(true[r]), []) for q, r in zip(q_ids, q_rows)})

    meta = {
        "classes": ds.num_classes,
        "clean_classes": ds.clean_classes,
        "dim_in": args.dim_in,
        "samples_min": args.samples_min,
        "samples_max": args.samples_max,
        "noise_sigma": args.noise_sigma,
        "label_noise": args.label_noise,
        "min_class_samples": args.min_class_samples,
        "query_per_class": args.query_per_class,
        "index_per_class": args.index_per_class,
        "seed": args.seed,
        "counts": {name: len(split_ids[name][0]) for name in SPLITS},
    }
    _write_text(out / "meta.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(" ".join(f"{k}={v}" for k, v in meta["counts"].items()))
    return 0


# ---------------------------------------------------------------- train / recipe


@dataclass(frozen=True)
class RecipeStage:
    dataset_view: str
    clean_sample_weight: float = 1.0
    reinit_classifier: bool = False
    epochs: int = 1

    def __post_init__(self):
        if self.dataset_view not in VIEWS:
            raise CLIError(f"unknown dataset_view {self.dataset_view!r}")
        object.__setattr__(self, "dataset_view", VIEWS[self.dataset_view])
        if not self.clean_sample_weight > 0:
            raise CLIError("clean_sample_weight must be > 0")
        if self.epochs < 1:
            raise CLIError("epochs must be >= 1")


DEFAULT_RECIPE = (
    RecipeStage("clean-only", 1.0, False, 10),
    RecipeStage("full-noisy", 1.0, True, 10),
    RecipeStage("full-noisy", 2.0, False, 10),
)

_TRUE = {"1", "true", "yes", "y", "t"}
_FALSE = {"0", "false", "no", "n", "f", ""}


def _parse_bool(s: str) -> bool:
    s = s.strip().lower()
    if s in _TRUE:
        return True
    if s in _FALSE:
        return False
    raise CLIError(f"not a boolean: {s!r}")


def read_stages(path) -> list[RecipeStage]:
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        want = ["dataset_view", "clean_sample_weight", "reinit_classifier", "epochs"]
        if reader.fieldnames != want:
            raise CLIError(f"{path}: expected columns {','.join(want)}, got {reader.fieldnames}")
        try:
            stages = [
                RecipeStage(
                    r["dataset_view"].strip(),
                    float(r["clean_sample_weight"]),
                    _parse_bool(r["reinit_classifier"]),
                    int(r["epochs"]),
                )
                for r in reader
            ]
        except ValueError as exc:
            raise CLIError(f"{path}: {exc}") from None
    if not stages:
        raise CLIError(f"{path}: no stages")
    return stages


def run_stage(
    ds: Dataset, head, stage: RecipeStage, config: TrainConfig, emb_dim: int, seed: int, index: int,
    epochs: int | None = None,
):
    """Train one stage; returns (initial head, TrainResult).

    ``epochs`` overrides ``stage.epochs`` (single-stage ``train`` allows 0).
    """
    data, n_classes = ds.view(stage.dataset_view)
    if not len(data):
        raise CLIError(f"stage {index}: dataset view {stage.dataset_view} is empty")
    data = data.with_clean_weight(stage.clean_sample_weight)
    if head is None:
        head = init_head(int(ds.meta["dim_in"]), emb_dim, n_classes, subseed(seed, index, 0))
    elif stage.reinit_classifier:
        head = reinit_classifier(head, n_classes, subseed(seed, index, 0))
    elif head.num_classes != n_classes:
        raise CLIError(
            f"stage {index}: head has {head.num_classes} classes but view {stage.dataset_view} "
            f"has {n_classes}; set reinit_classifier"
        )
    if head.d_in != int(ds.meta["dim_in"]):
        raise CLIError(f"stage {index}: head expects d_in {head.d_in}, data has {ds.meta['dim_in']}")
    cfg = TrainConfig(
        config.learning_rate, config.momentum, config.weight_decay,
        config.batch_size, stage.epochs if epochs is None else epochs, subseed(seed, index, 1),
    )
    return head, train(head, data, ds.labeled("val"), cfg)


def _retrieval_map(ds: Dataset, head, k: int) -> float:
    q_ids, q_feats, *_ = ds.splits["query"]
    x_ids, x_feats, *_ = ds.splits["index"]
    q = extract_embeddings(head, q_feats, q_ids)
    x = extract_embeddings(head, x_feats, x_ids)
    truth = read_id_lists(ds.path / "truth.csv")
    preds = {nl.query_id: nl.ids for nl in knncore.top_k_search(q, x, k)}
    return retmetrics.mean_ap_at_k(preds, truth, k)


def _trace_rows(stage_no: int, result) -> list[list]:
    fb = "" if result.first_batch_loss is None else repr(result.first_batch_loss)
    return [[stage_no, s.epoch, repr(s.train_loss), repr(s.val_loss), fb] for s in result.trace]


def _write_trace(path: Path, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["stage", "epoch", "train_loss", "val_loss", "first_batch_loss"])
    w.writerows(rows)
    _write_text(path, buf.getvalue())


def _config(args, epochs: int = 1) -> TrainConfig:
    try:
        return TrainConfig(args.lr, args.momentum, args.weight_decay, args.batch, epochs, args.seed)
    except ValueError as exc:
        raise CLIError(str(exc)) from None


def cmd_train(args) -> int:
    ds = load_dataset(args.data)
    if args.epochs < 0:
        raise CLIError("--epochs must be >= 0")
    head = read_glrh(args.init) if args.init else None
    stage = RecipeStage(args.view, args.clean_weight, args.reinit, 1)
    _, result = run_stage(ds, head, stage, _config(args), args.emb_dim, args.seed, 1, epochs=args.epochs)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_glrh(out, result.head)
    trace = Path(args.trace) if args.trace else out.with_suffix(".trace.csv")
    _write_trace(trace, _trace_rows(1, result))
    last = result.trace[-1]
    print(f"epochs={last.epoch} train_loss={last.train_loss:.6f} val_loss={last.val_loss:.6f}")
    return 0


def cmd_recipe(args) -> int:
    ds = load_dataset(args.data)
    stages = read_stages(args.stages) if args.stages else list(DEFAULT_RECIPE)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = _config(args)
    head = None
    trace, summary = [], []
    for i, stage in enumerate(stages, start=1):
        init, result = run_stage(ds, head, stage, config, args.emb_dim, args.seed, i)
        head = result.head
        write_glrh(out / f"stage{i}_init.glrh", init)
        write_glrh(out / f"stage{i}.glrh", head)
        trace += _trace_rows(i, result)
        m = _retrieval_map(ds, head, args.k)
        last = result.trace[-1]
        summary.append([
            i, stage.dataset_view, head.num_classes, repr(stage.clean_sample_weight),
            int(stage.reinit_classifier), stage.epochs, repr(result.first_batch_loss),
            repr(last.train_loss), repr(last.val_loss), repr(m),
        ])
        print(f"stage {i} {stage.dataset_view} classes={head.num_classes} "
              f"val_loss={last.val_loss:.6f} map@{args.k}={m:.6f}")
    _write_trace(out / "trace.csv", trace)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["stage", "dataset_view", "num_classes", "clean_sample_weight", "reinit_classifier",
                "epochs", "first_batch_loss", "train_loss", "val_loss", "map"])
    w.writerows(summary)
    _write_text(out / "summary.csv", buf.getvalue())
    return 0


# ---------------------------------------------------------------- embed / knn / eval / ensemble


def cmd_embed(args) -> int:
    head = read_glrh(args.ckpt)
    feats = np.load(args.features, allow_pickle=False)
    ids = read_ids(args.ids)
    if feats.ndim != 2 or feats.shape[0] != len(ids):
        raise CLIError(f"{len(ids)} ids but features of shape {feats.shape}")
    if feats.shape[1] != head.d_in:
        raise CLIError(f"features have dim {feats.shape[1]}, checkpoint expects {head.d_in}")
    emb = extract_embeddings(head, feats, ids)
    embstore.write_glre(args.out, emb)
    return 0


def cmd_knn(args) -> int:
    q = embstore.read_glre(args.query)
    x = embstore.read_glre(args.index)
    if q.dim != x.dim:
        raise CLIError(f"query dim {q.dim} != index dim {x.dim}")
    result = knncore.top_k_search(q, x, args.k, workers=args.workers)
    write_id_lists(args.out, {nl.query_id: nl.ids for nl in result})
    return 0


def cmd_eval(args) -> int:
    preds = read_id_lists(args.pred)
    truth = read_id_lists(args.truth)
    try:
        score = retmetrics.mean_ap_at_k(preds, truth, args.k)
    except KeyError as exc:
        raise CLIError(exc.args[0]) from None
    print(f"{score:.6f}")
    return 0


def _parse_member(spec: str) -> tuple[str, float]:
    path, sep, w = spec.rpartition(":")
    if not sep or not path:
        return spec, 1.0
    try:
        return path, float(w)
    except ValueError:
        raise CLIError(f"bad ensemble member {spec!r}; expected PATH:WEIGHT") from None


def cmd_ensemble(args) -> int:
    members = []
    for spec in args.inputs:
        path, w = _parse_member(spec)
        members.append((embstore.read_glre(path), w))
    embstore.write_glre(args.out, concat_weighted(members))
    return 0


# ---------------------------------------------------------------- parser


def _add_optim(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=1e-5)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--emb-dim", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="glret", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic dataset directory")
    p.add_argument("--classes", type=int, default=50)
    p.add_argument("--dim-in", type=int, default=32)
    p.add_argument("--samples-min", type=int, default=10)
    p.add_argument("--samples-max", type=int, default=30)
    p.add_argument("--noise-sigma", type=float, default=0.05)
    p.add_argument("--label-noise", type=float, default=0.0)
    p.add_argument("--min-class-samples", type=int, default=4)
    p.add_argument("--clean-classes", type=int, default=None,
                   help="classes in the clean view (default 40%% of --classes)")
    p.add_argument("--query-per-class", type=int, default=1)
    p.add_argument("--index-per-class", type=int, default=3)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train one stage")
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=10)
    _add_optim(p)
    p.add_argument("--view", default="clean-only", choices=sorted(VIEWS))
    p.add_argument("--clean-weight", type=float, default=1.0)
    p.add_argument("--init", help="start from this checkpoint instead of a fresh head")
    p.add_argument("--reinit", action="store_true", help="redraw the classifier of --init")
    p.add_argument("--trace", help="loss trace CSV (default: OUT with .trace.csv suffix)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("recipe", help="run a staged training recipe")
    p.add_argument("--data", required=True)
    p.add_argument("--stages", help="CSV: dataset_view,clean_sample_weight,reinit_classifier,epochs")
    _add_optim(p)
    p.add_argument("--k", type=int, default=knncore.DEFAULT_K)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_recipe)

    p = sub.add_parser("embed", help="extract normalized embeddings with a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--features", required=True, help=".npy float matrix")
    p.add_argument("--ids", required=True, help="CSV with an id column, or one id per line")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("knn", help="exact top-k lookup")
    p.add_argument("--query", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--k", type=int, default=knncore.DEFAULT_K)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_knn)

    p = sub.add_parser("eval", help="print mAP@k of a predictions CSV")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--k", type=int, default=retmetrics.MAP_K)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ensemble", help="weighted concatenation of GLRE files")
    p.add_argument("--in", dest="inputs", action="append", required=True, metavar="PATH:WEIGHT")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ensemble)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CLIError, ValueError, KeyError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
