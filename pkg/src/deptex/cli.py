"""``deptex`` command line: data generation, training, evaluation, feature
extraction, the texture manifold and ordered confusion matrices.

Every artifact records the hash of the configuration that produced it.
Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numerical failure.
"""
import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import manifold, ordering, serialization, svg, synthetic, trainer
from . import tensor as T
from .backbone import BackboneConfig
from .errors import ConfigError, DataError, DeptexError, NumericalError, ParameterError
from .head import HeadConfig, build_model
from .tensor import grad_check, no_grad
from .tsne import tsne_fit

log = logging.getLogger("deptex")

HASH_PREFIX = "# config_hash="


# ---------------------------------------------------------------- helpers


def _write_json(path, data):
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _read_hash(path):
    with open(path) as fh:
        first = fh.readline()
    return first[len(HASH_PREFIX):].strip() if first.startswith(HASH_PREFIX) else None


def _load_dataset(cfg, path):
    root = Path(path or cfg.dataset.root)
    if not root.is_dir():
        raise DataError(f"dataset directory {root} does not exist; run `deptex gen-data` or pass --data")
    return synthetic.load_image_dir(root)


def _model_from_checkpoint(directory):
    meta = trainer.read_checkpoint_meta(directory)["meta"]
    cfg = config_mod.from_dict(meta["config"])
    model = build_model(cfg.backbone_config(), cfg.head, len(meta["class_names"]), cfg.seed)
    trainer.load_checkpoint(directory, model)
    return model, cfg, meta


def _write_embedding_csv(path, ids, coords, splits, classes, config_hash):
    lines = [HASH_PREFIX + config_hash, "id,x,y,split,class"]
    lines += [f"{i},{x:.17g},{y:.17g},{s},{c}" for i, (x, y), s, c in zip(ids, coords, splits, classes)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_embedding_csv(path):
    rows = [line.split(",") for line in Path(path).read_text().splitlines() if line and not line.startswith("#")]
    if not rows or rows[0] != ["id", "x", "y", "split", "class"]:
        raise DataError(f"{path}: expected header id,x,y,split,class")
    body = rows[1:]
    coords = np.array([[float(r[1]), float(r[2])] for r in body]).reshape(-1, 2)
    return [r[0] for r in body], coords, [r[3] for r in body], [r[4] for r in body]


# ---------------------------------------------------------------- commands


def cmd_gen_data(cfg, args):
    root = Path(args.root or cfg.dataset.root)
    ds = synthetic.generate(per_class=cfg.dataset.per_class, size=cfg.dataset.size, seed=cfg.seed,
                            train_fraction=cfg.dataset.train_fraction)
    ds.meta["config_hash"] = cfg.hash()
    synthetic.save_dataset(ds, root)
    print(f"wrote {len(ds)} images ({int((ds.splits == 'train').sum())} train) to {root}")


def _prepare(cfg, ds):
    tr, te = ds.subset("train"), ds.subset("test")
    if not len(tr):
        raise DataError("dataset has no training images")
    patches, labels = trainer.prepare_train_patches(tr.images, tr.labels, cfg.train)
    stats = trainer.ChannelStats.compute(patches)
    eval_x = trainer.prepare_eval_inputs(te.images, cfg.train, stats) if len(te) else None
    return patches, labels, stats, eval_x, te


def cmd_train(cfg, args):
    ds = _load_dataset(cfg, args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    patches, labels, stats, eval_x, te = _prepare(cfg, ds)
    chash = cfg.hash()
    model = build_model(cfg.backbone_config(), cfg.head, len(ds.class_names), cfg.seed)
    opt = trainer.SGD(model.param_groups(cfg.train.head_lr_mult), cfg.train)
    state = None
    if args.resume:
        saved = trainer.read_checkpoint_meta(args.resume)
        if saved["config_hash"] != chash and not args.force:
            raise ConfigError(f"checkpoint {args.resume} has config hash {saved['config_hash']}, "
                              f"current config hashes to {chash}; refusing to resume (use --force to override)")
        state, _ = trainer.load_checkpoint(args.resume, model, opt)
        metrics = out / "metrics.jsonl"
        metrics.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in state.history))
    else:
        (out / "metrics.jsonl").write_text("")
    meta = {"config": cfg.to_dict(), "class_names": ds.class_names, "channel_stats": stats.to_dict()}
    state = trainer.fit(model, patches, labels, cfg.train, stats, eval_x, te.labels if eval_x is not None else None,
                        opt=opt, state=state, out_dir=out, config_hash=chash, meta=meta)
    trainer.save_checkpoint(out / "checkpoint", model, opt, state, cfg.train, chash, meta)
    summary = {"config_hash": chash, "variant": cfg.head.variant, "epochs": state.epoch, "scales": cfg.train.scales,
               "train_patches": len(patches)}
    if eval_x is not None:
        acc, cm = trainer.evaluate(model, eval_x, te.labels, ds.class_names)
        cm.to_csv(out / "confusion.csv", chash)
        summary["eval_acc"] = acc
        print(f"{cfg.head.variant}: test accuracy {acc:.4f} after {state.epoch} epochs")
    _write_json(out / "summary.json", summary)


def cmd_eval(cfg, args):
    model, ckpt_cfg, meta = _model_from_checkpoint(args.checkpoint)
    ds = _load_dataset(cfg, args.data).subset(args.split)
    if not len(ds):
        raise DataError(f"split {args.split!r} is empty")
    if ds.class_names != meta["class_names"]:
        raise DataError(f"dataset classes {ds.class_names} differ from checkpoint classes {meta['class_names']}")
    stats = trainer.ChannelStats.from_dict(meta["channel_stats"])
    x = trainer.prepare_eval_inputs(ds.images, ckpt_cfg.train, stats)
    acc, cm = trainer.evaluate(model, x, ds.labels, ds.class_names)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cm.to_csv(out / "confusion.csv", ckpt_cfg.hash())
    print(f"{args.split} accuracy {acc:.4f} ({len(ds)} images)")


def cmd_extract(cfg, args):
    model, ckpt_cfg, meta = _model_from_checkpoint(args.checkpoint)
    if args.layer not in model.head.layers:
        raise ConfigError(f"layer {args.layer!r} is not produced by the {model.variant} head; "
                          f"available layers: {', '.join(model.head.layers)}")
    ds = _load_dataset(cfg, args.data)
    stats = trainer.ChannelStats.from_dict(meta["channel_stats"])
    x = trainer.prepare_eval_inputs(ds.images, ckpt_cfg.train, stats)
    model.eval()
    feats = []
    with no_grad():
        for i in range(0, len(x), 128):
            feats.append(model.extract(x[i : i + 128], args.layer))
    feats = np.concatenate(feats)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    serialization.save(out / "features.tnsr", feats)
    chash = ckpt_cfg.hash()
    lines = [HASH_PREFIX + chash, "id,split,class,label"]
    lines += [f"{i},{s},{ds.class_names[y]},{y}" for i, s, y in zip(ds.ids, ds.splits, ds.labels)]
    (out / "features.csv").write_text("\n".join(lines) + "\n")
    print(f"wrote {feats.shape[0]} x {feats.shape[1]} {args.layer} features to {out / 'features.tnsr'}")


def read_features(stem):
    stem = Path(stem)
    if stem.is_dir():
        stem = stem / "features"
    X = serialization.load(stem.with_suffix(".tnsr"), expected_rank=2)
    csv = stem.with_suffix(".csv")
    if not csv.exists():
        raise DataError(f"feature sidecar {csv} not found")
    rows = [line.split(",") for line in csv.read_text().splitlines() if line and not line.startswith("#")]
    if rows[0] != ["id", "split", "class", "label"]:
        raise DataError(f"{csv}: expected header id,split,class,label")
    rows = rows[1:]
    if len(rows) != len(X):
        raise DataError(f"{csv} lists {len(rows)} samples for {len(X)} feature rows")
    return X, [r[0] for r in rows], np.array([r[1] for r in rows]), [r[2] for r in rows], _read_hash(csv)


def run_manifold(cfg, X, ids, splits, classes):
    """t-SNE targets on (up to ``tsne.max_train``) training rows, regressor fit, then out-of-sample embedding."""
    train_idx = np.flatnonzero(splits == "train")
    test_idx = np.flatnonzero(splits == "test")
    if len(train_idx) > cfg.tsne.max_train:
        pick = np.random.default_rng([cfg.seed, 0x75E]).choice(len(train_idx), cfg.tsne.max_train, replace=False)
        train_idx = train_idx[np.sort(pick)]
    if len(train_idx) < 4 * cfg.tsne.perplexity:
        raise ParameterError(f"{len(train_idx)} training features is too few for perplexity {cfg.tsne.perplexity}; "
                             f"need at least {int(4 * cfg.tsne.perplexity)} or lower tsne.perplexity")
    target = tsne_fit(X[train_idx], cfg.tsne, [ids[i] for i in train_idx])
    rcfg = manifold.RegressorConfig(**dict(cfg.regressor.to_dict(), input_dim=X.shape[1]))
    history = []
    model, mse = manifold.train_regressor(X[train_idx], target, rcfg, ids=target.ids, history=history)
    rows = np.concatenate([train_idx, test_idx])
    coords = manifold.embed(model, X[rows]) if len(rows) else np.zeros((0, 2))
    return target, model, mse, history, rows, coords


def cmd_manifold(cfg, args):
    X, ids, splits, classes, src_hash = read_features(args.features)
    target, model, mse, history, rows, coords = run_manifold(cfg, X, ids, splits, classes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    chash = cfg.hash()
    target.save(out / "tsne")
    model.save(out / "regressor", meta={"config_hash": chash, "final_mse": mse})
    (out / "regressor_metrics.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in history))
    _write_embedding_csv(out / "embedding.csv", [ids[i] for i in rows], coords, splits[rows],
                         [classes[i] for i in rows], chash)
    names = sorted(set(classes), key=classes.index)
    labels = [names.index(classes[i]) for i in rows]
    plot = svg.scatter(coords, labels, names, test_mask=splits[rows] == "test", title=f"texture manifold {chash}")
    (out / "manifold.svg").write_text(plot)
    _write_json(out / "summary.json", {"config_hash": chash, "features_hash": src_hash, "train_points": len(target.ids),
                                       "test_points": int((splits[rows] == "test").sum()), "tsne_kl": target.final_kl,
                                       "regressor_mse": mse})
    print(f"embedded {len(rows)} points; t-SNE KL {target.final_kl:.4f}, regressor train MSE {mse:.4g}")


def cmd_confusion(cfg, args):
    cm = trainer.ConfusionMatrix.from_csv(args.cm)
    ids, coords, splits, classes = read_embedding_csv(args.embedding)
    hashes = {cm.config_hash, _read_hash(args.embedding)}
    if len(hashes) > 1 and not args.force:
        raise ConfigError(f"inputs come from different configurations ({', '.join(sorted(map(str, hashes)))}); "
                          "pass --force to combine them anyway")
    if set(cm.class_names) != set(classes):
        raise DataError(f"confusion classes {sorted(cm.class_names)} differ from embedding classes {sorted(set(classes))}")
    centroids = ordering.class_centroids(coords, classes, cm.class_names)
    order = ordering.path_order(centroids)
    ordered = cm.permuted(order)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ordered.to_csv(out / "confusion_ordered.csv", cm.config_hash)
    (out / "confusion_ordered.svg").write_text(svg.heatmap(ordered.counts, ordered.class_names))
    wins = ordering.shuffle_wins(centroids, order, shuffles=100, seed=cfg.seed)
    _write_json(out / "ordering.json", {"order": ordered.class_names, "adjacent_distance": ordering.adjacent_distance(centroids, order),
                                        "shuffle_wins": wins, "config_hash": cm.config_hash})
    print("order: " + " ".join(ordered.class_names) + f" (beats {wins}/100 random orderings)")


def cmd_grad_check(cfg, args):
    """Finite-difference check of a small full model of each requested variant."""
    rng = np.random.default_rng(cfg.seed)
    bcfg = BackboneConfig(widths=[4, 4], blocks=[1, 1], input_size=(8, 8))
    worst = 0.0
    for variant in args.variants.split(","):
        hcfg = HeadConfig(variant=variant, codewords=3, texture_dim=3, spatial_dim=3, fc2_dim=5, enc_codewords=3, enc_channels=3)
        model = build_model(bcfg, hcfg, 3, cfg.seed)
        x = rng.normal(size=(3, 3, 8, 8))
        y = np.array([0, 1, 2])
        model.train()

        def loss():
            return T.cross_entropy_loss(model(x), y)

        err = grad_check(loss, [p for _, p in model.named_parameters()], max_elements=args.max_elements, seed=cfg.seed, floor=args.floor)
        worst = max(worst, err)
        print(f"{variant}: max relative error {err:.3e}")
    if worst >= args.tolerance:
        raise NumericalError(f"gradient check failed: {worst:.3e} >= {args.tolerance:g}")


# ---------------------------------------------------------------- entry point


def build_parser():
    p = argparse.ArgumentParser(prog="deptex", description=__doc__.split("\n\n")[0])
    p.add_argument("--config", help="TOML configuration file")
    p.add_argument("--seed", type=int, help="seed for every seeded stage (overrides the config)")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE", help="dotted config override, repeatable")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render the synthetic texture set to disk")
    g.add_argument("--root", help="dataset directory (default: dataset.root)")

    t = sub.add_parser("train", help="train one head variant")
    t.add_argument("--data", help="image directory (default: dataset.root)")
    t.add_argument("--variant", choices=("dep", "gap", "encoding"))
    t.add_argument("--scales", help="comma-separated training scales, e.g. 48,64,96")
    t.add_argument("--resume", help="checkpoint directory to continue from")
    t.add_argument("--force", action="store_true", help="resume even if the config hash differs")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data")
    e.add_argument("--split", default="test", choices=("train", "test"))

    x = sub.add_parser("extract", help="export features from one layer")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--data")
    x.add_argument("--layer", default="fc2")

    m = sub.add_parser("manifold", help="t-SNE targets, manifold regressor, out-of-sample embedding")
    m.add_argument("--features", required=True, help="feature directory or file stem from `extract`")

    c = sub.add_parser("confusion", help="reorder a confusion matrix along the manifold")
    c.add_argument("--cm", required=True)
    c.add_argument("--embedding", required=True)
    c.add_argument("--force", action="store_true", help="accept inputs with different config hashes")

    k = sub.add_parser("grad-check", help="finite-difference gradient check of small full models")
    k.add_argument("--variants", default="dep,gap,encoding")
    k.add_argument("--max-elements", type=int, default=None)
    k.add_argument("--tolerance", type=float, default=1e-4)
    k.add_argument("--floor", type=float, default=1e-4, help="smallest gradient magnitude the relative error is taken against")
    return p


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "extract": cmd_extract,
    "manifold": cmd_manifold,
    "confusion": cmd_confusion,
    "grad-check": cmd_grad_check,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    overrides = list(args.override)
    if getattr(args, "variant", None):
        overrides.append(f'head.variant="{args.variant}"')
    if getattr(args, "scales", None):
        overrides.append(f"train.scales=[{args.scales}]")
    try:
        cfg = config_mod.load(args.config, overrides, args.seed)
        COMMANDS[args.command](cfg, args)
    except DeptexError as exc:
        print(f"deptex {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
