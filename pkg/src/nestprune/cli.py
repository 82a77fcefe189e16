"""Command-line entry point: ``nestprune {train,recalibrate,prune,export,eval,osp-ip}``.

Exit codes: 0 success, 1 usage, 2 data/format error, 3 numerical failure.
Results go to files; progress goes to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import data as dio
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, dump_config, load_config, parse_config
from .container import FormatError
from .model import PrunableModel, build_convnet, build_mlp
from .osp_ip import StudyConfig, run_study
from .pruning import export_coo, import_coo, prune
from .retrieval import EvalMatrix, cross_test_matrix, metric_fn, extract_embeddings
from .trainer import (NumericalError, TrainConfig, adaptive_bn_recalibrate, calibration_indices,
                      train)

log = logging.getLogger("nestprune")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


# ---- config -> objects -------------------------------------------------------

def datasets_from_config(cfg: RunConfig) -> tuple[dio.Dataset, dio.Dataset]:
    kind = cfg["dataset"]
    if kind == "mnist":
        train_ds, test_ds = dio.load_mnist(cfg.get("mnist_dir"))
    elif kind == "idx":
        train_ds = dio.load_idx(cfg["train_images"], cfg["train_labels"])
        test_ds = dio.load_idx(cfg["test_images"], cfg["test_labels"])
    elif kind == "cifar":
        train_ds = dio.load_cifar_binary(cfg["cifar_train"])
        test_ds = dio.load_cifar_binary(cfg["cifar_test"])
    elif kind == "blobs":
        full = dio.synthetic_blobs(cfg.get("blobs_classes", 4), cfg.get("blobs_per_class", 50),
                                   cfg.get("blobs_dim", 16), seed=cfg["seed"])
        tr, te = dio.stratified_split(full.labels, max(1, cfg.get("blobs_per_class", 50) // 5), cfg["seed"])
        train_ds, test_ds = full.subset(tr), full.subset(te)
    else:
        raise ConfigError(f"unknown dataset kind {kind!r}")
    rng = np.random.default_rng(0)
    if cfg.get("train_subset"):
        train_ds = train_ds.subset(np.sort(rng.permutation(len(train_ds))[:cfg["train_subset"]]))
    if cfg.get("test_subset"):
        test_ds = test_ds.subset(np.sort(rng.permutation(len(test_ds))[:cfg["test_subset"]]))
    return train_ds, test_ds


def model_from_config(cfg: RunConfig, ds: dio.Dataset) -> PrunableModel:
    _, c, h, w = ds.images.shape
    if cfg["model"] == "mlp":
        return build_mlp(c * h * w, cfg["hidden"], cfg["embed_dim"], ds.num_classes, seed=cfg["seed"],
                         batchnorm=cfg["batchnorm"])
    if cfg["model"] == "convnet":
        if h != w:
            raise ConfigError("convnet expects square images")
        return build_convnet(c, h, classes=ds.num_classes, seed=cfg["seed"])
    raise ConfigError(f"unknown model {cfg['model']!r}")


def train_config(cfg: RunConfig) -> TrainConfig:
    try:
        return TrainConfig(capacities=cfg["capacities"], lr=cfg["eta"], alpha=cfg["alpha"],
                           epochs=cfg["epochs"], batch_size=cfg["batch"], seed=cfg["seed"],
                           mode=cfg["mode"], combine=cfg["combine"], integrate=cfg["integrate"],
                           momentum=cfg["momentum"], weight_decay=cfg["weight_decay"],
                           filter_scores=cfg["filter_scores"],
                           calibration_fraction=cfg["calibration_fraction"])
    except ValueError as exc:
        where = cfg.source or "config"
        raise ConfigError(f"{where}: {exc}") from None


def _config_for_checkpoint(header: dict, override: str | None) -> RunConfig:
    if override:
        return load_config(override)
    echo = {k: v for k, v in (header.get("config") or {}).items() if v is not None}
    return parse_config(dump_config(echo), "<checkpoint config>")


def _calibration_images(cfg: RunConfig, train_ds: dio.Dataset) -> np.ndarray:
    return train_ds.images[calibration_indices(len(train_ds), cfg["calibration_fraction"], cfg["seed"])]


# ---- commands ----------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.values["seed"] = args.seed
    tcfg = train_config(cfg)
    train_ds, _ = datasets_from_config(cfg)
    model = model_from_config(cfg, train_ds)
    out = Path(args.out or cfg.get("out") or "model.ckpt")
    steps_path = out.with_name(out.name + ".steps.jsonl")
    conflicts_path = out.with_name(out.name + ".conflicts.jsonl")
    blocks = [b.name for b in model.blocks()]
    with open(steps_path, "w") as steps_fh, open(conflicts_path, "w") as conf_fh:
        def progress(epoch, report):
            steps_fh.write(json.dumps({"step": report.step, "epoch": epoch, "losses": report.losses}) + "\n")
            if report.conflicts is not None:
                for name, c in zip(blocks, report.conflicts):
                    conf_fh.write(json.dumps({"step": report.step, "block": name, "count": int(c)}) + "\n")
            if report.step % 50 == 0:
                log.info("epoch %d step %d losses %s", epoch, report.step,
                         " ".join(f"{v:.4f}" for v in report.losses))
        train(model, train_ds, tcfg, progress=progress)
    echo = dict(cfg.values)
    save_checkpoint(out, model, config=echo, seed=cfg["seed"])
    log.info("wrote %s", out)
    return 0


def _recalibrate(model, cfg, capacities, structured=False) -> None:
    train_ds, _ = datasets_from_config(cfg)
    cal = _calibration_images(cfg, train_ds)
    for c in capacities:
        adaptive_bn_recalibrate(model, c, cal, masks=model.masks(c, structured=structured))
        log.info("recalibrated batch norm for capacity %g on %d images", c, len(cal))


def cmd_recalibrate(args) -> int:
    model, header = load_checkpoint(args.checkpoint)
    cfg = _config_for_checkpoint(header, args.config)
    _recalibrate(model, cfg, args.capacities)
    save_checkpoint(args.out or args.checkpoint, model, config=header.get("config"), seed=header.get("seed"))
    return 0


def cmd_prune(args) -> int:
    if not 0.0 < args.capacity <= 1.0:
        raise UsageError(f"capacity must be in (0, 1], got {args.capacity}")
    model, header = load_checkpoint(args.checkpoint)
    if args.structured and not model.has_conv():
        raise UsageError("--structured needs a model with convolutional layers")
    # the dense network keeps the running statistics accumulated in training
    if not args.no_recalibrate and model.bn_layers() and args.capacity != 1.0:
        cfg = _config_for_checkpoint(header, args.config)
        _recalibrate(model, cfg, [args.capacity], structured=args.structured)
    sub = prune(model, args.capacity, structured=args.structured)
    out = args.out or f"subnet_{args.capacity:g}.coo"
    size = export_coo(sub, out)
    log.info("wrote %s (%d bytes, nnz per layer %s)", out, size, sub.nnz())
    return 0


def cmd_eval(args) -> int:
    metric_fn(args.metric)  # validate early
    if bool(args.checkpoint) == bool(args.artifact):
        raise UsageError("give exactly one of --checkpoint or --artifact")
    if args.checkpoint:
        model, header = load_checkpoint(args.checkpoint)
        cfg = _config_for_checkpoint(header, args.config)
    else:
        if not args.config:
            raise UsageError("--artifact evaluation needs --config for the dataset")
        cfg = load_config(args.config)
    _, test_ds = datasets_from_config(cfg)
    images, labels = test_ds.images, test_ds.labels
    if args.checkpoint:
        caps = args.capacities or [1.0]
        if not args.no_recalibrate and model.bn_layers():
            _recalibrate(model, cfg, [c for c in caps if c != 1.0])
        table = cross_test_matrix(model, caps, images, labels, metric=args.metric)
    else:
        subs = [import_coo(p) for p in args.artifact]
        fn = metric_fn(args.metric)
        sets = [extract_embeddings(s, s.capacity, images, labels) for s in subs]
        grid = [[fn(q, g) for g in sets] for q in sets]
        table = EvalMatrix([s.capacity for s in subs], args.metric, grid)
    out = args.out or "eval.json"
    table.write(out)
    log.info("wrote %s", out)
    for c, row in zip(table.capacities, table.grid):
        log.info("query %.2f: %s", c, " ".join(f"{v:.4f}" for v in row))
    return 0


def cmd_osp_ip(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.values["seed"] = args.seed
    train_ds, test_ds = datasets_from_config(cfg)
    targets = cfg.get("study_capacities") or (1.0, 0.5, 0.4, 0.3, 0.2, 0.1)
    try:
        scfg = StudyConfig(targets=targets, ip_schedule=cfg.get("ip_schedule") or (0.5, 0.4, 0.3, 0.2, 0.1),
                           seeds=cfg.get("study_seeds") or 5, epochs=cfg.get("study_epochs") or 2,
                           lr=cfg["eta"], momentum=cfg["momentum"], batch_size=cfg["batch"],
                           calibration_fraction=cfg["calibration_fraction"])
    except ValueError as exc:
        raise ConfigError(f"{cfg.source}: {exc}") from None
    result = run_study(train_ds, test_ds, scfg, progress=lambda s, t, o, i: log.info(
        "seed %d capacity %.2f osp %.4f ip %.4f", s, t, o, i))
    out = args.out or "osp_ip.json"
    Path(out).write_text(json.dumps({"rows": result.summary(), "osp": result.osp.tolist(),
                                     "ip": result.ip.tolist(), "targets": result.targets}, indent=2) + "\n")
    log.info("wrote %s", out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nestprune", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a network and write a checkpoint")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("recalibrate", help="recompute batch-norm statistics per capacity")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--capacities", type=_floats, required=True)
    r.add_argument("--config")
    r.add_argument("--out")
    r.set_defaults(func=cmd_recalibrate)

    for name in ("prune", "export"):
        q = sub.add_parser(name, help="prune a checkpoint at one capacity and write a COO artifact")
        q.add_argument("--checkpoint", required=True)
        q.add_argument("--capacity", type=float, required=True)
        q.add_argument("--structured", action="store_true")
        q.add_argument("--no-recalibrate", action="store_true")
        q.add_argument("--config")
        q.add_argument("--out")
        q.set_defaults(func=cmd_prune)

    e = sub.add_parser("eval", help="self-test / cross-test retrieval table")
    e.add_argument("--checkpoint")
    e.add_argument("--artifact", action="append")
    e.add_argument("--capacities", type=_floats)
    e.add_argument("--metric", default="map")
    e.add_argument("--no-recalibrate", action="store_true")
    e.add_argument("--config")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    o = sub.add_parser("osp-ip", help="one-shot vs iterative score-only pruning study")
    o.add_argument("--config", required=True)
    o.add_argument("--seed", type=int)
    o.add_argument("--out")
    o.set_defaults(func=cmd_osp_ip)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    logging.captureWarnings(True)
    warnings.simplefilter("default")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"nestprune: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, dio.DataError, FormatError, OSError) as exc:
        print(f"nestprune: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"nestprune: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
