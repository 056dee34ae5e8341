"""Command-line entry point.

Exit codes: 0 success, 1 check failure, 2 usage/config error, 3 data error,
4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import knn
from .errors import ConfigError, ContractError, DatasetError, FormatError, KnnSidError
from .evaluation import DatasetManifest, MetricReport, confusion, metrics
from .features import SpectrogramConfig, log_mel_block_array, read_wav
from .nn import NetworkConfig, load_network, save_network
from .pipeline import (
    KnnNet,
    TrainConfig,
    TrainedExtractor,
    build_knn_net,
    featurize_manifest,
    feature_path,
    load_feature_config,
    load_model,
    save_model,
    train_stage1,
)
from .features import read_feature_cache
from .selfcheck import run_selfcheck

log = logging.getLogger("knnsid")

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_DATA, EXIT_IO = 0, 1, 2, 3, 4

CHECKPOINT_MODEL = "model.tknm"
CHECKPOINT_META = "train_meta.json"
HISTORY_FILE = "history.json"


# --- config --------------------------------------------------------------------


def load_run_config(args) -> dict:
    """Defaults, then the ``--config`` JSON file, then explicit flags."""
    cfg = {"features": {}, "network": {}, "train": {}, "k": knn.DEFAULT_K, "seed": 7}
    if getattr(args, "config", None):
        try:
            user = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc})") from exc
        for key in ("features", "network", "train"):
            cfg[key].update(user.get(key, {}))
        for key in ("k", "seed"):
            if key in user:
                cfg[key] = user[key]
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "k", None) is not None:
        cfg["k"] = args.k
    if getattr(args, "epochs", None) is not None:
        cfg["train"]["max_epochs"] = args.epochs
    try:
        features = SpectrogramConfig(**cfg["features"])
        network = NetworkConfig(**cfg["network"])
        train = TrainConfig(**{**cfg["train"], "seed": cfg["seed"]})
    except TypeError as exc:
        raise ConfigError(f"unknown configuration key: {exc}") from exc
    if int(cfg["k"]) < 1:
        raise ConfigError(f"k must be >= 1, got {cfg['k']}")
    return {"features": features, "network": network, "train": train, "k": int(cfg["k"]), "seed": int(cfg["seed"])}


def _require_file(path, what):
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


# --- commands ------------------------------------------------------------------


def cmd_synth(args) -> int:
    from .synth import generate_corpus

    cfg = load_run_config(args)
    manifest = generate_corpus(args.singers, args.songs, args.duration, cfg["seed"], args.out, jobs=args.jobs)
    path = Path(args.out) / "manifest.jsonl"
    print(path)
    log.info("wrote %d songs", len(manifest))
    return EXIT_OK


def cmd_featurize(args) -> int:
    cfg = load_run_config(args)
    manifest = DatasetManifest.load(_require_file(args.manifest, "manifest"))
    counts = featurize_manifest(manifest, cfg["features"], args.out, jobs=args.jobs)
    short = [s for s, n in counts.items() if n == 0]
    for s in short:
        warnings.warn(f"song {s} is shorter than one block")
    print(f"{len(counts)} songs, {sum(counts.values())} blocks -> {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_run_config(args)
    manifest = DatasetManifest.load(_require_file(args.manifest, "manifest"))
    feat_cfg = load_feature_config(args.features)
    extractor, singers = train_stage1(manifest, args.features, cfg["network"], cfg["train"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_network(extractor.network, out / CHECKPOINT_MODEL)
    (out / HISTORY_FILE).write_text(json.dumps({"best_epoch": extractor.best_epoch, "epochs": extractor.history}, indent=2))
    (out / CHECKPOINT_META).write_text(json.dumps({
        "feature_config": feat_cfg.to_dict(),
        "network": cfg["network"].to_dict(),
        "train": cfg["train"].to_dict(),
        "singers": singers,
        "best_epoch": extractor.best_epoch,
    }, indent=2))
    best = extractor.history[extractor.best_epoch]
    print(f"best epoch {extractor.best_epoch}: val block accuracy {best['val_accuracy']:.4f} -> {out}")
    return EXIT_OK


def cmd_build_ref(args) -> int:
    cfg = load_run_config(args)
    ckpt = Path(args.checkpoint)
    meta = json.loads(_require_file(ckpt / CHECKPOINT_META, "checkpoint metadata").read_text())
    feat_cfg = load_feature_config(args.features)
    if SpectrogramConfig.from_dict(meta["feature_config"]) != feat_cfg:
        raise ConfigError(f"feature config of {args.features} does not match the one the checkpoint was trained on")
    manifest = DatasetManifest.load(_require_file(args.manifest, "manifest"))
    network = load_network(ckpt / CHECKPOINT_MODEL, rng_seed=meta["train"]["seed"])
    extractor = TrainedExtractor(network, best_epoch=meta.get("best_epoch", 0))
    net = build_knn_net(extractor, manifest, args.features, cfg["k"], singers=meta["singers"])
    if args.centroids:
        net = KnnNet(net.extractor, knn.compress_reference(net.head, args.centroids, seed=cfg["seed"]),
                     net.k, net.singers, net.feature_config)
    save_model(net, args.out)
    print(f"reference {net.head.dim}x{net.head.n_columns}, k={net.k} -> {args.out}")
    return EXIT_OK


def _song_inputs(args, net: KnnNet):
    """Yield ``(song_id, true_singer_or_None, blocks)``; missing audio raises."""
    if args.manifest:
        manifest = DatasetManifest.load(_require_file(args.manifest, "manifest"))
        records = manifest.split(args.split) if args.split != "all" else list(manifest)
        for r in records:
            if args.features:
                blocks = read_feature_cache(feature_path(args.features, r.song_id))
            else:
                blocks = log_mel_block_array(read_wav(manifest.resolve(r), net.feature_config.sample_rate), net.feature_config)
            yield r.song_id, r.singer_id, blocks
    for wav in args.wav or []:
        clip = read_wav(_require_file(wav, "audio file"), net.feature_config.sample_rate)
        yield Path(wav).stem, None, log_mel_block_array(clip, net.feature_config)


def _prediction_record(net: KnnNet, song_id, true, blocks, detail: bool) -> dict:
    pred = net.predict_song(blocks, song_id, detail=detail)
    rec = {"song_id": song_id, "predicted": net.singers[pred.predicted]}
    if true is not None:
        rec["true"] = true
    if detail:
        rec["blocks"] = [
            {
                "block_index": i,
                "predicted": net.singers[lab],
                "neighbors": [
                    {"column": int(c), "singer": net.singers[int(net.head.labels[c])], "score": float(s)}
                    for c, s in zip(ns.indices, ns.scores)
                ],
            }
            for i, (lab, ns) in enumerate(zip(pred.block_predictions, pred.neighbors))
        ]
    return rec


def cmd_predict(args) -> int:
    if not args.manifest and not args.wav:
        raise ConfigError("predict needs --manifest or one or more WAV files")
    net = load_model(args.bundle)
    lines = []
    for song_id, true, blocks in _song_inputs(args, net):
        if len(blocks) == 0:
            warnings.warn(f"{song_id}: shorter than one block (1 s); skipped")
            continue
        lines.append(json.dumps(_prediction_record(net, song_id, true, blocks, args.detail)))
    text = "".join(line + "\n" for line in lines)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _write_report(out: Path, name: str, pairs, labels) -> MetricReport:
    cm = confusion(pairs, labels)
    rep = metrics(cm)
    cm.to_csv(out / f"confusion_{name}.csv")
    return rep


def cmd_evaluate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    song_pairs, block_pairs, extra = [], [], {}
    if args.predictions:
        for line in _require_file(args.predictions, "predictions").read_text().splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            if "true" not in rec:
                raise DatasetError(f"prediction for {rec.get('song_id')} has no 'true' label")
            song_pairs.append((rec["true"], rec["predicted"]))
            block_pairs.extend((rec["true"], b["predicted"]) for b in rec.get("blocks", []))
        labels = sorted({x for pair in song_pairs + block_pairs for x in pair})
    else:
        if not (args.bundle and args.manifest):
            raise ConfigError("evaluate needs --bundle and --manifest, or --predictions")
        net = load_model(args.bundle)
        labels = list(net.singers)
        soft_pairs = []
        for song_id, true, blocks in _song_inputs(argparse.Namespace(**{**vars(args), "wav": None}), net):
            if len(blocks) == 0:
                warnings.warn(f"{song_id}: shorter than one block; excluded from evaluation")
                continue
            pred = net.predict_song(blocks, song_id)
            song_pairs.append((true, net.singers[pred.predicted]))
            block_pairs.extend((true, net.singers[b]) for b in pred.block_predictions)
            soft_pairs.append((true, net.singers[net.predict_song_softmax(blocks, song_id).predicted]))
        if net.extractor.network.has_head:
            extra["softmax_song_level"] = _write_report(out, "softmax_song", soft_pairs, labels).to_dict()
    if not song_pairs:
        raise DatasetError("nothing to evaluate")
    report = {"song_level": _write_report(out, "song", song_pairs, labels).to_dict()}
    if block_pairs:
        report["block_level"] = _write_report(out, "block", block_pairs, labels).to_dict()
    report.update(extra)
    (out / "report.json").write_text(json.dumps(report, indent=2))
    text = "".join(f"== {level} ==\n{MetricReport.from_dict(r).to_text()}\n" for level, r in report.items())
    (out / "report.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    results = run_selfcheck(seed=args.seed if args.seed is not None else 7, quick=args.quick,
                            inject_fault=args.inject_fault)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<24} {r.detail} ({r.seconds:.2f}s)")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"failed: {', '.join(failed)}")
        return EXIT_CHECK
    return EXIT_OK


# --- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config; flags override it")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--jobs", type=int, default=1, help="worker processes for rendering/featurization")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="knnsid", description="Singer identification with a cosine KNN output layer.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    s.add_argument("--singers", type=int, default=8)
    s.add_argument("--songs", type=int, default=20)
    s.add_argument("--duration", type=float, default=6.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("featurize", parents=[common], help="cache log-mel blocks for every song")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_featurize)

    s = sub.add_parser("train", parents=[common], help="stage 1: train extractor + softmax head")
    s.add_argument("--manifest", required=True)
    s.add_argument("--features", required=True)
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("build-ref", parents=[common], help="stage 2: freeze and attach the KNN layer")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--features", required=True)
    s.add_argument("--k", type=int, default=None)
    s.add_argument("--centroids", type=int, default=None, help="compress to N k-means centroids per singer")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_ref)

    for name, func, helptext in (("predict", cmd_predict, "song-level predictions as JSON lines"),
                                 ("evaluate", cmd_evaluate, "block- and song-level metric reports")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--bundle")
        s.add_argument("--manifest")
        s.add_argument("--features", help="read cached blocks instead of decoding audio")
        s.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
        s.add_argument("--out")
        s.set_defaults(func=func)
    predict = sub.choices["predict"]
    predict.add_argument("wav", nargs="*")
    predict.add_argument("--detail", action="store_true", help="include per-block neighbor sets")
    evaluate = sub.choices["evaluate"]
    evaluate.add_argument("--predictions", help="evaluate an existing predictions JSONL file")
    evaluate.set_defaults(detail=False, wav=None)

    s = sub.add_parser("selfcheck", parents=[common], help="run the built-in oracle checks")
    s.add_argument("--quick", action="store_true", help="sub-second subset")
    s.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_selfcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "evaluate" and not args.out:
        parser.error("evaluate requires --out")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, ContractError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except KnnSidError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
