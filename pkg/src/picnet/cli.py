"""``picnet`` command line: synth, train, eval, predict, gradcheck, inspect.

Exit codes: 0 success, 1 validation or I/O error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import gradcheck as G
from . import train as TR
from .errors import NumericError, PicnetError
from .model import ModelConfig, PicnetModel

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2

CHECKPOINT_NAME = "model.ckpt"
HISTORY_NAME = "history.ndjson"


class UsageFailure(Exception):
    """Raised instead of argparse's SystemExit(2) so bad flags map to exit 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageFailure(f"{self.prog}: error: {message}")


def _size(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    try:
        vals = [int(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must be N or HxW, got {text!r}") from None
    if len(vals) == 1:
        vals = vals * 2
    if len(vals) != 2 or min(vals) < 2:
        raise argparse.ArgumentTypeError(f"size sides must be >= 2, got {text!r}")
    return vals[0], vals[1]


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="picnet", description="Two-modality patch classifier with frequency interaction and prototype compensation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic two-modality bundle")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--size", type=_size, default=(80, 80), help="raster side N or HxW (default 80)")
    s.add_argument("--bands", type=int, default=24)
    s.add_argument("--aux-channels", type=int, default=1)
    s.add_argument("--difficulty", choices=D.DIFFICULTIES, default="easy")
    s.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a model on a bundle")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help=f"output directory ({CHECKPOINT_NAME}, {HISTORY_NAME})")
    t.add_argument("--patch-size", type=int, default=14)
    t.add_argument("--pca-components", type=int, default=30)
    t.add_argument("--fim-blocks", type=int, default=4)
    t.add_argument("--channels", type=int, default=32, help="feature channels per modality")
    t.add_argument("--d-model", type=int, default=64, help="token width")
    t.add_argument("--lambda1", type=float, default=0.1)
    t.add_argument("--lambda2", type=float, default=0.1)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--epochs", type=int, default=100)
    t.add_argument("--batch", type=int, default=64)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--checkpoint-every", type=int, default=0, help="snapshot every N epochs (0 = only at the end)")
    t.add_argument("--resume", default=None, help="continue from this checkpoint up to --epochs")

    e = sub.add_parser("eval", help="OA / AA / kappa and per-class accuracy")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", choices=("train", "test"), default="test")

    r = sub.add_parser("predict", help="render a classification map as binary PPM")
    r.add_argument("--data", required=True)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--out-map", required=True)
    r.add_argument("--labeled-only", action="store_true", help="leave unlabeled pixels black")

    g = sub.add_parser("gradcheck", help="finite-difference check of every op and the tiny model")
    g.add_argument("--seed", type=int, default=0, help="first seed of the sweep")
    g.add_argument("--seeds", type=int, default=20, help="number of seeds")

    i = sub.add_parser("inspect", help="print bundle statistics")
    i.add_argument("--data", required=True)
    return p


def _echo(args: argparse.Namespace) -> None:
    cfg = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(args).items()}
    print("config " + json.dumps(cfg, sort_keys=True), flush=True)


def _threads() -> int:
    raw = os.environ.get("PICNET_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise D.ConfigError(f"PICNET_THREADS must be a positive integer, got {raw!r}")
    return n


def _model_config(args, bundle: D.DatasetBundle) -> ModelConfig:
    return ModelConfig(
        n_classes=bundle.n_classes, n_pca=args.pca_components, patch=args.patch_size, n_fim=args.fim_blocks,
        c_aux=int(bundle.aux.shape[0]), c_h=args.channels, c_x=args.channels, d_model=args.d_model,
        lambda1=args.lambda1, lambda2=args.lambda2,
    )


def cmd_synth(args) -> int:
    if not D.path_writable(args.out):
        raise D.ConfigError(f"cannot write to {args.out}")
    h, w = args.size
    bundle = D.synth_generate(args.seed, args.classes, h, w, args.bands, args.aux_channels, args.difficulty)
    D.save_bundle(bundle, args.out)
    stats = D.bundle_stats(bundle)
    print(f"wrote {args.out}: {h}x{w}, {args.bands} bands, {args.aux_channels} aux, "
          f"{stats['train_labeled']} train / {stats['test_labeled']} test labeled pixels")
    return EXIT_OK


def cmd_train(args) -> int:
    bundle = D.load_bundle(args.data)
    model_cfg = _model_config(args, bundle)
    train_cfg = TR.TrainConfig(lr=args.lr, epochs=args.epochs, batch=args.batch, seed=args.seed,
                               checkpoint_every=args.checkpoint_every)
    out = Path(args.out)
    if not D.path_writable(out):
        raise D.ConfigError(f"cannot write to {out}")
    resume = TR.load_checkpoint(args.resume) if args.resume else None
    print("model " + json.dumps(model_cfg.to_dict(), sort_keys=True))
    print("train " + json.dumps(train_cfg.to_dict(), sort_keys=True))
    print(f"parameters {PicnetModel(model_cfg, seed=0).parameter_count()}", flush=True)
    out.mkdir(parents=True, exist_ok=True)

    def report(rec):
        print(f"epoch {rec['epoch']:4d}  total {rec['total']:.6f}  ce {rec['l_ce']:.6f}  "
              f"cyc_x {rec['l_cyc_x']:.6f}  cyc_h {rec['l_cyc_h']:.6f}  train_oa {rec['train_oa']:.4f}", flush=True)

    model, history = TR.train(bundle, model_cfg, train_cfg, resume=resume,
                              checkpoint_path=out / CHECKPOINT_NAME, on_epoch=report)
    TR.save_checkpoint(TR.checkpoint_of(model), out / CHECKPOINT_NAME)
    TR.write_history(history, out / HISTORY_NAME)
    print(f"wrote {out / CHECKPOINT_NAME} and {out / HISTORY_NAME}")
    return EXIT_OK


def _load_for(bundle: D.DatasetBundle, path) -> PicnetModel:
    ckpt = TR.load_checkpoint(path)
    cfg = ckpt.model_config
    found = {"n_classes": bundle.n_classes, "bands": int(bundle.hsi.shape[0]), "c_aux": int(bundle.aux.shape[0])}
    want = {"n_classes": cfg.n_classes, "bands": int(ckpt.preprocessor.pca.mean.shape[0]), "c_aux": cfg.c_aux}
    if found != want:
        print("checkpoint config " + json.dumps(cfg.to_dict(), sort_keys=True))
        print("checkpoint expects " + json.dumps(want, sort_keys=True))
        print("bundle provides    " + json.dumps(found, sort_keys=True))
        raise D.ConfigError("checkpoint does not match bundle")
    return ckpt.build_model()


def cmd_eval(args) -> int:
    bundle = D.load_bundle(args.data)
    model = _load_for(bundle, args.checkpoint)
    res = TR.evaluate(model, bundle, args.split)
    counts = {s: np.bincount(bundle.labels(s).reshape(-1), minlength=bundle.n_classes + 1)[1:] for s in ("train", "test")}
    width = max(len("Class"), *(len(c) for c in bundle.classes))
    print(f"{'No.':>4}  {'Class':<{width}}  {'Train':>7}  {'Test':>7}  {'Acc(%)':>7}")
    for i, name in enumerate(bundle.classes):
        acc = res.per_class[i]
        shown = "    n/a" if np.isnan(acc) else f"{100 * acc:7.2f}"
        print(f"{i + 1:>4}  {name:<{width}}  {counts['train'][i]:>7}  {counts['test'][i]:>7}  {shown}")
    print(f"OA    {100 * res.oa:.2f}")
    print(f"AA    {100 * res.aa:.2f}")
    print(f"Kappa {100 * res.kappa:.2f}")
    return EXIT_OK


def cmd_predict(args) -> int:
    bundle = D.load_bundle(args.data)
    model = _load_for(bundle, args.checkpoint)
    if not D.path_writable(args.out_map):
        raise D.ConfigError(f"cannot write to {args.out_map}")
    raster = TR.predict_map(model, bundle, labeled_only=args.labeled_only)
    Path(args.out_map).write_bytes(TR.render_map(raster, bundle.palette))
    print(f"wrote {args.out_map}: {raster.shape[0]}x{raster.shape[1]}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.seeds < 1:
        raise D.ConfigError("--seeds must be >= 1")
    seeds = range(args.seed, args.seed + args.seeds)
    results = G.run_suite(seeds, full_model_seed=args.seed)
    ok = True
    for name, err, tol, passed in G.summarize(results):
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'}  {name:<20} max rel err {err:.3e}  (tol {tol:.0e})")
    print(f"{len(results)} checks over {len(seeds)} seeds: {'all passed' if ok else 'FAILURES'}")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_inspect(args) -> int:
    bundle = D.load_bundle(args.data)
    stats = D.bundle_stats(bundle)
    print(f"raster {stats['height']}x{stats['width']}, {stats['bands']} bands, {stats['aux_channels']} aux channels, "
          f"{stats['classes']} classes")
    width = max(len("Class"), *(len(c) for c in bundle.classes))
    print(f"{'Class':<{width}}  {'Train':>7}  {'Test':>7}")
    for name in bundle.classes:
        print(f"{name:<{width}}  {stats['train_histogram'][name]:>7}  {stats['test_histogram'][name]:>7}")
    print(f"{'total':<{width}}  {stats['train_labeled']:>7}  {stats['test_labeled']:>7}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
    "predict": cmd_predict, "gradcheck": cmd_gradcheck, "inspect": cmd_inspect,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageFailure as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    _echo(args)
    try:
        n_threads = _threads()
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=n_threads):
            return COMMANDS[args.command](args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (PicnetError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
