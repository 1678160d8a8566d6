"""``opticnet`` command line: train, eval, audit, gradcheck, synth, export-features.

Exit codes: 0 success, 1 failing gradient probe, 2 usage/config/path error,
3 checkpoint does not fit the model.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

log = logging.getLogger("opticnet")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    variant: str = "opticnet71"
    input_size: int = 224
    batch_size: int = 8
    epochs: int = 30
    lr: float = 1e-4
    gamma: float = 0.1
    patience: int = 6
    lr_min: float = 1e-8
    beta1: float = 0.90
    beta2: float = 0.99
    seed: int = 0
    steps: int = 0                 # 0 = no step cap
    val_fraction: float = 0.1
    data: str = ""
    synthetic: bool = False
    classes: int = 4
    per_class: int = 16
    out: str = "runs"
    res_conv_kernel: int = 2
    stop_at_train_acc: float = 0.0  # 0 = train for the full budget
    kfold: int = 0                 # >0: retrain from scratch on each of k folds


def _coerce(tp, raw: str):
    tp = {"int": int, "float": float, "bool": bool, "str": str}.get(tp, tp)
    if tp is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"not a boolean: {raw!r}")
    return tp(raw)


def load_config_file(path) -> dict:
    """Flat ``key = value`` file; ``#`` comments; unknown keys are errors."""
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    known = {f.name: f.type for f in fields(RunConfig)}
    out = {}
    for n, line in enumerate(p.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in known:
            raise UsageError(f"{path}:{n}: unknown key {key!r}")
        try:
            out[key] = _coerce(known[key], val)
        except ValueError:
            raise UsageError(f"{path}:{n}: bad value for {key}: {val!r}") from None
    return out


def resolve_config(args) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(load_config_file(args.config))
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    return RunConfig(**values)


def _limit_threads():
    n = int(os.environ.get("OPTICNET_THREADS", "1"))
    try:
        from threadpoolctl import threadpool_limits
        threadpool_limits(n)
    except ImportError:  # pragma: no cover
        pass


def _run_dir(base) -> Path:
    d = Path(base) / time.strftime("%Y%m%d-%H%M%S")
    i = 1
    while d.exists():
        d = Path(base) / f"{time.strftime('%Y%m%d-%H%M%S')}-{i}"
        i += 1
    d.mkdir(parents=True)
    return d


def _load_split(root: Path, split: str, size: int):
    from opticnet.data import load_image_tree

    d = root / split
    return load_image_tree(d, size, size, split=split) if d.is_dir() else None


def _datasets(rc: RunConfig):
    from opticnet.data import make_synthetic

    if rc.synthetic:
        train = make_synthetic(rc.classes, rc.per_class, rc.input_size, seed=rc.seed)
        test = make_synthetic(rc.classes, max(rc.per_class // 4, 1), rc.input_size, seed=rc.seed + 1)
        test.split = "test"
        return train, test
    if not rc.data:
        raise UsageError("give --data <root> or --synthetic")
    root = Path(rc.data)
    if not root.is_dir():
        raise UsageError(f"data path not found: {root}")
    train = _load_split(root, "train", rc.input_size)
    if train is None:
        raise UsageError(f"{root} has no train/ directory")
    return train, _load_split(root, "test", rc.input_size)


def _model_config(rc: RunConfig, classes: int):
    from opticnet.model import ModelConfig
    return ModelConfig.from_variant(rc.variant, classes=classes, input_size=rc.input_size,
                                    res_conv_kernel=rc.res_conv_kernel)


def _format_metrics(cm, penalties=None) -> str:
    from opticnet.metrics import report

    m = report(cm, penalties)
    lines = [cm.format(), "", f"accuracy     {100 * m['accuracy']:.2f}%",
             f"sensitivity  {100 * m['sensitivity']:.2f}%", f"specificity  {100 * m['specificity']:.2f}%"]
    if "weighted_error_pct" in m:
        lines.append(f"weighted err {m['weighted_error_pct']:.2f}%")
    return "\n".join(lines)


def cmd_train(args) -> int:
    from opticnet import data as data_mod
    from opticnet.metrics import default_oct2017_penalties
    from opticnet.model import assemble_model
    from opticnet.training import TrainConfig, evaluate, train

    rc = resolve_config(args)
    train_ds, test_ds = _datasets(rc)
    tc = TrainConfig(batch_size=rc.batch_size, epochs=rc.epochs, lr=rc.lr, gamma=rc.gamma,
                     patience=rc.patience, lr_min=rc.lr_min, beta1=rc.beta1, beta2=rc.beta2, seed=rc.seed,
                     max_steps=rc.steps or None, stop_at_train_acc=rc.stop_at_train_acc or None)
    run_dir = _run_dir(rc.out)
    (run_dir / "config.txt").write_text(
        "".join(f"{k} = {v}\n" for k, v in dataclasses.asdict(rc).items()))
    cfg = _model_config(rc, train_ds.num_classes)

    if rc.kfold:
        folds = data_mod.kfold_split(len(train_ds), rc.kfold, rc.seed)
        for i in range(rc.kfold):
            tr, va = data_mod.fold_datasets(train_ds, folds, i)
            res = train(assemble_model(cfg, seed=rc.seed), tr, tc, va, run_dir / f"fold{i}")
            print(f"fold {i}: best monitored loss {res.best_val_loss:.4f}")
        return 0

    val_ds = None
    if rc.val_fraction > 0 and not rc.synthetic:
        train_ds, val_ds = data_mod.split(train_ds, (1 - rc.val_fraction, rc.val_fraction), rc.seed)
    model = assemble_model(cfg, seed=rc.seed)
    res = train(model, train_ds, tc, val_ds, run_dir)
    if not res.rows:
        (run_dir / "report.txt").write_text("no epochs run\n")
        print(f"no epochs run; header-only log at {res.log_path}")
        return 0
    final_acc = res.rows[-1]["train_acc"]
    print(f"steps {res.steps}  epochs {len(res.rows)}  final train accuracy {100 * final_acc:.2f}%"
          f"  best train accuracy {100 * res.best_train_acc:.2f}%  ({res.seconds:.1f}s)")
    eval_ds = test_ds if test_ds is not None else train_ds
    cm = evaluate(model, eval_ds, rc.batch_size)
    oct = default_oct2017_penalties()
    pen = oct if sorted(l.lower() for l in cm.labels) == sorted(l.lower() for l in oct.labels) else None
    text = f"evaluated on {eval_ds.split} ({len(eval_ds)} samples)\n" + _format_metrics(cm, pen)
    (run_dir / "report.txt").write_text(text + "\n")
    print(text)
    print(f"run directory: {run_dir}")
    return 0


def _penalties_arg(spec):
    from opticnet.metrics import default_oct2017_penalties, load_penalties

    if not spec:
        return None
    if spec.lower() == "oct2017":
        return default_oct2017_penalties()
    if not Path(spec).is_file():
        raise UsageError(f"penalty file not found: {spec}")
    return load_penalties(spec)


def cmd_eval(args) -> int:
    from opticnet.checkpoint import CheckpointError, load_checkpoint, read_config
    from opticnet.metrics import load_confusion
    from opticnet.model import assemble_model
    from opticnet.training import evaluate

    penalties = _penalties_arg(args.penalties)
    if args.confusion_matrix:
        if not Path(args.confusion_matrix).is_file():
            raise UsageError(f"confusion matrix file not found: {args.confusion_matrix}")
        cm = load_confusion(args.confusion_matrix)
    else:
        if not args.checkpoint or not Path(args.checkpoint).is_file():
            raise UsageError(f"checkpoint not found: {args.checkpoint}")
        rc = resolve_config(args)
        try:
            stored = read_config(args.checkpoint)
        except CheckpointError:
            stored = None
        if args.variant is None and stored is not None:
            rc.variant, rc.input_size = stored.variant, stored.input_size
            rc.res_conv_kernel = stored.res_conv_kernel
        _, test_ds = _datasets(rc)
        if test_ds is None:
            raise UsageError("no test/ split found under --data")
        model = assemble_model(_model_config(rc, test_ds.num_classes))
        load_checkpoint(model, args.checkpoint)
        cm = evaluate(model, test_ds)
    print(_format_metrics(cm, penalties))
    return 0


def cmd_audit(args) -> int:
    from opticnet.audit import layer_table, middle_conv_report
    from opticnet.model import ModelConfig, OpticNet

    cfg = ModelConfig.from_variant(args.variant, classes=args.classes, input_size=args.input_size,
                                   res_conv_kernel=args.res_conv_kernel)
    model = OpticNet(cfg)
    print(layer_table(model))
    print()
    print(middle_conv_report(args.f, args.depth))
    return 0


def cmd_gradcheck(args) -> int:
    from opticnet.gradcheck import run_suite, write_csv

    seeds = range(args.seed, args.seed + args.seeds)
    chain = range(args.seed, args.seed + args.chain_seeds)
    reports = run_suite(args.suite, seeds, chain, tol=args.tol, eps=args.eps)
    for r in reports:
        print(r.summary())
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        write_csv(reports, args.out)
    failed = [r for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} probes passed")
    return 1 if failed else 0


def cmd_synth(args) -> int:
    from opticnet.data import make_synthetic, save_image_tree

    ds = make_synthetic(args.classes, args.per_class, args.size, seed=args.seed)
    written = save_image_tree(ds, args.out, "train")
    if args.test_per_class:
        test = make_synthetic(args.classes, args.test_per_class, args.size, seed=args.seed + 1)
        written += save_image_tree(test, args.out, "test")
    print(f"wrote {len(written)} images under {args.out}")
    return 0


def cmd_export_features(args) -> int:
    from opticnet.checkpoint import load_checkpoint, read_config
    from opticnet.data import decode_image, make_synthetic
    from opticnet.model import ModelConfig, OpticNet

    if args.checkpoint:
        if not Path(args.checkpoint).is_file():
            raise UsageError(f"checkpoint not found: {args.checkpoint}")
        cfg = read_config(args.checkpoint)
    else:
        cfg = ModelConfig.from_variant(args.variant, classes=args.classes, input_size=args.input_size)
    model = OpticNet(cfg, seed=args.seed)
    if args.checkpoint:
        load_checkpoint(model, args.checkpoint)
    if args.image:
        if not Path(args.image).is_file():
            raise UsageError(f"image not found: {args.image}")
        x = decode_image(args.image, cfg.input_size, cfg.input_size)[None]
    else:
        x = make_synthetic(2, 1, cfg.input_size, seed=args.seed).images[:1]
    out = export_feature_maps(model, x, args.stage, args.out)
    print(f"wrote {out}")
    return 0


def export_feature_maps(model, images: np.ndarray, stage: int, out_dir) -> Path:
    """Write stage ``stage``'s alpha, beta and tau tensors to ``out_dir/stage<k>_features.optn``."""
    from opticnet.checkpoint import write_tensors
    from opticnet.tensor import ContractError, Tensor, no_grad

    if not 1 <= stage <= len(model.cfg.stages):
        raise ContractError(f"stage must be in [1, {len(model.cfg.stages)}], got {stage}")
    model.eval()
    with no_grad():
        model.features(Tensor(np.asarray(images, dtype=model.dtype)), capture=True)
    cap = model.stages.items[stage - 1].block.captured
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"stage{stage}_features.optn"
    write_tensors(path, {f"stage{stage}/{k}": v.data for k, v in cap.items()})
    return path


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="opticnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def run_opts(sp):
        sp.add_argument("--config", help="flat key=value config file")
        sp.add_argument("--variant")
        sp.add_argument("--input-size", dest="input_size", type=int)
        sp.add_argument("--batch-size", dest="batch_size", type=int)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--data")
        sp.add_argument("--synthetic", action="store_true", default=None)
        sp.add_argument("--classes", type=int)
        sp.add_argument("--per-class", dest="per_class", type=int)
        sp.add_argument("--res-conv-kernel", dest="res_conv_kernel", type=int)

    t = sub.add_parser("train", help="train a model")
    run_opts(t)
    t.add_argument("--epochs", type=int)
    t.add_argument("--steps", type=int, help="cap on optimizer steps")
    t.add_argument("--lr", type=float)
    t.add_argument("--gamma", type=float)
    t.add_argument("--patience", type=int)
    t.add_argument("--lr-min", dest="lr_min", type=float)
    t.add_argument("--beta1", type=float)
    t.add_argument("--beta2", type=float)
    t.add_argument("--val-fraction", dest="val_fraction", type=float)
    t.add_argument("--stop-at-train-acc", dest="stop_at_train_acc", type=float)
    t.add_argument("--kfold", type=int)
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="confusion matrix and metrics")
    run_opts(e)
    e.add_argument("--checkpoint")
    e.add_argument("--penalties", help="'oct2017' or a K x K grid file")
    e.add_argument("--confusion-matrix", dest="confusion_matrix",
                   help="score a stored confusion-matrix grid instead of running a model")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("audit", help="layer table, parameter and FLOP census")
    a.add_argument("--variant", default="opticnet71")
    a.add_argument("--classes", type=int, default=4)
    a.add_argument("--input-size", dest="input_size", type=int, default=224)
    a.add_argument("--res-conv-kernel", dest="res_conv_kernel", type=int, default=2)
    a.add_argument("--f", type=int, default=3)
    a.add_argument("--depth", type=int, default=64)
    a.add_argument("--seed", type=int, default=0)
    a.set_defaults(func=cmd_audit)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--suite", default="all")
    g.add_argument("--seeds", type=int, default=10)
    g.add_argument("--chain-seeds", dest="chain_seeds", type=int, default=3)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--eps", type=float, default=1e-5)
    g.add_argument("--out", help="CSV report path")
    g.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synth", help="write a synthetic class-tree dataset")
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--per-class", dest="per_class", type=int, default=16)
    s.add_argument("--test-per-class", dest="test_per_class", type=int, default=0)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="synthetic")
    s.set_defaults(func=cmd_synth)

    x = sub.add_parser("export-features", help="dump a stage's alpha, beta, tau tensors")
    x.add_argument("--stage", type=int, default=4)
    x.add_argument("--checkpoint")
    x.add_argument("--variant", default="opticnet71")
    x.add_argument("--classes", type=int, default=4)
    x.add_argument("--input-size", dest="input_size", type=int, default=224)
    x.add_argument("--image")
    x.add_argument("--seed", type=int, default=0)
    x.add_argument("--out", default="features")
    x.set_defaults(func=cmd_export_features)
    return p


def main(argv=None) -> int:
    from opticnet.checkpoint import CheckpointError, CheckpointMismatch
    from opticnet.data import DatasetError
    from opticnet.layers import ConfigurationError
    from opticnet.tensor import ContractError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _limit_threads()
    try:
        return args.func(args)
    except CheckpointMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (UsageError, ConfigurationError, DatasetError, ContractError, CheckpointError,
            FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
