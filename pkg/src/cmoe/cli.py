"""Command-line front end: extract, train, eval, experts, gradcheck, synth.

stdout carries machine-parsable ``key=value`` lines; human chatter goes to
stderr via logging. Exit codes: 0 ok, 1 config error, 2 data error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data as datapipe
from . import ops
from .checkpoint import load_checkpoint
from .config import RunConfig, load_config
from .errors import CmoeError, ConfigError, NumericError
from .gradcheck import gradcheck
from .moe import CmoeHead, CmoeModel, balance_loss, total_loss
from .report import assignment_table, confusion_heatmap, expert_heatmap, specialization_score
from .tensor import Tensor, mul, sum_
from .trainer import TrainConfig, evaluate, train

logger = logging.getLogger(__name__)

_thread_limiter = None  # keeps the threadpool cap alive for the process


def _emit(**kv) -> None:
    for k, v in kv.items():
        print(f"{k}={v}")


def _cap_threads() -> None:
    global _thread_limiter
    raw = os.environ.get("CMOE_THREADS")
    if not raw:
        return
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"CMOE_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"CMOE_THREADS must be >= 1, got {n}")
    from threadpoolctl import threadpool_limits

    _thread_limiter = threadpool_limits(limits=n)


class _Parser(argparse.ArgumentParser):
    # argparse's default error() calls sys.exit(2); route through the
    # config-error path so usage mistakes exit 1 like every other bad input
    def error(self, message):
        raise ConfigError(message)


def _split_overrides(rest) -> list:
    pairs = []
    i = 0
    while i < len(rest):
        tok = rest[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        body = tok[2:]
        if "=" in body:
            key, value = body.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(rest):
                raise ConfigError(f"override {tok!r} is missing a value")
            key, value = body, rest[i + 1]
            i += 2
        pairs.append((key, value))
    return pairs


# -- dataset plumbing shared by extract/train/eval/experts -------------------


def _load_dataset(cfg: RunConfig):
    if cfg.dataset.manifest is None:
        raise ConfigError("dataset.manifest is required for this command")
    manifest = datapipe.load_manifest(
        cfg.dataset.manifest, sample_rate=cfg.dataset.sample_rate,
        band=cfg.band() if cfg.dataset.band is not None else None)
    table = None
    if cfg.dataset.split_table is not None:
        name = cfg.dataset.split_table
        if Path(name).exists():
            table = datapipe.load_split_table(name)
        else:
            table = datapipe.builtin_split_table(name)
    train_idx, test_idx = datapipe.build_split(manifest, table)
    return manifest, train_idx, test_idx


def _store(cfg: RunConfig, manifest, on_demand: bool) -> datapipe.FeatureStore:
    cache_dir = cfg.feature.cache_dir or str(cfg.out_dir() / "features" / cfg.feature.kind)
    fn = None
    if on_demand:
        fn = datapipe.make_extract_fn(manifest, cfg.feature.kind, cfg.band(),
                                      **cfg.feature_kwargs())
    return datapipe.FeatureStore(cache_dir, extract_fn=fn, memo=on_demand)


def _build_model(cfg: RunConfig, num_class: int, seed: int) -> CmoeModel:
    return CmoeModel(
        num_class, cfg.model.num_experts, np.random.default_rng(seed),
        norm_func=cfg.model.norm_func, residual=cfg.model.residual,
        balance=cfg.model.balance, alpha=cfg.model.alpha,
        attn_heads=cfg.model.attn_heads)


# -- commands ----------------------------------------------------------------


def cmd_extract(cfg: RunConfig) -> None:
    manifest, train_idx, test_idx = _load_dataset(cfg)
    store = _store(cfg, manifest, on_demand=False)
    fn = datapipe.make_extract_fn(manifest, cfg.feature.kind, cfg.band(),
                                  **cfg.feature_kwargs())
    segments = list(train_idx) + list(test_idx)
    written = skipped = 0
    failures = []
    for seg in segments:
        if store.has(seg.segment_id):
            skipped += 1
            continue
        try:
            store.put(fn(seg))
            written += 1
        except CmoeError as e:
            failures.append((seg.segment_id, str(e)))
    if failures:
        log_path = store.cache_dir / "errors.log"
        with open(log_path, "a") as fh:
            for sid, msg in failures:
                fh.write(f"{sid}\t{msg}\n")
    _emit(n_segments=len(segments), n_written=written, n_skipped=skipped,
          n_errors=len(failures), cache_dir=store.cache_dir)
    if failures:
        raise CmoeError(f"{len(failures)} segment(s) failed extraction; "
                        f"see {store.cache_dir / 'errors.log'}")


def cmd_train(cfg: RunConfig) -> None:
    manifest, train_idx, test_idx = _load_dataset(cfg)
    if len(train_idx) == 0:
        raise CmoeError("no training segments after splitting")
    store = _store(cfg, manifest, on_demand=True)
    names = manifest.class_names
    val_accs, test_accs = [], []
    for seed in cfg.seeds():
        fit_idx, val_idx = datapipe.carve_validation(train_idx, fraction=0.15, seed=seed)
        model = _build_model(cfg, len(names), seed)
        tc = TrainConfig(epochs=cfg.train.epochs, batch_size=cfg.train.batch_size,
                         lr=cfg.train.lr, weight_decay=cfg.train.weight_decay,
                         seed=seed, schedule=cfg.train.schedule,
                         out_dir=cfg.out_dir() / f"seed{seed}")
        res = train(model, tc, fit_idx, val_idx, store, names)
        _emit(seed=seed, best_epoch=res.best_epoch, best_val_acc=res.best_val_acc,
              checkpoint=res.best_path, final_checkpoint=res.final_path,
              metrics=tc.out_dir / "metrics.csv")
        val_accs.append(res.best_val_acc)
        if len(test_idx):
            best = _build_model(cfg, len(names), seed)
            load_checkpoint(res.best_path, best)
            acc = evaluate(best, test_idx, store, names, cfg.train.batch_size).segment_accuracy
            test_accs.append(acc)
            _emit(test_acc=acc)
    _emit(mean_val_acc=float(np.mean(val_accs)))
    if test_accs:
        _emit(mean_test_acc=float(np.mean(test_accs)))


def _restore(cfg: RunConfig, ckpt: str, num_class: int) -> CmoeModel:
    model = _build_model(cfg, num_class, seed=0)
    load_checkpoint(ckpt, model)
    model.eval()
    return model


def cmd_eval(cfg: RunConfig, ckpt: str, split: str) -> None:
    manifest, train_idx, test_idx = _load_dataset(cfg)
    index = test_idx if split == "test" else train_idx
    store = _store(cfg, manifest, on_demand=True)
    names = manifest.class_names
    model = _restore(cfg, ckpt, len(names))
    res = evaluate(model, index, store, names, cfg.train.batch_size)
    csv_path, svg_path = confusion_heatmap(res.confusion, names, cfg.out_dir())
    _emit(split=split, n_segments=res.n_segments, segment_accuracy=res.segment_accuracy)
    for name in names:
        key = "acc_" + "".join(c if c.isalnum() else "_" for c in name)
        _emit(**{key: res.per_class[name]})
    _emit(confusion_csv=csv_path, confusion_svg=svg_path)


def cmd_experts(cfg: RunConfig, ckpt: str, split: str) -> None:
    manifest, train_idx, test_idx = _load_dataset(cfg)
    index = test_idx if split == "test" else train_idx
    store = _store(cfg, manifest, on_demand=True)
    names = manifest.class_names
    model = _restore(cfg, ckpt, len(names))
    res = evaluate(model, index, store, names, cfg.train.batch_size)
    table = assignment_table(res.assignments, names, cfg.model.num_experts)
    by_class, by_source, svg_path = expert_heatmap(table, cfg.out_dir())
    _emit(split=split, n_segments=res.n_segments, experts_by_class=by_class,
          experts_by_source=by_source, experts_svg=svg_path)
    sidecar = Path(cfg.dataset.manifest).parent / "latent_modes.csv"
    if sidecar.exists():
        ami = specialization_score(res.assignments, datapipe.load_sidecar(sidecar))
        _emit(specialization_ami=ami)


def _gradcheck_items():
    from . import nn
    from .backbone import BasicBlock

    rng = np.random.default_rng(0)
    f64 = np.float64

    def t(shape, scale=1.0):
        return Tensor(rng.standard_normal(shape) * scale, requires_grad=True, dtype=f64)

    def weighted(out):  # fixed random weighting so no gradient path cancels
        w = Tensor(np.linspace(0.5, 1.5, out.data.size).reshape(out.data.shape), dtype=f64)
        return sum_(mul(out, w))

    items = []

    x, w, b = t((2, 2, 6, 6)), t((3, 2, 3, 3), 0.5), t((3,), 0.1)
    items.append(("conv2d", lambda: weighted(ops.conv2d(x, w, b, stride=2, pad=1)),
                  [x, w, b], 1e-5, None, 1e-6))

    xp = t((2, 3, 6, 6))
    items.append(("max_pool2d", lambda: weighted(ops.max_pool2d(xp, 2, 2)),
                  [xp], 1e-5, None, 1e-6))

    xb, gamma, beta = t((4, 3, 5, 5)), t((3,), 0.3), t((3,), 0.3)
    rm, rv = np.zeros(3), np.ones(3)
    items.append(("batch_norm",
                  lambda: weighted(ops.batch_norm(xb, gamma, beta, rm, rv, training=True)),
                  [xb, gamma, beta], 1e-5, None, 1e-6))

    logits = t((8, 5))
    labels = np.arange(8) % 5
    items.append(("cross_entropy", lambda: ops.cross_entropy(logits, labels),
                  [logits], 1e-5, None, 1e-6))

    pool = nn.AttentionPool(8, 2, np.random.default_rng(1)).to_dtype(f64)
    xa = t((2, 8, 2, 3))
    items.append(("attention_pool", lambda: weighted(pool(xa)),
                  [xa] + [p for _, p in pool.named_parameters()], 1e-5, None, 1e-6))

    block = BasicBlock(4, 8, np.random.default_rng(2), stride=2).to_dtype(f64)
    block.train()
    xk = t((2, 4, 8, 8))
    items.append(("basic_block", lambda: weighted(block(xk)),
                  [xk] + [p for _, p in block.named_parameters()], 1e-5, None, 1e-6))

    head = CmoeHead(5, 3, np.random.default_rng(3), in_dim=10, hidden=7).to_dtype(f64)
    head.train()
    r = t((6, 10))
    yh = np.arange(6) % 5
    frozen = np.array([0, 0, 1, 1, 2, 2])  # every expert exercised

    def head_loss():
        lg, dec = head(r, frozen_chosen=frozen)
        bal = balance_loss(dec.probs, dec.chosen, head.alpha, head.num_experts)
        return total_loss(lg, yh, bal)

    # expert BN runs on 2-sample sub-batches here, so like the full model
    # this needs the smaller step to keep truncation error in range
    items.append(("moe_head", head_loss,
                  [r] + [p for _, p in head.named_parameters()], 1e-6, None, 1e-4))

    model = CmoeModel(3, 2, np.random.default_rng(4)).to_dtype(f64)
    model.train()
    xm = t((4, 1, 16, 16))
    ym = np.array([0, 1, 2, 0])

    def model_loss():
        lg, dec = model(xm, min_size=None)
        total, _, _ = model.loss(lg, ym, dec)
        return total

    # h=1e-6 because the normalization layers' epsilon curvature dominates
    # truncation error at h=1e-5 on per-channel batches this small
    items.append(("full_model", model_loss,
                  [xm] + [p for _, p in model.named_parameters()], 1e-6, 6, 1e-4))
    return items


def cmd_gradcheck() -> None:
    failures = []
    for name, fn, params, h, sample, tol in _gradcheck_items():
        report = gradcheck(fn, params, h=h, sample=sample)
        err = report["max_rel_err"]
        ok = err < tol
        _emit(**{f"{name}_max_rel_err": f"{err:.3e}", name: "pass" if ok else "FAIL"})
        if not ok:
            failures.append(name)
    if failures:
        raise NumericError(f"gradient check failed for: {', '.join(failures)}")


def cmd_synth(args) -> None:
    snr = None if str(args.snr_db).lower() in ("none", "null") else float(args.snr_db)
    spec = datapipe.SyntheticSpec(
        num_classes=args.num_classes, modes_per_class=args.modes_per_class,
        tones_per_mode=args.tones_per_mode, train_per_class=args.train_per_class,
        test_per_class=args.test_per_class, sample_rate=args.sample_rate,
        clip_s=args.clip_s, snr_db=snr, seed=args.seed)
    manifest, sidecar = datapipe.generate_synthetic(spec, args.out)
    _emit(out_dir=args.out, manifest=Path(args.out) / "manifest.csv", sidecar=sidecar,
          n_sources=len(manifest.entries), n_classes=len(manifest.class_names),
          n_modes=spec.num_modes)


# -- entry point -------------------------------------------------------------


def _make_parser() -> _Parser:
    p = _Parser(prog="cmoe", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", default=None, help="YAML run configuration")
        return sp

    with_config(sub.add_parser("extract", help="fill the feature cache"))
    with_config(sub.add_parser("train", help="train per the run configuration"))
    for name in ("eval", "experts"):
        sp = with_config(sub.add_parser(name))
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--split", choices=("train", "test"), default="test")
    sub.add_parser("gradcheck", help="finite-difference release gate")
    sp = sub.add_parser("synth", help="generate the synthetic tonal dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--num-classes", type=int, default=4)
    sp.add_argument("--modes-per-class", type=int, default=2)
    sp.add_argument("--tones-per-mode", type=int, default=2)
    sp.add_argument("--train-per-class", type=int, default=8)
    sp.add_argument("--test-per-class", type=int, default=4)
    sp.add_argument("--sample-rate", type=int, default=2000)
    sp.add_argument("--clip-s", type=float, default=30.0)
    sp.add_argument("--snr-db", default="10")
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args, rest = _make_parser().parse_known_args(argv)
        _cap_threads()
        if args.command == "synth":
            if rest:
                raise ConfigError(f"unexpected argument {rest[0]!r}")
            cmd_synth(args)
        elif args.command == "gradcheck":
            if rest:
                raise ConfigError(f"unexpected argument {rest[0]!r}")
            cmd_gradcheck()
        else:
            cfg = load_config(args.config, _split_overrides(rest))
            if args.command == "extract":
                cmd_extract(cfg)
            elif args.command == "train":
                cmd_train(cfg)
            elif args.command == "eval":
                cmd_eval(cfg, args.checkpoint, args.split)
            else:
                cmd_experts(cfg, args.checkpoint, args.split)
        return 0
    except CmoeError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
