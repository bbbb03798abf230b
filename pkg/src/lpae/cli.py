"""``lpae`` command line: pyramid, train, eval, gradcheck and features subcommands.

Every run writes a JSON manifest (argv, resolved configuration, seeds,
content hashes of inputs, outputs, timing).  ``lpae --config manifest.json``
replays the recorded argv; extra arguments after it override recorded ones.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import data as D
from . import features as F
from . import gradcheck as G
from . import model as M
from . import train as T
from .errors import ArchitectureError, LPAEError, TrainingDiverged
from .pyramid import build_laplacian, collapse, gaussian_pyramid
from .tensor import GRID_FOR_VALUES

log = logging.getLogger("lpae")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_DIVERGED = 3
THREADS_ENV = "LPAE_NUM_THREADS"


# ---------------------------------------------------------------------------
# run manifest

def git_blob_hash(path) -> str:
    """The hash ``git hash-object`` would print for a file."""
    h = hashlib.sha1()
    size = os.path.getsize(path)
    h.update(f"blob {size}\0".encode())
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def content_hash(path) -> str:
    """Blob hash for files; for directories, a hash over sorted ``relpath blobhash`` lines."""
    path = Path(path)
    if path.is_file():
        return git_blob_hash(path)
    lines = [f"{p.relative_to(path).as_posix()} {git_blob_hash(p)}"
             for p in sorted(path.rglob("*")) if p.is_file()]
    return hashlib.sha1("\n".join(lines).encode()).hexdigest()


@dataclass
class RunManifest:
    command: str
    argv: list
    config: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)
    result: dict = field(default_factory=dict)
    version: str = __version__

    def add_input(self, label, path):
        if path is not None and Path(path).exists():
            self.inputs[label] = {"path": str(path), "hash": content_hash(path)}

    def write(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=_jsonable) + "\n")
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        raw = json.loads(Path(path).read_text())
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in raw.items() if k in known})


def _jsonable(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"{type(obj).__name__} is not JSON serialisable")


# ---------------------------------------------------------------------------
# dataset flags

def _add_dataset_flags(p, eval_split=False):
    g = p.add_argument_group("dataset")
    g.add_argument("--dataset", choices=("cifar10", "synthetic", "folder"), default="synthetic")
    g.add_argument("--data-dir", help="CIFAR-10 batch directory or class-folder root")
    g.add_argument("--limit", type=int, help="use the first N training images")
    g.add_argument("--size", type=int, default=32, help="image size for synthetic/folder data")
    g.add_argument("--synthetic-kind", default="stripes-circles", choices=D.SYNTHETIC_KINDS)
    g.add_argument("--n", type=int, default=500, help="synthetic training images")
    g.add_argument("--data-seed", type=int, default=1,
                   help="synthetic generator seed; test data uses +1, the ZCA pool +2")
    g.add_argument("--zca-pool", type=int, default=0,
                   help="fit ZCA on this many extra unlabelled images from the same source"
                        " instead of the training set")
    g.add_argument("--zca-eps", type=float, default=1e-2)
    g.add_argument("--no-zca", action="store_true", help="skip whitening")
    if eval_split:
        g.add_argument("--test-dir", help="class-folder root of the test split (folder data)")
        g.add_argument("--test-limit", type=int, help="use the first N test images")
        g.add_argument("--test-n", type=int, default=200, help="synthetic test images")


def _load_split(args, split, manifest=None) -> D.Dataset:
    if args.dataset == "cifar10":
        if not args.data_dir:
            raise ValueError("--dataset cifar10 needs --data-dir")
        limit = args.limit if split == "train" else getattr(args, "test_limit", None)
        if split == "pool":
            split, limit = "train", args.zca_pool
        ds = D.load_cifar10(args.data_dir, split, limit)
        if manifest is not None:
            manifest.add_input("data", args.data_dir)
        return ds
    if args.dataset == "folder":
        root = args.test_dir if split == "test" else args.data_dir
        if not root:
            raise ValueError(f"--dataset folder needs {'--test-dir' if split == 'test' else '--data-dir'}")
        ds = D.load_image_folder(root, args.size, "test" if split == "test" else "train")
        if manifest is not None:
            manifest.add_input(f"data_{split}", root)
        limit = {"train": args.limit, "pool": args.zca_pool,
                 "test": getattr(args, "test_limit", None)}[split]
        return ds.subset(slice(0, limit)) if limit else ds
    offsets = {"train": 0, "test": 1, "pool": 2}
    n = {"train": args.limit or args.n, "test": getattr(args, "test_n", 0),
         "pool": args.zca_pool}[split]
    ds = D.synthetic_dataset(args.synthetic_kind, n, args.size, seed=args.data_seed + offsets[split])
    ds.split = split
    return ds


def _fit_zca(args, train_ds, manifest):
    if args.no_zca:
        return None
    source = _load_split(args, "pool", manifest) if args.zca_pool else train_ds
    return D.zca_fit(source.images, epsilon=args.zca_eps)


def _whiten(ds: D.Dataset, zca) -> D.Dataset:
    return ds if zca is None else ds.with_images(D.zca_apply(zca, ds.images))


def _data_config(args) -> dict:
    keys = ("dataset", "data_dir", "limit", "size", "synthetic_kind", "n", "data_seed",
            "zca_pool", "zca_eps", "no_zca")
    return {k: getattr(args, k) for k in keys}


# ---------------------------------------------------------------------------
# pyramid

def cmd_pyramid(args, manifest: RunManifest) -> int:
    manifest.add_input("image", args.image)
    img = D.read_image(args.image).astype(np.float64)
    gauss = gaussian_pyramid(img, args.levels)
    lap = build_laplacian(img, args.levels, gaussian=gauss)
    err = float(np.max(np.abs(collapse(lap) - img)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    last = len(lap) - 1
    for k, (g, l) in enumerate(zip(gauss, lap)):
        gp, lp = out / f"g{k}.png", out / f"l{k}.png"
        D.write_image(gp, g)
        # bands are signed, so shift them for display; the residual is an image
        D.write_image(lp, l if k == last else l + 0.5)
        files[f"g{k}"], files[f"l{k}"] = str(gp), str(lp)
    report = {"levels": args.levels, "sizes": [list(g.shape[-2:]) for g in gauss],
              "max_abs_roundtrip_error": err}
    rp = out / "report.json"
    rp.write_text(json.dumps(report, indent=2) + "\n")
    files["report"] = str(rp)
    manifest.outputs.update(files)
    manifest.result = report
    print(f"levels {args.levels}: sizes {' '.join(str(s[0]) for s in report['sizes'])}")
    print(f"max |collapse(build_laplacian(x)) - x| = {err:.3e}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train

def _read_partial_log(path, upto_step, n_levels) -> T.TrainLog:
    if not Path(path).exists():
        return T.TrainLog(n_levels)
    prior = T.read_log_csv(path)
    prior.rows = [r for r in prior.rows if r[0] <= upto_step]
    return prior


def cmd_train(args, manifest: RunManifest) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path, log_path = out / "checkpoint.lpae", out / "loss.csv"
    train_ds = _load_split(args, "train", manifest)
    resume = None
    if args.resume:
        manifest.add_input("resume", args.resume)
        resume = T.load_checkpoint(args.resume)
        config, model, zca = resume.config, resume.model, resume.zca
        if config is None:
            raise LPAEError(f"{args.resume} holds no training configuration")
        if args.epochs is not None:
            config.epochs = args.epochs
        prior = _read_partial_log(Path(args.resume).with_name("loss.csv"),
                                  resume.progress.step, len(model.levels))
    else:
        spec = M.load_arch(args.arch)
        if Path(args.arch).is_file():
            manifest.add_input("arch", args.arch)
        if spec.kind != args.model:
            raise ArchitectureError(f"--model {args.model} but {args.arch} describes a {spec.kind}")
        config = T.TrainConfig(batch_size=args.batch_size, learning_rate=args.lr,
                               init_std=args.init_std,
                               epochs=30 if args.epochs is None else args.epochs,
                               seed=args.seed, use_bn=not args.no_bn)
        model = T.fresh_model(spec, train_ds.size, config)
        zca = _fit_zca(args, train_ds, manifest)
        prior = T.TrainLog(len(model.levels))
    if train_ds.size != model.image_size:
        raise ValueError(f"model expects {model.image_size}px images, data has {train_ds.size}px")
    manifest.config.update(train=asdict(config), data=_data_config(args),
                           model=model.describe(), parameters=M.count_params(model))
    manifest.seeds.update(train=config.seed, data=args.data_seed)
    data = _whiten(train_ds, zca)

    def report(row):
        if args.verbose and row[0] % max(1, len(train_ds) // config.batch_size) == 0:
            print(f"step {row[0]} epoch {row[1]} loss {row[2]:.6g}", file=sys.stderr)

    code = EXIT_OK
    try:
        train_log = T.train(model, data, config, callbacks=[report], checkpoint_path=ckpt_path,
                            resume=resume, zca=zca, max_steps=args.max_steps)
    except TrainingDiverged as exc:
        train_log = exc.log
        log.warning("%s", exc)
        # without BN a divergence is the outcome under study, not a failure
        code = EXIT_OK if not config.use_bn else EXIT_DIVERGED
    full = T.TrainLog(len(model.levels), prior.rows + train_log.rows, train_log.diverged)
    T.write_log_csv(log_path, full)
    conv = full.convergence()
    means = full.epoch_means()
    manifest.outputs.update(checkpoint=str(ckpt_path), loss_csv=str(log_path))
    expected = config.epochs * D.num_batches(len(data), config.batch_size)
    manifest.result = {**conv, "epoch_means": {str(k): v for k, v in means.items()},
                       "complete": len(full.rows) == expected and not full.diverged}
    for e, v in means.items():
        print(f"epoch {e}: mean loss {v:.6g}")
    print(f"converged={conv['converged']} diverged={conv['diverged']}")
    return code


# ---------------------------------------------------------------------------
# eval and features

def _parse_levels(text, n_levels):
    if text is None:
        return None
    levels = sorted({int(t) for t in text.replace(" ", "").split(",") if t})
    bad = [k for k in levels if not 0 <= k < n_levels]
    if bad:
        raise ValueError(f"--levels {bad} out of range for a {n_levels}-level model")
    return levels


def _eval_model(args, manifest):
    manifest.add_input("checkpoint", args.checkpoint)
    ckpt = T.load_checkpoint(args.checkpoint)
    model = ckpt.model
    path = Path(args.checkpoint)
    label = path.parent.name if path.stem == "checkpoint" and path.parent.name else path.stem
    if getattr(args, "random_filters", False):
        seed = ckpt.config.seed if ckpt.config else 0
        std = ckpt.config.init_std if ckpt.config else 0.02
        model = M.build_model(model.spec, model.image_size, seed=seed, use_bn=model.use_bn,
                              init_std=std)
        label += " (random filters)"
    manifest.seeds["model"] = ckpt.config.seed if ckpt.config else None
    return ckpt, model, label


def cmd_eval(args, manifest: RunManifest) -> int:
    ckpt, model, label = _eval_model(args, manifest)
    train_ds = _load_split(args, "train", manifest)
    test_ds = _load_split(args, "test", manifest)
    if train_ds.labels is None or test_ds.labels is None:
        raise ValueError("evaluation needs labelled train and test data")
    train_w, test_w = _whiten(train_ds, ckpt.zca), _whiten(test_ds, ckpt.zca)
    probe = F.ProbeConfig(epochs=args.probe_epochs, batch_size=args.batch_size,
                          learning_rate=args.lr, seed=args.seed)
    manifest.seeds.update(probe=args.seed, data=args.data_seed)
    manifest.config.update(data=_data_config(args), probe=asdict(probe),
                           model=model.describe(), ablation=args.ablation)
    levels = _parse_levels(args.levels, len(model.levels))
    if args.pixels:
        label = "pixels"
        tr, te = F.pixel_features(train_w), F.pixel_features(test_w)
        report = F.Report("none", label,
                          [F.evaluate_features(tr, train_ds.labels, te, test_ds.labels,
                                               args.repeats, probe, "pixels", ())])
    elif args.ablation == "level":
        report = F.level_ablation(model, train_w, test_w, args.values_per_map, args.repeats,
                                  probe, label)
    elif args.ablation == "dim":
        report = F.dim_ablation(model, train_w, test_w, repeats=args.repeats, config=probe,
                                model_name=label)
    else:
        chosen = levels if levels is not None else list(range(len(model.levels)))
        tr = F.extract_features(model, train_w, args.values_per_map, chosen)
        te = F.extract_features(model, test_w, args.values_per_map, chosen)
        name = "whole set" if len(chosen) == len(model.levels) else \
            "levels " + " ".join(map(str, chosen))
        report = F.Report("none", label,
                          [F.evaluate_features(tr, train_ds.labels, te, test_ds.labels,
                                               args.repeats, probe, name, chosen)])
    written = F.write_report(report, args.out)
    manifest.outputs.update({f"report_{i}": str(p) for i, p in enumerate(written)})
    manifest.result = {"rows": [{"label": r.label, "levels": list(r.levels),
                                 "values_per_map": r.values_per_map, "n_columns": r.n_columns,
                                 "mean": r.mean, "std": r.std, "accuracies": r.accuracies}
                                for r in report.rows]}
    for r in report.rows:
        print(f"{r.label:>12s}  {r.n_columns:7d} features  "
              f"{100 * r.mean:5.1f} ± {100 * r.std:4.1f}%  over {len(r.accuracies)} repeats")
    return EXIT_OK


def cmd_features(args, manifest: RunManifest) -> int:
    ckpt, model, _ = _eval_model(args, manifest)
    ds = _load_split(args, args.split, manifest)
    fm = F.extract_features(model, _whiten(ds, ckpt.zca), args.values_per_map,
                            _parse_levels(args.levels, len(model.levels)))
    fm.save(args.out)
    manifest.config.update(data=_data_config(args), values_per_map=args.values_per_map,
                           levels=args.levels, split=args.split)
    manifest.seeds["data"] = args.data_seed
    manifest.outputs.update(features=str(args.out),
                            columns=str(Path(args.out).with_suffix(".columns.csv")))
    manifest.result = {"shape": list(fm.shape)}
    print(f"{fm.shape[0]} samples x {fm.shape[1]} features -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck

def cmd_gradcheck(args, manifest: RunManifest) -> int:
    rows = G.run(args.scope, seed=args.seed)
    manifest.seeds["gradcheck"] = args.seed
    width = max(len(name) for name, _ in rows)
    failed = []
    for name, err in rows:
        ok = err <= args.tolerance
        if not ok:
            failed.append(name)
        print(f"{name:<{width}s}  {err:.3e}  {'pass' if ok else 'FAIL'}")
    manifest.result = {"rows": {name: err for name, err in rows}, "failed": failed,
                       "tolerance": args.tolerance}
    print(f"{len(rows) - len(failed)}/{len(rows)} within {args.tolerance:g}")
    return EXIT_ERROR if failed else EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing and dispatch

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lpae", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", metavar="MANIFEST",
                        help="replay the argv recorded in a run manifest")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded numerical kernels")
    common.add_argument("--manifest", help="where to write the run manifest")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("pyramid", parents=[common], help="write Gaussian/Laplacian level images")
    p.add_argument("image")
    p.add_argument("--levels", type=int, default=4)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_pyramid)

    p = sub.add_parser("train", parents=[common], help="train an LPAE or deep CAE")
    p.add_argument("--arch", default="lpae2", help=f"built-in name ({', '.join(M.BUILTIN_ARCHS)}) or file")
    p.add_argument("--model", choices=("lpae", "dcae"), default="lpae")
    _add_dataset_flags(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, default=50)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--init-std", type=float, default=0.02)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-bn", action="store_true", help="drop batch normalisation")
    p.add_argument("--resume", metavar="CHECKPOINT")
    p.add_argument("--max-steps", type=int, help="stop (and checkpoint) after this many steps")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "linear-probe evaluation and ablations"),
                                 ("features", cmd_features, "extract pooled encoder features")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("checkpoint")
        _add_dataset_flags(p, eval_split=True)
        p.add_argument("--values-per-map", type=int, default=16, choices=sorted(GRID_FOR_VALUES))
        p.add_argument("--levels", help="comma-separated level indices")
        p.add_argument("--random-filters", action="store_true",
                       help="use an untrained network of the same architecture")
        p.add_argument("--out", required=True)
        p.set_defaults(func=func)
        if name == "eval":
            p.add_argument("--ablation", choices=("none", "level", "dim"), default="none")
            p.add_argument("--repeats", type=int, default=6)
            p.add_argument("--probe-epochs", type=int, default=100)
            p.add_argument("--batch-size", type=int, default=50)
            p.add_argument("--lr", type=float, default=1e-3)
            p.add_argument("--seed", type=int, default=0)
            p.add_argument("--pixels", action="store_true", help="probe whitened pixels instead")
        else:
            p.add_argument("--split", choices=("train", "test"), default="train")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--scope", choices=("op", "model", "all"), default="all")
    p.add_argument("--tolerance", type=float, default=G.TOLERANCE)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _manifest_path(args) -> Path:
    if args.manifest:
        return Path(args.manifest)
    if args.command in ("train", "pyramid"):
        return Path(args.out) / "manifest.json"
    if args.command in ("eval", "features"):
        return Path(args.out).with_suffix(".manifest.json")
    return Path("gradcheck.manifest.json")


def _thread_limit(args):
    from threadpoolctl import threadpool_limits

    if args.deterministic:
        return threadpool_limits(1)
    env = os.environ.get(THREADS_ENV)
    if env:
        return threadpool_limits(int(env))
    return contextlib.nullcontext()


def _expand_config(argv):
    """Replace ``--config MANIFEST`` with the manifest's recorded argv."""
    if "--config" not in argv:
        return argv
    i = argv.index("--config")
    if i + 1 >= len(argv):
        raise SystemExit("lpae: --config needs a manifest path")
    recorded = RunManifest.read(argv[i + 1]).argv
    return argv[:i] + list(recorded) + argv[i + 2:]


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    argv = _expand_config(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_help()
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    manifest = RunManifest(args.command, argv,
                           config={"args": {k: v for k, v in vars(args).items() if k != "func"}})
    manifest.config["deterministic"] = args.deterministic
    manifest.config["threads_env"] = os.environ.get(THREADS_ENV)
    start = time.time()
    manifest.timing["started"] = time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(start))
    code = EXIT_ERROR
    try:
        with _thread_limit(args):
            code = args.func(args, manifest)
    except (LPAEError, ValueError, ArithmeticError, OSError) as exc:
        print(f"lpae {args.command}: error: {exc}", file=sys.stderr)
        manifest.result["error"] = f"{type(exc).__name__}: {exc}"
        code = EXIT_ERROR
    finally:
        manifest.timing["seconds"] = round(time.time() - start, 3)
        manifest.result["exit_code"] = code
        try:
            manifest.write(_manifest_path(args))
        except OSError as exc:
            print(f"lpae: could not write manifest: {exc}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
