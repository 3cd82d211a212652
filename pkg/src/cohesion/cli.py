"""Command-line entry point.

Subcommands mirror the pipeline stages:
    synth     write a seeded synthetic dataset (features + labels + splits)
    balance   downsample one level of the train split
    train     fit one per-modality SVR and save the model
    predict   apply a saved model to a feature file
    fuse      combine per-modality prediction files (average or grid search)
    evaluate  score one predictions file against labels
    pipeline  full matrix run: train -> predict -> fuse -> report

Exit codes: 0 success, 1 usage error, 2 data/convergence error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import dataset as ds_mod
from . import evaluation as ev_mod
from . import fusion as fu_mod
from . import svr as svr_mod
from .errors import CohesionError, UsageError
from .feature_store import (
    ModalitySpec,
    apply_standardizer,
    fit_standardizer,
    read_feature_file,
    read_spec_from_file,
    save_feature_file,
    vectors_per_image,
)


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; the contract here is 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _add_svr_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--kernel", choices=("linear", "rbf"), default="rbf")
    p.add_argument("--gamma", type=float, default=None, help="rbf width (default 1/dim)")
    p.add_argument("--C", type=float, dest="C", default=1.0)
    p.add_argument("--epsilon", type=float, default=0.1)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--max-iter", type=int, default=1_000_000)


def _add_feature_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--features-face", type=Path, default=None)
    p.add_argument("--features-skeleton", type=Path, default=None)
    p.add_argument("--features-scene", type=Path, default=None)
    p.add_argument(
        "--features",
        action="append",
        default=[],
        metavar="MODALITY=PATH",
        help="extra modality feature file (e.g. custom:depth=feats.tsv)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cohesion", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[], help="write a seeded synthetic dataset")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--n-train", type=int, default=600)
    p.add_argument("--n-val", type=int, default=200)
    p.add_argument("--n-test", type=int, default=200)
    p.add_argument("--face-dim", type=int, default=24)
    p.add_argument("--skeleton-dim", type=int, default=12)
    p.add_argument("--scene-dim", type=int, default=16)
    p.add_argument("--sigma-face", type=float, default=0.05)
    p.add_argument("--sigma-skeleton", type=float, default=0.10)
    p.add_argument("--sigma-scene", type=float, default=0.15)
    p.add_argument("--max-faces", type=int, default=4)
    p.add_argument("--p-zero-faces", type=float, default=0.05)

    p = sub.add_parser("balance", help="downsample one level of the train split")
    p.add_argument("--labels", type=Path, required=True)
    p.add_argument("--splits", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--balance-ratio", type=float, default=0.3)
    p.add_argument("--balance-level", type=int, default=2, choices=(0, 1, 2, 3))
    p.add_argument("--seed", type=int, default=42)

    p = sub.add_parser("train", help="fit one per-modality SVR")
    _add_feature_flags(p)
    p.add_argument("--labels", type=Path, required=True)
    p.add_argument("--splits", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_svr_flags(p)

    p = sub.add_parser("predict", help="apply a saved model to a feature file")
    _add_feature_flags(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("fuse", help="combine per-modality prediction files")
    p.add_argument(
        "--predictions",
        action="append",
        default=[],
        required=True,
        metavar="MODALITY=PATH",
    )
    p.add_argument("--splits", type=Path, required=True)
    p.add_argument("--labels", type=Path, default=None, help="required for grid_search")
    p.add_argument("--strategy", choices=("average", "grid_search"), default="grid_search")
    p.add_argument("--grid-step", type=float, default=0.05)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("evaluate", help="score one predictions file against labels")
    p.add_argument("--predictions", type=Path, required=True)
    p.add_argument("--labels", type=Path, required=True)
    p.add_argument("--splits", type=Path, default=None)
    p.add_argument("--eval-split", choices=("val", "test"), default="val")
    p.add_argument("--method", default="predictions", help="method name for the report row")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", type=Path, default=None, help="directory (default: stdout)")

    p = sub.add_parser("pipeline", help="train, fuse, and report in one run")
    _add_feature_flags(p)
    p.add_argument("--labels", type=Path, required=True)
    p.add_argument("--splits", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--variant", choices=ev_mod.VARIANTS, default="train")
    p.add_argument("--eval-split", choices=("val", "test"), default="val")
    p.add_argument("--grid-step", type=float, default=0.05)
    p.add_argument("--balance-ratio", type=float, default=0.3)
    p.add_argument("--balance-level", type=int, default=2, choices=(0, 1, 2, 3))
    p.add_argument("--seed", type=int, default=42)
    _add_svr_flags(p)

    return parser


def _named_feature_paths(args) -> dict[str, Path]:
    paths: dict[str, Path] = {}
    for name in ("face", "skeleton", "scene"):
        value = getattr(args, f"features_{name}")
        if value is not None:
            paths[name] = value
    for item in args.features:
        if "=" not in item:
            raise UsageError(f"--features wants MODALITY=PATH, got {item!r}")
        name, _, path = item.partition("=")
        if not name or not path:
            raise UsageError(f"--features wants MODALITY=PATH, got {item!r}")
        if name in paths:
            raise UsageError(f"modality {name!r} given twice")
        paths[name] = Path(path)
    if not paths:
        raise UsageError("at least one feature file is required")
    return paths


def _tag_path(path, exc: CohesionError) -> None:
    exc.args = (f"{path}: {exc}",)


def _load_feature_vectors(path: Path, expect_name: str) -> tuple[ModalitySpec, dict[str, np.ndarray]]:
    """Read one feature file and collapse it to per-image vectors."""
    try:
        spec = read_spec_from_file(path)
        if spec.name != expect_name:
            raise CohesionError(
                f"expected modality {expect_name!r}, file declares {spec.name!r}"
            )
        records = read_feature_file(path, spec)
        return spec, vectors_per_image(records, spec)
    except CohesionError as exc:
        _tag_path(path, exc)
        raise


def _read_dataset(labels_path: Path, splits_path: Path) -> ds_mod.LabeledDataset:
    try:
        levels = ds_mod.read_labels(labels_path)
    except CohesionError as exc:
        _tag_path(labels_path, exc)
        raise
    try:
        split = ds_mod.read_splits(splits_path)
    except CohesionError as exc:
        _tag_path(splits_path, exc)
        raise
    return ds_mod.LabeledDataset.from_levels(levels, split)


def _hyper_from_args(args) -> svr_mod.SvrHyperparams:
    return svr_mod.SvrHyperparams(
        C=args.C, epsilon=args.epsilon, tol=args.tol, max_iter=args.max_iter
    )


def _kernel_from_args(args, dim: int | None = None) -> svr_mod.KernelSpec | None:
    if args.kernel == "linear":
        return svr_mod.KernelSpec("linear")
    if args.gamma is not None:
        return svr_mod.KernelSpec("rbf", args.gamma)
    if dim is not None:
        return svr_mod.KernelSpec("rbf", svr_mod.default_gamma(dim))
    return None  # per-modality 1/dim default


def _outdir(path: Path) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    return path


def _cmd_synth(args) -> int:
    cfg = ds_mod.SynthConfig(
        seed=args.seed,
        n_train=args.n_train,
        n_val=args.n_val,
        n_test=args.n_test,
        face_dim=args.face_dim,
        skeleton_dim=args.skeleton_dim,
        scene_dim=args.scene_dim,
        sigma_face=args.sigma_face,
        sigma_skeleton=args.sigma_skeleton,
        sigma_scene=args.sigma_scene,
        max_faces=args.max_faces,
        p_zero_faces=args.p_zero_faces,
    )
    labeled, features = ds_mod.synth_generate(cfg)
    out = _outdir(args.out)
    specs = cfg.specs()
    for name in ds_mod.MODALITY_NAMES:
        save_feature_file(out / f"features_{name}.tsv", features[name], specs[name])
    ds_mod.save_labels(out / "labels.tsv", labeled.levels())
    ds_mod.save_splits(out / "splits.tsv", labeled.split)
    return 0


def _cmd_balance(args) -> int:
    labeled = _read_dataset(args.labels, args.splits)
    balanced = ds_mod.balance_downsample(
        labeled, args.balance_level, args.balance_ratio, args.seed
    )
    out = _outdir(args.out)
    ds_mod.save_labels(out / "labels.tsv", balanced.levels())
    ds_mod.save_splits(out / "splits.tsv", balanced.split)
    return 0


def _cmd_train(args) -> int:
    paths = _named_feature_paths(args)
    if len(paths) != 1:
        raise UsageError("train fits exactly one modality; give exactly one feature file")
    name, path = next(iter(paths.items()))
    _, vectors = _load_feature_vectors(path, name)
    labeled = _read_dataset(args.labels, args.splits)
    train_levels = labeled.levels("train")
    train_ids = sorted(i for i in train_levels if i in vectors)
    X_raw = [vectors[i] for i in train_ids]
    y = np.array([ds_mod.normalize_label(train_levels[i]) for i in train_ids])
    standardizer = fit_standardizer(X_raw)
    X = np.stack([apply_standardizer(standardizer, v) for v in X_raw])
    kernel = _kernel_from_args(args, dim=X.shape[1])
    model = svr_mod.train_svr(X, y, kernel, _hyper_from_args(args), standardizer=standardizer)
    out = _outdir(args.out)
    svr_mod.save_model(out / f"model_{_safe_name(name)}.tsv", model)
    return 0


def _safe_name(modality: str) -> str:
    return modality.replace(":", "_")


def _cmd_predict(args) -> int:
    paths = _named_feature_paths(args)
    if len(paths) != 1:
        raise UsageError("predict takes exactly one feature file")
    name, path = next(iter(paths.items()))
    _, vectors = _load_feature_vectors(path, name)
    try:
        model = svr_mod.load_model(args.model)
    except CohesionError as exc:
        _tag_path(args.model, exc)
        raise
    ids = sorted(vectors)
    preds: dict[str, float] = {}
    if ids:
        X = np.stack([vectors[i] for i in ids])
        values = svr_mod.predict_batch(model, X)
        preds = {i: float(v) for i, v in zip(ids, values)}
    out = _outdir(args.out)
    ds_mod.save_predictions(out / f"predictions_{_safe_name(name)}.tsv", preds, "normalized")
    return 0


def _cmd_fuse(args) -> int:
    raw: dict[str, dict[str, float]] = {}
    for item in args.predictions:
        if "=" not in item:
            raise UsageError(f"--predictions wants MODALITY=PATH, got {item!r}")
        name, _, path_text = item.partition("=")
        if not name or not path_text or name in raw:
            raise UsageError(f"bad --predictions entry {item!r}")
        path = Path(path_text)
        try:
            scale, values = ds_mod.read_predictions(path)
            if scale != "normalized":
                raise CohesionError(f"fuse expects normalized predictions, got scale={scale}")
        except CohesionError as exc:
            _tag_path(path, exc)
            raise
        raw[name] = values
    try:
        split = ds_mod.read_splits(args.splits)
    except CohesionError as exc:
        _tag_path(args.splits, exc)
        raise
    train_ids = [i for i, s in split.items() if s == "train"]
    preds = fu_mod.ModalityPredictions.from_maps(raw, train_ids)

    if args.strategy == "average":
        weights = fu_mod.uniform_weights(preds.modalities())
    else:
        if args.labels is None:
            raise UsageError("grid_search fusion requires --labels")
        try:
            levels = ds_mod.read_labels(args.labels)
        except CohesionError as exc:
            _tag_path(args.labels, exc)
            raise
        truth_norm = {
            i: ds_mod.normalize_label(l)
            for i, l in levels.items()
            if split.get(i) == "val"
        }
        weights = fu_mod.grid_search_weights(preds, truth_norm, args.grid_step)
    fused = fu_mod.fuse_weighted(preds, weights)
    out = _outdir(args.out)
    fu_mod.save_weights(out / "weights.tsv", weights)
    ds_mod.save_predictions(out / "fused.tsv", fused, "normalized")
    return 0


def _cmd_evaluate(args) -> int:
    try:
        scale, values = ds_mod.read_predictions(args.predictions)
    except CohesionError as exc:
        _tag_path(args.predictions, exc)
        raise
    try:
        levels = ds_mod.read_labels(args.labels)
    except CohesionError as exc:
        _tag_path(args.labels, exc)
        raise
    if args.splits is not None:
        try:
            split = ds_mod.read_splits(args.splits)
        except CohesionError as exc:
            _tag_path(args.splits, exc)
            raise
        truth = {i: l for i, l in levels.items() if split.get(i) == args.eval_split}
        variant = args.eval_split
    else:
        truth = levels
        variant = "all"
    if scale == "normalized":
        raw = {i: ds_mod.denormalize_prediction(v) for i, v in values.items()}
    else:
        raw = dict(values)
    row = ev_mod.ReportRow.from_metrics(
        args.method, "external", variant if args.splits is None else args.eval_split, raw, truth
    )
    report = ev_mod.EvaluationReport(seed=args.seed, rows=(row,))
    if args.out is None:
        sys.stdout.write(ev_mod.render_report(report))
    else:
        ev_mod.save_report(_outdir(args.out) / "report.tsv", report)
    return 0


def _cmd_pipeline(args) -> int:
    paths = _named_feature_paths(args)
    features: dict[str, dict[str, np.ndarray]] = {}
    for name, path in paths.items():
        _, features[name] = _load_feature_vectors(path, name)
    labeled = _read_dataset(args.labels, args.splits)
    cfg = ev_mod.MatrixConfig(
        ds=labeled,
        features=features,
        variants=(args.variant,),
        eval_split=args.eval_split,
        kernel=_kernel_from_args(args),
        hyper=_hyper_from_args(args),
        grid_step=args.grid_step,
        balance_ratio=args.balance_ratio,
        balance_level=args.balance_level,
        seed=args.seed,
    )
    run = ev_mod.run_variant(cfg, args.variant, need_grid=True)
    truth = run.ds.levels(args.eval_split)
    rows = []
    for method in cfg.method_order():
        normalized = ev_mod.method_predictions(run, method)
        raw = {i: ds_mod.denormalize_prediction(v) for i, v in normalized.items()}
        rows.append(
            ev_mod.ReportRow.from_metrics(method, args.variant, args.eval_split, raw, truth)
        )
    report = ev_mod.EvaluationReport(
        seed=args.seed, rows=tuple(rows), scale="raw", hyper_summary=cfg.hyper_summary()
    )

    out = _outdir(args.out)
    for name, model in run.models.items():
        svr_mod.save_model(out / f"model_{_safe_name(name)}.tsv", model)
    for name in run.predictions.modalities():
        ds_mod.save_predictions(
            out / f"predictions_{_safe_name(name)}.tsv",
            run.predictions.predictions[name],
            "normalized",
        )
    fu_mod.save_weights(out / "weights.tsv", run.grid_weights)
    fused = fu_mod.fuse_weighted(run.predictions, run.grid_weights)
    ds_mod.save_predictions(out / "fused.tsv", fused, "normalized")
    ev_mod.save_report(out / "report.tsv", report)
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "balance": _cmd_balance,
    "train": _cmd_train,
    "predict": _cmd_predict,
    "fuse": _cmd_fuse,
    "evaluate": _cmd_evaluate,
    "pipeline": _cmd_pipeline,
}


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        name = exc.filename if exc.filename else ""
        print(f"error: {name}: {exc.strerror or exc}", file=sys.stderr)
        return 2
    except CohesionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
