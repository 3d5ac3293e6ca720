"""Command-line pipeline: generate, fit, calibrate, predict, explain, score.

Every subcommand reads and writes plain files under ``--out-dir`` so stages
can be rerun independently; given the same config and seed each stage is
byte-identical across runs.  Config files are flat ``key=value`` lines and
command-line flags override file values.

Exit codes: 0 success, 2 validation error, 3 infeasible optimization,
4 missing artifact.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys

import numpy as np

from . import conformal, data, hierarchy, metrics, qp, similarity, synth, transform
from .exceptions import InfeasibleError, IterationCapError, ValidationError

__all__ = ["RunConfig", "load_config", "main"]

_VARIANT_CHOICES = conformal.VARIANTS + ("all",)


@dataclasses.dataclass
class RunConfig:
    """Every pipeline tunable with its default.

    ``lambda_feat`` is recorded for provenance only; the feature-count
    penalty it weights belongs to backbone training, which is out of scope
    here.  ``rho`` drives the solver's pair constraints, ``rho_true`` the
    synthetic generator's planted pairs.
    """

    k_features: int = 50
    n_per_class: int = 5
    rho: float = 0.5
    lambda_redundancy: float = 0.1
    lambda_bias: float = 0.1
    lambda_feat: float = 3.0
    mip_gap: float = 0.01
    skip_pair_constraints: bool = False
    relax: bool = True
    relax_cap: int = 50
    alpha: tuple = (0.1,)
    score_variant: str = "limited"
    per_class_calibration: int = 10
    ordering: str = "dynamic"
    shift_min: bool = False
    n_classes: int = 12
    n_raw_features: int = 20
    k_true: int = 12
    rho_true: float = 0.5
    concept_mean: float = 3.0
    noise_sigma: float = 0.3
    train_per_class: int = 50
    cal_per_class: int = 50
    test_per_class: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.score_variant not in conformal.VARIANTS:
            raise ValidationError(
                f"unknown score_variant {self.score_variant!r}"
            )
        if self.ordering not in ("dynamic", "static"):
            raise ValidationError(f"unknown ordering {self.ordering!r}")
        for a in self.alpha:
            if not 0.0 < a < 1.0:
                raise ValidationError("alpha values must be in (0, 1)")

    def as_dict(self):
        out = dataclasses.asdict(self)
        out["alpha"] = ",".join("%g" % a for a in self.alpha)
        return out


def _coerce(name, kind, raw):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is tuple:
            return tuple(float(v) for v in raw.split(",") if v.strip())
        return kind(raw)
    except ValueError:
        raise ValidationError(f"config key {name}: cannot parse {raw!r}")


def load_config(path):
    """Parse a flat key=value config file into a RunConfig."""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    kinds = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    types = {
        "int": int,
        "float": float,
        "bool": bool,
        "str": str,
        "tuple": tuple,
    }
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValidationError(
                    f"{path}:{lineno}: expected key=value, got {line!r}"
                )
            key, raw = line.split("=", 1)
            key = key.strip()
            if key not in kinds:
                raise ValidationError(f"{path}:{lineno}: unknown key {key!r}")
            kind = kinds[key]
            kind = types[kind] if isinstance(kind, str) else kind
            values[key] = _coerce(key, kind, raw)
    return RunConfig(**values)


def _config_from_args(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "rho", None) is not None:
        overrides["rho"] = args.rho
    if getattr(args, "alpha", None):
        overrides["alpha"] = tuple(
            float(v) for v in args.alpha.split(",") if v.strip()
        )
    if getattr(args, "variant", None) not in (None, "all"):
        overrides["variant_override"] = args.variant
    if overrides:
        fields = dataclasses.asdict(cfg)
        fields.update(
            {k: v for k, v in overrides.items() if k != "variant_override"}
        )
        if "variant_override" in overrides:
            fields["score_variant"] = overrides["variant_override"]
        cfg = RunConfig(**fields)
    return cfg


def _out_dir(args):
    os.makedirs(args.out_dir, exist_ok=True)
    return args.out_dir


def _path(out_dir, name):
    return os.path.join(out_dir, name)


def _write_json(payload, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _read_json(path):
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _load_split(out_dir, split):
    return data.load_feature_matrix(
        _path(out_dir, f"{split}.csv"),
        _path(out_dir, f"{split}_manifest.json"),
    )


def _load_head(out_dir):
    return data.load_model_head(_path(out_dir, "head.json"))


def _calibration_data(out_dir, cfg):
    """The calibration split: the stored one when present, otherwise carved
    off the front of the test split."""
    if os.path.exists(_path(out_dir, "calibration.csv")):
        cal = _load_split(out_dir, "calibration")
        test = _load_split(out_dir, "test")
        return cal, test
    test = _load_split(out_dir, "test")
    return data.split_calibration(test, cfg.per_class_calibration)


def _static_order(out_dir, cfg, head):
    if cfg.ordering != "static":
        return None
    train = _load_split(out_dir, "train")
    f_star = transform.apply_transform(train, head).values
    return hierarchy.static_order_from_train(f_star, train.labels, head)


def _record_name(variant, alpha):
    return "calibration_%s_a%g.json" % (variant, alpha)


def _variants(args):
    v = getattr(args, "variant", None) or "all"
    return list(conformal.VARIANTS) if v == "all" else [v]


def cmd_generate(args):
    cfg = _config_from_args(args)
    out = _out_dir(args)
    spec = synth.PlantedSpec(
        n_classes=cfg.n_classes,
        n_raw_features=cfg.n_raw_features,
        k_true=cfg.k_true,
        n_per_class=cfg.n_per_class,
        rho_true=cfg.rho_true,
        concept_mean=cfg.concept_mean,
        noise_sigma=cfg.noise_sigma,
        train_per_class=cfg.train_per_class,
        cal_per_class=cfg.cal_per_class,
        test_per_class=cfg.test_per_class,
        seed=cfg.seed,
    )
    train, calibration, test, w_true, psi_gt = synth.generate(spec)
    for fm, name in ((train, "train"), (calibration, "calibration"), (test, "test")):
        data.save_feature_matrix(
            fm,
            _path(out, f"{name}.csv"),
            _path(out, f"{name}_manifest.json"),
        )
    _write_json({"w_true": [[int(v) for v in r] for r in w_true]}, _path(out, "w_true.json"))
    _write_json({"psi_gt": [list(map(float, r)) for r in psi_gt]}, _path(out, "psi_gt.json"))
    print(
        f"generated: C={spec.n_classes} Q={spec.n_raw_features} "
        f"k_true={spec.k_true} n={spec.n_per_class} "
        f"planted_pairs>={spec.n_planted_pairs} seed={spec.seed}"
    )
    return 0


def cmd_similarity(args):
    cfg = _config_from_args(args)
    out = _out_dir(args)
    train = _load_split(out, "train")
    bundle = similarity.build_similarity_bundle(train, rho=cfg.rho)
    similarity.save_similarity_bundle(bundle, _path(out, "similarity.json"))
    print(
        f"similarity: |K|={len(bundle.pair_set)} "
        f"theta={'-' if bundle.theta is None else '%g' % bundle.theta}"
    )
    return 0


def cmd_solve(args):
    cfg = _config_from_args(args)
    out = _out_dir(args)
    train = _load_split(out, "train")
    bundle = similarity.build_similarity_bundle(train, rho=cfg.rho)
    inst = qp.build_instance(
        bundle,
        cfg.k_features,
        cfg.n_per_class,
        lambda_redundancy=cfg.lambda_redundancy,
        lambda_bias=cfg.lambda_bias,
        mip_gap=cfg.mip_gap,
        pair_set=frozenset() if cfg.skip_pair_constraints else None,
    )
    assignment = qp.solve(inst)
    relaxation = None
    if cfg.relax:
        assignment, relaxation = qp.relax_hierarchy(
            assignment, inst, cap=cfg.relax_cap
        )
    qp.save_assignment(assignment, _path(out, "assignment.json"))
    if relaxation is not None:
        _write_json(
            {
                "pairs": [list(p) for p in relaxation.pairs],
                "choice": [int(v) for v in relaxation.choice],
                "converged": relaxation.converged,
                "iterations": relaxation.iterations,
            },
            _path(out, "relaxation.json"),
        )
    mu, sigma, degenerate = transform.fit_normalization(
        train, assignment.selection
    )
    stub = data.ModelHead(
        selection=assignment.selection,
        assignment=assignment.assignment,
        mu=mu,
        sigma=sigma,
        active_mean=np.ones(cfg.k_features),
        n_per_class=cfg.n_per_class,
        k_features=cfg.k_features,
    )
    f_star = transform.apply_transform(train, stub).values
    head = data.ModelHead(
        selection=assignment.selection,
        assignment=assignment.assignment,
        mu=mu,
        sigma=sigma,
        active_mean=transform.fit_active_means(f_star),
        n_per_class=cfg.n_per_class,
        k_features=cfg.k_features,
    )
    data.save_model_head(head, _path(out, "head.json"))
    n_pairs = len(assignment.pairs_shared)
    print(
        f"solve: |K|={len(inst.pair_set)} |P|={n_pairs} "
        f"objective={assignment.objective:.6f} gap={assignment.gap:.6f}"
        + (" degenerate-sigma" if degenerate.any() else "")
    )
    return 0


def cmd_transform(args):
    _config_from_args(args)
    out = _out_dir(args)
    head = _load_head(out)
    splits = (
        ("train", "calibration", "test")
        if args.split == "all"
        else (args.split,)
    )
    for split in splits:
        if args.split == "all" and not os.path.exists(
            _path(out, f"{split}.csv")
        ):
            continue
        fm = _load_split(out, split)
        f_star = transform.apply_transform(fm, head).values
        out_fm = data.FeatureMatrix(
            values=f_star,
            labels=fm.labels,
            n_classes=fm.n_classes,
            split=split,
            sample_ids=fm.sample_ids,
        )
        data.save_feature_matrix(
            out_fm,
            _path(out, f"transformed_{split}.csv"),
            _path(out, f"transformed_{split}_manifest.json"),
        )
        print(f"transform: {split} -> {f_star.shape[0]}x{f_star.shape[1]}")
    return 0


def cmd_calibrate(args):
    cfg = _config_from_args(args)
    out = _out_dir(args)
    head = _load_head(out)
    cal, _ = _calibration_data(out, cfg)
    static_order = _static_order(out, cfg, head)
    f_cal = transform.apply_transform(cal, head).values
    for variant in _variants(args):
        for alpha in cfg.alpha:
            record = conformal.calibrate(
                f_cal,
                cal.labels,
                head,
                alpha,
                variant,
                ordering=cfg.ordering,
                static_order=static_order,
                shift_min=cfg.shift_min,
            )
            conformal.save_calibration_record(
                record, _path(out, _record_name(variant, alpha))
            )
            q = record.quantile
            print(
                f"calibrate: variant={variant} alpha={alpha:g} "
                f"n_cal={record.n_cal} quantile={q:g}"
                + (
                    f" n_limit={record.n_limit}"
                    if record.n_limit is not None
                    else ""
                )
            )
    return 0


def cmd_predict(args):
    cfg = _config_from_args(args)
    out = _out_dir(args)
    head = _load_head(out)
    _, test = _calibration_data(out, cfg)
    static_order = _static_order(out, cfg, head)
    f_test = transform.apply_transform(test, head).values
    variant = args.variant or cfg.score_variant
    alphas = cfg.alpha
    for alpha in alphas:
        record = conformal.load_calibration_record(
            _path(out, _record_name(variant, alpha))
        )
        sets = conformal.predict_sets(
            f_test,
            head,
            record,
            ordering=cfg.ordering,
            static_order=static_order,
            shift_min=cfg.shift_min,
        )
        name = "predictions_%s_a%g.csv" % (variant, alpha)
        with open(_path(out, name), "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(
                ["sample_id", "label", "predicted_set", "set_size", "covered"]
            )
            for i, s in enumerate(sets):
                members = "|".join(str(int(c)) for c in s)
                writer.writerow(
                    [
                        test.sample_ids[i],
                        int(test.labels[i]),
                        members,
                        int(s.shape[0]),
                        int(int(test.labels[i]) in s),
                    ]
                )
        sizes = [s.shape[0] for s in sets]
        covered = [int(test.labels[i]) in s for i, s in enumerate(sets)]
        print(
            f"predict: variant={variant} alpha={alpha:g} "
            f"coverage={np.mean(covered):.4f} mean_size={np.mean(sizes):.4f}"
        )
    return 0


def cmd_explain(args):
    cfg = _config_from_args(args)
    out = _out_dir(args)
    head = _load_head(out)
    fm = _load_split(out, args.split)
    static_order = _static_order(out, cfg, head)
    wanted = [v.strip() for v in args.ids.split(",") if v.strip()]
    if not wanted:
        raise ValidationError("no sample ids given")
    index = {sid: i for i, sid in enumerate(fm.sample_ids)}
    missing = [sid for sid in wanted if sid not in index]
    if missing:
        preview = ", ".join(fm.sample_ids[:10])
        raise ValidationError(
            f"unknown sample ids {missing}; available ids start with: "
            f"{preview}"
        )
    variant = args.variant or cfg.score_variant
    alpha = cfg.alpha[0]
    record_path = _path(out, _record_name(variant, alpha))
    record = (
        conformal.load_calibration_record(record_path)
        if os.path.exists(record_path)
        else None
    )
    f_all = transform.apply_transform(fm, head).values
    for sid in wanted:
        f_star = f_all[index[sid]]
        if cfg.ordering == "static":
            order = static_order
        else:
            order = hierarchy.order_class_features(f_star, head)
        if record is not None:
            predicted = conformal.predict_set(
                f_star,
                head,
                record,
                ordering=cfg.ordering,
                static_order=static_order,
                shift_min=cfg.shift_min,
            )
        else:
            _, chat = transform.predict_logits(f_star, head)
            predicted = {chat}
        for mode in ("restricted", "full"):
            graph = hierarchy.build_explanation_graph(
                f_star, head, order, predicted_set=predicted, mode=mode
            )
            base = _path(out, f"explain_{sid}_{mode}")
            with open(base + ".dot", "w", encoding="utf-8") as fh:
                fh.write(hierarchy.graph_to_dot(graph))
            with open(base + ".json", "w", encoding="utf-8") as fh:
                fh.write(hierarchy.graph_to_json(graph))
        print(f"explain: {sid} -> explain_{sid}_restricted/full .dot/.json")
    return 0


def cmd_metrics(args):
    cfg = _config_from_args(args)
    out = _out_dir(args)
    head = _load_head(out)
    train = _load_split(out, "train")
    _, test = _calibration_data(out, cfg)
    f_train = transform.apply_transform(train, head).values
    f_test = transform.apply_transform(test, head).values
    values = {
        "contrastiveness": metrics.contrastiveness(f_test),
        "generality": metrics.generality(f_train, train.labels, head),
        "feature_sparsity": metrics.feature_sparsity(f_test),
    }
    if test.spatial_maps is not None:
        values["locality5"] = metrics.locality5(test, head)
    psi_path = _path(out, "psi_gt.json")
    if os.path.exists(psi_path):
        psi_gt = np.asarray(_read_json(psi_path)["psi_gt"], dtype=np.float64)
        w_full = head.assignment_full()
        values["structural_grounding"] = metrics.structural_grounding(
            w_full, psi_gt
        )
        values["structural_grounding_raw"] = metrics.structural_grounding_raw(
            w_full, psi_gt
        )
        variant = args.variant or cfg.score_variant
        record_path = _path(out, _record_name(variant, cfg.alpha[0]))
        if os.path.exists(record_path):
            record = conformal.load_calibration_record(record_path)
            static_order = _static_order(out, cfg, head)
            sets = conformal.predict_sets(
                f_test,
                head,
                record,
                ordering=cfg.ordering,
                static_order=static_order,
                shift_min=cfg.shift_min,
            )
            values["set_coherence"] = metrics.set_coherence(
                [set(int(c) for c in s) for s in sets], psi_gt
            )
    metrics.write_metric_report(values, cfg.as_dict(), _path(out, "metrics.csv"))
    for name in sorted(values):
        v = values[name]
        print(f"metrics: {name}={'-' if v is None else '%.4f' % v}")
    return 0


def cmd_evaluate(args):
    cfg = _config_from_args(args)
    out = _out_dir(args)
    head = _load_head(out)
    _, test = _calibration_data(out, cfg)
    static_order = _static_order(out, cfg, head)
    f_test = transform.apply_transform(test, head).values
    psi_path = _path(out, "psi_gt.json")
    psi_gt = (
        np.asarray(_read_json(psi_path)["psi_gt"], dtype=np.float64)
        if os.path.exists(psi_path)
        else None
    )
    reports = []
    for variant in _variants(args):
        for alpha in cfg.alpha:
            record = conformal.load_calibration_record(
                _path(out, _record_name(variant, alpha))
            )
            report = conformal.evaluate(
                f_test,
                test.labels,
                head,
                record,
                ordering=cfg.ordering,
                static_order=static_order,
                shift_min=cfg.shift_min,
                psi_gt=psi_gt,
            )
            reports.append(report)
            print(
                f"evaluate: variant={variant} alpha={alpha:g} "
                f"coverage={report['coverage']:.4f} "
                f"mean_size={report['mean_size']:.4f}"
            )
    reports.sort(key=lambda r: (r["variant"], r["alpha"]))
    with open(
        _path(out, "evaluate.csv"), "w", encoding="utf-8", newline=""
    ) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            [
                "variant",
                "alpha",
                "n_limit",
                "quantile",
                "quantile_zero",
                "coverage",
                "mean_size",
                "coherence",
            ]
        )
        for r in reports:
            writer.writerow(
                [
                    r["variant"],
                    "%g" % r["alpha"],
                    "" if r["n_limit"] is None else r["n_limit"],
                    "%.17g" % r["quantile"],
                    int(r["quantile_zero"]),
                    "%.17g" % r["coverage"],
                    "%.17g" % r["mean_size"],
                    "" if r["coherence"] is None else "%.17g" % r["coherence"],
                ]
            )
    _write_json({"reports": reports}, _path(out, "evaluate.json"))
    if reports:
        with open(
            _path(out, "levels.csv"), "w", encoding="utf-8", newline=""
        ) as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["level", "coverage", "mean_size"])
            for row in reports[0]["levels"]:
                writer.writerow(
                    [
                        row["level"],
                        "%.17g" % row["coverage"],
                        "%.17g" % row["mean_size"],
                    ]
                )
    return 0


def _add_common(sub):
    sub.add_argument("--config", default=None, help="flat key=value config file")
    sub.add_argument("--out-dir", default=".", help="artifact directory")
    sub.add_argument("--seed", type=int, default=None)
    sub.add_argument("--rho", type=float, default=None)
    sub.add_argument("--alpha", default=None, help="comma-separated levels")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="hierset",
        description="hierarchical conformal interpretable head pipeline",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("generate", help="draw a planted synthetic dataset")
    _add_common(p)
    p.set_defaults(func=cmd_generate)

    p = subs.add_parser("similarity", help="write the similarity bundle")
    _add_common(p)
    p.set_defaults(func=cmd_similarity)

    p = subs.add_parser("solve", help="fit the head on the train split")
    _add_common(p)
    p.set_defaults(func=cmd_solve)

    p = subs.add_parser("transform", help="write transformed feature files")
    _add_common(p)
    p.add_argument(
        "--split",
        default="all",
        choices=("train", "calibration", "test", "all"),
    )
    p.set_defaults(func=cmd_transform)

    p = subs.add_parser("calibrate", help="fit conformal calibration records")
    _add_common(p)
    p.add_argument("--variant", default="all", choices=_VARIANT_CHOICES)
    p.set_defaults(func=cmd_calibrate)

    p = subs.add_parser("predict", help="write per-sample prediction sets")
    _add_common(p)
    p.add_argument("--variant", default=None, choices=conformal.VARIANTS)
    p.set_defaults(func=cmd_predict)

    p = subs.add_parser("explain", help="write explanation graphs")
    _add_common(p)
    p.add_argument("--ids", required=True, help="comma-separated sample ids")
    p.add_argument(
        "--split", default="test", choices=("train", "calibration", "test")
    )
    p.add_argument("--variant", default=None, choices=conformal.VARIANTS)
    p.set_defaults(func=cmd_explain)

    p = subs.add_parser("metrics", help="write the metric report")
    _add_common(p)
    p.add_argument("--variant", default=None, choices=conformal.VARIANTS)
    p.set_defaults(func=cmd_metrics)

    p = subs.add_parser("evaluate", help="write coverage/size reports")
    _add_common(p)
    p.add_argument("--variant", default="all", choices=_VARIANT_CHOICES)
    p.set_defaults(func=cmd_evaluate)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (InfeasibleError, IterationCapError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"error: missing artifact: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
