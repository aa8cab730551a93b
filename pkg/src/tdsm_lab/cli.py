"""``tdsm-lab`` command line: data generation, verification, training, sampling, exports.

Exit codes: 0 success, 1 verification or runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import config as C
from . import gmm_oracle as oracle
from . import identities
from . import metrics
from . import objectives as obj
from . import sampler as smp
from .label_noise import InconsistentInputs, NoisyDataset, REVERSE, reverse_from_forward, corrupt_labels
from .noisy_classifier import (IllConditionedTransition, NoisyClassifier, estimate_transition_volmin,
                               train_classifier)
from .score_model import Arch, ScoreModel

log = logging.getLogger("tdsm_lab")

COMMANDS = ("gen-data", "verify", "train", "sample", "contour", "fields")


class CommandFailed(RuntimeError):
    pass


# --- output helpers ---------------------------------------------------------

def header_line(cfg: dict, command: str) -> str:
    return f"tdsm-lab {command} config_hash={C.config_hash(cfg)} seed={cfg['seed']}"


def out_dir(cfg: dict) -> Path:
    p = Path(cfg["out"])
    p.mkdir(parents=True, exist_ok=True)
    return p


def write_csv(path: Path, comment: str, columns, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        w.writerows(rows)


def write_json(path: Path, cfg: dict, command: str, doc: dict) -> None:
    body = {"header": header_line(cfg, command), "config_hash": C.config_hash(cfg), **doc}
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _fmt(v: float) -> str:
    return repr(float(v))


# --- shared builders --------------------------------------------------------

def build_dataset(cfg: dict, gmm=None) -> NoisyDataset:
    gmm = gmm or C.mixture(cfg)
    if cfg["data"]["csv"]:
        return NoisyDataset.from_csv(cfg["data"]["csv"], gmm.classes)
    T, _ = C.noise_matrices(cfg, gmm)
    rng = np.random.Generator(np.random.Philox(C.child_seed(cfg["seed"], "data")))
    x, y = gmm.sample(int(cfg["data"]["n"]), rng)
    return corrupt_labels(x, y, T, C.child_seed(cfg["seed"], "noise"))


def _classifier(cfg: dict, gmm, trainable: bool) -> NoisyClassifier:
    c = cfg["classifier"]
    return NoisyClassifier(gmm.dim, gmm.classes, hidden=tuple(c["hidden"]), time_embed=int(c["time_embed"]),
                           seed=C.child_seed(cfg["seed"], "classifier"), trainable_transition=trainable)


def _trace_rows(trace, objective: str, seed: int):
    return [(step, _fmt(loss), objective, seed) for step, loss in trace]


def _field_fn(model):
    return lambda pts, labels, t: model.score(pts, labels, np.full(len(pts), t))


def _oracle_fields(gmm, sched, S) -> dict:
    return {
        "clean_oracle": lambda p, l, t: oracle.clean_score(gmm, sched, p, l, t),
        "noisy_oracle": lambda p, l, t: oracle.noisy_score(gmm, sched, S, p, l, t),
        "sdsm_fixed_point": lambda p, l, t: oracle.sdsm_fixed_point(gmm, sched, S, p, l, t),
    }


# --- commands ---------------------------------------------------------------

def cmd_gen_data(cfg: dict) -> dict:
    gmm = C.mixture(cfg)
    T, S = C.noise_matrices(cfg, gmm)
    ds = build_dataset(cfg, gmm)
    out = out_dir(cfg)
    ds.to_csv(out / "data.csv", comment=header_line(cfg, "gen-data"))
    T.save(out / "transition_forward.json")
    S.save(out / "transition_reverse.json")
    flip = float(np.mean(ds.clean_labels != ds.noisy_labels)) if ds.clean_labels is not None else float("nan")
    print(f"wrote {len(ds)} rows to {out / 'data.csv'} (flip fraction {flip:.4f})")
    return {"rows": len(ds), "flip_fraction": flip}


def cmd_verify(cfg: dict) -> int:
    gmm, sched, grid = C.mixture(cfg), C.schedule(cfg), C.grid_spec(cfg)
    M = C.noise_spec_matrix(cfg, gmm.classes)
    # |det S| is reported in the worst_error column for this pre-check
    try:
        S = M if M.orientation == REVERSE else reverse_from_forward(M, clean_prior=gmm.clean_prior)[0]
        det = S.det
        pre = identities.Check("transition_invertible", abs(det), float("inf"),
                               None if abs(det) > 1e-12 else f"reverse matrix is singular (det = {det:.3g})")
    except InconsistentInputs as exc:
        S, pre = M, identities.Check("transition_invertible", float("nan"), float("inf"), str(exc))
    checks = [pre]
    if pre.passed:
        checks += identities.run_all(gmm, sched, S, grid)
    rows = []
    for ch in checks:
        status = "PASS" if ch.passed else "FAIL"
        detail = ch.error or ""
        if ch is pre:
            print(f"{status} {ch.name} |det S|={ch.worst:.4g} {detail}".rstrip())
        else:
            print(f"{status} {ch.name} worst={ch.worst:.3e} tol={ch.tol:.0e} {detail}".rstrip())
        rows.append((ch.name, _fmt(ch.worst), _fmt(ch.tol), status, detail))
    write_csv(out_dir(cfg) / "verify.csv", header_line(cfg, "verify"),
              ["identity", "worst_error", "tolerance", "status", "detail"], rows)
    failed = sum(not ch.passed for ch in checks)
    print(f"{len(checks) - failed}/{len(checks)} identities passed")
    return 1 if failed else 0


def train_all(cfg: dict):
    """Train the classifier (if needed) and the score model.  Returns a dict of artefacts."""
    gmm, sched = C.mixture(cfg), C.schedule(cfg)
    ds = build_dataset(cfg, gmm)
    T, S = C.noise_matrices(cfg, gmm)
    ocfg = C.objective_config(cfg)
    sm = cfg["score_model"]
    t_lo, t_hi = sched.t_min, sched.t_max
    clf, T_hat, clf_trace = None, None, []
    needs_weights = ocfg.kind in (obj.TDSM, obj.TDSM_RC)
    if ocfg.weight_source == "classifier" and needs_weights:
        cc = cfg["classifier"]
        seed = C.child_seed(cfg["seed"], "classifier-train")
        if cc["volmin"]:
            clf = _classifier(cfg, gmm, trainable=True)
            T_hat, clf, clf_trace = estimate_transition_volmin(
                clf, ds, steps=int(cc["steps"]), vol_weight=float(cc["vol_weight"]), seed=seed,
                batch_size=int(cc["batch_size"]), lr=float(cc["lr"]), t_lo=t_lo, t_hi=t_hi)
            S, _ = reverse_from_forward(T_hat, noisy_prior=ds.counts / ds.counts.sum())
        else:
            clf = _classifier(cfg, gmm, trainable=False)
            clf, clf_trace = train_classifier(clf, ds, steps=int(cc["steps"]), seed=seed,
                                              batch_size=int(cc["batch_size"]), lr=float(cc["lr"]),
                                              t_lo=t_lo, t_hi=t_hi)
        weight_fn = obj.classifier_weight_fn(clf, S, ds.counts)
    else:
        weight_fn = obj.oracle_weight_fn(gmm, sched, S)
    uncond = float(sm["uncond_prob"])
    needs_null = uncond > 0 or cfg["sampler"]["guidance"]["kind"] in ("cg", "tcg", "cfg")
    model = ScoreModel(gmm.dim, gmm.classes, Arch(tuple(sm["hidden"]), int(sm["class_embed"]), int(sm["time_embed"])),
                       sm["parameterization"], seed=C.child_seed(cfg["seed"], "model"), null_class=needs_null)
    trace = obj.fit_score_model(model, ds.instances, ds.noisy_labels, ocfg, S=S, weight_fn=weight_fn,
                                steps=int(sm["steps"]), batch_size=int(sm["batch_size"]), lr=float(sm["lr"]),
                                seed=C.child_seed(cfg["seed"], "train"), t_lo=t_lo, t_hi=t_hi,
                                uncond_prob=uncond)
    return {"gmm": gmm, "sched": sched, "dataset": ds, "S": S, "T_hat": T_hat, "classifier": clf,
            "classifier_trace": clf_trace, "model": model, "trace": trace, "weight_fn": weight_fn}


def cmd_train(cfg: dict) -> dict:
    t0 = time.perf_counter()
    art = train_all(cfg)
    out = out_dir(cfg)
    head = header_line(cfg, "train")
    kind, seed = cfg["objective"]["kind"], cfg["seed"]
    model = art["model"]
    model.save(out / "score_model.json", extra={"config_hash": C.config_hash(cfg), "objective": kind, "seed": seed})
    write_csv(out / "loss_trace.csv", head, ["step", "loss", "objective", "seed"], _trace_rows(art["trace"], kind, seed))
    if art["classifier"] is not None:
        art["classifier"].save(out / "classifier.json")
        name = "VolMin" if art["T_hat"] is not None else "CE"
        write_csv(out / "classifier_trace.csv", head, ["step", "loss", "objective", "seed"],
                  _trace_rows(art["classifier_trace"], name, seed))
    if art["T_hat"] is not None:
        art["T_hat"].save(out / "transition_estimate.json")
    gmm, sched, grid = art["gmm"], art["sched"], C.grid_spec(cfg)
    refs = _oracle_fields(gmm, sched, art["S"])
    summary = {
        "objective": kind,
        "field_mse_clean": metrics.field_mse(_field_fn(model), refs["clean_oracle"], gmm, sched, grid),
        "field_mse_noisy": metrics.field_mse(_field_fn(model), refs["noisy_oracle"], gmm, sched, grid),
        "final_loss_mean_last_500": float(np.mean([l for _, l in art["trace"][-500:]])),
        "runtime_seconds": time.perf_counter() - t0,
    }
    est = getattr(art["weight_fn"], "estimator", None)
    if est is not None:
        summary["weight_estimator_max_deviation"] = est.last_deviation
    if art["T_hat"] is not None:
        summary["transition_estimate"] = art["T_hat"].to_json()
    write_json(out / "train_summary.json", cfg, "train", summary)
    print(f"trained {kind}: field MSE clean {summary['field_mse_clean']:.4f}, noisy {summary['field_mse_noisy']:.4f}")
    return summary


def requested_labels(n: int, classes: int) -> np.ndarray:
    return np.arange(n) % classes


def _load_classifier(path):
    if path is None:
        raise C.ConfigError("this guidance mode needs --classifier")
    return NoisyClassifier.load(path)


def build_score_fn(cfg: dict, checkpoint=None, use_oracle: bool = False, classifier_path=None):
    gmm, sched = C.mixture(cfg), C.schedule(cfg)
    _, S = C.noise_matrices(cfg, gmm)
    g = cfg["sampler"]["guidance"]
    kind, scale = g["kind"], float(g["scale"])
    model = None
    if not use_oracle:
        if checkpoint is None:
            checkpoint = Path(cfg["out"]) / "score_model.json"
        if not Path(checkpoint).is_file():
            raise C.ConfigError(f"checkpoint {checkpoint} does not exist")
        model = ScoreModel.load(checkpoint)
    if kind == "none":
        return smp.oracle_score_fn(gmm, sched) if use_oracle else smp.model_score_fn(model)
    if kind == "cfg":
        if use_oracle:
            raise C.ConfigError("classifier-free guidance needs a trained model")
        return smp.cfg_score_fn(model, scale)
    if kind == "affine":
        base = smp.oracle_score_fn(gmm, sched) if use_oracle else smp.model_score_fn(model)
        if cfg["objective"]["weight_source"] == "classifier" and not use_oracle:
            clf = _load_classifier(classifier_path)
            counts = oracle.noisy_prior(gmm, S)
            weight_fn = obj.classifier_weight_fn(clf, S, counts)
        else:
            weight_fn = obj.oracle_weight_fn(gmm, sched, S)
        return smp.affine_score_fn(base, weight_fn, scale, gmm.classes)
    # classifier guidance variants
    if use_oracle:
        uncond = lambda x, t: oracle.marginal_score(gmm, sched, x, t)
        noisy_grads = lambda x, t: oracle.oracle_noisy_log_prob_grads(gmm, sched, S, x, t)
        wmat = lambda x, t: oracle.weight_matrices(gmm, sched, S, x, t)
    else:
        null = model.null_index
        uncond = lambda x, t: model.score(x, np.full(len(x), null), np.full(len(x), t))
        clf = _load_classifier(classifier_path)
        noisy_grads = lambda x, t: smp.classifier_log_prob_grads(clf, x, t)
        wmat = smp.weight_matrix_fn(obj.classifier_weight_fn(clf, S, oracle.noisy_prior(gmm, S)), gmm.classes)
    if kind == "cg":
        grad = lambda x, y, t: noisy_grads(x, t)[np.arange(len(x)), y]
        return smp.cg_score_fn(uncond, grad, scale)
    return smp.tcg_score_fn(uncond, noisy_grads, wmat, scale)


def cmd_sample(cfg: dict, checkpoint=None, use_oracle: bool = False, classifier_path=None) -> metrics.MetricsReport:
    t0 = time.perf_counter()
    gmm, sched, grid = C.mixture(cfg), C.schedule(cfg), C.grid_spec(cfg)
    _, S = C.noise_matrices(cfg, gmm)
    score_fn = build_score_fn(cfg, checkpoint, use_oracle, classifier_path)
    n = int(cfg["sampler"]["n_samples"])
    labels = requested_labels(n, gmm.classes)
    scfg = C.sampler_config(cfg)
    xs = smp.sample(score_fn, sched, scfg, labels, n, gmm.dim)
    hits = oracle.clean_posterior(gmm, sched, xs, scfg.t_min).argmax(axis=-1) == labels
    refs = _oracle_fields(gmm, sched, S)
    field = (lambda p, l, t: score_fn(p, l, t)) if cfg["sampler"]["guidance"]["kind"] in ("none", "cfg", "affine") else None
    report = metrics.MetricsReport(
        condition_accuracy=float(hits.mean()),
        per_class_accuracy=[float(hits[labels == y].mean()) for y in range(gmm.classes)],
        score_field_mse_clean=metrics.field_mse_table(field, refs["clean_oracle"], gmm, sched, grid) if field else {},
        score_field_mse_noisy=metrics.field_mse_table(field, refs["noisy_oracle"], gmm, sched, grid) if field else {},
        class_mean_error=metrics.class_mean_errors(gmm, xs, labels),
        runtime_seconds=time.perf_counter() - t0,
    )
    out = out_dir(cfg)
    d = gmm.dim
    write_csv(out / "samples.csv", header_line(cfg, "sample"), [f"x{i + 1}" for i in range(d)] + ["requested_label"],
              [[_fmt(v) for v in xs[k]] + [int(labels[k])] for k in range(n)])
    write_json(out / "metrics.json", cfg, "sample", report.to_json())
    print(f"condition accuracy {report.condition_accuracy:.4f} over {n} samples")
    return report


def cmd_contour(cfg: dict) -> Path:
    gmm, sched, grid = C.mixture(cfg), C.schedule(cfg), C.grid_spec(cfg)
    _, S = C.noise_matrices(cfg, gmm)
    cc = cfg["contour"]
    pts = grid.points()
    rows, panels = [], []
    for t in cc["times"]:
        w = oracle.exact_weight(gmm, sched, S, pts, cc["noisy_label"], cc["clean_label"], float(t))
        panels.append((float(t), w))
        rows += [(_fmt(p[0]), _fmt(p[1]), _fmt(t), _fmt(v)) for p, v in zip(pts, w)]
    out = out_dir(cfg)
    path = out / "contour.csv"
    write_csv(path, header_line(cfg, "contour"), ["x1", "x2", "t", "w"], rows)
    if cc["svg"]:
        (out / "contour.svg").write_text(_svg(panels, grid, header_line(cfg, "contour")), encoding="utf-8")
    print(f"wrote {len(rows)} contour rows to {path}")
    return path


def _svg(panels, grid, comment: str) -> str:
    cell, pad = 12, 20
    side = grid.n * cell
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{len(panels) * (side + pad) + pad}" '
             f'height="{side + 2 * pad}">', f"<!-- {comment} -->"]
    for k, (t, w) in enumerate(panels):
        ox = pad + k * (side + pad)
        parts.append(f'<text x="{ox}" y="14" font-size="11">t={t:g}</text>')
        vals = w.reshape(grid.n, grid.n)
        for i in range(grid.n):          # x2 index, drawn top = high
            for j in range(grid.n):
                v = float(np.clip(vals[i, j], 0.0, 1.0))
                r, b = int(255 * v), int(255 * (1 - v))
                y = pad + (grid.n - 1 - i) * cell
                parts.append(f'<rect x="{ox + j * cell}" y="{y}" width="{cell}" height="{cell}" '
                             f'fill="rgb({r},64,{b})"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_fields(cfg: dict, checkpoints=()) -> dict:
    gmm, sched, grid = C.mixture(cfg), C.schedule(cfg), C.grid_spec(cfg)
    _, S = C.noise_matrices(cfg, gmm)
    fields = _oracle_fields(gmm, sched, S)
    refs = dict(fields)
    for ck in checkpoints:
        if not Path(ck).is_file():
            raise C.ConfigError(f"checkpoint {ck} does not exist")
        fields[Path(ck).stem] = _field_fn(ScoreModel.load(ck))
    out = out_dir(cfg) / "fields"
    out.mkdir(exist_ok=True)
    head = header_line(cfg, "fields")
    pts = grid.points()
    d = gmm.dim
    for name, fn in fields.items():
        rows = []
        for t in grid.times:
            for y in range(gmm.classes):
                s = fn(pts, np.full(len(pts), y), float(t))
                rows += [[_fmt(v) for v in p] + [_fmt(t), y] + [_fmt(v) for v in sv] for p, sv in zip(pts, s)]
        write_csv(out / f"{name}.csv", head, [f"x{i + 1}" for i in range(d)] + ["t", "label"]
                  + [f"s{i + 1}" for i in range(d)], rows)
    table = {}
    for name, fn in fields.items():
        for ref_name, ref in refs.items():
            if name != ref_name:
                table[(name, ref_name)] = metrics.field_mse(fn, ref, gmm, sched, grid)
    write_csv(out / "mse.csv", head, ["field", "reference", "mse"],
              [(a, b, _fmt(v)) for (a, b), v in table.items()])
    for (a, b), v in table.items():
        if a not in refs:
            print(f"{a} vs {b}: {v:.5f}")
    return table


# --- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tdsm-lab", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="JSON experiment config")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="override the output directory")
    p.add_argument("--checkpoint", action="append", default=[], help="score model checkpoint (repeatable for fields)")
    p.add_argument("--classifier", help="noisy classifier checkpoint for guidance")
    p.add_argument("--oracle", action="store_true", help="sample with the closed-form clean score")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = C.load_config(args.config, seed=args.seed, out=args.out)
        if args.command == "gen-data":
            cmd_gen_data(cfg)
        elif args.command == "verify":
            return cmd_verify(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "sample":
            ck = args.checkpoint[0] if args.checkpoint else None
            cmd_sample(cfg, ck, args.oracle, args.classifier)
        elif args.command == "contour":
            cmd_contour(cfg)
        else:
            cmd_fields(cfg, args.checkpoint)
    except C.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (InconsistentInputs, IllConditionedTransition, smp.SamplerDiverged, obj.DegenerateClassifier,
            np.linalg.LinAlgError, FloatingPointError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
