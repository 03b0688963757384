"""Command-line front end.

One executable, nine subcommands covering the whole workflow: dataset
synthesis, training, evaluation, OoD testing, adversarial attacks,
explanations, calibration reports, receptive-field maps and the
corruption grid.  Reports are RFC-4180 CSV with a header row; heatmaps
are additionally written as 8-bit PGM images with per-image min/max
normalization.

Exit codes: 0 success, 1 usage error, 2 bad data or configuration,
3 numeric failure during a run.

The global ``--seed`` overrides the config seed and drives every
randomness stream (data, init, augmentation, attack targets) through
separate counters.  ``--threads`` caps BLAS pools via the usual
environment variables, best effort: pools that were already started
keep their size.
"""

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import attack as A
from . import data as D
from . import explain as E
from . import losses as L
from . import metrics as ME
from . import ood as O
from .checkpoint import (effective_config, load_checkpoint, parse_config,
                         save_checkpoint)
from .errors import DataError, NumericError
from .model import GenerativeClassifier, ModelConfig
from .ood import ScoreSet
from .training import TrainConfig, evaluate, train

_KIND_ALIASES = {"single": "single_threshold", "two_tailed": "two_tailed_quantile"}


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows):
    """RFC-4180 writer; floats keep full precision. path None -> stdout."""
    import csv
    rendered = [[_fmt(v) for v in row] for row in rows]
    if path is None:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(header)
        w.writerows(rendered)
    else:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(header)
            w.writerows(rendered)


def write_pgm(path, grid):
    """8-bit grayscale PGM, min/max normalized per image."""
    g = np.asarray(grid, dtype=np.float64)
    lo, hi = float(g.min()), float(g.max())
    scaled = np.zeros_like(g) if hi <= lo else (g - lo) / (hi - lo)
    pix = np.round(scaled * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (g.shape[1], g.shape[0]))
        f.write(pix.tobytes())


def _cap_threads(n):
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(int(n))


# ---------------------------------------------------------------- commands

def _cmd_synth_data(args):
    seed = 0 if args.seed is None else args.seed
    if args.kind == "bars":
        x, labels = D.synth_bars(args.n, args.classes, seed)
        m = args.classes
    elif args.kind == "uniform_noise":
        x = D.synth_ood("uniform_noise", n=args.n, seed=seed)
        labels = np.zeros(args.n, dtype=np.uint16)
        m = 1
    else:
        if args.reference is None:
            raise DataError("--from is required for kind %r" % args.kind)
        ref_x, labels, m = D.read_dataset(args.reference)
        x = D.synth_ood(args.kind, reference=ref_x, seed=seed)
    D.write_dataset(args.out, x, labels, m)
    print("wrote %s: %d images %s, %d classes"
          % (args.out, x.shape[0], "x".join(str(d) for d in x.shape[1:]), m))
    return 0


def _cmd_train(args):
    if args.config is not None:
        model_cfg, train_cfg = parse_config(args.config)
    else:
        model_cfg, train_cfg = ModelConfig(), TrainConfig()
    if args.seed is not None:
        model_cfg = dataclasses.replace(model_cfg, seed=args.seed)
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    x, labels, m = D.read_dataset(args.data)
    model_cfg = dataclasses.replace(model_cfg, n_classes=m,
                                    image_shape=tuple(x.shape[1:]))
    model = GenerativeClassifier(model_cfg)
    train(model, x, labels, train_cfg)
    pred = model.predict(x)
    refs = ScoreSet(pred.marginal)
    save_checkpoint(model, refs, args.out, train_cfg)
    if args.dump_config is not None:
        with open(args.dump_config, "w", encoding="utf-8") as f:
            json.dump(effective_config(model_cfg, train_cfg), f,
                      indent=2, sort_keys=True)
            f.write("\n")
    acc = float(np.mean(pred.labels == labels))
    bpd = float(np.mean(L.bits_per_dim(pred.marginal, model.dim)))
    print("trained on %d images: accuracy %.4f, bits/dim %.4f"
          % (x.shape[0], acc, bpd))
    print("checkpoint: %s" % args.out)
    return 0


def _cmd_eval(args):
    ck = load_checkpoint(args.model)
    x, labels, _ = D.read_dataset(args.data)
    stats = evaluate(ck.model, x, labels)
    print("n=%d accuracy=%.4f bits/dim=%.4f mean_ll=%.3f entropy=%.4f"
          % (x.shape[0], stats["acc"], stats["bpd"], stats["mean_ll"],
             stats["mean_entropy"]))
    if args.out is not None:
        write_csv(args.out,
                  ["n", "accuracy", "bits_per_dim", "mean_ll", "mean_entropy"],
                  [[x.shape[0], stats["acc"], stats["bpd"], stats["mean_ll"],
                    stats["mean_entropy"]]])
    return 0


def _cmd_ood(args):
    kind = _KIND_ALIASES.get(args.test, args.test)
    ck = load_checkpoint(args.model)
    xin, _, _ = D.read_dataset(args.in_path)
    xood, _, _ = D.read_dataset(args.ood)
    in_ll = ck.model.predict(xin).marginal
    ood_ll = ck.model.predict(xood).marginal
    test = O.fit_test(ck.refs, kind, args.p)
    fpr = float(np.mean(O.is_ood(in_ll, test)))
    tpr = float(np.mean(O.is_ood(ood_ll, test)))
    auc = O.roc_auc(O.atypicality(ck.refs, kind, in_ll),
                    O.atypicality(ck.refs, kind, ood_ll))
    write_csv(args.out, ["dataset", "kind", "p", "fpr", "tpr", "auc"],
              [[args.ood, kind, args.p, fpr, tpr, auc]])
    if args.out is not None:
        print("auc %.2f, fpr %.4f, tpr %.4f -> %s" % (auc, fpr, tpr, args.out))
    return 0


ATTACK_HEADER = ["row", "index", "true_label", "target", "success",
                 "success_margin", "steps", "l2", "l2_per_pixel",
                 "target_confidence", "ll", "detection_score", "objective",
                 "kappa", "d", "success_rate", "success_margin_rate",
                 "mean_l2", "mean_steps", "auc_low_tail", "auc_two_sided"]


def attack_report_rows(labels, targets, results, summary):
    """Per-image rows plus one trailing summary row, shared layout."""
    pad = [None] * 8
    rows = []
    for i, res in enumerate(results):
        rows.append(["image", i, int(labels[i]), int(targets[i]),
                     bool(res.success), bool(res.success_margin), res.steps,
                     res.l2, res.l2_per_pixel, res.target_confidence, res.ll,
                     res.detection_score, res.objective] + pad)
    rows.append(["summary", len(results)] + [None] * 11 +
                [summary["kappa"], summary["d"], summary["success_rate"],
                 summary["success_margin_rate"], summary["mean_l2"],
                 summary["mean_steps"], summary["auc_low_tail"],
                 summary["auc_two_sided"]])
    return rows


def _cmd_attack(args):
    ck = load_checkpoint(args.model)
    x, labels, _ = D.read_dataset(args.data)
    if args.n > x.shape[0]:
        raise DataError("dataset holds %d images, need %d" % (x.shape[0], args.n))
    x, labels = x[:args.n], labels[:args.n]
    seed = ck.train_cfg.seed if args.seed is None else args.seed
    targets = A.sample_targets(labels, ck.model.config.n_classes, seed)
    cfg = A.AttackConfig(kappa=args.kappa, c=args.c, d=args.d, lr=args.lr,
                         patience=args.patience, max_steps=args.steps)
    rows, results = A.evaluate_attacks(ck.model, x, targets, [cfg], ck.refs)
    write_csv(args.out, ATTACK_HEADER,
              attack_report_rows(labels, targets, results[0], rows[0]))
    print("attacked %d images: success %.0f%%, mean L2 %.4f, detection auc %.2f"
          % (args.n, 100 * rows[0]["success_rate"], rows[0]["mean_l2"],
             rows[0]["auc_two_sided"]))
    if args.out is not None:
        print("report: %s" % args.out)
    return 0


def _cmd_explain(args):
    ck = load_checkpoint(args.model)
    model = ck.model
    x, _, _ = D.read_dataset(args.input)
    if not 0 <= args.index < x.shape[0]:
        raise DataError("image index %d out of range" % args.index)
    pred = model.predict(x[args.index:args.index + 1])
    post = pred.posterior[0]
    order = np.argsort(-post)
    k = min(args.top, model.config.n_classes)
    z = pred.z[0]
    proj = E.project_decision_space(z, model.head.means()[order[:2]])
    os.makedirs(args.out_dir, exist_ok=True)
    join = lambda stem: os.path.join(args.out_dir, stem)
    write_csv(join("projection.csv"),
              ["h", "v", "delta_mu", "span_dim", "h_mark", "v_mark"],
              [[proj.h, proj.v, proj.delta_mu, proj.span_dim,
                proj.h_mark, proj.v_mark]])
    sim = E.similarity_matrix(model.head)
    top_rows = [[rank, int(y), post[y], sim[order[0]][y].delta_mu,
                 sim[order[0]][y].expected_confidence]
                for rank, y in enumerate(order[:k])]
    write_csv(join("similarity.csv"),
              ["rank", "class", "posterior", "delta_mu", "expected_confidence"],
              top_rows)
    pool = model.blocks[-1]
    maps = [(E.saliency_heatmap(z, model.head, pool), "saliency"),
            (E.class_heatmap(z, model.head, pool, int(order[0])),
             "class%d" % order[0])]
    for hm, stem in maps:
        write_csv(join(stem + ".csv"),
                  ["c%d" % j for j in range(hm.grid.shape[1])],
                  hm.grid.tolist())
        write_pgm(join(stem + ".pgm"), hm.grid)
    print("predicted class %d (posterior %.4f)" % (order[0], post[order[0]]))
    print("projection h=%.4f v=%.4f over delta_mu=%.4f"
          % (proj.h, proj.v, proj.delta_mu))
    print("wrote projection.csv, similarity.csv and %d heatmap pairs to %s"
          % (len(maps), args.out_dir))
    return 0


def _cmd_calibrate(args):
    ck = load_checkpoint(args.model)
    x, labels, _ = D.read_dataset(args.data)
    pred = ck.model.predict(x)
    conf = pred.posterior.max(axis=1)
    correct = pred.labels == labels
    curve = ME.calibration_curve(conf, correct, args.bins)
    rows = [[curve.edges[i], curve.edges[i + 1], curve.midpoints[i],
             int(curve.counts[i]), curve.accuracy[i]]
            for i in range(len(curve.midpoints))]
    write_csv(args.out, ["bin_lo", "bin_hi", "midpoint", "count", "accuracy"],
              rows)
    oc = ME.oce(conf, correct)
    print("ece %.6f, mce %.6f, oce %s"
          % (ME.ece(curve), ME.mce(curve),
             "n/a (no prediction above threshold)" if oc is None else "%.6f" % oc))
    return 0


def _cmd_rf(args):
    ck = load_checkpoint(args.model)
    x, _, _ = D.read_dataset(args.data)
    rf = ME.effective_receptive_field(ck.model, x[:args.n])
    write_csv(args.out, ["c%d" % j for j in range(rf.sensitivity.shape[1])],
              rf.sensitivity.tolist())
    print("fwhm %.3f px around feature column %s" % (rf.fwhm, rf.center))
    return 0


def _cmd_corrupt(args):
    ck = load_checkpoint(args.model)
    x, labels, _ = D.read_dataset(args.data)
    baseline = None
    if args.baseline is not None:
        baseline = load_checkpoint(args.baseline).model
    report = ME.corruption_suite(ck.model, (x, labels), baseline_model=baseline,
                                 seed=0 if args.seed is None else args.seed)
    report.write_csv(args.out)
    if report.mce is None:
        print("corruption grid written to %s (no baseline, no mCE)" % args.out)
    else:
        print("corruption grid written to %s, mCE %.4f" % (args.out, report.mce))
    return 0


# ------------------------------------------------------------------ parser

def build_parser():
    parser = argparse.ArgumentParser(
        prog="ibgc",
        description="invertible-network generative classifier workbench")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the run seed for every stream")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap BLAS threads (best effort)")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("synth-data", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--kind", default="bars",
                   choices=("bars", "uniform_noise", "inverted", "shuffled_pixels"))
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--from", dest="reference", default=None,
                   help="reference dataset for derived kinds")
    p.set_defaults(run=_cmd_synth_data)

    p = sub.add_parser("train", help="train a model and save a checkpoint")
    p.add_argument("--config", default=None, help="JSON config (defaults apply)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dump-config", default=None,
                   help="write the effective config as JSON")
    p.set_defaults(run=_cmd_train)

    p = sub.add_parser("eval", help="accuracy and bits/dim on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(run=_cmd_eval)

    p = sub.add_parser("ood", help="out-of-distribution detection report")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="in_path", required=True,
                   help="in-distribution dataset")
    p.add_argument("--ood", required=True, help="out-of-distribution dataset")
    p.add_argument("--test", default="two_tailed",
                   choices=("single", "typicality", "two_tailed") + O.KINDS)
    p.add_argument("--p", type=float, default=0.01)
    p.add_argument("--out", default=None)
    p.set_defaults(run=_cmd_ood)

    p = sub.add_parser("attack", help="targeted attacks with a summary row")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--kappa", type=float, default=0.01, help="margin (inf allowed)")
    p.add_argument("--d", type=float, default=0.0, help="detection-fooling weight")
    p.add_argument("--c", type=float, default=10.0)
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--patience", type=int, default=20)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--out", default=None)
    p.set_defaults(run=_cmd_attack)

    p = sub.add_parser("explain", help="projection, similarity and heatmaps")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True, help="dataset holding the image")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--top", type=int, default=5)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(run=_cmd_explain)

    p = sub.add_parser("calibrate", help="reliability bins and ECE/MCE/OCE")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--bins", type=int, default=15)
    p.add_argument("--out", default=None)
    p.set_defaults(run=_cmd_calibrate)

    p = sub.add_parser("rf", help="effective receptive field of the model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--out", default=None)
    p.set_defaults(run=_cmd_rf)

    p = sub.add_parser("corrupt", help="corruption robustness grid")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--baseline", default=None,
                   help="checkpoint for corruption-error ratios")
    p.add_argument("--out", required=True)
    p.set_defaults(run=_cmd_corrupt)

    return parser


def dispatch(argv):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if not e.code else 1
    if args.threads is not None:
        _cap_threads(args.threads)
    try:
        return args.run(args) or 0
    except DataError as e:
        print("error: %s" % e, file=sys.stderr)
        return 2
    except ValueError as e:
        print("error: %s" % e, file=sys.stderr)
        return 2
    except OSError as e:
        print("error: %s" % e, file=sys.stderr)
        return 2
    except NumericError as e:
        print("numeric failure: %s" % e, file=sys.stderr)
        return 3


def main(argv=None) -> int:
    return dispatch(sys.argv[1:] if argv is None else list(argv))
