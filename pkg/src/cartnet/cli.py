"""``cartnet`` command-line interface."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from . import kernels as K
from .augment import rotation_consistency
from .cif import read_cif
from .crystal import adp_eigendecompose, contour_scale, ellipsoid_volume
from .curation import CurationCriteria, RejectCode, curate
from .dataset import DatasetSplit, read_dataset, split_dataset, write_dataset
from .elements import symbol
from .errors import CartNetError, ConfigMismatch, MissingAdp
from .graph import build_graph
from .metrics import OraclePredictor, adp_iou, evaluate
from .model import CartNet
from .training import split_config, train

DATA_DIR_ENV = "CARTNET_DATA_DIR"
log = logging.getLogger("cartnet")


def _dump_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def data_path(path):
    """Resolve a data file, falling back to $CARTNET_DATA_DIR for relative paths."""
    p = Path(path)
    base = os.environ.get(DATA_DIR_ENV)
    if not p.is_absolute() and not p.exists() and base:
        return Path(base) / p
    return p


def write_oracle_checkpoint(path):
    """A checkpoint whose predictor returns the dataset's own targets."""
    K.save_arrays(path, {}, {"kind": "oracle"})


def load_predictor(path):
    _, manifest = K.load_arrays(path)
    kind = manifest.get("kind")
    if kind == "oracle":
        return OraclePredictor(), None
    if kind == "cartnet":
        model = CartNet.load(path)
        return model, model.config
    raise ConfigMismatch(f"{path}: unknown checkpoint kind {kind!r}")


def _cutoff(config, args):
    """Graph cutoff: the checkpoint's, unless overridden consistently on the command line."""
    trained = None if config is None else config.cutoff
    requested = getattr(args, "cutoff", None)
    if requested is not None and trained is not None and requested != trained:
        raise ConfigMismatch(
            f"graph cutoff {requested} does not match the checkpoint's training cutoff {trained}")
    return requested if requested is not None else (trained or 5.0)


def _load_structures(args):
    structures = read_dataset(data_path(args.data))
    if getattr(args, "splits", None):
        split = DatasetSplit.load(data_path(args.splits))
        structures = split.select(structures, args.split)
    return structures


def _prediction_graph(structure, r_c):
    """Graph whose every non-hydrogen atom is predicted, experimental ADP or not."""
    g = build_graph(structure, r_c)
    return g.with_edges(node_has_target=g.z != 1)


def _graphs(structures, r_c, include_hydrogens=True):
    return [build_graph(s, r_c, include_hydrogens) for s in structures]


# --- subcommands -------------------------------------------------------------------

def cmd_ingest(args):
    criteria = CurationCriteria()
    if args.criteria:
        with open(args.criteria, encoding="utf-8") as fh:
            criteria = CurationCriteria.from_dict(json.load(fh))
    files = sorted(Path(args.cif_dir).glob("*.cif"))
    kept, extras, counts = [], {}, Counter()
    failures = 0
    for path in files:
        try:
            structures = read_cif(path)
        except (CartNetError, ValueError, OSError, UnicodeDecodeError) as exc:
            failures += 1
            print(f"error: {path.name}: {exc}", file=sys.stderr)
            continue
        for s in structures:
            verdict = curate(s, criteria)
            if verdict:
                counts["accepted"] += 1
                kept.append(s)
                if args.no_curate:
                    extras[s.id] = {"reject": None}
            else:
                counts[verdict.code.value] += 1
                if args.no_curate:
                    kept.append(s)
                    extras[s.id] = {"reject": verdict.code.value,
                                    "reject_detail": verdict.reason.detail}
    write_dataset(kept, args.out, extras)
    print(f"{len(files)} files, {failures} unreadable; accepted {counts['accepted']}")
    for code in RejectCode:
        if counts[code.value]:
            print(f"  rejected {code.value}: {counts[code.value]}")
    print(f"wrote {len(kept)} structures to {args.out}")
    return 1 if failures else 0


def cmd_split(args):
    structures = read_dataset(data_path(args.data))
    fractions = tuple(float(x) for x in args.fractions.split(","))
    split = split_dataset(structures, args.seed, fractions)
    split.save(args.out)
    print(f"train {len(split.train)}, val {len(split.val)}, test {len(split.test)} "
          f"-> {args.out}")
    return 0


def cmd_train(args):
    config = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            config = json.load(fh)
    if args.no_hydrogens:
        config["include_hydrogens"] = False
    if args.seed is not None:
        config["seed"] = args.seed
    model_cfg, train_cfg = split_config(config)
    structures = read_dataset(data_path(args.data))
    if args.splits:
        split = DatasetSplit.load(data_path(args.splits))
        train_set = split.select(structures, "train")
        val_set = split.select(structures, "val")
    else:
        train_set, val_set = structures, []
    model, history = train(train_set, model_cfg, train_cfg, val_structures=val_set or None)
    model.save(args.out)
    history_path = args.history or f"{args.out}.history.csv"
    history.to_csv(history_path)
    last = history.epochs[-1]
    print(f"trained {len(history.step_losses)} steps; final loss {last['train_loss']:.6g}; "
          f"val MAE {last['val_mae']}; checkpoint {args.out}; history {history_path}")
    return 0


def cmd_predict(args):
    model, config = load_predictor(args.ckpt)
    r_c = _cutoff(config, args)
    records = []
    for s in read_cif(args.cif):
        if args.temperature is not None:
            s = s.with_temperature(args.temperature)
        g = _prediction_graph(s, r_c)
        pred = model.predict_graphs([g])[0]
        if np.ndim(pred) == 0:
            records.append({"structure_id": s.id, "prediction": float(pred)})
            print(f"{s.id}: {float(pred):.6g}")
            continue
        for atom, u in zip(np.flatnonzero(g.node_has_target), pred):
            u6 = [u[0, 0], u[1, 1], u[2, 2], u[0, 1], u[0, 2], u[1, 2]]
            vol = ellipsoid_volume(u)
            label = s.sites[atom].label or f"{symbol(int(g.z[atom]))}{atom}"
            records.append({"structure_id": s.id, "atom_index": int(atom), "label": label,
                            "u_cart": [float(x) for x in u6], "volume_A3": vol})
            print(f"{s.id} {label}: U11 {u6[0]:.6f} U22 {u6[1]:.6f} U33 {u6[2]:.6f} "
                  f"U12 {u6[3]:.6f} U13 {u6[4]:.6f} U23 {u6[5]:.6f} A^2; "
                  f"V50 {vol:.6f} A^3")
    if args.out:
        _dump_json({"predictions": records}, args.out)
    return 0


def _report_paths(args):
    report = Path(args.report)
    csv_path = Path(args.csv) if args.csv else report.with_suffix(".csv")
    return report, csv_path


def cmd_evaluate(args):
    model, config = load_predictor(args.ckpt)
    r_c = _cutoff(config, args)
    graphs = _graphs(_load_structures(args), r_c)
    report = evaluate(model, graphs, grid=args.grid)
    report_path, csv_path = _report_paths(args)
    report.to_json(report_path)
    report.to_csv(csv_path)
    print(report.summary())
    return 0


def cmd_rotcheck(args):
    model, config = load_predictor(args.ckpt)
    r_c = _cutoff(config, args)
    graphs = _graphs(_load_structures(args), r_c)
    rotations = [np.eye(3)] * args.n if args.identity else None
    report = rotation_consistency(model, graphs, n_rotations=args.n,
                                  rng=np.random.default_rng(args.seed),
                                  rotations=rotations, grid=args.grid)
    report.meta["seed"] = args.seed
    report_path, csv_path = _report_paths(args)
    report.to_json(report_path)
    report.to_csv(csv_path)
    print(report.summary())
    return 0


def ellipsoid_mesh(center, u, probability=0.5, n_lat=8, n_lon=16):
    """Vertices and triangular faces of the probability contour of ``u``."""
    w, v = adp_eigendecompose(u)
    axes = v * (contour_scale(probability) * np.sqrt(w))
    theta = np.linspace(0.0, np.pi, n_lat + 1)
    phi = np.linspace(0.0, 2 * np.pi, n_lon, endpoint=False)
    unit = [np.array([0.0, 0.0, 1.0])]
    for t in theta[1:-1]:
        for p in phi:
            unit.append(np.array([np.sin(t) * np.cos(p), np.sin(t) * np.sin(p), np.cos(t)]))
    unit.append(np.array([0.0, 0.0, -1.0]))
    verts = np.asarray(center) + np.array(unit) @ axes.T
    faces = []
    ring = lambda i, j: 1 + i * n_lon + (j % n_lon)  # noqa: E731
    for j in range(n_lon):
        faces.append((0, ring(0, j + 1), ring(0, j)))
    for i in range(n_lat - 2):
        for j in range(n_lon):
            a, b = ring(i, j), ring(i, j + 1)
            c, d = ring(i + 1, j), ring(i + 1, j + 1)
            faces += [(a, b, d), (a, d, c)]
    bottom = len(unit) - 1
    for j in range(n_lon):
        faces.append((bottom, ring(n_lat - 2, j), ring(n_lat - 2, j + 1)))
    return verts, faces


def cmd_plot_ellipsoids(args):
    model, config = load_predictor(args.ckpt)
    r_c = _cutoff(config, args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    obj_lines = []
    n_verts = 0
    for s in read_cif(args.cif):
        if args.temperature is not None:
            s = s.with_temperature(args.temperature)
        g = _prediction_graph(s, r_c)
        pred = model.predict_graphs([g])[0]
        for atom, u in zip(np.flatnonzero(g.node_has_target), pred):
            w, v = adp_eigendecompose(u)
            rec = {"structure_id": s.id, "atom_index": int(atom),
                   "element": symbol(int(g.z[atom])),
                   "center": [float(x) for x in g.positions[atom]],
                   "u_cart": np.asarray(u).tolist(),
                   "eigenvalues": [float(x) for x in w],
                   "eigenvectors": v.T.tolist(),
                   "scale_factor": contour_scale(0.5)}
            if args.against_experimental:
                exp = s.sites[atom].adp
                if exp is None:
                    raise MissingAdp(f"{s.id} atom {atom} has no experimental ADP")
                rec["iou"] = float(adp_iou(u, exp))
            records.append(rec)
            verts, faces = ellipsoid_mesh(g.positions[atom], u)
            obj_lines.append(f"o {s.id}_{atom}")
            obj_lines += [f"v {x:.8f} {y:.8f} {z:.8f}" for x, y, z in verts]
            obj_lines += [f"f {a + 1 + n_verts} {b + 1 + n_verts} {c + 1 + n_verts}"
                          for a, b, c in faces]
            n_verts += len(verts)
    _dump_json({"probability": 0.5, "ellipsoids": records}, out / "ellipsoids.json")
    (out / "ellipsoids.obj").write_text("\n".join(obj_lines) + "\n", encoding="utf-8")
    print(f"wrote {len(records)} ellipsoids to {out}")
    return 0


# --- parser ------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="cartnet",
                                     description="CartNet ADP prediction pipeline")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse, expand and curate a directory of CIFs")
    p.add_argument("--cif-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-curate", action="store_true",
                   help="keep rejected structures, tagged with their reject reason")
    p.add_argument("--criteria", help="JSON file overriding curation thresholds")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("split", help="grouped train/val/test split")
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fractions", default="0.78,0.107,0.113")
    p.add_argument("--out", default="splits.json")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--splits")
    p.add_argument("--config", help="JSON file with model and training options")
    p.add_argument("--out", required=True)
    p.add_argument("--history", help="history CSV path (default: <out>.history.csv)")
    p.add_argument("--seed", type=int)
    p.add_argument("--no-hydrogens", action="store_true",
                   help="drop hydrogen atoms from the graphs")
    p.set_defaults(func=cmd_train)

    def add_ckpt(p):
        p.add_argument("--ckpt", required=True)
        p.add_argument("--cutoff", type=float,
                       help="graph cutoff; must match the checkpoint")

    p = sub.add_parser("predict", help="predict ADPs for a CIF")
    add_ckpt(p)
    p.add_argument("--cif", required=True)
    p.add_argument("--temperature", type=float, help="override the input temperature (K)")
    p.add_argument("--out", help="also write predictions as JSON")
    p.set_defaults(func=cmd_predict)

    def add_eval(p):
        add_ckpt(p)
        p.add_argument("--data", required=True)
        p.add_argument("--splits")
        p.add_argument("--split", default="test", choices=("train", "val", "test"))
        p.add_argument("--report", required=True)
        p.add_argument("--csv", help="CSV summary path (default: report with .csv)")
        p.add_argument("--grid", type=int, default=64)

    p = sub.add_parser("evaluate", help="score a checkpoint on a dataset")
    add_eval(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("rotcheck", help="rotation-consistency experiment")
    add_eval(p)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--identity", action="store_true",
                   help="test hook: use identity rotations")
    p.set_defaults(func=cmd_rotcheck)

    p = sub.add_parser("plot-ellipsoids", help="export ellipsoid geometry (JSON + OBJ)")
    add_ckpt(p)
    p.add_argument("--cif", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--temperature", type=float)
    p.add_argument("--against-experimental", action="store_true")
    p.set_defaults(func=cmd_plot_ellipsoids)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CartNetError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
