"""Command-line entry point: ``fdqa {synth,train,eval,predict,explain,scenario}``.

Every command works inside a run directory (``--out``): ``synth`` writes
``<out>/data``, ``train`` writes ``<out>/models``, and the remaining commands
read those and write ``<out>/<command>/``.  Text and CSV outputs start with a
``# seed=N`` line.

Exit codes: 0 success, 1 unexpected failure, 2 config error, 3 data error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
import time
from pathlib import Path

import numpy as np

from . import hierarchy as H
from .backbones import ConfigError
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig, dump_config, load_config
from .data import DataError, SyntheticConfig, load_arrays, load_manifest, preprocess, read_image, resize_bilinear, synthesize
from .explain import explain_prediction, render_heatmap, render_transparency, saliency_image, OverlayImage
from .labels import QualityLabel
from .metrics import ConfusionMatrix, MetricsError, confusion_from_arrays, counts_from_normalized, report, scenario_select_index

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4

COMMANDS = ("synth", "train", "eval", "predict", "explain", "scenario")


def _write(path: Path, text: str, seed: int | None = None) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    head = f"# seed={seed}\n" if seed is not None else ""
    path.write_text(head + text, encoding="utf-8")
    return path


def _say(msg: str) -> None:
    print(msg, flush=True)


def _models_dir(cfg: RunConfig) -> Path:
    return cfg.out_dir() / "models"


def _load_hierarchy(cfg: RunConfig) -> H.HierarchicalClassifier:
    d = _models_dir(cfg) / "hierarchy"
    if not d.is_dir():
        raise DataError(f"no trained hierarchy under {d} (run 'train' first)")
    hc = H.load_hierarchy(d)
    return hc.with_thresholds([st.threshold for st in cfg.stages])


def _test_arrays(cfg: RunConfig, resolution: int):
    manifest = load_manifest(cfg.manifest_path())
    X, y, ids = load_arrays(manifest, "test", resolution)
    if len(X) == 0:
        raise DataError(f"{cfg.manifest_path()}: no test records")
    return X, y, ids


# --------------------------------------------------------------------------
# commands


def cmd_synth(cfg: RunConfig) -> int:
    scfg = SyntheticConfig.balanced(
        cfg.synth.train_per_class,
        cfg.synth.test_per_class,
        resolution=cfg.data.resolution,
        seed=cfg.seed,
        missing_structure_rate=cfg.synth.missing_structure_rate,
    )
    out = cfg.data_dir()
    manifest = synthesize(scfg, out)
    _write(out / "synth_info.txt", dump_config(cfg), cfg.seed)
    _say(f"wrote {len(manifest)} images to {out} (train counts {manifest.counts('train')}, test counts {manifest.counts('test')})")
    return EXIT_OK


def _train_cfg(cfg: RunConfig) -> H.TrainConfig:
    t = cfg.train
    prefixes = tuple(p.strip() for p in t.freeze_prefix.split(",") if p.strip())
    return H.TrainConfig(t.epochs, t.batch_size, t.lr, t.stage1_usable, prefixes)


def cmd_train(cfg: RunConfig) -> int:
    manifest = load_manifest(cfg.manifest_path())
    X, y, _ = load_arrays(manifest, "train", cfg.data.resolution)
    tcfg = _train_cfg(cfg)
    specs = [H.StageSpec(st.backbone, None, st.threshold) for st in cfg.stages]
    t0 = time.perf_counter()
    hc, results = H.train_hierarchy(X, y, specs, tcfg, seed=cfg.seed, workers=cfg.train.workers, log=_say)
    _say(f"hierarchy trained in {time.perf_counter() - t0:.1f} s")
    d = _models_dir(cfg)
    H.save_hierarchy(hc, d / "hierarchy")
    log = io.StringIO()
    log.write("model,backbone,epoch,loss\n")
    sizes = io.StringIO()
    sizes.write("model,backbone,num_train,negatives,positives,initial_loss\n")
    for role, st in zip(H.STAGES, cfg.stages):
        r = results[role]
        log.write(f"{role.value},{st.backbone},0,{r.initial_loss:.6f}\n")
        for e, v in enumerate(r.losses, 1):
            log.write(f"{role.value},{st.backbone},{e},{v:.6f}\n")
        sizes.write(f"{role.value},{st.backbone},{r.num_train},{r.class_counts[0]},{r.class_counts[1]},{r.initial_loss:.6f}\n")
        _say(f"{role.model_name} ({st.backbone}): {r.num_train} images, final loss {r.losses[-1] if r.losses else r.initial_loss:.4f}")
    if cfg.train.flat:
        net = H.build_flat_baseline(cfg.flat.backbone, seed=cfg.seed + 3, resolution=cfg.data.resolution)
        fr = H.train_flat(net, X, y, tcfg, seed=cfg.seed + 3)
        save_checkpoint(net, d / "flat.fdqa")
        log.write(f"flat,{cfg.flat.backbone},0,{fr.initial_loss:.6f}\n")
        for e, v in enumerate(fr.losses, 1):
            log.write(f"flat,{cfg.flat.backbone},{e},{v:.6f}\n")
        _say(f"flat baseline ({cfg.flat.backbone}) trained")
    _write(d / "losses.csv", log.getvalue(), cfg.seed)
    _write(d / "stage_sizes.csv", sizes.getvalue(), cfg.seed)
    _write(d / "run_config.txt", dump_config(cfg), cfg.seed)
    return EXIT_OK


def _read_prediction_csv(path: Path) -> tuple[np.ndarray, np.ndarray]:
    if not path.is_file():
        raise DataError(f"predictions file not found: {path}")
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln and not ln.startswith("#")]
    reader = csv.DictReader(lines)
    if not reader.fieldnames or not {"predicted_code", "true_code"} <= set(reader.fieldnames):
        raise DataError(f"{path}: needs predicted_code and true_code columns")
    t, p = [], []
    for lineno, row in enumerate(reader, 2):
        try:
            t.append(int(QualityLabel.from_code(row["true_code"])))
            p.append(int(QualityLabel.from_code(row["predicted_code"])))
        except ValueError as exc:
            raise DataError(f"{path}: line {lineno}: {exc}") from None
    return np.asarray(t, dtype=np.int64), np.asarray(p, dtype=np.int64)


def _write_report(out: Path, stem: str, C: ConfusionMatrix, seed: int) -> str:
    rep = report(C)
    text = rep.to_text(stem)
    _write(out / f"{stem}_metrics.txt", text, seed)
    _write(out / f"{stem}_metrics.csv", rep.to_csv(), seed)
    _write(out / f"{stem}_confusion.csv", C.to_csv(), seed)
    return text


def cmd_eval(cfg: RunConfig) -> int:
    out = cfg.out_dir() / "eval"
    if cfg.eval.predictions:
        t, p = _read_prediction_csv(Path(cfg.eval.predictions))
        _say(_write_report(out, "predictions", confusion_from_arrays(t, p), cfg.seed))
        return EXIT_OK
    hc = _load_hierarchy(cfg)
    X, y, ids = _test_arrays(cfg, hc.resolution)
    probs = H.stage_probabilities(hc, X, workers=cfg.eval.workers)
    preds = [H.route(*row, hc.thresholds) for row in probs]
    hier = confusion_from_arrays(y, [int(p.label) for p in preds])
    _say(_write_report(out, "hierarchical", hier, cfg.seed))
    _write(out / "predictions.csv", H.predictions_csv(ids, preds, y), cfg.seed)
    flat_path = _models_dir(cfg) / "flat.fdqa"
    if flat_path.is_file():
        flat = load_checkpoint(flat_path)
        fc = confusion_from_arrays(y, H.predict_flat(flat.logits(X)))
        _write_report(out, "flat", fc, cfg.seed)
        comp = H.Comparison(hier, fc, {"test images": str(len(y))}).to_text()
        _write(out / "comparison.txt", comp, cfg.seed)
        _say(comp)
    return EXIT_OK


def _load_image(cfg: RunConfig, image: str | None, resolution: int):
    if not image:
        raise ConfigError("--image is required for this command")
    rgb = read_image(image)
    return rgb, preprocess(rgb, resolution)


def cmd_predict(cfg: RunConfig, image: str | None) -> int:
    hc = _load_hierarchy(cfg)
    _, x = _load_image(cfg, image, hc.resolution)
    pred = H.predict(hc, x)
    text = H.predictions_csv([Path(image).name], [pred])
    _write(cfg.out_dir() / "predict" / f"{Path(image).stem}.csv", text, cfg.seed)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_explain(cfg: RunConfig, image: str | None) -> int:
    hc = _load_hierarchy(cfg)
    rgb, x = _load_image(cfg, image, hc.resolution)
    pred = H.predict(hc, x)
    smap = explain_prediction(hc, x, pred)
    r = hc.resolution
    shown = np.clip(resize_bilinear(rgb, r, r) / 255.0, 0.0, 1.0)
    stem = Path(image).stem
    out = cfg.out_dir() / "explain"
    out.mkdir(parents=True, exist_ok=True)
    ext = cfg.explain.format
    explainer = pred.explainer_role.model_name
    note = f"seed={cfg.seed}; explainer={explainer}; label={pred.label.title}"
    OverlayImage(saliency_image(smap), "saliency").save(out / f"{stem}_saliency.{ext}", note)
    render_heatmap(shown, smap, cfg.explain.alpha).save(out / f"{stem}_heat.{ext}", note)
    render_transparency(shown, smap, cfg.explain.floor).save(out / f"{stem}_transparency.{ext}", note)
    meta = (
        f"image = {Path(image).name}\n"
        f"label = {pred.label.title}\n"
        f"path = {' -> '.join(f'{s.role.model_name}:{s.decision}({s.probability:.4f})' for s in pred.path)}\n"
        f"explainer = {explainer}\n"
        f"class_index = {smap.class_index}\n"
    )
    _write(out / f"{stem}_explain.txt", meta, cfg.seed)
    sys.stdout.write(meta)
    return EXIT_OK


def read_candidates(path: Path, totals: str = "") -> tuple[list[str], list[ConfusionMatrix]]:
    """Candidates CSV: ``name`` then nine row-major cells.

    With ``totals`` the cells are row percentages converted to counts;
    otherwise they are integer counts.
    """
    if not path.is_file():
        raise DataError(f"candidates file not found: {path}")
    tot = None
    if totals:
        try:
            tot = [int(v) for v in totals.split(",")]
        except ValueError:
            raise ConfigError(f"scenario.totals: cannot parse {totals!r}") from None
        if len(tot) != 3:
            raise ConfigError("scenario.totals needs three class totals")
    names, mats = [], []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#") or line.startswith("name,"):
            continue
        cells = [c.strip() for c in line.split(",")]
        if len(cells) != 10:
            raise DataError(f"{path}: line {lineno}: expected a name and 9 values")
        try:
            vals = np.array([float(c) for c in cells[1:]]).reshape(3, 3)
            C = counts_from_normalized(vals, tot) if tot else ConfusionMatrix(vals)
        except (ValueError, MetricsError) as exc:
            raise DataError(f"{path}: line {lineno}: {exc}") from None
        names.append(cells[0])
        mats.append(C)
    if not mats:
        raise DataError(f"{path}: no candidates")
    return names, mats


def scenario_report(names, mats, targets, band) -> str:
    from .metrics import accuracy, normalize_rows

    lines = [f"accuracy band [{band[0]:.4f}, {band[1]:.4f}]; {len(mats)} candidates"]
    for name, C in zip(names, mats):
        d = np.diag(normalize_rows(C).values)
        lines.append(f"  {name}: acc {accuracy(C):.4f}  class-conditional " + " ".join(f"{v:.4f}" for v in d))
    for t in targets:
        i = scenario_select_index(mats, t, band)
        v = normalize_rows(mats[i]).values[int(t), int(t)]
        lines.append(f"target {t.title}: select {names[i]} (class-conditional {v:.4f}, acc {accuracy(mats[i]):.4f})")
    return "\n".join(lines) + "\n"


def cmd_scenario(cfg: RunConfig) -> int:
    sc = cfg.scenario
    try:
        targets = [QualityLabel.parse(t) for t in sc.targets.split(",") if t.strip()]
    except ValueError as exc:
        raise ConfigError(f"scenario.targets: {exc}") from None
    band = (sc.band_lo, sc.band_hi)
    if sc.candidates:
        names, mats = read_candidates(Path(sc.candidates), sc.totals)
    else:
        try:
            axis = [float(v) for v in sc.grid.split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"scenario.grid: cannot parse {sc.grid!r}") from None
        hc = _load_hierarchy(cfg)
        X, y, _ = _test_arrays(cfg, hc.resolution)
        try:
            swept = H.sweep_thresholds(hc, X, y, H.threshold_grid(axis))
        except ValueError as exc:
            raise ConfigError(f"scenario.grid: {exc}") from None
        names = [f"t=({a:g},{b:g},{c:g})" for (a, b, c), _ in swept]
        mats = [C for _, C in swept]
        rows = "".join(f"{n}," + ",".join(str(v) for v in C.counts.reshape(-1)) + "\n" for n, C in zip(names, mats))
        _write(cfg.out_dir() / "scenario" / "candidates.csv", "name,c00,c01,c02,c10,c11,c12,c20,c21,c22\n" + rows, cfg.seed)
    try:
        text = scenario_report(names, mats, targets, band)
    except MetricsError as exc:
        raise DataError(str(exc)) from None
    _write(cfg.out_dir() / "scenario" / "scenario_report.txt", text, cfg.seed)
    sys.stdout.write(text)
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fdqa", description="Hierarchical fundus image quality classifier")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", help="run directory (overrides config 'out')")
        if name in ("predict", "explain"):
            p.add_argument("--image", help="image to classify (PPM or PNG)")
    return ap


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    cfg.validate()
    if args.command in ("predict", "explain"):
        return {"predict": cmd_predict, "explain": cmd_explain}[args.command](cfg, args.image)
    return {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "scenario": cmd_scenario}[args.command](cfg)


def main(argv: list[str] | None = None) -> int:
    try:
        return run(argv)
    except ConfigError as exc:
        code, msg = EXIT_CONFIG, f"config error: {exc}"
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        code, msg = EXIT_DATA, f"data error: {exc}"
    except (H.NumericError, FloatingPointError) as exc:
        code, msg = EXIT_NUMERIC, f"numeric failure: {exc}"
    except H.TrainingError as exc:
        code, msg = EXIT_DATA, f"data error: {exc}"
    except Exception as exc:  # pragma: no cover - last-resort diagnostic
        code, msg = EXIT_FAIL, f"error: {type(exc).__name__}: {exc}"
    print(" ".join(str(msg).split()), file=sys.stderr)
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
