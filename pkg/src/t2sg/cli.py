"""``t2sg gen|train|eval|infer|plot``: reproducible pipelines over config files.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
import zlib
from multiprocessing import Pool
from pathlib import Path

import numpy as np

from . import config as C
from .datagen import DatasetError, decode_record, encode_record, make_sample, read_dataset, scene_hash, scenario_specs, write_dataset
from .metrics import (
    evaluate_predictions,
    frechet_matrix,
    match_instances,
    prediction_from_inference,
    prediction_from_truth,
    truth_from_sample,
)
from .model import TopoFormer, infer
from .plotting import plot_comparison, plot_loss_curve, plot_report, plot_scene
from .scene import Centerline, Lane, SceneGraph, validate
from .train import NumericAbort, optim_arrays, optim_from_arrays, optim_meta, train

log = logging.getLogger("t2sg")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
PREDICTION_VERSION = 1


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _split_path(cfg: dict, split: str) -> Path:
    return C.data_dir(cfg) / f"{split}.jsonl"


def _read_split(cfg: dict, split: str):
    path = _split_path(cfg, split)
    if not path.exists():
        raise FileNotFoundError(f"dataset split {path} not found; run `t2sg gen` first")
    return read_dataset(path)


def _checkpoint_path(cfg: dict, explicit) -> Path:
    return Path(explicit) if explicit else Path(cfg["out"]) / "checkpoint.npz"


def _load_model(path: Path) -> TopoFormer:
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    try:
        model, _, _ = TopoFormer.load(path)
    except (KeyError, ValueError) as exc:
        raise DatasetError(0, "checkpoint", str(exc)) from None
    return model


def _split_seed(seed: int, name: str) -> int:
    # keyed by the split name so adding a split never reshuffles the others
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(1, dtype=np.uint64)[0])


# ---------------------------------------------------------------- gen


def cmd_gen(cfg: dict, jobs: int = 1) -> dict[str, Path]:
    base = C.scenario_spec(cfg, cfg["data"]["kinds"][0], 0)
    kinds = tuple(cfg["data"]["kinds"])
    written = {}
    seen: dict[str, str] = {}
    for name, count in cfg["data"]["splits"].items():
        specs = scenario_specs(count, _split_seed(cfg["seed"], name), base, kinds)
        if jobs > 1:
            with Pool(jobs) as pool:
                samples = pool.map(make_sample, specs)
        else:
            samples = [make_sample(s) for s in specs]
        samples = [dataclasses.replace(s, scene_id=f"{name}-{k:05d}") for k, s in enumerate(samples)]
        for k, s in enumerate(samples):
            h = scene_hash(s.scene)
            if h in seen:
                raise DatasetError(k + 2, "scene", f"scene {name}-{k} duplicates {seen[h]}")
            seen[h] = f"{name}-{k}"
        path = _split_path(cfg, name)
        write_dataset(samples, path, {"split": name, "run": cfg})
        written[name] = path
        print(f"{name}: {len(samples)} scenes -> {path}")
    return written


# ---------------------------------------------------------------- train


def _val_metrics(model, samples) -> dict:
    r = _evaluate_model(model, samples, 0.5, 0.3)
    return {"det_l": r.det_l, "top_ll": r.top_ll, "a_at_1@3.0": r.a_at_1[3.0], "ols": r.ols}


def cmd_train(cfg: dict, jobs: int = 1):
    out = Path(cfg["out"])
    tcfg = C.train_config(cfg)
    mcfg = C.model_config(cfg)
    train_set = _read_split(cfg, "train")
    val_set = None
    if _split_path(cfg, "val").exists() and tcfg.eval_every:
        val_set = read_dataset(_split_path(cfg, "val"))[: cfg["train"]["val_scenes"]]
    ckpt = out / "checkpoint.npz"
    log_path = out / "metrics.jsonl"
    resume = None
    if cfg["train"]["resume"]:
        path = Path(cfg["train"]["resume"])
        if not path.exists():
            raise FileNotFoundError(f"checkpoint {path} not found")
        model, extra, arrays = TopoFormer.load(path)
        if model.cfg != mcfg:
            raise C.ConfigError("resume checkpoint was trained with a different model config")
        resume = (model, optim_from_arrays(extra["optim"], arrays), int(extra["epoch"]))
        log.info("resuming from %s at epoch %d, step %d", path, resume[2], resume[1].step)
    else:
        out.mkdir(parents=True, exist_ok=True)
        log_path.unlink(missing_ok=True)

    def checkpoint(res):
        res.model.save(
            ckpt,
            extra={"config": cfg, "epoch": res.epoch, "optim": optim_meta(res.optim)},
            arrays=optim_arrays(res.optim),
        )

    result = train(
        train_set,
        mcfg,
        tcfg,
        val_set=val_set,
        log_path=log_path,
        resume=resume,
        evaluate=_val_metrics,
        on_epoch=checkpoint,
    )
    if result.log:
        plot_loss_curve(result.log, out / "figures" / "loss.svg")
    print(f"trained {tcfg.epochs} epochs ({result.optim.step} steps) -> {ckpt}")
    return result


# ---------------------------------------------------------------- eval

_WORKER_MODEL: TopoFormer | None = None


def _init_worker(path: str) -> None:
    global _WORKER_MODEL
    _WORKER_MODEL = _load_model(Path(path))


def _predict_one(args):
    sample, edge_t, node_t = args
    return prediction_from_inference(infer(_WORKER_MODEL, sample, edge_t, node_t), sample.traffic_elements)


def _evaluate_model(model, samples, edge_t, node_t):
    preds = [prediction_from_inference(infer(model, s, edge_t, node_t), s.traffic_elements) for s in samples]
    return evaluate_predictions(preds, [truth_from_sample(s) for s in samples], edge_t)


def report_csv(report) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "threshold", "value"])
    for name, table in (("AP", report.ap), ("mAP", report.map_per_class), ("A@1", report.a_at_1)):
        for t in sorted(table):
            w.writerow([name, f"{t:.1f}", f"{table[t]:.6f}"])
    for label, name in (("DET_l", "det_l"), ("DET_t", "det_t"), ("TOP_ll", "top_ll"), ("TOP_lt", "top_lt"), ("OLS", "ols")):
        w.writerow([label, "", f"{getattr(report, name):.6f}"])
    return buf.getvalue()


def cmd_eval(cfg: dict, jobs: int = 1):
    ec = cfg["eval"]
    samples = _read_split(cfg, ec["split"])
    truths = [truth_from_sample(s) for s in samples]
    if ec["ground_truth"]:
        preds = [prediction_from_truth(t) for t in truths]
    else:
        path = _checkpoint_path(cfg, ec["checkpoint"])
        if jobs > 1:
            _load_model(path)  # fail fast in the parent
            with Pool(jobs, initializer=_init_worker, initargs=(str(path),)) as pool:
                preds = pool.map(_predict_one, [(s, ec["edge_threshold"], ec["node_threshold"]) for s in samples])
        else:
            model = _load_model(path)
            preds = [
                prediction_from_inference(infer(model, s, ec["edge_threshold"], ec["node_threshold"]), s.traffic_elements)
                for s in samples
            ]
    report = evaluate_predictions(preds, truths, ec["edge_threshold"])
    out = Path(cfg["out"]) / "eval"
    _write_json(out / "report.json", {"config": cfg, "report": report.to_dict()})
    (out / "report.csv").write_text(report_csv(report), encoding="utf-8")
    plot_report(report, out / "figures" / "summary.svg")
    print(report.table())
    return report


# ---------------------------------------------------------------- infer


def _input_sample(cfg: dict, section: str):
    sc = cfg[section]
    path = Path(sc["input"]) if sc.get("input") else _split_path(cfg, sc.get("split", "test"))
    if not path.exists():
        raise FileNotFoundError(f"input {path} not found")
    samples = read_dataset(path)
    idx = sc["index"]
    if not 0 <= idx < len(samples):
        raise DatasetError(0, f"{section}.index", f"index {idx} outside 0..{len(samples) - 1}")
    return samples[idx]


def prediction_record(inference, sample, cfg: dict, edge_threshold: float) -> dict:
    lanes = inference.graph.lanes
    return {
        "format_version": PREDICTION_VERSION,
        "config": cfg,
        "scene_id": sample.scene_id,
        "edge_threshold": edge_threshold,
        "lanes": [
            {
                "category": ln.category,
                "confidence": float(c),
                "query": int(q),
                "points": ln.centerline.points.tolist(),
            }
            for ln, c, q in zip(lanes, inference.confidences, inference.query_index)
        ],
        "edges": [list(e) for e in sorted(inference.graph.edges)],
        "edge_scores": inference.edge_scores.tolist(),
        "ground_truth": json.loads(encode_record(sample)),
    }


def read_prediction(path) -> tuple[SceneGraph, dict]:
    try:
        rec = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(exc.lineno, "<prediction>", f"malformed JSON ({exc.msg})") from None
    if rec.get("format_version") != PREDICTION_VERSION:
        raise DatasetError(1, "format_version", f"unsupported prediction version {rec.get('format_version')}")
    try:
        lanes = tuple(Lane(l["category"], Centerline(np.array(l["points"], dtype=np.float64))) for l in rec["lanes"])
        graph = SceneGraph(lanes, frozenset((int(i), int(j)) for i, j in rec["edges"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(1, "lanes", str(exc)) from None
    problems = validate(graph)
    if problems:
        raise DatasetError(1, "edges", "; ".join(problems))
    return graph, rec


def cmd_infer(cfg: dict, jobs: int = 1) -> Path:
    ic = cfg["infer"]
    sample = _input_sample(cfg, "infer")
    model = _load_model(_checkpoint_path(cfg, ic["checkpoint"]))
    result = infer(model, sample, ic["edge_threshold"], ic["node_threshold"])
    path = Path(cfg["out"]) / "infer" / f"{sample.scene_id or 'scene'}.json"
    _write_json(path, prediction_record(result, sample, cfg, ic["edge_threshold"]))
    print(f"{len(result.graph.lanes)} lanes, {len(result.graph.edges)} edges -> {path}")
    return path


# ---------------------------------------------------------------- plot


def cmd_plot(cfg: dict, jobs: int = 1) -> Path:
    pc = cfg["plot"]
    if not pc["input"]:
        raise C.ConfigError("plot.input must name a dataset (.jsonl) or prediction (.json) file")
    src = Path(pc["input"])
    if not src.exists():
        raise FileNotFoundError(f"input {src} not found")
    out = Path(cfg["out"]) / "plot"
    if src.suffix == ".jsonl":
        sample = _input_sample(cfg, "plot")
        return plot_scene(sample.scene, out / f"{sample.scene_id or src.stem}.svg", title=sample.scene_id)
    graph, rec = read_prediction(src)
    name = rec.get("scene_id") or src.stem
    if not pc["compare"]:
        return plot_scene(graph, out / f"{name}.svg", title=name)
    truth = decode_record(json.dumps(rec["ground_truth"])).scene
    d = frechet_matrix([l.centerline.points for l in graph.lanes], [l.centerline.points for l in truth.lanes])
    conf = [l["confidence"] for l in rec["lanes"]]
    m = match_instances(conf, d, 3.0)
    return plot_comparison(graph, truth, m.pairs, out / f"{name}-compare.svg", title=f"{name} vs ground truth")


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer, "plot": cmd_plot}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="t2sg", description="Traffic topology scene graphs on synthetic scenes.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", type=Path, default=None, help="YAML or JSON run configuration")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--out", default=None, help="output directory (overrides config 'out')")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for gen/eval")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.jobs < 1:
            raise C.ConfigError("--jobs must be at least 1")
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise C.ConfigError("--seed must be an unsigned 64-bit integer")
        cfg = C.load_config(args.config, args.overrides, seed=args.seed, out=args.out)
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        (out / f"config.{args.command}.yaml").write_text(C.dump_config(cfg), encoding="utf-8")
        COMMANDS[args.command](cfg, args.jobs)
    except C.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
