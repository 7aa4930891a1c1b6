"""Batch command line: simulate, build-db, train-embed, train-attention,
predict, evaluate, plot.

Failures print one JSON line on stderr. Usage errors exit 2, data errors 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import dataio
from .attention import AttentionModel, ModelConfig, TrainConfig, com_mse, rollout_mse, train, windows
from .errors import EgoForecastError
from .geometry import Court
from .evaluate import alignment_histogram, attention_error
from .pipeline import Predictor, evaluation, predict_attention, selection_trajectories
from .plotting import court_overlay_svg, histogram_panel, line_panel, stack_panels
from .retrieval import EmbedTrainConfig, ExemplarDatabase, embed_database, train_embedding
from .simworld import ATTENTION_MODELS, ScenarioConfig, build_exemplar_db, frames_trajectory, generate

CONFIG_ENV = "EGOFORECAST_CONFIG"
log = logging.getLogger("egoforecast")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _write_json(path, obj):
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def _arr(a) -> list:
    return np.asarray(a, dtype=float).tolist()


def _defaults() -> dict:
    """Optional per-command defaults from the JSON file named by the environment."""
    path = os.environ.get(CONFIG_ENV)
    if not path:
        return {}
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as e:
        raise EgoForecastError(f"cannot read {CONFIG_ENV}={path}: {e}") from None


# ---------------------------------------------------------------- commands


def cmd_simulate(a):
    cfg = ScenarioConfig(
        n_players=a.players,
        seconds=a.seconds,
        dt=a.dt,
        attention_model=a.attention,
        gaze_noise_deg=a.noise_deg,
        gaze_noise_per_speed_deg=a.noise_per_speed_deg,
        seed=a.seed,
    )
    sc = generate(cfg)
    dataio.write_dataset(a.out, sc.frames, cfg.court, {"seed": a.seed, "attention_model": a.attention, "noise_deg": a.noise_deg})
    return {"frames": len(sc.frames), "out": str(a.out)}


def _frames(paths):
    frames_list, court = [], None
    for p in paths:
        frames, court, _ = dataio.read_dataset(p)
        frames_list.append(frames)
    return frames_list, court


def cmd_build_db(a):
    frames_list, _ = _frames(a.data)
    exemplars, grid = [], None
    for frames in frames_list:
        db = build_exemplar_db(frames, a.horizon, a.camera_height, stride=a.stride)
        exemplars.extend(db.exemplars)
        grid = db.grid
    db = ExemplarDatabase(tuple(exemplars), grid)
    dataio.write_exemplar_db(a.out, db)
    return {"exemplars": len(db), "out": str(a.out)}


def cmd_train_embed(a):
    db = dataio.read_exemplar_db(a.db)
    cfg = EmbedTrainConfig(epochs=a.epochs, lr=a.lr, margin=a.margin, seed=a.seed, max_pairs=a.max_pairs)
    res = train_embedding(db, cfg)
    dataio.write_embedding_checkpoint(a.out, res.params, res.eps, {"accuracy": res.accuracy, "train_accuracy": res.train_accuracy})
    if a.embed_db:
        dataio.write_exemplar_db(a.embed_db, embed_database(db, res.params))
    return {"eps": res.eps, "holdout_accuracy": res.accuracy, "train_accuracy": res.train_accuracy, "loss": res.loss_curve, "out": str(a.out)}


def cmd_train_attention(a):
    frames_list, _ = _frames(a.data)
    data = [w for frames in frames_list for w in windows(frames, a.window, a.stride)]
    if not data:
        raise EgoForecastError("no training windows; datasets are shorter than the window")
    model = AttentionModel.create(ModelConfig(out_scale=a.out_scale), seed=a.seed)
    cfg = TrainConfig(epochs=a.epochs, lr=a.lr, pretrain_static_epochs=a.pretrain, seed=a.seed)
    res = train(model, data, cfg)
    dataio.write_attention_checkpoint(a.out, res.model)
    return {
        "initial_loss": res.initial_loss,
        "final_loss": res.final_loss,
        "loss": res.loss_curve,
        "rollout_mse": rollout_mse(res.model, data, a.window),
        "com_mse": com_mse(data, a.window),
        "out": str(a.out),
    }


def _predictor(a):
    db = dataio.read_exemplar_db(a.db)
    params, eps, _ = dataio.read_embedding_checkpoint(a.embed)
    model = dataio.read_attention_checkpoint(a.attention)
    return Predictor(db, params, eps, model, N=a.n, sigma=a.sigma)


def _selection_json(trellis, sel):
    trajs = selection_trajectories(trellis, sel)
    return {
        "indices": list(sel.indices),
        "cost": sel.cost,
        "attention": _arr(sel.attention),
        "players": [{"id": t.player_id, "positions": _arr(t.positions), "gazes": _arr(t.gazes)} for t in trajs],
    }


def cmd_predict(a):
    frames, court, _ = dataio.read_dataset(a.data)
    if not 0 <= a.time_index < len(frames):
        raise EgoForecastError(f"time index {a.time_index} outside 0..{len(frames) - 1}")
    out = {"mode": a.mode, "time_index": a.time_index, "horizon": a.horizon, "dt": frames[1].timestamp - frames[0].timestamp}
    if a.mode == "attention-only":
        model = dataio.read_attention_checkpoint(a.attention)
        out["attention"] = _arr(predict_attention(model, frames, a.time_index, a.horizon))
    else:
        pred = _predictor(a)
        if a.mode == "group":
            trellis, sels = pred.predict_group(frames[a.time_index], a.k, a.horizon)
        else:
            if a.player is None:
                raise UsageError("--player is required for missing-player mode")
            trellis, sels = pred.predict_missing(frames, a.time_index, a.player, a.k, a.horizon)
        out["players"] = list(trellis.player_ids)
        out["candidates"] = list(trellis.sizes)
        out["selections"] = [_selection_json(trellis, s) for s in sels]
    last = min(a.time_index + a.horizon, len(frames) - 1)
    span = last - a.time_index + 1
    out["truth"] = {
        "attention": _arr([f.attention for f in frames[a.time_index : last + 1]]) if frames[a.time_index].attention is not None else None,
        "players": [{"id": p.player_id, "positions": _arr(frames_trajectory(frames, p.player_id, a.time_index, span).positions)} for p in frames[a.time_index].players],
    }
    out["court"] = {"width": court.width, "length": court.length}
    _write_json(a.out, out)
    return {"out": str(a.out), "selections": len(out.get("selections", []))}


def cmd_evaluate(a):
    frames, _, _ = dataio.read_dataset(a.data)
    pred = _predictor(a)
    last = len(frames) - a.horizon - 1
    if last < 0:
        raise EgoForecastError("dataset shorter than the horizon")
    queries = sorted(set(np.linspace(0, last, min(a.queries, last + 1)).round().astype(int).tolist()))
    curves = evaluation(pred, frames, a.mode, a.horizon, queries)
    att_err = [attention_error(predict_attention(pred.model, frames, t, a.horizon), [f.attention for f in frames[t : t + a.horizon + 1]]) for t in queries] if frames[0].attention is not None else []
    hist = alignment_histogram(frames)
    out = {
        "mode": a.mode,
        "horizon": a.horizon,
        "queries": queries,
        "times_s": _arr(curves.times),
        "location_m": {"median": _arr(curves.median_location()), "mean": _arr(curves.mean_location())},
        "gaze_deg": {"median": _arr(curves.median_gaze()), "mean": _arr(curves.mean_gaze())},
        "attention_m": {"mean": _arr(np.mean(att_err, axis=0))} if att_err else None,
        "alignment": {
            "speed_edges": [float(e) if np.isfinite(e) else None for e in hist.speed_edges],
            "angle_edges": _arr(hist.angle_edges),
            "histograms": [None if h is None else _arr(h) for h in hist.histograms],
            "engaged_fraction": hist.engaged,
            "counts": hist.counts.tolist(),
            "threshold_deg": hist.threshold_deg,
        },
    }
    _write_json(a.out, out)
    return {"out": str(a.out), "final_median_location_m": out["location_m"]["median"][-1]}


def cmd_plot(a):
    try:
        doc = json.loads(Path(a.input).read_text(encoding="utf-8"))
    except ValueError as e:
        raise EgoForecastError(f"cannot parse {a.input}: {e}") from None
    if "selections" in doc or (doc.get("mode") == "attention-only" and "attention" in doc):
        court = Court(**doc["court"])
        truth = [p["positions"] for p in doc["truth"]["players"]]
        if doc.get("selections"):
            best = doc["selections"][0]
            predicted = [p["positions"] for p in best["players"]]
            att = best["attention"]
            ids = {p["id"] for p in best["players"]}
            truth = [p["positions"] for p in doc["truth"]["players"] if p["id"] in ids]
        else:
            predicted, att = [], doc["attention"]
        svg = court_overlay_svg(court, predicted, truth, att, title=f"{doc['mode']} prediction, t={doc['time_index']}")
    elif "location_m" in doc:
        t = doc["times_s"]
        panels = [
            line_panel(t, doc["location_m"], "time (s)", "location error (m)", "Location error"),
            line_panel(t, doc["gaze_deg"], "time (s)", "gaze error (deg)", "Gaze error"),
        ]
        if doc.get("attention_m"):
            panels.append(line_panel(t, doc["attention_m"], "time (s)", "attention error (m)", "Joint attention error"))
        al = doc["alignment"]
        edges = al["speed_edges"]
        labels = [f"{edges[k]:g}-{edges[k + 1]:g} m/s" if edges[k + 1] is not None else f">{edges[k]:g} m/s" for k in range(len(edges) - 1)]
        panels.append(histogram_panel(al["angle_edges"], al["histograms"], labels, "Gaze alignment by speed"))
        svg = stack_panels(panels)
    else:
        raise EgoForecastError("input is neither a prediction nor an evaluation file")
    out = Path(a.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(svg, encoding="utf-8")
    return {"out": str(out)}


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="egoforecast", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    p.commands = sub.choices

    s = sub.add_parser("simulate", help="generate a synthetic dataset")
    s.add_argument("--players", type=int, default=6)
    s.add_argument("--seconds", type=float, default=60.0)
    s.add_argument("--dt", type=float, default=0.5)
    s.add_argument("--attention", choices=ATTENTION_MODELS, default="waypoint")
    s.add_argument("--noise-deg", type=float, default=0.0)
    s.add_argument("--noise-per-speed-deg", type=float, default=0.0)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("build-db", help="render exemplars from datasets")
    s.add_argument("--data", type=Path, nargs="+", required=True)
    s.add_argument("--horizon", type=int, default=10)
    s.add_argument("--stride", type=int, default=2)
    s.add_argument("--camera-height", type=float, default=1.7)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_build_db)

    s = sub.add_parser("train-embed", help="train the label-image embedding")
    s.add_argument("--db", type=Path, required=True)
    s.add_argument("--epochs", type=int, default=30)
    s.add_argument("--lr", type=float, default=1e-2)
    s.add_argument("--margin", type=float, default=1.0)
    s.add_argument("--max-pairs", type=int, default=20000)
    s.add_argument("--embed-db", type=Path, help="also write the database with embeddings attached")
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_train_embed)

    s = sub.add_parser("train-attention", help="train the joint-attention model")
    s.add_argument("--data", type=Path, nargs="+", required=True)
    s.add_argument("--epochs", type=int, default=200)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--window", type=int, default=10)
    s.add_argument("--stride", type=int, default=2)
    s.add_argument("--pretrain", type=int, default=0)
    s.add_argument("--out-scale", type=float, default=4.0)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_train_attention)

    for name, helptext in (("predict", "predict futures at one frame"), ("evaluate", "error curves over a dataset")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--data", type=Path, required=True)
        s.add_argument("--db", type=Path)
        s.add_argument("--embed", type=Path)
        s.add_argument("--attention", type=Path, required=True)
        s.add_argument("--horizon", type=int, default=10)
        s.add_argument("--n", type=int, default=5, help="candidates per player")
        s.add_argument("--sigma", type=float, default=1.5, help="medoid-shift bandwidth (m)")
        s.add_argument("--out", type=Path, required=True)
        if name == "predict":
            s.add_argument("--mode", choices=("group", "missing-player", "attention-only"), default="group")
            s.add_argument("--k", type=int, default=10)
            s.add_argument("--time-index", type=int, default=0)
            s.add_argument("--player", type=int)
            s.set_defaults(func=cmd_predict)
        else:
            s.add_argument("--mode", choices=("group", "missing-player"), default="group")
            s.add_argument("--queries", type=int, default=10)
            s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("plot", help="render a prediction or evaluation file as SVG")
    s.add_argument("--input", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_plot)
    return p


def _fail(kind: str, exc, code: int) -> int:
    print(json.dumps({"error": kind, "message": str(exc)}, sort_keys=True), file=sys.stderr)
    return code


def cli_run(argv=None) -> int:
    parser = build_parser()
    try:
        for name, values in _defaults().items():
            if name in parser.commands:
                parser.commands[name].set_defaults(**values)
        args = parser.parse_args(argv)
        if args.command in ("predict", "evaluate") and getattr(args, "mode", "") != "attention-only" and (args.db is None or args.embed is None):
            raise UsageError("--db and --embed are required for this mode")
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        summary = args.func(args)
    except UsageError as e:
        return _fail("UsageError", e, 2)
    except SystemExit as e:  # --help
        return int(e.code or 0)
    except (EgoForecastError, OSError, ValueError, KeyError) as e:
        return _fail(type(e).__name__, e, 1)
    print(json.dumps(summary, sort_keys=True))
    return 0


def main():
    sys.exit(cli_run())


if __name__ == "__main__":
    main()
