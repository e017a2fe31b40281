"""Command-line pipeline: synth, anchors, train, predict, eval, rasterize.

Exit status: 0 on success, 2 on usage or configuration errors, 3 on data
errors. Diagnostics go to stderr; results go to files or stdout.
"""
from __future__ import annotations

import argparse
import base64
import io
import json
import logging
import sys
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .errors import ConfigError, DGANError, InsufficientData, NotFound, ParseError, ShapeError

log = logging.getLogger("dgan")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 2, 3


class UsageError(Exception):
    pass


def _read_json(path, what: str):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {path}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{what} {path}: invalid JSON ({exc})") from None


def _scenarios(path):
    from .data import load_scenario_dir

    p = Path(path)
    if not p.exists():
        raise UsageError(f"data path not found: {path}")
    return load_scenario_dir(p)


def _write(path, text: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text)


# ------------------------------------------------------------------ commands


def cmd_synth(args) -> int:
    from .data import DEFAULT_SYNTH_SPEC, dumps_scenario, synth_scenarios

    spec = DEFAULT_SYNTH_SPEC if args.spec is None else _read_json(args.spec, "spec")
    scenes = synth_scenarios(spec, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(scenes):
        (out / f"scenario_{i:04d}.json").write_text(dumps_scenario(s))
    print(f"wrote {len(scenes)} scenarios to {out}")
    return EXIT_OK


def cmd_anchors(args) -> int:
    from .anchors import AnchorSet, kmeans_anchors, uniform_sample_anchors
    from .data import collect_futures

    if args.method == "manual":
        if not args.manual_file:
            raise UsageError("--method manual needs --manual-file")
        if not Path(args.manual_file).is_file():
            raise UsageError(f"manual anchor file not found: {args.manual_file}")
        anchors = AnchorSet.load(args.manual_file)
        anchors = AnchorSet(anchors.anchors, dict(anchors.metadata, method="manual"))
    else:
        scenes = _scenarios(args.data)
        if not scenes:
            raise InsufficientData(f"no scenarios in {args.data}")
        futures = collect_futures(scenes, args.horizon)
        if not futures:
            raise InsufficientData("no target agents with a full future")
        build = kmeans_anchors if args.method == "kmeans" else uniform_sample_anchors
        anchors = build(futures, args.k_per_class, seed=args.seed)
    anchors.save(args.out)
    pops = anchors.metadata.get("populations", {})
    for cls in anchors.classes:
        line = f"{cls.value}: K={anchors.k(cls)}"
        if cls.value in pops:
            line += " populations=" + ",".join(str(p) for p in pops[cls.value])
        print(line)
    return EXIT_OK


def _load_train_config(path):
    from .model import ModelConfig
    from .training import TrainingConfig

    doc = {} if path is None else _read_json(path, "config")
    try:
        return ModelConfig.from_dict(doc.get("model", {})), TrainingConfig.from_dict(doc.get("training", {}))
    except (TypeError, ValueError, ShapeError) as exc:
        raise ConfigError(f"config: {exc}") from None


def _override(tc, args):
    from .training import TrainingConfig

    d = tc.to_dict()
    for key, flag in (
        ("steps", "steps"),
        ("epochs", "epochs"),
        ("learning_rate", "lr"),
        ("alpha", "alpha"),
        ("batch_size", "batch_size"),
        ("optimizer", "optimizer"),
        ("checkpoint_every", "checkpoint_every"),
    ):
        v = getattr(args, flag, None)
        if v is not None:
            d[key] = v
    d["seed"] = args.seed
    return TrainingConfig.from_dict(d)


def cmd_train(args) -> int:
    from .anchors import AnchorSet
    from .model import init_params, params_from_arrays, prepare_scene
    from .training import load_checkpoint, make_optimizer, train

    if not Path(args.anchors).is_file():
        raise UsageError(f"anchors file not found: {args.anchors}")
    anchors = AnchorSet.load(args.anchors)
    model_cfg, tc = _load_train_config(args.config)
    if args.no_map:
        model_cfg.use_map = False
    model_cfg = model_cfg.with_anchors(anchors)
    tc = _override(tc, args)
    scenes = _scenarios(args.data)
    inputs = [prepare_scene(s, model_cfg, anchors) for s in scenes]
    inputs = [x for x in inputs if len(x.target_rows)]
    if not inputs:
        raise InsufficientData("no training scenario has a target agent")
    optimizer = make_optimizer(tc)
    if args.resume and Path(args.out).is_file():
        arrays, opt_state, meta = load_checkpoint(args.out)
        params = params_from_arrays(arrays)
        optimizer.load_state(opt_state)
        log.info("resuming from step %d", optimizer.t)
    else:
        params = init_params(model_cfg, seed=args.seed)
    meta = {
        "model": model_cfg.to_dict(),
        "training": tc.to_dict(),
        "anchors": json.loads(anchors.to_json()),
    }
    history = train(inputs, params, model_cfg, anchors, tc, optimizer, args.log, args.out, meta)
    if history:
        print(f"step {optimizer.t}: loss_total={history[-1].loss_total:.6f}")
    return EXIT_OK


def _load_model(path):
    from .anchors import AnchorSet
    from .model import ModelConfig, params_from_arrays
    from .training import load_checkpoint

    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    arrays, _, meta = load_checkpoint(path)
    if "model" not in meta or "anchors" not in meta:
        raise UsageError(f"checkpoint metadata {path}.json missing or incomplete")
    anchors = AnchorSet.from_json(json.dumps(meta["anchors"]))
    return params_from_arrays(arrays), ModelConfig.from_dict(meta["model"]), anchors


def _prob_color(p: float) -> str:
    # low probability -> blue, high -> red
    r = int(round(255 * p))
    return f"#{r:02x}40{255 - r:02x}"


def prediction_svg(scenario, preds, config, top: int) -> str:
    from .model import raster_center
    from .raster import rasterize

    agents = scenario.model_agents()
    img = rasterize(scenario.map, raster_center(scenario, agents), config.raster_size, config.raster_resolution)
    h, w = img.pixels.shape[:2]
    buf = io.BytesIO()
    from PIL import Image

    Image.fromarray(np.ascontiguousarray(img.pixels)).save(buf, format="PNG")
    png = base64.b64encode(buf.getvalue()).decode("ascii")

    def pt(p):
        x = (p[0] - img.origin[0]) / img.resolution
        y = h - (p[1] - img.origin[1]) / img.resolution
        return f"{x:.2f},{y:.2f}"

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" xmlns:xlink="http://www.w3.org/1999/xlink" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
        f'<image x="0" y="0" width="{w}" height="{h}" xlink:href="data:image/png;base64,{png}"/>',
    ]
    for tr in agents:
        hist = tr.upto(scenario.t_ob)
        parts.append(
            f'<polyline class="observed" fill="none" stroke="#ffffff" stroke-width="1" stroke-dasharray="3,2" '
            f'points="{" ".join(pt(p) for p in hist.xy)}"><title>{escape(tr.agent_id)}</title></polyline>'
        )
    for p in preds:
        last = scenario.agent(p.agent_id).position_at(scenario.t_ob)
        for i in p.ranked()[:top]:
            prob = float(p.probabilities[i])
            pts = " ".join(pt(q) for q in np.vstack([last[None], p.trajectories[i]]))
            parts.append(
                f'<polyline class="predicted" fill="none" stroke="{_prob_color(prob)}" stroke-width="1.5" '
                f'points="{pts}"><title>{escape(p.agent_id)} p={prob:.4f}</title></polyline>'
            )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_predict(args) -> int:
    from .data import load_scenario_json
    from .model import forward

    params, config, anchors = _load_model(args.checkpoint)
    if not Path(args.scenario).is_file():
        raise UsageError(f"scenario not found: {args.scenario}")
    scenario = load_scenario_json(args.scenario)
    if args.top < 1:
        raise UsageError("--top must be >= 1")
    top = args.top
    if top > anchors.total:
        print(f"warning: --top {top} clamped to {anchors.total}", file=sys.stderr)
        top = anchors.total
    preds = forward(scenario, anchors, params, config)
    fmt = args.format or ("svg" if str(args.out).lower().endswith(".svg") else "json")
    if fmt == "svg":
        _write(args.out, prediction_svg(scenario, preds, config, top))
        return EXIT_OK
    doc = {"agents": []}
    for p in preds:
        order = p.ranked()[:top]
        doc["agents"].append(
            {
                "id": p.agent_id,
                "class": p.agent_class.value,
                "class_probabilities": {c.value: float(v) for c, v in zip(anchors.classes, p.class_probs)},
                "predictions": [
                    {
                        "class": p.labels[i][0],
                        "anchor": int(p.labels[i][1]),
                        "probability": float(p.probabilities[i]),
                        "trajectory": [[float(x), float(y)] for x, y in p.trajectories[i]],
                    }
                    for i in order
                ],
            }
        )
    _write(args.out, json.dumps(doc, sort_keys=True, indent=1) + "\n")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .metrics import (
        LSTMBaselineConfig,
        dgan_predictor,
        evaluate,
        linear_predictor,
        lstm_predictor,
        lstm_training_set,
        train_lstm_baseline,
    )

    params, config, anchors = _load_model(args.checkpoint)
    scenes = _scenarios(args.data)
    if not any(s.target_agents() for s in scenes):
        raise InsufficientData(f"no evaluable target agents in {args.data}")
    baselines = [b for b in (args.baselines or "").split(",") if b]
    unknown = set(baselines) - {"linear", "lstm"}
    if unknown:
        raise UsageError(f"unknown baselines: {sorted(unknown)}")
    horizon = anchors.horizon
    predictors = {"dgan": dgan_predictor(params, config, anchors)}
    echo = {"checkpoint": str(args.checkpoint), "data": str(args.data), "n": args.n, "seed": args.seed}
    if "linear" in baselines:
        predictors["linear"] = linear_predictor(horizon)
    if "lstm" in baselines:
        if not args.lstm_train:
            raise UsageError("the lstm baseline needs --lstm-train DATA")
        lcfg = LSTMBaselineConfig(t_ob=config.t_ob, horizon=horizon)
        obs, fut = lstm_training_set(_scenarios(args.lstm_train), lcfg)
        lparams, _ = train_lstm_baseline(obs, fut, lcfg, steps=args.lstm_steps, seed=args.seed)
        predictors["lstm"] = lstm_predictor(lparams, lcfg)
        echo.update(lstm=lcfg.to_dict(), lstm_steps=args.lstm_steps, lstm_train=str(args.lstm_train))
    report = evaluate(predictors, scenes, horizon, args.n, config=echo)
    _write(args.out, report.to_csv())
    _write(str(args.out) + ".json", json.dumps(report.config, sort_keys=True, indent=1) + "\n")
    sys.stdout.write(report.to_table())
    return EXIT_OK


def cmd_rasterize(args) -> int:
    from .data import load_scenario_json
    from .raster import rasterize, save_raster

    if args.size < 1 or not args.resolution > 0:
        raise UsageError("--size must be >= 1 and --resolution > 0")
    if not Path(args.scenario).is_file():
        raise UsageError(f"scenario not found: {args.scenario}")
    s = load_scenario_json(args.scenario)
    if args.center:
        try:
            cx, cy = (float(v) for v in args.center.split(","))
        except ValueError:
            raise UsageError("--center must be X,Y") from None
    else:
        b = s.map.bounds
        cx, cy = (b[0] + b[2]) / 2, (b[1] + b[3]) / 2
    img = rasterize(s.map, (cx, cy), args.size, args.resolution)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_raster(img, args.out)
    print(img.digest())
    return EXIT_OK


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="seed for every random choice (default 0)")
    common.add_argument("--threads", type=int, default=None, help="BLAS thread cap; 1 forces the deterministic path")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    ap = argparse.ArgumentParser(prog="dgan", description="Dynamic graph attention trajectory prediction pipeline.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate synthetic scenario JSON files")
    p.add_argument("spec", nargs="?", help="synthetic spec JSON (default: built-in mixed-class spec)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("anchors", parents=[common], help="build per-class anchor trajectories")
    p.add_argument("--data", help="scenario JSON file or directory")
    p.add_argument("--method", choices=("kmeans", "uniform", "manual"), default="kmeans")
    p.add_argument("--manual-file", help="anchor JSON used as-is with --method manual")
    p.add_argument("--k-per-class", type=int, default=20, help="anchors per class (default 20)")
    p.add_argument("--horizon", type=int, default=None, help="future steps (default: each scenario's)")
    p.add_argument("--out", required=True, help="anchor JSON to write")
    p.set_defaults(func=cmd_anchors)

    p = sub.add_parser("train", parents=[common], help="train (or resume training) a model")
    p.add_argument("--data", required=True)
    p.add_argument("--anchors", required=True)
    p.add_argument("--config", help='JSON with optional "model" and "training" objects')
    p.add_argument("--out", required=True, help="checkpoint path (metadata goes to <out>.json)")
    p.add_argument("--log", help="CSV training log")
    p.add_argument("--resume", action="store_true", help="continue from --out if it exists")
    p.add_argument("--steps", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--optimizer", choices=("adam", "sgd"))
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--no-map", action="store_true", help="disable the map encoder")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="top-n trajectories per agent")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenario", required=True)
    p.add_argument("--top", type=int, default=2)
    p.add_argument("--out", required=True, help=".json or .svg")
    p.add_argument("--format", choices=("json", "svg"), help="override the format implied by --out")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", parents=[common], help="ADE/FDE/minADE/minFDE report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--baselines", default="linear", help="comma list from {linear,lstm}")
    p.add_argument("--lstm-train", help="training data for the LSTM baseline")
    p.add_argument("--lstm-steps", type=int, default=500)
    p.add_argument("--n", type=int, default=5, help="size of the probability-ranked set")
    p.add_argument("--out", required=True, help="report CSV (config echo goes to <out>.json)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rasterize", parents=[common], help="render a scenario's map")
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", required=True, help=".png or .ppm")
    p.add_argument("--size", type=int, default=200)
    p.add_argument("--resolution", type=float, default=0.5, help="meters per pixel")
    p.add_argument("--center", help="X,Y world center (default: map bounds center)")
    p.set_defaults(func=cmd_rasterize)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.threads is not None:
            if args.threads < 1:
                raise UsageError("--threads must be >= 1")
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                return args.func(args)
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ParseError, InsufficientData, NotFound, DGANError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
