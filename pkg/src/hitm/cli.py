"""``hitm`` command line: scenes, training, attacks, evaluation, stream roles.

Exit status: 0 on success, 2 on bad usage, 1 on I/O or validation failure.
"""

import argparse
import csv
import json
import sys
from fractions import Fraction

import numpy as np

from . import attack as atk
from . import detector as det
from . import scenes as sc
from . import stream as st
from ._binfmt import FormatError
from .metrics import average_precision, error_decomposition
from .nms import NMSConfig, nms

CONFIG_SECTIONS = {
    "scenes": {"family", "count", "seed"},
    "detector": {"epochs", "lr", "seed", "batch_size", "init_seed"},
    "attack": {"loss", "mode", "alpha", "decay", "iterations", "epsilon", "init", "seed"},
    "nms": {"conf_threshold", "iou_threshold"},
    "stream": {"fps", "online", "tcp", "listen"},
}

EVAL_HEADER = ("scene", "file", "mean_conf_variation", "num_boxes_clean", "num_boxes",
               "relative_box_variation", "adv_loss", "map_clean", "map_adv")


class UsageError(ValueError):
    pass


def number(text):
    """Float that also accepts fractions such as ``8/255``."""
    try:
        return float(Fraction(text)) if "/" in text else float(text)
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None


def load_config(path):
    """Read and validate a RunConfig JSON document (unknown keys rejected)."""
    if path is None:
        return {k: {} for k in CONFIG_SECTIONS}
    with open(path) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ValueError("config must be a JSON object")
    bad = set(doc) - set(CONFIG_SECTIONS)
    if bad:
        raise ValueError(f"unknown config sections: {sorted(bad)}")
    out = {}
    for name, allowed in CONFIG_SECTIONS.items():
        section = doc.get(name, {})
        if not isinstance(section, dict):
            raise ValueError(f"config section {name!r} must be an object")
        bad = set(section) - allowed
        if bad:
            raise ValueError(f"unknown keys in config section {name!r}: {sorted(bad)}")
        out[name] = dict(section)
    # Validate eagerly so no work starts on a bad document.
    if out["attack"]:
        atk.AttackConfig(**out["attack"])
    NMSConfig(**out["nms"])
    return out


def _pick(flag, section, key, default):
    if flag is not None:
        return flag
    return section.get(key, default)


def _nms_config(args, cfg):
    return NMSConfig(_pick(args.conf, cfg["nms"], "conf_threshold", NMSConfig.conf_threshold),
                     _pick(args.iou, cfg["nms"], "iou_threshold", NMSConfig.iou_threshold))


def _attack_config(args, cfg):
    base = atk.AttackConfig(**cfg["attack"])
    return atk.with_overrides(base, loss=args.loss, mode=args.mode, alpha=args.alpha,
                              decay=args.decay, iterations=args.iters, epsilon=args.eps,
                              init=args.init, seed=args.seed)


def _load_weights(path):
    if path is None:
        raise UsageError("--weights is required")
    return det.load_weights(path)


# ---------------------------------------------------------------- commands

def cmd_gen_scenes(args, cfg, out):
    s = cfg["scenes"]
    family = _pick(args.family, s, "family", 1)
    count = _pick(args.count, s, "count", 20)
    seed = _pick(args.seed, s, "seed", 0)
    scenes = sc.generate(family, count, seed)
    sc.write_scene_dir(args.out, scenes)
    print(f"wrote {len(scenes)} scenes of {scenes[0].family} to {args.out}", file=out)


def cmd_train(args, cfg, out):
    d = cfg["detector"]
    scenes = sc.read_scene_dir(args.scenes)
    if not scenes:
        raise UsageError(f"no scenes in {args.scenes}")
    seed = _pick(args.seed, d, "seed", 0)
    init_seed = _pick(args.init_seed, d, "init_seed", seed)
    weights = det.init_weights(init_seed)

    def log(epoch, loss):
        print(f"epoch {epoch + 1} loss {loss!r}", file=out)

    weights, _ = det.train(weights, [(s.image, s.truth) for s in scenes],
                           _pick(args.epochs, d, "epochs", 200), _pick(args.lr, d, "lr", 1e-2),
                           seed=seed, batch_size=_pick(args.batch_size, d, "batch_size", 8), log=log)
    det.save_weights(weights, args.out)
    print(f"wrote {args.out}", file=out)


def cmd_attack(args, cfg, out):
    weights = _load_weights(args.weights)
    image = sc.load_ppm(args.image)
    acfg = _attack_config(args, cfg)
    pert, series = atk.attack_image(image, weights, acfg, _nms_config(args, cfg))
    atk.save_perturbation(pert, args.out)
    if args.metrics:
        series.to_csv(args.metrics)
    print(f"iterations={len(series)} final num_boxes={series.num_boxes[-1]} "
          f"adv_loss={series.adv_loss[-1]!r}; wrote {args.out}", file=out)


def cmd_train_uap(args, cfg, out):
    weights = _load_weights(args.weights)
    images = [s.image for s in sc.read_scene_dir(args.scenes)]
    if not images:
        raise UsageError(f"no scenes in {args.scenes}")
    acfg = _attack_config(args, cfg)
    pert, series = atk.attack_universal(images, weights, acfg, _nms_config(args, cfg))
    atk.save_perturbation(pert, args.out)
    if args.metrics:
        series.to_csv(args.metrics)
    print(f"epochs={len(series)} images={len(images)} mean num_boxes={series.num_boxes[-1]!r}; "
          f"wrote {args.out}", file=out)


def evaluate(weights, scenes, pert, nms_config=NMSConfig()):
    """Clean-vs-attacked report rows plus overall AP for a list of Scenes."""
    rows, det_clean, det_adv = [], [], []
    for i, s in enumerate(scenes):
        raw_c = det.forward(weights, s.image)
        x_adv = pert.apply(s.image)
        raw_a = det.forward(weights, x_adv)
        rep = error_decomposition(raw_c, raw_a, s.truth, nms_config)
        target = atk.make_tog_target(raw_c, pert.config.mode) if pert.config.loss == "tog" else None
        loss = atk.adversarial_loss(raw_a, pert.config, target)[0]
        rows.append((i, rep.mean_conf_variation, rep.boxes_clean, rep.boxes_adv,
                     rep.relative_box_variation, loss, rep.map_clean, rep.map_adv))
        det_clean.append(nms(raw_c, nms_config.conf_threshold, nms_config.iou_threshold))
        det_adv.append(nms(raw_a, nms_config.conf_threshold, nms_config.iou_threshold))
    truths = [s.truth for s in scenes]
    k = det.NUM_CLASSES
    return rows, average_precision(det_clean, truths, num_classes=k), \
        average_precision(det_adv, truths, num_classes=k)


def cmd_eval(args, cfg, out):
    weights = _load_weights(args.weights)
    if (args.scenes is None) == (args.image is None):
        raise UsageError("give exactly one of --scenes or --image")
    if args.image is not None:
        scenes, files = [sc.Scene(sc.load_ppm(args.image))], [args.image]
    else:
        scenes = sc.read_scene_dir(args.scenes)
        files = [f"frame_{i:04d}.ppm" for i in range(len(scenes))]
    pert = atk.load_perturbation(args.uap)
    ncfg = _nms_config(args, cfg)
    rows, (_, map_clean), (_, map_adv) = evaluate(weights, scenes, pert, ncfg)
    if args.metrics:
        with open(args.metrics, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(EVAL_HEADER)
            for r, f in zip(rows, files):
                w.writerow([r[0], f] + [repr(float(v)) if isinstance(v, float) else v for v in r[1:]])
    n = len(rows)
    mean = [float(v) for v in np.mean([r[1:6] for r in rows], axis=0)]
    print(f"scenes={n} mean_conf_variation={mean[0]!r} num_boxes clean={mean[1]!r} "
          f"attacked={mean[2]!r} relative_box_variation={mean[3]!r} "
          f"mAP clean={float(map_clean)!r} attacked={float(map_adv)!r}", file=out)


def cmd_stream(args, cfg, out):
    s = cfg["stream"]
    tcp = _pick(args.tcp, s, "tcp", None)
    fps = _pick(args.fps, s, "fps", None)
    conns = []
    try:
        if args.role == "source":
            if args.scenes is None:
                raise UsageError("stream source needs --scenes <dir>")
            frames = st.ppm_frames(args.scenes)
            if tcp:
                conn, wf = st.tcp_listen(tcp, "wb")
                conns += [conn, wf]
            else:
                wf = sys.stdout.buffer
            n = st.source(frames, wf, fps)
            print(f"source sent {n} frames", file=sys.stderr)
        elif args.role == "inject":
            listen = _pick(args.listen, s, "listen", None)
            online = _pick(args.online, s, "online", False)
            if tcp:
                conn, rf = st.tcp_connect(tcp, "rb")
                conns += [conn, rf]
            else:
                rf = sys.stdin.buffer
            if listen:
                conn, wf = st.tcp_listen(listen, "wb")
                conns += [conn, wf]
            else:
                wf = sys.stdout.buffer
            if args.uap is None and not online:
                raise UsageError("static injection needs --uap <file>")
            pert = atk.load_perturbation(args.uap) if args.uap else None
            if online:
                weights = _load_weights(args.weights)
                base = pert.config if pert else atk.AttackConfig(**cfg["attack"])
                acfg = atk.with_overrides(base, loss=args.loss, mode=args.mode, alpha=args.alpha,
                                          decay=args.decay, epsilon=args.eps, init=args.init,
                                          seed=args.seed)
                init = atk.Perturbation(pert.delta, acfg) if pert else None
                stats = st.inject(rf, wf, online=st.OnlineAttacker(weights, acfg, init))
            else:
                stats = st.inject(rf, wf, delta=pert.delta)
            print(f"injector passed {stats.frames} frames, max|delta|={stats.max_abs_delta!r}",
                  file=sys.stderr)
        else:
            weights = _load_weights(args.weights)
            if tcp:
                conn, rf = st.tcp_connect(tcp, "rb")
                conns += [conn, rf]
            else:
                rf = sys.stdin.buffer

            def log(entry):
                print(f"frame {entry.index} boxes {entry.num_boxes} "
                      f"mean_conf {entry.mean_confidence:.6f}", file=out)

            report = st.sink(rf, weights, _nms_config(args, cfg), log=log)
            print(f"FPS report: {report.summary()}", file=out)
    finally:
        for c in reversed(conns):
            c.close()


# ------------------------------------------------------------------ parser

def _attack_flags(p):
    p.add_argument("--loss", choices=atk.LOSSES)
    p.add_argument("--mode", choices=("fab", "vanish", "fabrication", "vanishing"))
    p.add_argument("--eps", type=number, help="l-inf budget in [0,1] units, e.g. 8/255")
    p.add_argument("--alpha", type=number, help="initial step size, e.g. 8/255")
    p.add_argument("--decay", type=number, help="step-size decay factor k in (0,1]")
    p.add_argument("--iters", type=int, help="iterations (epochs for train-uap)")
    p.add_argument("--init", choices=atk.INITS)
    p.add_argument("--seed", type=int)


def _nms_flags(p):
    p.add_argument("--conf", type=number, help="confidence threshold")
    p.add_argument("--iou", type=number, help="NMS IoU threshold")


def build_parser():
    parser = argparse.ArgumentParser(prog="hitm", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="RunConfig JSON document")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scenes", help="render a synthetic scene family")
    p.add_argument("--family", help="built-in name, 1-based index or JSON config path")
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_scenes)

    p = sub.add_parser("train", help="train the micro detector")
    p.add_argument("--scenes", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=number)
    p.add_argument("--seed", type=int)
    p.add_argument("--init-seed", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="image-specific attack on one PPM")
    p.add_argument("--weights", required=True)
    p.add_argument("--image", required=True)
    _attack_flags(p)
    _nms_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("train-uap", help="universal perturbation over a scene folder")
    p.add_argument("--weights", required=True)
    p.add_argument("--scenes", required=True)
    _attack_flags(p)
    _nms_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics")
    p.set_defaults(func=cmd_train_uap)

    p = sub.add_parser("eval", help="clean vs attacked metrics and AP")
    p.add_argument("--weights", required=True)
    p.add_argument("--scenes")
    p.add_argument("--image")
    p.add_argument("--uap", required=True)
    _nms_flags(p)
    p.add_argument("--metrics")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stream", help="frame stream roles")
    p.add_argument("role", choices=("source", "inject", "sink"))
    p.add_argument("--tcp", help="source: listen here; inject/sink: connect upstream here")
    p.add_argument("--listen", help="inject: serve the downstream side here")
    p.add_argument("--scenes", help="source: folder of PPM frames")
    p.add_argument("--fps", type=number)
    p.add_argument("--uap")
    p.add_argument("--online", action="store_true", default=None)
    p.add_argument("--weights")
    _attack_flags(p)
    _nms_flags(p)
    p.set_defaults(func=cmd_stream)
    return parser


def main(argv=None, out=None):
    out = out or sys.stdout
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        args.func(args, cfg, out)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"hitm: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, FormatError, st.StreamError, det.TrainingError,
            atk.AttackError, KeyError, TypeError) as exc:
        print(f"hitm: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
