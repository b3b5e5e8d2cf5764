"""Command-line interface: enhance, train, search, complexity and plot.

Exit codes: 0 success, 2 input error, 3 state or config mismatch, 4 runtime failure.
"""

import argparse
import configparser
import json
import logging
import os
import sys
from importlib import resources

import numpy as np

from . import frontend
from .complexity import format_report, report
from .data import DATA_DIR_ENV, ManifestPairs, SyntheticPairs
from .errors import ConfigError, InvalidInputError, StateMismatchError
from .losses import LossWeights
from .network import ArchitectureSpec, assemble, enhance, load_checkpoint, new_stream_state, stream_enhance
from .schedule import ScheduleConfig

DEFAULT_SEED = 0
EXIT_OK, EXIT_INPUT, EXIT_STATE, EXIT_RUNTIME = 0, 2, 3, 4

log = logging.getLogger("ulunas")


def packaged_config(name):
    """Path of a config shipped with the package."""
    return str(resources.files("ulunas") / "configs" / name)


def resolve_config(path, base=None):
    """Return ``path`` if it exists (relative to ``base`` when given), else a packaged config of that name."""
    candidates = [os.path.join(base, path)] if base and not os.path.isabs(path) else []
    candidates += [path, packaged_config(os.path.basename(path))]
    for c in candidates:
        if os.path.isfile(c):
            return c
    raise InvalidInputError(f"config not found: {path}")


def _read_ini(path):
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}", key="file") from exc
    return parser


def _section(parser, name, types):
    if not parser.has_section(name):
        return {}
    out = {}
    for key, raw in parser[name].items():
        if key not in types:
            raise ConfigError(f"unknown key in [{name}]", key=key)
        try:
            out[key] = None if raw.strip().lower() == "none" else types[key](raw.strip())
        except ValueError as exc:
            raise ConfigError(f"cannot parse {raw!r}", key=key) from exc
    return out


TRAIN_KEYS = {
    "model": {"arch": str},
    "data": {"kind": str, "size": int, "seconds": float, "seed": int, "manifest": str, "val_size": int,
             "val_seconds": float, "val_seed": int, "val_manifest": str},
    "train": {"steps": int, "batch_size": int, "validate_every": int, "grad_clip": float, "time_budget": float},
    "schedule": {"kind": str, "warmup_steps": int, "total_steps": int, "lr_start": float, "lr_peak": float,
                 "plateau_patience": int, "plateau_factor": float},
    "loss": {"alpha_w": float, "beta_w": float, "compress": float},
}


def load_train_config(path, seed):
    """Parse a training INI into ``(arch, dataset, val_set, TrainConfig)``."""
    from .train import TrainConfig

    parser = _read_ini(path)
    for name in parser.sections():
        if name not in TRAIN_KEYS:
            raise ConfigError(f"unknown section [{name}]", key=name)
    base = os.path.dirname(os.path.abspath(path))
    model = _section(parser, "model", TRAIN_KEYS["model"])
    arch = ArchitectureSpec.load(resolve_config(model.get("arch", "ul_unas.cfg"), base))
    data = _section(parser, "data", TRAIN_KEYS["data"])
    kind = data.get("kind", "synthetic")
    if kind == "synthetic":
        dataset = SyntheticPairs(data.get("size", 256), data.get("seconds", 1.0), data.get("seed", 1))
        val = SyntheticPairs(data.get("val_size", 16), data.get("val_seconds", 2.0), data.get("val_seed", 2))
    elif kind == "manifest":
        if "manifest" not in data:
            raise ConfigError("manifest data needs a manifest path", key="manifest")
        dataset = ManifestPairs(data["manifest"], seed=seed, seconds=data.get("seconds"))
        val = ManifestPairs(data["val_manifest"], seed=seed) if "val_manifest" in data else None
    else:
        raise ConfigError(f"unknown data kind {kind!r}", key="kind")
    try:
        schedule = ScheduleConfig(**_section(parser, "schedule", TRAIN_KEYS["schedule"]))
        weights = LossWeights(**_section(parser, "loss", TRAIN_KEYS["loss"]))
    except InvalidInputError as exc:
        raise ConfigError(str(exc), key="schedule") from exc
    cfg = TrainConfig(schedule=schedule, weights=weights, seed=seed, **_section(parser, "train", TRAIN_KEYS["train"]))
    return arch, dataset, val, cfg


def cmd_enhance(args):
    expected = ArchitectureSpec.load(resolve_config(args.config)) if args.config else None
    model, _ = load_checkpoint(args.checkpoint, arch=expected)
    noisy = frontend.read_wav(args.input)
    if args.stream:
        hops = [noisy[i:i + frontend.HOP] for i in range(0, len(noisy), frontend.HOP)]
        parts = list(stream_enhance(hops, model, new_stream_state(model)))
        out = np.concatenate([p.numpy() for p in parts]) if parts else np.zeros(0, np.float32)
    else:
        out = enhance(noisy, model).numpy()
    frontend.write_wav(args.out, out)
    log.info("wrote %s (%d samples)", args.out, len(out))
    return EXIT_OK


def cmd_complexity(args):
    arch = ArchitectureSpec.load(resolve_config(args.config or args.arch or "ul_unas.cfg"))
    rep = report(assemble(arch, seed=args.seed))
    if args.json_style:
        out = rep.as_dict()
        if not args.per_layer:
            out.pop("per_layer")
        out["macs_per_frame"] = rep.macs_per_frame
        print(json.dumps(out, indent=2, sort_keys=True))
    else:
        print(format_report(rep, per_layer=args.per_layer))
    return EXIT_OK


def cmd_train(args):
    from .train import train

    arch, dataset, val, cfg = load_train_config(resolve_config(args.config), args.seed)
    cfg.checkpoint_path = args.out
    cfg.log_path = args.log
    if args.steps is not None:
        cfg.steps = args.steps
    model = assemble(arch, seed=args.seed)
    result = train(model, dataset, cfg, val)
    for v in result.validations:
        print(f"step {v['step'] + 1:6d}  val SI-SNR {v['val_sisnr_db']:7.2f} dB  "
              f"(noisy {v['noisy_sisnr_db']:.2f} dB, +{v['improvement_db']:.2f})")
    print(f"trained {result.steps_done} steps in {result.seconds:.1f} s; checkpoint {args.out}")
    return EXIT_OK


def cmd_search(args):
    from .nas.search import load_search_config, search, write_ranked, write_trend

    cfg, evaluator = load_search_config(resolve_config(args.config), seed=args.seed, workers=args.workers)
    os.makedirs(args.out, exist_ok=True)

    def progress(row):
        log.info("episode %d top1 %s mean %.4f lr %.3g", row["episode"], row["top1"], row["mean_reward"], row["lr"])

    result = search(cfg, evaluator, on_episode=progress)
    ranked_path = os.path.join(args.out, "ranked.cfg")
    write_ranked(ranked_path, result.ranked, cfg.space, limit=args.top)
    best = next((c for c in result.ranked if c.ok), None)
    if best is None:
        raise RuntimeError("every candidate failed")
    cfg.space.decode(best.actions).save(os.path.join(args.out, "best.cfg"))
    write_trend(os.path.join(args.out, "trend.csv"), result.trend)
    if args.plot:
        plot_trend(os.path.join(args.out, "trend.csv"), os.path.join(args.out, "trend.png"))
    print(f"{result.episodes_run} episodes, {len(result.ranked)} distinct architectures; "
          f"best reward {best.reward:.6f} (q {best.q:.4f}, {best.macs / 1e6:.2f} M MACS/s)")
    return EXIT_OK


def plot_trend(csv_path, out_path):
    """Render top-k reward curves against the number of sampled models."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .nas.search import read_trend

    rows = read_trend(csv_path)
    if not rows:
        raise InvalidInputError(f"{csv_path} has no rows")
    fig, ax = plt.subplots(figsize=(6, 4))
    x = [r["models_seen"] for r in rows]
    for key in [k for k in rows[0] if k.startswith("top")]:
        pts = [(xi, r[key]) for xi, r in zip(x, rows) if r[key] is not None]
        if pts:
            ax.plot(*zip(*pts), label=f"top-{key[3:]} mean")
    ax.set_xlabel("sampled models")
    ax.set_ylabel("reward")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def plot_losses(log_path, out_path):
    """Render the training loss curve and validation SI-SNR from a JSON-lines log."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    steps, losses, val = [], [], []
    with open(log_path) as f:
        for line in f:
            rec = json.loads(line)
            if "loss" in rec:
                steps.append(rec["step"])
                losses.append(rec["loss"])
            elif "val_sisnr_db" in rec:
                val.append((rec["step"], rec["val_sisnr_db"]))
    if not steps:
        raise InvalidInputError(f"{log_path} has no loss records")
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, losses, lw=0.8, label="loss")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    if val:
        ax2 = ax.twinx()
        ax2.plot(*zip(*val), "o-", color="tab:red", label="val SI-SNR (dB)")
        ax2.set_ylabel("val SI-SNR (dB)")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def cmd_plot(args):
    if not os.path.isfile(args.input):
        raise InvalidInputError(f"no such file: {args.input}")
    try:
        if args.input.endswith(".csv"):
            plot_trend(args.input, args.out)
        else:
            plot_losses(args.input, args.out)
    except (KeyError, ValueError) as exc:
        raise InvalidInputError(f"cannot plot {args.input}: {exc}") from exc
    print(f"wrote {args.out}")
    return EXIT_OK


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=DEFAULT_SEED, help=f"random seed (default {DEFAULT_SEED})")
    common.add_argument("-v", "--verbose", action="count", default=0, help="more logging")

    p = argparse.ArgumentParser(prog="ulunas", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("enhance", parents=[common], help="enhance a 16 kHz mono WAV file")
    e.add_argument("input", help="noisy WAV")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", required=True, help="enhanced WAV")
    e.add_argument("--stream", action="store_true", help="use the hop-by-hop streaming path")
    e.add_argument("--config", help="expected architecture; a checkpoint of another one is rejected")
    e.set_defaults(func=cmd_enhance)

    t = sub.add_parser("train", parents=[common], help="train a model from an INI config")
    t.add_argument("--config", default="train_smoke.ini")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="JSON-lines metric log")
    t.add_argument("--steps", type=int, help="override the step count")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("search", parents=[common], help="run the architecture search")
    s.add_argument("--config", default="toy_search.ini")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--workers", type=int, help="evaluation processes (overrides the config)")
    s.add_argument("--top", type=int, default=25, help="ranked architectures to write")
    s.add_argument("--plot", action="store_true", help="also render trend.png")
    s.set_defaults(func=cmd_search)

    c = sub.add_parser("complexity", parents=[common], help="report params and MACS of an architecture")
    c.add_argument("arch", nargs="?", help="architecture config or a packaged name (default ul_unas.cfg)")
    c.add_argument("--config", help="same as the positional argument")
    c.add_argument("--json-style", action="store_true", help="machine-readable JSON output")
    c.add_argument("--per-layer", action="store_true")
    c.set_defaults(func=cmd_complexity)

    pl = sub.add_parser("plot", parents=[common], help="plot a search trend CSV or a training log")
    pl.add_argument("input")
    pl.add_argument("--out", required=True, help="image path")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    if os.environ.get(DATA_DIR_ENV):
        log.debug("data directory %s", os.environ[DATA_DIR_ENV])
    try:
        return args.func(args)
    except StateMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STATE
    except InvalidInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # anything else is a runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
