"""Command-line entry point.

    rfl pretrain  [--arm standard|robust]
    rfl probe     [--backbone CKPT] [--standard|--adversarial]
    rfl finetune  [--backbone CKPT] [--strategy S] [--init I] [--probe CKPT]
    rfl eval      --checkpoint CKPT
    rfl analyze   METRICS.csv [...]
    rfl gradviz   --checkpoint CKPT [--count N]
    rfl speed     [--backbone CKPT]

Every command takes ``--config``, ``--seed``, ``--out`` and ``--threads``.
Exit status: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import logging
import os
import sys
from fractions import Fraction
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from . import pipeline as P
from .attacks import AttackConfig, evaluate
from .data_io import MetricRow, atomic_write, read_metrics_csv, write_metrics_csv
from .errors import ConfigError, InitError, UnsupportedError
from .models import ViTConfig
from .peft import SCHEMES, HeadInit, Strategy
from .tensor import RngStream
from .trainer import WEIGHT_DECAYS, OptimizerConfig, lr_grid

log = logging.getLogger("rfl")

# INI section -> ExperimentConfig attribute
SECTIONS = {
    "data": "data",
    "model": "model",
    "strategy": "strategy",
    "attack.train": "attack_train",
    "attack.eval": "attack_eval",
    "optim": "optim",
    "schedule": "schedule",
    "pipeline": "pipeline",
}
# keys living in [strategy] / [pipeline] that belong elsewhere
_STRATEGY_EXTRA = {"init": "head_init", "regli_l2": "regli_l2"}


class UsageError(Exception):
    """Bad flags or missing inputs: exit status 2."""


# -- value parsing ---------------------------------------------------------

def parse_number(text: str, key: str) -> float:
    """Decimal literal (parsed exactly as a double) or rational literal
    (``8/255``), which is rounded once to the nearest 32-bit float."""
    t = text.strip()
    try:
        if "/" not in t:
            return float(t)
        value = float(np.float32(float(Fraction(t))))
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"{key}: cannot parse {text!r} as a number") from exc
    log.info("%s = %s -> %.9g", key, t, value)
    return value


def _parse_bool(text: str, key: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {text!r}")


def _parse_int(text: str, key: str) -> int:
    try:
        return int(text.strip())
    except ValueError as exc:
        raise ConfigError(f"{key}: expected an integer, got {text!r}") from exc


def coerce(text: str, default, key: str):
    """Parse ``text`` into the type of the field's default value."""
    t = text.strip()
    if default is None and t.lower() == "none":
        return None
    if isinstance(default, bool):
        return _parse_bool(t, key)
    if isinstance(default, int):
        return _parse_int(t, key)
    if isinstance(default, float):
        return parse_number(t, key)
    if isinstance(default, tuple):
        items = [s.strip() for s in t.split(",") if s.strip()]
        proto = default[0] if default else ""
        return tuple(coerce(s, proto, key) for s in items)
    if default is None:
        try:
            return int(t)
        except ValueError:
            return parse_number(t, key)
    return t


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _update(obj, values: dict, section: str):
    names = {f.name for f in dataclasses.fields(obj)}
    parsed = {}
    for key, text in values.items():
        if key not in names:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        parsed[key] = coerce(text, getattr(obj, key), f"{section}.{key}")
    return dataclasses.replace(obj, **parsed)


def config_from_ini(text: str, origin: str = "<config>") -> P.ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text, source=origin)
    except configparser.Error as exc:
        raise ConfigError(f"{origin}: {exc}") from exc
    cfg = P.ExperimentConfig()
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{origin}: unknown section [{section}]")
        values = dict(parser[section])
        if section == "strategy":
            extra = {_STRATEGY_EXTRA[k]: values.pop(k) for k in list(values) if k in _STRATEGY_EXTRA}
            if extra:
                cfg.pipeline = _update(cfg.pipeline, extra, "strategy")
        if section == "pipeline" and "seed" in values:
            cfg.seed = _parse_int(values.pop("seed"), "pipeline.seed")
        attr = SECTIONS[section]
        setattr(cfg, attr, _update(getattr(cfg, attr), values, section))
    _validate(cfg)
    return cfg


def _ini_has_seed(text: str) -> bool:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    parser.read_string(text)
    return parser.has_option("pipeline", "seed")


def _validate(cfg: P.ExperimentConfig) -> None:
    cfg.model.validate()
    if cfg.pipeline.head_init not in SCHEMES:
        raise ConfigError(f"strategy.init must be one of {SCHEMES}, got {cfg.pipeline.head_init!r}")
    if cfg.optim.batch_size < 1:
        raise ConfigError("optim.batch_size must be >= 1")
    if cfg.schedule.epochs < 1:
        raise ConfigError("schedule.epochs must be >= 1")


def config_to_ini(cfg: P.ExperimentConfig) -> str:
    lines = []
    for section, attr in SECTIONS.items():
        obj = getattr(cfg, attr)
        lines.append(f"[{section}]")
        for f in dataclasses.fields(obj):
            key = f.name
            if section == "pipeline" and key in _STRATEGY_EXTRA.values():
                continue
            lines.append(f"{key} = {_format(getattr(obj, key))}")
        if section == "strategy":
            lines.append(f"init = {cfg.pipeline.head_init}")
            lines.append(f"regli_l2 = {_format(cfg.pipeline.regli_l2)}")
        if section == "pipeline":
            lines.append(f"seed = {cfg.seed}")
        lines.append("")
    return "\n".join(lines)


# -- argument parsing ------------------------------------------------------

def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=d, help="INI experiment config")
    parser.add_argument("--seed", type=int, default=d, help="master seed (beats config and RFL_SEED)")
    parser.add_argument("--out", default=d, help="output directory (default: runs)")
    parser.add_argument("--threads", type=int, default=d, help="parallel grid cells (default 1)")
    parser.add_argument("-v", "--verbose", action="store_true", default=d)


def _attack_flags(parser, what: str) -> None:
    parser.add_argument("--eps", help=f"{what} epsilon, e.g. 8/255")
    parser.add_argument("--steps", type=int, help=f"{what} PGD steps")


def _mode_flags(parser, default_adv: bool = True) -> None:
    g = parser.add_mutually_exclusive_group()
    g.add_argument("--adversarial", dest="adversarial", action="store_true", default=default_adv)
    g.add_argument("--standard", dest="adversarial", action="store_false")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rfl", description="Adversarial transfer-learning experiments.")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        _global_flags(p, suppress=True)
        p.add_argument("--tag", help="dataset tag used to group runs (default from config)")
        return p

    p = command("pretrain", "train a backbone on the source classes")
    p.add_argument("--arm", choices=("standard", "robust"))
    _attack_flags(p, "pretraining attack")

    p = command("probe", "linear probe on the target classes")
    p.add_argument("--backbone", help="backbone checkpoint (pretrains one if absent)")
    p.add_argument("--grid", action="store_true", help="grid-search lr and weight decay")
    _mode_flags(p)
    _attack_flags(p, "training attack")

    p = command("finetune", "finetune a strategy on the target classes")
    p.add_argument("--backbone", help="backbone checkpoint (pretrains one if absent)")
    p.add_argument("--strategy", help="fullft, adapter, lora, bias, vpt or linear")
    p.add_argument("--init", choices=SCHEMES, help="head initialisation")
    p.add_argument("--probe", help="head source checkpoint for roli/stdli (probed on the fly if absent)")
    p.add_argument("--grid", action="store_true", help="grid-search lr and weight decay")
    _mode_flags(p)
    _attack_flags(p, "training attack")

    p = command("eval", "clean and robust accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("target", "source"), default="target")
    _attack_flags(p, "evaluation attack")

    p = command("analyze", "transfer metrics and Pearson r from metrics CSVs")
    p.add_argument("csv", nargs="+", help="metrics CSV files")

    p = command("gradviz", "input-gradient maps as PGM images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--split", choices=("target", "source"), default="target")

    p = command("speed", "time RanLI/RegLI/StdLI/RoLI against final robustness")
    p.add_argument("--backbone", help="backbone checkpoint (pretrains one if absent)")
    return parser


def resolve_config(args) -> P.ExperimentConfig:
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"--config: no such file {path}")
        text = path.read_text()
        cfg = config_from_ini(text, str(path))
        from_file = _ini_has_seed(text)
    else:
        cfg, from_file = P.ExperimentConfig(), False
    if args.seed is not None:
        cfg.seed = args.seed
    elif not from_file and os.environ.get("RFL_SEED"):
        cfg.seed = _parse_int(os.environ["RFL_SEED"], "RFL_SEED")
    if getattr(args, "tag", None):
        cfg.pipeline.tag = args.tag
    if getattr(args, "strategy", None):
        cfg.strategy = dataclasses.replace(cfg.strategy, kind=args.strategy)
    if getattr(args, "init", None):
        cfg.pipeline.head_init = args.init
    if getattr(args, "grid", False):
        cfg.pipeline.grid = True
    eps = getattr(args, "eps", None)
    steps = getattr(args, "steps", None)
    if args.command == "pretrain":
        if args.arm:
            cfg.pipeline.pretrain_arm = args.arm
        if eps is not None:
            cfg.pipeline.pretrain_epsilon = parse_number(eps, "--eps")
        if steps is not None:
            cfg.pipeline.pretrain_steps = steps
    elif eps is not None or steps is not None:
        attr = "attack_eval" if args.command == "eval" else "attack_train"
        cur: AttackConfig = getattr(cfg, attr)
        setattr(cfg, attr, dataclasses.replace(
            cur, epsilon=cur.epsilon if eps is None else parse_number(eps, "--eps"),
            steps=cur.steps if steps is None else steps))
    _validate(cfg)
    return cfg


# -- commands --------------------------------------------------------------

class Run:
    """Shared state of one invocation: config, data, rng and output paths."""

    def __init__(self, args, cfg: P.ExperimentConfig):
        self.args = args
        self.cfg = cfg
        self.out = Path(args.out or "runs")
        self.out.mkdir(parents=True, exist_ok=True)
        self.rng = RngStream(cfg.seed)
        self.threads = max(1, args.threads or 1)
        self._data = None
        atomic_write(self.out / "config.ini", config_to_ini(cfg))

    @property
    def data(self) -> P.TransferData:
        if self._data is None:
            self._data = P.prepare_data(self.cfg, self.rng)
        return self._data

    @property
    def metrics(self) -> Path:
        return self.out / "metrics.csv"

    def sink(self, stage: str, hp: str = "") -> P.MetricSink:
        return P.MetricSink(self.metrics, "/".join(s for s in (self.cfg.pipeline.tag, hp, stage) if s))

    def backbone(self) -> P.Model:
        path = getattr(self.args, "backbone", None)
        if path:
            if not Path(path).is_file():
                raise UsageError(f"--backbone: no such file {path}")
            return P.load_model(self.cfg, path)
        arm = self.cfg.pipeline.pretrain_arm
        model, rec = P.pretrain(self.cfg, self.data.source, self.rng, arm, self.sink(f"pretrain-{arm}"))
        P.save_model(model, self.out / f"backbone-{arm}.ckpt")
        return model


def _hp(base_lr: float, wd: float) -> str:
    return f"lr{base_lr:g}-wd{wd:g}"


def _report(label: str, rec) -> None:
    ev = rec.test
    print(f"{label}: epoch {rec.selected_epoch} clean {ev.clean_acc:.4f} robust {ev.robust_acc:.4f}")


def cmd_pretrain(run: Run) -> None:
    cfg = run.cfg
    arm = cfg.pipeline.pretrain_arm
    model, rec = P.pretrain(cfg, run.data.source, run.rng, arm, run.sink(f"pretrain-{arm}"))
    path = run.out / f"backbone-{arm}.ckpt"
    P.save_model(model, path)
    _report(f"pretrain-{arm}", rec)
    print(f"checkpoint: {path}")


def cmd_probe(run: Run) -> None:
    cfg, adv = run.cfg, run.args.adversarial
    backbone = run.backbone()
    stage = f"probe-{'adv' if adv else 'std'}"

    def once(lr, wd):
        return P.linear_probe(backbone, run.data.target, cfg, run.rng, adv, base_lr=lr, weight_decay=wd,
                              sink=run.sink(stage, _hp(lr, wd)), stage=stage)

    if cfg.pipeline.grid:
        model, rec, _ = P.tuned(once, lr_grid("linear"), WEIGHT_DECAYS, run.threads)
    else:
        model, rec = once(cfg.pipeline.probe_base_lr, cfg.pipeline.probe_weight_decay)
    path = run.out / f"{stage}.ckpt"
    P.save_model(model, path)
    _report(stage, rec)
    print(f"checkpoint: {path}")


def _head_source(run: Run, backbone, scheme: str):
    if scheme == "regli":
        return P.regli_head(backbone, run.data.target.train, run.cfg.pipeline.regli_l2)
    probe_path = run.args.probe
    if probe_path:
        if not Path(probe_path).is_file():
            raise UsageError(f"--probe: no such file {probe_path}")
        return probe_path
    model, _ = P.linear_probe(backbone, run.data.target, run.cfg, run.rng.child(scheme), scheme == "roli",
                              sink=run.sink(f"{scheme}-probe"), stage=f"{scheme}-probe")
    return model


def cmd_finetune(run: Run) -> None:
    cfg, adv = run.cfg, run.args.adversarial
    scheme = cfg.pipeline.head_init
    backbone = run.backbone()
    stage = f"finetune-{'adv' if adv else 'std'}"
    head = HeadInit(scheme) if scheme == "ranli" else HeadInit(scheme, source=_head_source(run, backbone, scheme))

    def once(lr, wd):
        return P.finetune(backbone, run.data.target, cfg, run.rng, head, adv, base_lr=lr, weight_decay=wd,
                          sink=run.sink(stage, _hp(lr, wd)), stage=stage)

    if cfg.pipeline.grid:
        model, rec, _ = P.tuned(once, lr_grid(cfg.strategy.kind, scheme == "roli"), WEIGHT_DECAYS, run.threads)
    else:
        model, rec = once(cfg.optim.base_lr, cfg.optim.weight_decay)
    path = run.out / f"finetune-{cfg.strategy.kind}-{scheme}.ckpt"
    P.save_model(model, path)
    _report(f"{stage} ({cfg.strategy.kind}, {scheme})", rec)
    print(f"checkpoint: {path}")


def _eval_split(run: Run):
    return run.data.target if run.args.split == "target" else run.data.source


def cmd_eval(run: Run) -> None:
    if not Path(run.args.checkpoint).is_file():
        raise UsageError(f"--checkpoint: no such file {run.args.checkpoint}")
    model = P.load_model(run.cfg, run.args.checkpoint)
    test = _eval_split(run).test
    if model.num_classes != test.num_classes:
        raise ConfigError(f"checkpoint has {model.num_classes} classes, the {run.args.split} task "
                          f"has {test.num_classes}")
    ev = evaluate(model, test.images, test.labels, run.cfg.attack_eval, run.rng.generator("eval-attack"))
    run.sink("eval").write([MetricRow("eval", 0, "test", m, getattr(ev, m))
                            for m in ("clean_acc", "robust_acc", "clean_loss", "adv_loss")])
    print(f"clean {ev.clean_acc:.4f} robust {ev.robust_acc:.4f} (n={ev.n})")


def collect_pairs(rows: list[dict]) -> dict[str, dict[str, list]]:
    """Group test-split accuracies into finetune and probe pairs per tag.

    Run ids follow ``tag/hp/stage``; a pair joins the ``-std`` and ``-adv``
    runs of the same tag and hyperparameters.
    """
    table: dict[tuple[str, str, str], dict[str, float]] = {}
    for r in rows:
        if r["split"] != "test" or r["stage"] not in ("finetune-std", "finetune-adv", "probe-std", "probe-adv"):
            continue
        parts = r["run_id"].split("/")
        tag = parts[0] if len(parts) == 3 else "default"
        hp = parts[1] if len(parts) == 3 else r["run_id"]
        table.setdefault((tag, hp, r["stage"]), {})[r["metric"]] = r["value"]
    out: dict[str, dict[str, list]] = {}
    missing = []
    for tag in sorted({k[0] for k in table}):
        groups = {"ft": [], "lp": []}
        for kind, name in (("ft", "finetune"), ("lp", "probe")):
            hps = sorted({k[1] for k in table if k[0] == tag and k[2].startswith(name)})
            for hp in hps:
                std = table.get((tag, hp, f"{name}-std"))
                adv = table.get((tag, hp, f"{name}-adv"))
                if std is None or adv is None:
                    missing.append(f"{tag}/{hp}/{name}-{'std' if std is None else 'adv'}")
                    continue
                groups[kind].append((std["clean_acc"], adv["robust_acc"]))
            if not groups[kind]:
                missing.append(f"{tag}: no complete {name} pair")
        out[tag] = groups
    if not out:
        missing.append("no finetune or probe test rows")
    if missing:
        raise UsageError("missing runs: " + ", ".join(missing))
    return out


def scatter_svg(points: list[tuple[float, float]], title: str = "") -> str:
    """Minimal SVG scatter, one circle per point."""
    w, h, pad = 480, 400, 60
    xs = [p[0] for p in points] or [0.0]
    ys = [p[1] for p in points] or [0.0]

    def span(v):
        lo, hi = min(v), max(v)
        if hi == lo:
            lo, hi = lo - 0.5, hi + 0.5
        return lo, hi

    (x0, x1), (y0, y1) = span(xs), span(ys)
    sx = lambda v: pad + (v - x0) / (x1 - x0) * (w - 2 * pad)
    sy = lambda v: h - pad - (v - y0) / (y1 - y0) * (h - 2 * pad)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
        f'<title>{escape(title)}</title>',
        f'<line x1="{pad}" y1="{h - pad}" x2="{w - pad}" y2="{h - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{h - pad}" stroke="black"/>',
        f'<text x="{w / 2}" y="{h - 15}" text-anchor="middle">Transferred Accuracy</text>',
        f'<text x="18" y="{h / 2}" text-anchor="middle" transform="rotate(-90 18 {h / 2})">'
        f'Transferred Robustness</text>',
    ]
    for x, y in points:
        parts.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="4" fill="steelblue"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_analyze(run: Run) -> None:
    rows = []
    for path in run.args.csv:
        if not Path(path).is_file():
            raise UsageError(f"no such metrics file {path}")
        rows.extend(read_metrics_csv(path))
    lines = ["tag,i,j,transferred_accuracy,transferred_robustness"]
    summary = []
    for tag, groups in collect_pairs(rows).items():
        res = P.pairwise_transfer_metrics(groups["ft"], groups["lp"])
        n_lp = len(groups["lp"])
        for k, (a, r) in enumerate(res.points):
            lines.append(f"{tag},{k // n_lp},{k % n_lp},{a:.6f},{r:.6f}")
        pr = "NA" if res.pearson is None else f"{res.pearson:.6f}"
        summary.append(f"{tag},{len(res.points)},{pr}")
        atomic_write(run.out / f"transfer-{tag}.svg", scatter_svg(res.points, f"{tag}: r = {pr}"))
        print(f"{tag}: {len(res.points)} points, pearson {pr}")
    atomic_write(run.out / "transfer_metrics.csv", "\n".join(lines) + "\n")
    atomic_write(run.out / "transfer_summary.csv", "tag,points,pearson\n" + "\n".join(summary) + "\n")


def cmd_gradviz(run: Run) -> None:
    if not Path(run.args.checkpoint).is_file():
        raise UsageError(f"--checkpoint: no such file {run.args.checkpoint}")
    model = P.load_model(run.cfg, run.args.checkpoint)
    test = _eval_split(run).test
    n = min(run.args.count, len(test))
    P.gradviz(model, test.images[:n], test.labels[:n], run.out / "gradviz")
    print(f"wrote {n} images to {run.out / 'gradviz'}")


def cmd_speed(run: Run) -> None:
    backbone = run.backbone()
    rows = P.speed_report(backbone, run.data.target, run.cfg, run.rng)
    lines = ["scheme,seconds,init_seconds,clean_acc,robust_acc"]
    for r in rows:
        lines.append(f"{r.scheme},{r.seconds:.3f},{r.init_seconds:.3f},{r.clean_acc:.6f},{r.robust_acc:.6f}")
        print(f"{r.scheme:6s} {r.seconds:8.1f}s robust {r.robust_acc:.4f}")
    atomic_write(run.out / "speed.csv", "\n".join(lines) + "\n")


COMMANDS = {
    "pretrain": cmd_pretrain,
    "probe": cmd_probe,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "gradviz": cmd_gradviz,
    "speed": cmd_speed,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        COMMANDS[args.command](Run(args, cfg))
    except (UsageError, ConfigError, UnsupportedError, InitError) as exc:
        print(f"rfl {args.command}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"rfl {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
