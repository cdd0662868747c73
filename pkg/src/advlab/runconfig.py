"""Run configuration: a flat dotted-key text format, one file per run.

Syntax: one `key = value` per line, `#` comments, blank lines ignored.
Values are strings; booleans are true/false; numbers parse as int when
possible, else float. parse(serialize(cfg)) reproduces the config exactly.

Example:

    seed = 7
    out.dir = runs/aalp
    data.kind = synth
    data.n_train = 10000
    data.n_test = 1000
    model.arch = lenet_mnist
    regime.kind = AALP
    regime.epochs = 3
    regime.batch_size = 64
    attack.preset = mnist
    eval.attacks = clean,fgsm,pgd:40,cw:40
"""

import dataclasses
import os

from . import attacks as A
from . import training

_DEFAULTS = {
    "seed": 0,
    "out.dir": "runs/out",
    "data.kind": "synth",
    "data.n_train": 10000,
    "data.n_test": 1000,
    "data.subset": "",
    "data.train_images": "",
    "data.train_labels": "",
    "data.test_images": "",
    "data.test_labels": "",
    "data.train_bin": "",
    "data.test_bin": "",
    "model.arch": "lenet_mnist",
    "regime.kind": "AALP",
    "regime.guided_dropout": "",
    "regime.adaptive_weighting": "",
    "regime.alpha": 1.0,
    "regime.epochs": 3,
    "regime.batch_size": 64,
    "regime.learning_rate": 1e-4,
    "attack.preset": "mnist",
    "attack.epsilon": "",
    "attack.step_size": "",
    "attack.iterations": "",
    "attack.random_start": True,
    "eval.attacks": "clean,fgsm,pgd:40,cw:40",
}


class ConfigError(ValueError):
    pass


def _coerce(text):
    t = text.strip()
    if t.lower() in ("true", "on", "yes"):
        return True
    if t.lower() in ("false", "off", "no"):
        return False
    try:
        return int(t)
    except ValueError:
        pass
    try:
        return float(t)
    except ValueError:
        pass
    return t


def parse_flat(text):
    """Dotted-key text -> dict. Unknown keys are errors."""
    out = dict(_DEFAULTS)
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in _DEFAULTS:
            raise ConfigError(f"line {ln}: unknown key {key!r}")
        out[key] = _coerce(value)
    return out


def serialize_flat(flat):
    lines = []
    for key in _DEFAULTS:
        v = flat.get(key, _DEFAULTS[key])
        if isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


@dataclasses.dataclass
class RunConfig:
    flat: dict
    seed: int
    out_dir: str
    arch: str
    regime: training.RegimeConfig
    eval_attacks: list      # (column name, AttackConfig or None for clean)

    def serialize(self):
        return serialize_flat(self.flat)


def _attack_from(flat, random_start):
    preset = flat["attack.preset"]
    if preset:
        if preset not in A.PRESETS:
            raise ConfigError(f"unknown attack preset {preset!r}")
        base = A.PRESETS[preset]
    else:
        base = A.AttackConfig(0.3, 0.01, 40)
    kw = {}
    for field in ("epsilon", "step_size", "iterations"):
        v = flat[f"attack.{field}"]
        if v != "":
            kw[field] = v
    return dataclasses.replace(base, random_start=random_start, **kw)


def analysis_attack(flat):
    """The configured attack with random start off, for deterministic
    evaluation and diagnostics."""
    return _attack_from(flat, random_start=False)


def parse_eval_attacks(spec, base):
    """'clean,fgsm,pgd:40,cw:20' -> [(name, AttackConfig|None), ...]."""
    out = []
    for item in str(spec).split(","):
        item = item.strip().lower()
        if not item:
            continue
        name, _, arg = item.partition(":")
        if name == "clean":
            out.append(("clean", None))
        elif name == "fgsm":
            out.append(("fgsm", dataclasses.replace(
                base, iterations=1, step_size=base.epsilon,
                random_start=False, loss_kind="cross-entropy")))
        elif name in ("pgd", "cw"):
            iters = int(arg) if arg else base.iterations
            out.append((f"{name}{iters}", dataclasses.replace(
                base, iterations=iters, random_start=False,
                loss_kind="cw-margin" if name == "cw" else "cross-entropy")))
        else:
            raise ConfigError(f"unknown eval attack {item!r}")
    if not out:
        raise ConfigError("eval.attacks selected nothing")
    return out


def build(flat):
    """Validated RunConfig from a flat dict."""
    for key in ("data.train_images", "data.train_labels", "data.test_images",
                "data.test_labels", "data.train_bin", "data.test_bin"):
        path = flat[key]
        if path and not os.path.exists(path):
            raise ConfigError(f"{key} = {path!r} does not exist")
    kind = flat["regime.kind"]
    train_attack = None
    if kind != "RAW":
        train_attack = _attack_from(flat, bool(flat["attack.random_start"]))
    gd = flat["regime.guided_dropout"]
    sw = flat["regime.adaptive_weighting"]
    regime = training.RegimeConfig(
        kind=kind,
        guided_dropout=None if gd == "" else bool(gd),
        adaptive_weighting=None if sw == "" else bool(sw),
        alpha=float(flat["regime.alpha"]),
        learning_rate=float(flat["regime.learning_rate"]),
        attack=train_attack,
        epochs=int(flat["regime.epochs"]),
        batch_size=int(flat["regime.batch_size"]),
        seed=int(flat["seed"]))
    eval_base = _attack_from(flat, random_start=False)
    return RunConfig(flat=dict(flat), seed=int(flat["seed"]),
                     out_dir=str(flat["out.dir"]), arch=str(flat["model.arch"]),
                     regime=regime,
                     eval_attacks=parse_eval_attacks(flat["eval.attacks"],
                                                     eval_base))


def load_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        return build(parse_flat(fh.read()))


def regime_snapshot(regime):
    """Flat one-line text for embedding in checkpoints."""
    atk = regime.attack
    atk_txt = "none" if atk is None else (
        f"eps={atk.epsilon} step={atk.step_size} iters={atk.iterations} "
        f"rs={atk.random_start} loss={atk.loss_kind}")
    return (f"kind={regime.kind} gd={regime.guided_dropout} "
            f"sw={regime.adaptive_weighting} alpha={regime.alpha} "
            f"lr={regime.learning_rate} epochs={regime.epochs} "
            f"bs={regime.batch_size} seed={regime.seed} attack[{atk_txt}]")
