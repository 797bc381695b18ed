"""Run configuration and the data -> base -> control -> sample -> eval pipeline."""
from __future__ import annotations

import configparser
import hashlib
import io
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .diffusion import DenoiserNet, NoiseSchedule, ancestral_sample, denormalize, linear_schedule, train_base
from .errors import ConfigError, DataError
from .metrics import MetricReport, dice, evaluate_run, psnr, segment
from .phantom import PhantomSample, generate_phantom, load_dataset, save_dataset, stack_samples
from .tensor_nn import DTYPE, assign_parameters, load_checkpoint
from .tgap import TGAPConfig
from .tsa import MODES, ControlEncoder, FusionWeights, control_inputs, train_control

log = logging.getLogger(__name__)

# section -> key -> (type, default)
SCHEMA: Dict[str, Dict[str, tuple]] = {
    "data": {
        "count": (int, 500),
        "size": (int, 32),
        "seed": (int, 0),
        "test_count": (int, 64),
        "test_seed": (int, 1000),
    },
    "diffusion": {
        "T": (int, 400),
        "beta_start": (float, 1e-4),
        "beta_end": (float, 0.02),
        "widths": ("ints", (32, 64, 128)),
        "temb_dim": (int, 32),
        "epochs": (int, 30),
        "lr": (float, 2.5e-5),
        "batch": (int, 2),
        "seed": (int, 0),
    },
    "tsa": {
        "lambda1": (float, 1.0),
        "lambda2": (float, 0.1),
        "hidden": (int, 16),
        "fusion": (str, "sum"),
        "epochs": (int, 30),
        "lr": (float, 2.5e-5),
        "batch": (int, 2),
        "seed": (int, 1),
        "modes": ("strs", ("tsa", "tgap", "tsa+tgap")),
    },
    "tgap": {
        "lambda": (float, 0.005),
        "r": (float, 2.0),
        "tau": (float, 0.5),
        "s": (float, 0.1),
        "pad": (int, 2),
        "kernel": (str, "gauss"),
        "cap": (float, 1.0),
        "target": (str, "eps"),
        "t_gate": ("gate", 0.5),
        "drop_essential": (bool, False),
        "mse_on": (str, "noise"),
    },
    "eval": {
        "sample_seed": (int, 123),
        "sample_batch": (int, 64),
        "restore_count": (int, 10),
        "restore_sigmas": ("floats", (0.5, 1.0, 2.0)),
        "restore_noise_scale": (float, 0.1),
        "restore_seed": (int, 7),
        "png": (bool, True),
    },
}


def _parse(kind, raw: str, where: str):
    raw = raw.strip()
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "ints":
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if kind == "floats":
            return tuple(float(v) for v in raw.split(",") if v.strip())
        if kind == "strs":
            return tuple(v.strip() for v in raw.split(",") if v.strip())
        if kind == "gate":
            return None if raw.lower() in ("none", "off", "all") else float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r}") from exc


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


@dataclass
class RunConfig:
    values: Dict[str, Dict[str, object]]

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls({s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()})

    @classmethod
    def from_string(cls, text: str, source: str = "<config>") -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(text, source=source)
        except configparser.Error as exc:
            raise ConfigError(f"{source}: {exc}") from exc
        cfg = cls.defaults()
        for section in parser.sections():
            if section not in SCHEMA:
                raise ConfigError(f"{source}: unknown section [{section}]")
            for key, raw in parser.items(section):
                if key not in SCHEMA[section]:
                    raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
                kind = SCHEMA[section][key][0]
                cfg.values[section][key] = _parse(kind, raw, f"{source} [{section}] {key}")
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise DataError(f"cannot read config {path}: {exc}") from exc
        return cls.from_string(text, str(path))

    def get(self, section: str, key: str):
        return self.values[section][key]

    def set(self, section: str, key: str, value) -> None:
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown config key [{section}] {key}")
        self.values[section][key] = value

    def validate(self) -> None:
        if self.get("data", "size") not in (32, 64, 128):
            raise ConfigError("[data] size must be 32, 64 or 128")
        if len(self.get("diffusion", "widths")) != 3:
            raise ConfigError("[diffusion] widths needs three comma-separated integers")
        for mode in self.get("tsa", "modes"):
            if mode not in MODES:
                raise ConfigError(f"[tsa] modes: unknown mode {mode!r}")
        self.tgap_config()
        self.schedule()

    def to_ini(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        for section, keys in self.values.items():
            parser[section] = {k: _format(v) for k, v in keys.items()}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()[:16]

    def schedule(self) -> NoiseSchedule:
        d = self.values["diffusion"]
        return linear_schedule(d["T"], d["beta_start"], d["beta_end"])

    def tgap_config(self) -> TGAPConfig:
        g = self.values["tgap"]
        return TGAPConfig(lam=g["lambda"], r=g["r"], cap=g["cap"], kernel=g["kernel"], tau=g["tau"], s=g["s"],
                          pad=g["pad"], target=g["target"], t_gate=g["t_gate"],
                          drop_essential=g["drop_essential"], mse_on=g["mse_on"])


def build_id() -> str:
    """Git-blob-style hash over the package sources, prefixed by the version."""
    h = hashlib.sha1()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        data = path.read_bytes()
        h.update(b"blob %d\0" % len(data) + data)
    return f"{__version__}+{h.hexdigest()[:12]}"


def artifact_meta(config: Optional[RunConfig] = None, **extra) -> dict:
    meta = {"build": build_id()}
    if config is not None:
        meta["config_hash"] = config.hash
    meta.update(extra)
    return meta


# -- checkpoints ------------------------------------------------------------------

def load_denoiser(path) -> DenoiserNet:
    if not Path(path).exists():
        raise DataError(f"denoiser checkpoint {path} not found; run the train-base stage first")
    params, meta = load_checkpoint(path)
    if meta.get("kind") != "denoiser":
        raise DataError(f"{path} is not a denoiser checkpoint")
    net = DenoiserNet(tuple(meta["widths"]), temb_dim=int(meta["temb_dim"]))
    assign_parameters(net.parameters(), params)
    return net


def load_encoder(path) -> ControlEncoder:
    if not Path(path).exists():
        raise DataError(f"control checkpoint {path} not found; run the train-control stage first")
    params, meta = load_checkpoint(path)
    if meta.get("kind") != "control":
        raise DataError(f"{path} is not a control-encoder checkpoint")
    enc = ControlEncoder(tuple(meta["widths"]), hidden=int(meta["hidden"]),
                         weights=FusionWeights(meta["lambda1"], meta["lambda2"]), fusion=meta["fusion"])
    enc.mode = meta.get("mode", "tsa")
    assign_parameters(enc.parameters(), params)
    return enc


# -- sampling -------------------------------------------------------------------------

def sample_images(net: DenoiserNet, sched: NoiseSchedule, n: int, size: int, seed: int,
                  encoder: Optional[ControlEncoder] = None, tumors=None, anatomy=None,
                  zero_control: bool = False, batch: int = 64) -> np.ndarray:
    """Generate ``n`` images in [0, 1]; batch ``b`` uses seed ``seed + b``.

    With an encoder, sample ``i`` is conditioned on ``tumors[i]``/``anatomy[i]``.
    ``zero_control`` feeds all-zero control maps.
    """
    out = []
    for b, start in enumerate(range(0, n, batch)):
        m = min(batch, n - start)
        controls = None
        if encoder is not None:
            mode = getattr(encoder, "mode", "tsa")
            t_in, a_in = control_inputs(mode, np.asarray(tumors[start:start + m], dtype=DTYPE),
                                        np.asarray(anatomy[start:start + m], dtype=DTYPE))
            controls = encoder(t_in, a_in)
        elif zero_control:
            controls = [np.zeros((m,) + s, dtype=DTYPE) for s in net.level_shapes(size, size)]
        x = ancestral_sample(net, sched, seed + b, (size, size), m, controls)
        out.append(denormalize(x)[:, 0])
    return np.concatenate(out).astype(np.float32)


# -- restoration demo ------------------------------------------------------------------

def restore_demo(net: DenoiserNet, encoder: ControlEncoder, sched: NoiseSchedule,
                 samples: Sequence[PhantomSample], sigmas: Sequence[float] = (0.5, 1.0, 2.0),
                 noise_scale: float = 0.1, seed: int = 7, masks_from_lq: bool = False) -> List[dict]:
    """Degrade phantoms with Gaussian noise and regenerate them from masks.

    Noise std is ``sigma * noise_scale`` in [0, 1] intensity units. Each
    sigma uses its own sampling seed. By default the known masks condition
    generation; ``masks_from_lq`` thresholds the degraded image instead.
    Returns one row per sigma with mean PSNR of the degraded and generated
    images against the clean phantom, and tumour DSC of both.
    """
    images, tumors, anatomy = stack_samples(samples)
    rows = []
    for k, sigma in enumerate(sigmas):
        rng = np.random.default_rng([seed, k])
        lq = np.clip(images + sigma * noise_scale * rng.standard_normal(images.shape), 0.0, 1.0)
        cond_t = tumors
        if masks_from_lq:
            cond_t = np.stack([segment(x)[1] for x in lq])
        gen = sample_images(net, sched, len(images), images.shape[-1], seed * 1000 + k,
                            encoder=encoder, tumors=cond_t, anatomy=anatomy)
        rows.append({
            "sigma": float(sigma),
            "psnr_lq": float(np.mean([psnr(a, b) for a, b in zip(lq, images)])),
            "psnr_gen": float(np.mean([psnr(a, b) for a, b in zip(gen, images)])),
            "dsc_lq": float(np.mean([dice(segment(a)[1], t) for a, t in zip(lq, tumors)])),
            "dsc_gen": float(np.mean([dice(segment(a)[1], t) for a, t in zip(gen, tumors)])),
        })
    return rows


# -- orchestration -----------------------------------------------------------------------

STAGES = ("data", "train-base", "train-control", "sample", "eval")


class Paths:
    def __init__(self, root):
        self.root = Path(root)

    train = property(lambda self: self.root / "train.tdph")
    test = property(lambda self: self.root / "test.tdph")
    base = property(lambda self: self.root / "base.ckpt")

    def control(self, mode: str) -> Path:
        return self.root / f"control_{mode.replace('+', '_')}.ckpt"

    def samples(self, name: str) -> Path:
        return self.root / f"samples_{name.replace('+', '_')}.npy"

    def report(self, name: str) -> Path:
        return self.root / f"report_{name.replace('+', '_')}"


def _require(path: Path, stage: str) -> None:
    if not path.exists():
        raise DataError(f"{path} is missing; run the {stage!r} stage first")


def run_experiment(config: RunConfig, out_dir, stages: Sequence[str] = STAGES) -> Dict[str, MetricReport]:
    """Execute the requested stages, reading earlier stages' artifacts from ``out_dir``.

    The sample/eval stages cover the unconditioned model ("ddpm") and every
    control mode in ``[tsa] modes``. Returns the metric reports by model name.
    """
    from .viz import save_grid

    for s in stages:
        if s not in STAGES:
            raise ConfigError(f"unknown stage {s!r}; expected a subset of {STAGES}")
    paths = Paths(out_dir)
    paths.root.mkdir(parents=True, exist_ok=True)
    (paths.root / "config.ini").write_text(config.to_ini())
    meta = artifact_meta(config)
    d, df, ts = config.values["data"], config.values["diffusion"], config.values["tsa"]
    sched = config.schedule()
    names = ["ddpm"] + list(ts["modes"])

    if "data" in stages:
        train = [generate_phantom(d["seed"] * 1_000_003 + i, d["size"]) for i in range(d["count"])]
        test = [generate_phantom(d["test_seed"] * 1_000_003 + i, d["size"]) for i in range(d["test_count"])]
        save_dataset(paths.train, train)
        save_dataset(paths.test, test)

    if "train-base" in stages:
        _require(paths.train, "data")
        images, _, _ = stack_samples(load_dataset(paths.train))
        train_base(images, sched, epochs=df["epochs"], lr=df["lr"], batch=df["batch"], seed=df["seed"],
                   widths=df["widths"], log_path=paths.root / "loss_base.csv", checkpoint_path=paths.base,
                   net=DenoiserNet(df["widths"], temb_dim=df["temb_dim"], seed=df["seed"]))

    if "train-control" in stages:
        _require(paths.train, "data")
        _require(paths.base, "train-base")
        net = load_denoiser(paths.base)
        images, tumors, anatomy = stack_samples(load_dataset(paths.train))
        for mode in ts["modes"]:
            enc = ControlEncoder(net.widths, hidden=ts["hidden"], weights=FusionWeights(ts["lambda1"], ts["lambda2"]),
                                 seed=ts["seed"], fusion=ts["fusion"])
            train_control(net, enc, images, tumors, anatomy, sched, mode=mode, tgap=config.tgap_config(),
                          epochs=ts["epochs"], lr=ts["lr"], batch=ts["batch"], seed=ts["seed"],
                          log_path=paths.root / f"loss_control_{mode.replace('+', '_')}.csv",
                          checkpoint_path=paths.control(mode))

    ev = config.values["eval"]
    if "sample" in stages:
        _require(paths.test, "data")
        _require(paths.base, "train-base")
        net = load_denoiser(paths.base)
        test = load_dataset(paths.test)
        _, tumors, anatomy = stack_samples(test)
        for name in names:
            enc = None
            if name != "ddpm":
                _require(paths.control(name), "train-control")
                enc = load_encoder(paths.control(name))
            imgs = sample_images(net, sched, len(test), d["size"], ev["sample_seed"], encoder=enc,
                                 tumors=tumors, anatomy=anatomy, batch=ev["sample_batch"])
            np.save(paths.samples(name), imgs)
            if ev["png"]:
                save_grid(imgs[:16], paths.samples(name).with_suffix(".png"), meta=meta)

    reports: Dict[str, MetricReport] = {}
    if "eval" in stages:
        _require(paths.test, "data")
        test = load_dataset(paths.test)
        ref, tumors, _ = stack_samples(test)
        brains = [s.anatomy.bm for s in test]
        summary = {}
        for name in names:
            _require(paths.samples(name), "sample")
            gen = np.load(paths.samples(name))
            rep = evaluate_run(gen, ref, tumors, brains, meta=dict(meta, model=name))
            rep.write_csv(paths.report(name).with_suffix(".csv"))
            rep.write_json(paths.report(name).with_suffix(".json"))
            reports[name] = rep
            summary[name] = rep.aggregate()
        with open(paths.root / "summary.json", "w") as fh:
            json.dump({"meta": meta, "models": summary}, fh, indent=2, sort_keys=True)
    return reports
