"""Stage-oriented driver: corpus -> features -> UBM/network -> i-vectors ->
classifier -> scores -> report.

Every stage writes its outputs under the run's working directory together
with a ``<stage>.done`` marker recording checksums of its inputs and its
configuration.  Re-running a stage whose marker matches does nothing; a
marker that no longer matches is only overwritten with ``force``.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import logging
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed

from . import evaluation, features, synth
from .classifier import LogRegClassifier
from .classifier import add_language as add_language_to_classifier
from .corpusio import (ManifestRow, file_checksum, read_audio, read_container, read_ids,
                       read_labels, read_manifest, read_matrix, write_container, write_ids,
                       write_manifest, write_matrix)
from .gmm import DiagGmm, TandemUbm
from .ivector import IvectorExtractor, SupervisedGmmAccumulator
from .nnet import TddnnClassifier, TddnnModel
from .stats import (SuffStats, align_streams, prune_posteriors, stats_from_container,
                    stats_to_container, utterance_stats)

logger = logging.getLogger(__name__)

STAGES = ("synth-corpus", "features", "train-ubm", "train-dnn", "train-ivector",
          "extract-ivectors", "train-classifier", "score", "evaluate", "add-language")

PRESETS = {
    "a": {"posterior_source": "gmm", "vtln": "on", "feature_type": "sdc"},
    "b": {"posterior_source": "dnn", "vtln": "on", "feature_type": "sdc"},
    "c": {"posterior_source": "dnn", "vtln": "off", "feature_type": "sdc"},
    "d": {"posterior_source": "dnn", "vtln": "off", "feature_type": "mfcc60"},
}


class StageError(RuntimeError):
    """Missing upstream artifacts or a stale completion marker (data error)."""


# --- configuration ----------------------------------------------------------

@dataclass
class SynthBlock:
    num_languages: int = 5
    inventory: int = 64
    phones_per_language: int = 40
    formant_jitter: float = 0.03
    noise_min: float = 0.5
    noise_max: float = 1.2
    mean_duration_frames: float = 8.0
    train_per_language: int = 200
    test_per_language: int = 100
    durations: Tuple[int, ...] = (3, 10, 30)
    sample_rate: int = 8000
    warp_min: float = 0.94
    warp_max: float = 1.06


@dataclass
class FrontEndBlock:
    frame_len_ms: float = 20.0
    num_mel_bins: int = 23
    low_freq_hz: float = 20.0
    high_freq_hz: float = 3800.0
    dither_amplitude: float = 1.0 / 2 ** 15
    cmn_window_s: float = 3.0


@dataclass
class VadBlock:
    threshold_offset: float = 0.0
    context: int = 2
    proportion: float = 0.6


@dataclass
class VtlnBlock:
    components: int = 64
    iters: int = 6
    train_utts: int = 100
    grid: Tuple[float, ...] = features.VTLN_GRID


@dataclass
class UbmBlock:
    components: int = 64
    diag_stages: Tuple[Tuple[int, int], ...] = ((300, 4), (0, 4))
    full_subset: int = 500
    top_n: int = 20


@dataclass
class NnetBlock:
    hidden_dim: int = 256
    pnorm_group_size: int = 8
    pnorm_p: float = 2.0
    num_classes: int = 64
    num_epochs: int = 6
    initial_lr: float = 0.0015
    final_lr: float = 0.00015
    minibatch_size: int = 256
    chunk_len: int = 16
    train_utts: int = 150


@dataclass
class IvectorBlock:
    dim: int = 50
    iters: int = 5
    prune: float = 1e-5


@dataclass
class ClassifierBlock:
    l2_lambda: float = 1e-3
    max_iters: int = 500
    tolerance: float = 1e-6


@dataclass
class RunConfig:
    workdir: Path = Path("run")
    train_manifest: Optional[Path] = None
    test_manifest: Optional[Path] = None
    new_train_manifest: Optional[Path] = None
    new_test_manifest: Optional[Path] = None
    preset: str = "b"
    posterior_source: str = "dnn"
    vtln: str = "on"
    feature_type: str = "sdc"
    seed: int = 0
    synth: SynthBlock = field(default_factory=SynthBlock)
    sdc_features: FrontEndBlock = field(default_factory=FrontEndBlock)
    highres_features: FrontEndBlock = field(default_factory=lambda: FrontEndBlock(
        frame_len_ms=25.0, num_mel_bins=40, cmn_window_s=6.0))
    vad: VadBlock = field(default_factory=VadBlock)
    vtln_model: VtlnBlock = field(default_factory=VtlnBlock)
    ubm: UbmBlock = field(default_factory=UbmBlock)
    nnet: NnetBlock = field(default_factory=NnetBlock)
    ivector: IvectorBlock = field(default_factory=IvectorBlock)
    classifier: ClassifierBlock = field(default_factory=ClassifierBlock)

    def validate(self) -> None:
        if self.posterior_source not in ("gmm", "dnn"):
            raise ValueError(f"posterior_source must be gmm or dnn, got {self.posterior_source!r}")
        if self.vtln not in ("on", "off"):
            raise ValueError(f"vtln must be on or off, got {self.vtln!r}")
        if self.feature_type not in ("sdc", "mfcc60"):
            raise ValueError(f"feature_type must be sdc or mfcc60, got {self.feature_type!r}")
        if self.synth.num_languages < 2:
            raise ValueError("synth.num_languages must be at least 2")

    # layout -------------------------------------------------------------
    @property
    def manifests(self) -> Dict[str, Path]:
        return {"train": self.train_manifest or self.workdir / "corpus" / "train.tsv",
                "test": self.test_manifest or self.workdir / "corpus" / "test.tsv"}

    @property
    def stream(self) -> str:
        return f"{self.feature_type}_vtln{self.vtln}"

    @property
    def feat_dir(self) -> Path:
        return self.workdir / "feats" / self.stream

    @property
    def highres_dir(self) -> Path:
        return self.workdir / "feats" / "highres"

    @property
    def ubm_dir(self) -> Path:
        return self.workdir / "exp" / f"ubm_{self.stream}"

    @property
    def dnn_dir(self) -> Path:
        return self.workdir / "exp" / "dnn"

    @property
    def system_dir(self) -> Path:
        return self.workdir / "exp" / f"{self.posterior_source}_{self.stream}"


_SECTIONS = {"synth": "synth", "sdc_features": "sdc_features",
             "highres_features": "highres_features", "vad": "vad", "vtln": "vtln_model",
             "ubm": "ubm", "nnet": "nnet", "ivector": "ivector", "classifier": "classifier"}


def _coerce(value: str, current):
    if isinstance(current, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    if isinstance(current, tuple):
        if current and isinstance(current[0], tuple):
            return tuple(tuple(int(x) for x in item.split(":"))
                         for item in value.split(",") if item.strip())
        kind = type(current[0]) if current else float
        return tuple(kind(x) for x in value.split(",") if x.strip())
    return value


def _apply(block, key: str, value: str) -> None:
    names = {f.name for f in fields(block)}
    if key not in names:
        raise ValueError(f"unknown key {key!r} for [{type(block).__name__}]")
    setattr(block, key, _coerce(value, getattr(block, key)))


def load_config(path=None, overrides: Sequence[str] = (), seed: Optional[int] = None,
                preset: Optional[str] = None) -> RunConfig:
    """Read an INI-style run file; ``overrides`` are ``section.key=value`` strings.

    A ``preset`` (a-d) fills ``posterior_source``, ``vtln`` and
    ``feature_type``; keys given explicitly in ``[run]`` or as overrides win.
    """
    parser = configparser.ConfigParser(interpolation=None)
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
        base = path.parent
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ValueError(f"override must look like section.key=value: {item!r}")
        lhs, value = item.split("=", 1)
        section, key = lhs.split(".", 1)
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key, value)
    cfg = RunConfig()
    run = parser["run"] if parser.has_section("run") else {}
    chosen = preset or run.get("preset", cfg.preset)
    if chosen not in PRESETS:
        raise ValueError(f"unknown preset {chosen!r}; choose from {sorted(PRESETS)}")
    cfg.preset = chosen
    for k, v in PRESETS[chosen].items():
        setattr(cfg, k, v)
    for k in ("posterior_source", "vtln", "feature_type"):
        if k in run:
            setattr(cfg, k, run[k].strip())
    if "seed" in run:
        cfg.seed = int(run["seed"])
    if seed is not None:
        cfg.seed = seed
    if parser.has_section("paths"):
        p = parser["paths"]
        resolve = (lambda v: Path(v) if Path(v).is_absolute() else base / v)
        if "workdir" in p:
            cfg.workdir = resolve(p["workdir"])
        for key in ("train_manifest", "test_manifest", "new_train_manifest",
                    "new_test_manifest"):
            if key in p:
                setattr(cfg, key, resolve(p[key]))
        unknown_paths = set(p) - {"workdir", "train_manifest", "test_manifest",
                                  "new_train_manifest", "new_test_manifest"}
        if unknown_paths:
            raise ValueError(f"unknown keys in [paths]: {sorted(unknown_paths)}")
    for section, attr in _SECTIONS.items():
        if parser.has_section(section):
            for key, value in parser[section].items():
                _apply(getattr(cfg, attr), key, value)
    unknown = set(parser.sections()) - set(_SECTIONS) - {"run", "paths"}
    if unknown:
        raise ValueError(f"unknown config sections {sorted(unknown)}")
    cfg.validate()
    return cfg


def config_text(cfg: RunConfig) -> str:
    """Serialise a config back to the INI format :func:`load_config` reads."""
    def fmt(v):
        if isinstance(v, tuple):
            if v and isinstance(v[0], tuple):
                return ",".join(":".join(str(x) for x in item) for item in v)
            return ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)
        return repr(v) if isinstance(v, float) else str(v)

    lines = ["[run]", f"preset = {cfg.preset}", f"posterior_source = {cfg.posterior_source}",
             f"vtln = {cfg.vtln}", f"feature_type = {cfg.feature_type}", f"seed = {cfg.seed}",
             "", "[paths]", f"workdir = {cfg.workdir}"]
    if cfg.train_manifest:
        lines.append(f"train_manifest = {cfg.train_manifest}")
    for key in ("train_manifest", "test_manifest", "new_train_manifest", "new_test_manifest"):
        if getattr(cfg, key):
            lines.append(f"{key} = {getattr(cfg, key)}")
    for section, attr in _SECTIONS.items():
        block = getattr(cfg, attr)
        lines += ["", f"[{section}]"] + [f"{f.name} = {fmt(getattr(block, f.name))}"
                                         for f in fields(block)]
    return "\n".join(lines) + "\n"


def _block_dict(*blocks) -> dict:
    out = {}
    for b in blocks:
        if hasattr(b, "__dataclass_fields__"):
            out[type(b).__name__] = {f.name: getattr(b, f.name) for f in fields(b)}
        else:
            out[str(len(out))] = b
    return json.loads(json.dumps(out, default=str))


# --- markers ------------------------------------------------------------------

def _inputs_digest(paths: Sequence[Path], settings: dict) -> dict:
    files = {}
    for p in sorted(set(Path(x) for x in paths), key=str):
        if not p.exists():
            raise StageError(f"missing input {p}")
        files[str(p)] = file_checksum(p)
    return {"inputs": files, "settings": settings}


class _Step:
    """Completion-marker bookkeeping for one output directory."""

    def __init__(self, name: str, out_dir: Path, inputs: Sequence[Path], settings: dict,
                 force: bool):
        self.name = name
        self.out_dir = Path(out_dir)
        self.marker = self.out_dir / f"{name}.done"
        self.record = _inputs_digest(inputs, settings)
        self.force = force

    def up_to_date(self) -> bool:
        if not self.marker.exists():
            return False
        old = json.loads(self.marker.read_text(encoding="utf-8"))
        if old == self.record:
            logger.info("%s: up to date, nothing to do", self.name)
            return True
        if not self.force:
            raise StageError(
                f"{self.name}: inputs or settings changed since the last run "
                f"({self.marker}); rerun with --force to overwrite")
        logger.info("%s: inputs changed, recomputing (--force)", self.name)
        return False

    def begin(self) -> None:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        if self.marker.exists():
            self.marker.unlink()

    def done(self) -> None:
        self.marker.write_text(json.dumps(self.record, sort_keys=True, indent=1) + "\n",
                               encoding="utf-8")


def _require(marker: Path, stage: str) -> None:
    if not marker.exists():
        raise StageError(f"missing upstream artifact {marker}; run stage '{stage}' first")


def _map(fn: Callable, items: Sequence, jobs: int) -> list:
    if jobs <= 1:
        return [fn(x) for x in items]
    return Parallel(n_jobs=jobs)(delayed(fn)(x) for x in items)


def _utt_seed(seed: int, utt_id: str) -> int:
    return (seed * 1_000_003 + zlib.crc32(utt_id.encode("utf-8"))) & 0x7FFFFFFF


# --- stages --------------------------------------------------------------------

def stage_synth_corpus(cfg: RunConfig, jobs: int = 1, force: bool = False) -> None:
    s = cfg.synth
    out = cfg.workdir / "corpus"
    step = _Step("synth-corpus", out, [], {"synth": _block_dict(s), "seed": cfg.seed}, force)
    if step.up_to_date():
        return
    step.begin()
    specs = synth.default_language_specs(
        s.num_languages, s.inventory, s.phones_per_language, s.formant_jitter,
        s.mean_duration_frames, (s.noise_min, s.noise_max), seed=cfg.seed)
    warp = (s.warp_min, s.warp_max)
    for split, count, offset in (("train", s.train_per_language, 0),
                                 ("test", s.test_per_language, 1_000_000)):
        rows = synth.synthesize_corpus(specs, count, s.durations, out / split, s.sample_rate,
                                       cfg.seed, prefix=split[:2], warp_range=warp,
                                       index_offset=offset)
        write_manifest(out / f"{split}.tsv", rows)
        logger.info("synthesised %d %s utterances", len(rows), split)
    step.done()


def _sdc_cfg(cfg: RunConfig) -> features.FrontEndConfig:
    b = cfg.sdc_features
    base = dict(frame_len_ms=b.frame_len_ms, num_mel_bins=b.num_mel_bins,
                low_freq_hz=b.low_freq_hz, high_freq_hz=b.high_freq_hz,
                dither_amplitude=b.dither_amplitude)
    if cfg.feature_type == "sdc":
        return features.sdc_frontend(**base)
    return features.mfcc_frontend(**base)


def _highres_cfg(cfg: RunConfig) -> features.FrontEndConfig:
    b = cfg.highres_features
    return features.highres_frontend(frame_len_ms=b.frame_len_ms, num_mel_bins=b.num_mel_bins,
                                     num_cepstra=b.num_mel_bins, low_freq_hz=b.low_freq_hz,
                                     high_freq_hz=b.high_freq_hz,
                                     dither_amplitude=b.dither_amplitude)


def _vtln_cfg(cfg: RunConfig) -> features.FrontEndConfig:
    b = cfg.sdc_features
    return features.vtln_frontend(frame_len_ms=b.frame_len_ms, num_mel_bins=b.num_mel_bins,
                                  low_freq_hz=b.low_freq_hz, high_freq_hz=b.high_freq_hz,
                                  dither_amplitude=b.dither_amplitude)


def _audio(row: ManifestRow) -> features.AudioSegment:
    samples, rate = read_audio(row.path)
    return features.AudioSegment(samples, rate, row.utt_id)


def _vad(cfg: RunConfig, static_with_energy: np.ndarray) -> np.ndarray:
    v = cfg.vad
    mask = features.energy_vad(static_with_energy, v.threshold_offset, v.context, v.proportion)
    if not mask.any():
        logger.warning("VAD found no speech; keeping every frame")
        mask[:] = True
    return mask


def _vtln_train_feats(args):
    cfg, row = args
    audio = _audio(row)
    seed = _utt_seed(cfg.seed, row.utt_id)
    ceps = features.extract(audio, _vtln_cfg(cfg), seed)
    energy_cfg = _vtln_cfg(cfg).replace(use_energy=True)
    mask = _vad(cfg, features.extract(audio, energy_cfg, seed))
    return ceps[mask]


def _estimate_warp(args):
    cfg, row, model = args
    if row.vtln_warp is not None:
        return float(row.vtln_warp)
    audio = _audio(row)
    seed = _utt_seed(cfg.seed, row.utt_id)
    mask = _vad(cfg, features.extract(audio, _vtln_cfg(cfg).replace(use_energy=True), seed))
    return features.estimate_vtln_warp(audio, _vtln_cfg(cfg), model, cfg.vtln_model.grid,
                                       seed, mask)


def _lr_features(args):
    """Stats-stream features: statics -> SDC or deltas -> VAD filter -> sliding CMN."""
    cfg, row, warp, out_dir = args
    audio = _audio(row)
    seed = _utt_seed(cfg.seed, row.utt_id)
    static = features.extract(audio, _sdc_cfg(cfg).replace(vtln_warp=warp), seed)
    if cfg.feature_type == "sdc":
        feats = features.compute_sdc(static)
    else:
        feats = features.add_deltas(static, order=2, window=2)
    mask = _vad(cfg, static)
    speech = features.sliding_cmn(feats[mask], cfg.sdc_features.cmn_window_s,
                                  features.FrontEndConfig().frame_shift_ms / 1000.0)
    write_matrix(out_dir / f"{row.utt_id}.feats.fvm", speech)
    write_matrix(out_dir / f"{row.utt_id}.vad.fvm", mask.astype(np.float64)[:, None])


def _highres_features(args):
    cfg, row, out_dir = args
    audio = _audio(row)
    feats = features.extract(audio, _highres_cfg(cfg), _utt_seed(cfg.seed, row.utt_id))
    feats = features.sliding_cmn(feats, cfg.highres_features.cmn_window_s, 0.01)
    write_matrix(out_dir / f"{row.utt_id}.fvm", feats)


def _manifest_inputs(cfg: RunConfig) -> List[Path]:
    paths = []
    for m in cfg.manifests.values():
        if not m.exists():
            raise StageError(f"missing manifest {m}; run stage 'synth-corpus' or set [paths]")
        paths.append(m)
        paths += [Path(r.path) for r in read_manifest(m)]
    return paths


def _rows(cfg: RunConfig, split: str) -> List[ManifestRow]:
    return read_manifest(cfg.manifests[split])


def stage_features(cfg: RunConfig, jobs: int = 1, force: bool = False) -> None:
    inputs = _manifest_inputs(cfg)
    settings = {"blocks": _block_dict(cfg.sdc_features, cfg.vad, cfg.vtln_model),
                "feature_type": cfg.feature_type, "vtln": cfg.vtln, "seed": cfg.seed}
    step = _Step("features", cfg.feat_dir, inputs, settings, force)
    if not step.up_to_date():
        step.begin()
        train, test = _rows(cfg, "train"), _rows(cfg, "test")
        warps: Dict[str, float] = {}
        if cfg.vtln == "on":
            vb = cfg.vtln_model
            rng = np.random.default_rng(cfg.seed)
            pick = np.sort(rng.choice(len(train), size=min(vb.train_utts, len(train)),
                                      replace=False))
            data = _map(_vtln_train_feats, [(cfg, train[i]) for i in pick], jobs)
            model = DiagGmm(vb.components, vb.iters, random_state=cfg.seed).fit(data)
            write_container(cfg.feat_dir / "warp_gmm.lrmd", model.to_container())
            rows = train + test
            est = _map(_estimate_warp, [(cfg, r, model) for r in rows], jobs)
            warps = {r.utt_id: w for r, w in zip(rows, est)}
            with open(cfg.feat_dir / "warps.tsv", "w", encoding="utf-8") as fh:
                fh.write("utt_id\twarp\n")
                fh.writelines(f"{u}\t{w!r}\n" for u, w in warps.items())
        for split, rows in (("train", train), ("test", test)):
            out = cfg.feat_dir / split
            out.mkdir(parents=True, exist_ok=True)
            _map(_lr_features, [(cfg, r, warps.get(r.utt_id, 1.0), out) for r in rows], jobs)
        step.done()
    if cfg.posterior_source == "dnn":
        hstep = _Step("features", cfg.highres_dir, inputs,
                      {"blocks": _block_dict(cfg.highres_features), "seed": cfg.seed}, force)
        if not hstep.up_to_date():
            hstep.begin()
            for split in ("train", "test"):
                out = cfg.highres_dir / split
                out.mkdir(parents=True, exist_ok=True)
                _map(_highres_features, [(cfg, r, out) for r in _rows(cfg, split)], jobs)
            hstep.done()


def _load_lr(cfg: RunConfig, split: str, utt_id: str, root: Optional[Path] = None):
    d = (root or cfg.feat_dir) / split
    return (read_matrix(d / f"{utt_id}.feats.fvm"),
            read_matrix(d / f"{utt_id}.vad.fvm")[:, 0] > 0.5)


def stage_train_ubm(cfg: RunConfig, jobs: int = 1, force: bool = False) -> None:
    marker = cfg.feat_dir / "features.done"
    _require(marker, "features")
    u = cfg.ubm
    step = _Step("train-ubm", cfg.ubm_dir, [marker],
                 {"ubm": _block_dict(u), "seed": cfg.seed}, force)
    if step.up_to_date():
        return
    step.begin()
    data = [_load_lr(cfg, "train", r.utt_id)[0] for r in _rows(cfg, "train")]
    ubm = TandemUbm(u.components, u.diag_stages, u.full_subset, u.top_n,
                    random_state=cfg.seed).fit(data)
    write_container(cfg.ubm_dir / "final.lrmd", ubm.to_container())
    (cfg.ubm_dir / "summary.txt").write_text(ubm.diag_.summary() + "\n", encoding="utf-8")
    step.done()


def _frame_labels(cfg: RunConfig, row: ManifestRow, n: int) -> Optional[np.ndarray]:
    lab = Path(row.path).with_suffix(".lab")
    if not lab.exists():
        return None
    labels = read_labels(lab)
    if abs(labels.size - n) > 1:
        raise ValueError(f"{row.utt_id}: {labels.size} labels for {n} frames")
    return labels[:n]


def stage_train_dnn(cfg: RunConfig, jobs: int = 1, force: bool = False) -> None:
    marker = cfg.highres_dir / "features.done"
    _require(marker, "features")
    nb = cfg.nnet
    train = _rows(cfg, "train")
    rng = np.random.default_rng(cfg.seed)
    pick = np.sort(rng.choice(len(train), size=min(nb.train_utts, len(train)), replace=False))
    rows = [train[i] for i in pick]
    labs = [Path(r.path).with_suffix(".lab") for r in rows]
    step = _Step("train-dnn", cfg.dnn_dir, [marker] + [p for p in labs if p.exists()],
                 {"nnet": _block_dict(nb), "seed": cfg.seed}, force)
    if step.up_to_date():
        return
    step.begin()
    X = [read_matrix(cfg.highres_dir / "train" / f"{r.utt_id}.fvm") for r in rows]
    Y = [_frame_labels(cfg, r, x.shape[0]) for r, x in zip(rows, X)]
    if any(y is None for y in Y):
        logger.warning("frame labels missing; using argmax of a diagonal GMM on the "
                       "network input as class targets")
        g = DiagGmm(nb.num_classes, 5, random_state=cfg.seed).fit(X)
        Y = [np.argmax(g.predict_proba(x), axis=1) for x in X]
    X = [x[:len(y)] for x, y in zip(X, Y)]
    est = TddnnClassifier(X[0].shape[1], hidden_dim=nb.hidden_dim,
                          pnorm_group_size=nb.pnorm_group_size, pnorm_p=nb.pnorm_p,
                          num_classes=nb.num_classes, initial_lr=nb.initial_lr,
                          final_lr=nb.final_lr, num_epochs=nb.num_epochs,
                          minibatch_size=nb.minibatch_size, chunk_len=nb.chunk_len,
                          random_state=cfg.seed)
    with open(cfg.dnn_dir / "train.log", "w", encoding="utf-8") as log_fh:
        est.fit(X, Y, log_fh=log_fh)
    write_container(cfg.dnn_dir / "final.lrmd", est.model_.to_container())
    step.done()


def _source_marker(cfg: RunConfig) -> Tuple[Path, str]:
    if cfg.posterior_source == "gmm":
        return cfg.ubm_dir / "train-ubm.done", "train-ubm"
    return cfg.dnn_dir / "train-dnn.done", "train-dnn"


def _load_source(cfg: RunConfig):
    if cfg.posterior_source == "gmm":
        return TandemUbm.from_container(read_container(cfg.ubm_dir / "final.lrmd"))
    return TddnnClassifier.from_model(
        TddnnModel.from_container(read_container(cfg.dnn_dir / "final.lrmd")))


def _utt_posteriors(cfg: RunConfig, source, split: str, utt_id: str,
                    lr_root: Optional[Path] = None, hr_root: Optional[Path] = None):
    """Pruned posteriors paired with the speech rows of the stats stream."""
    feats, mask = _load_lr(cfg, split, utt_id, lr_root)
    if cfg.posterior_source == "gmm":
        post = prune_posteriors(source.predict_proba(feats), cfg.ivector.prune)
        return post, feats
    hr = read_matrix((hr_root or cfg.highres_dir) / split / f"{utt_id}.fvm")
    post = prune_posteriors(source.predict_proba(hr), cfg.ivector.prune)
    post, mask = align_streams(post, mask, utt_id)
    post = post[mask]
    return post, feats[:post.shape[0]]


def _compute_stats(cfg: RunConfig, source, split: str, supervised=None, rows=None,
                   lr_root: Optional[Path] = None, hr_root: Optional[Path] = None):
    from .stats import accumulate_stats
    ids, out = [], []
    for r in (_rows(cfg, split) if rows is None else rows):
        post, feats = _utt_posteriors(cfg, source, split, r.utt_id, lr_root, hr_root)
        if supervised is not None:
            supervised.add(post, feats)
        ids.append(r.utt_id)
        out.append(accumulate_stats(post, feats))
    return ids, out


def stage_train_ivector(cfg: RunConfig, jobs: int = 1, force: bool = False) -> None:
    fmarker = cfg.feat_dir / "features.done"
    _require(fmarker, "features")
    smarker, sname = _source_marker(cfg)
    _require(smarker, sname)
    step = _Step("train-ivector", cfg.system_dir, [fmarker, smarker],
                 {"ivector": _block_dict(cfg.ivector), "seed": cfg.seed}, force)
    if step.up_to_date():
        return
    step.begin()
    source = _load_source(cfg)
    if cfg.posterior_source == "gmm":
        ids, stats = _compute_stats(cfg, source, "train")
        means = source.full_.means_
        variances = np.array([np.diag(c) for c in source.full_.covariances_])
    else:
        acc = SupervisedGmmAccumulator()
        ids, stats = _compute_stats(cfg, source, "train", acc)
        sgmm = acc.finalize()
        means, variances = sgmm.means, sgmm.variances
        sup = DiagGmm.from_params(sgmm.priors, means, variances)
        write_container(cfg.system_dir / "supervised_gmm.lrmd", sup.to_container())
    write_container(cfg.system_dir / "stats_train.lrmd", stats_to_container(ids, stats))
    ext = IvectorExtractor(means, variances, cfg.ivector.dim, cfg.ivector.iters,
                           random_state=cfg.seed).fit(stats)
    hist = np.array(ext.objective_history_)
    if not np.all(np.isfinite(hist)):
        raise FloatingPointError("non-finite i-vector EM objective")
    write_container(cfg.system_dir / "extractor.lrmd", ext.to_container())
    step.done()


def stage_extract_ivectors(cfg: RunConfig, jobs: int = 1, force: bool = False) -> None:
    emarker = cfg.system_dir / "train-ivector.done"
    _require(emarker, "train-ivector")
    step = _Step("extract-ivectors", cfg.system_dir, [emarker, cfg.system_dir / "extractor.lrmd"],
                 {}, force)
    if step.up_to_date():
        return
    step.begin()
    ext = IvectorExtractor.from_container(read_container(cfg.system_dir / "extractor.lrmd"))
    ids, stats = stats_from_container(read_container(cfg.system_dir / "stats_train.lrmd"))
    splits = {"train": (ids, stats)}
    splits["test"] = _compute_stats(cfg, _load_source(cfg), "test")
    write_container(cfg.system_dir / "stats_test.lrmd", stats_to_container(*splits["test"]))
    for split, (uids, st) in splits.items():
        write_matrix(cfg.system_dir / f"ivectors_{split}.fvm", ext.transform(st))
        write_ids(cfg.system_dir / f"ivectors_{split}.ids", uids)
    step.done()


def _load_ivectors(cfg: RunConfig, split: str):
    return (read_ids(cfg.system_dir / f"ivectors_{split}.ids"),
            read_matrix(cfg.system_dir / f"ivectors_{split}.fvm"))


def stage_train_classifier(cfg: RunConfig, jobs: int = 1, force: bool = False) -> None:
    imarker = cfg.system_dir / "extract-ivectors.done"
    _require(imarker, "extract-ivectors")
    step = _Step("train-classifier", cfg.system_dir,
                 [imarker, cfg.system_dir / "ivectors_train.fvm", cfg.manifests["train"]],
                 {"classifier": _block_dict(cfg.classifier), "seed": cfg.seed}, force)
    if step.up_to_date():
        return
    step.begin()
    ids, X = _load_ivectors(cfg, "train")
    lang = {r.utt_id: r.language for r in _rows(cfg, "train")}
    c = cfg.classifier
    clf = LogRegClassifier(c.l2_lambda, c.max_iters, c.tolerance, cfg.seed).fit(
        X, [lang[u] for u in ids])
    write_container(cfg.system_dir / "classifier.lrmd", clf.to_container())
    step.done()


def stage_score(cfg: RunConfig, jobs: int = 1, force: bool = False) -> None:
    cmarker = cfg.system_dir / "train-classifier.done"
    _require(cmarker, "train-classifier")
    step = _Step("score", cfg.system_dir,
                 [cmarker, cfg.system_dir / "classifier.lrmd",
                  cfg.system_dir / "ivectors_test.fvm", cfg.manifests["test"]], {}, force)
    if step.up_to_date():
        return
    step.begin()
    clf = LogRegClassifier.from_container(read_container(cfg.system_dir / "classifier.lrmd"))
    ids, X = _load_ivectors(cfg, "test")
    rows = {r.utt_id: r for r in _rows(cfg, "test")}
    trials = evaluation.TrialSet(
        [str(c) for c in clf.classes_], ids, [rows[u].language for u in ids],
        [evaluation.duration_condition(rows[u].duration_s) for u in ids], clf.predict_proba(X))
    evaluation.write_scores(cfg.system_dir / "scores.tsv", trials)
    step.done()


def stage_evaluate(cfg: RunConfig, jobs: int = 1, force: bool = False) -> evaluation.EvalReport:
    smarker = cfg.system_dir / "score.done"
    _require(smarker, "score")
    scores = cfg.system_dir / "scores.tsv"
    report = evaluation.evaluate(evaluation.read_scores(scores))
    step = _Step("evaluate", cfg.system_dir, [smarker, scores], {}, force)
    if not step.up_to_date():
        step.begin()
        title = (f"posterior_source={cfg.posterior_source} feature_type={cfg.feature_type} "
                 f"vtln={cfg.vtln} (preset {cfg.preset})")
        evaluation.write_report(cfg.system_dir, report, title)
        step.done()
    return report


# --- extending a trained system ------------------------------------------------

def synth_extra_language(cfg: RunConfig, index: Optional[int] = None) -> Dict[str, Path]:
    """Synthesise one language beyond the configured ones, from the same seed.

    Language specs are drawn sequentially, so language ``index`` of a larger
    inventory leaves the first ``num_languages`` unchanged.  Returns the
    train and test manifest paths.
    """
    s = cfg.synth
    index = s.num_languages if index is None else index
    spec = synth.default_language_specs(
        index + 1, s.inventory, s.phones_per_language, s.formant_jitter,
        s.mean_duration_frames, (s.noise_min, s.noise_max), seed=cfg.seed)[index]
    out = cfg.workdir / "corpus_extra" / spec.language_id
    manifests = {}
    for split, count, offset in (("train", s.train_per_language, 2_000_000),
                                 ("test", s.test_per_language, 3_000_000)):
        rows = synth.synthesize_corpus([spec], count, s.durations, out / split,
                                       s.sample_rate, cfg.seed, prefix=split[:2],
                                       warp_range=(s.warp_min, s.warp_max),
                                       index_offset=offset)
        manifests[split] = out / f"{split}.tsv"
        write_manifest(manifests[split], rows)
    return manifests


def add_language(cfg: RunConfig, train_manifest, test_manifest,
                 jobs: int = 1) -> evaluation.EvalReport:
    """Add one language to a trained system by retraining only the classifier.

    Features, posteriors and i-vectors for the new utterances come from the
    existing front end, warp model, UBM or network and extractor, none of
    which is written to.  Outputs go to ``<system>/add_<language>/``.
    """
    _require(cfg.system_dir / "evaluate.done", "evaluate")
    new = {"train": read_manifest(train_manifest), "test": read_manifest(test_manifest)}
    langs = {r.language for rows in new.values() for r in rows}
    if len(langs) != 1:
        raise ValueError(f"new-language manifests must hold exactly one language, got "
                         f"{sorted(langs)}")
    lang = langs.pop()
    out = cfg.system_dir / f"add_{lang}"
    lr_root, hr_root = out / "feats", out / "highres"
    if cfg.vtln == "on":
        model = DiagGmm.from_container(read_container(cfg.feat_dir / "warp_gmm.lrmd"))
    for split, rows in new.items():
        warps = {}
        if cfg.vtln == "on":
            est = _map(_estimate_warp, [(cfg, r, model) for r in rows], jobs)
            warps = {r.utt_id: w for r, w in zip(rows, est)}
        (lr_root / split).mkdir(parents=True, exist_ok=True)
        _map(_lr_features, [(cfg, r, warps.get(r.utt_id, 1.0), lr_root / split)
                            for r in rows], jobs)
        if cfg.posterior_source == "dnn":
            (hr_root / split).mkdir(parents=True, exist_ok=True)
            _map(_highres_features, [(cfg, r, hr_root / split) for r in rows], jobs)
    source = _load_source(cfg)
    ext = IvectorExtractor.from_container(read_container(cfg.system_dir / "extractor.lrmd"))
    ivecs = {}
    for split, rows in new.items():
        ids, st = _compute_stats(cfg, source, split, rows=rows, lr_root=lr_root,
                                 hr_root=hr_root)
        ivecs[split] = (ids, ext.transform(st))
        write_matrix(out / f"ivectors_{split}.fvm", ivecs[split][1])
        write_ids(out / f"ivectors_{split}.ids", ids)
    old = LogRegClassifier.from_container(read_container(cfg.system_dir / "classifier.lrmd"))
    ids, X = _load_ivectors(cfg, "train")
    lang_of = {r.utt_id: r.language for r in _rows(cfg, "train")}
    clf = add_language_to_classifier(old, ivecs["train"][1], lang, X, [lang_of[u] for u in ids])
    write_container(out / "classifier.lrmd", clf.to_container())
    test_ids, test_X = _load_ivectors(cfg, "test")
    rows = {r.utt_id: r for r in _rows(cfg, "test")}
    rows.update({r.utt_id: r for r in new["test"]})
    all_ids = list(test_ids) + list(ivecs["test"][0])
    trials = evaluation.TrialSet(
        [str(c) for c in clf.classes_], all_ids, [rows[u].language for u in all_ids],
        [evaluation.duration_condition(rows[u].duration_s) for u in all_ids],
        clf.predict_proba(np.vstack([test_X, ivecs["test"][1]])))
    evaluation.write_scores(out / "scores.tsv", trials)
    report = evaluation.evaluate(trials)
    evaluation.write_report(out, report, f"{cfg.posterior_source} system plus {lang}")
    return report


def stage_add_language(cfg: RunConfig, jobs: int = 1,
                       force: bool = False) -> evaluation.EvalReport:
    if cfg.new_train_manifest and cfg.new_test_manifest:
        manifests = {"train": cfg.new_train_manifest, "test": cfg.new_test_manifest}
    else:
        manifests = synth_extra_language(cfg)
    return add_language(cfg, manifests["train"], manifests["test"], jobs)


STAGE_FUNCS = {
    "synth-corpus": stage_synth_corpus,
    "features": stage_features,
    "train-ubm": stage_train_ubm,
    "train-dnn": stage_train_dnn,
    "train-ivector": stage_train_ivector,
    "extract-ivectors": stage_extract_ivectors,
    "train-classifier": stage_train_classifier,
    "score": stage_score,
    "evaluate": stage_evaluate,
    "add-language": stage_add_language,
}


def run_stage(cfg: RunConfig, stage: str, jobs: int = 1, force: bool = False):
    if stage not in STAGE_FUNCS:
        raise ValueError(f"unknown stage {stage!r}")
    cfg.workdir.mkdir(parents=True, exist_ok=True)
    return STAGE_FUNCS[stage](cfg, jobs, force)


def pipeline_stages(cfg: RunConfig, include_synth: bool = True) -> List[str]:
    stages = ["synth-corpus"] if include_synth else []
    stages.append("features")
    stages.append("train-ubm" if cfg.posterior_source == "gmm" else "train-dnn")
    stages += ["train-ivector", "extract-ivectors", "train-classifier", "score", "evaluate"]
    return stages


def run_all(cfg: RunConfig, jobs: int = 1, force: bool = False,
            include_synth: bool = True) -> evaluation.EvalReport:
    report = None
    for stage in pipeline_stages(cfg, include_synth):
        logger.info("=== stage %s", stage)
        report = run_stage(cfg, stage, jobs, force)
    return report
