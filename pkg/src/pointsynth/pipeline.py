"""Dataset ingestion, experiment configuration and the staged pipeline runner."""
from __future__ import annotations

import csv
import logging
import shutil
import traceback
import xml.etree.ElementTree as ET
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from skimage.draw import polygon as draw_polygon

from .codec import DecodeThresholds, centroids_from_instances, encode_hv, relabel_sequential
from .config import ConfigError, config_hash, from_mapping, read_sections, substream_seed
from .geometry import PointLabel, SamplerConfig, generate_point_labels, sample_instance_mask
from .io import (from_uint8, list_images, read_image, read_json, read_mask_png, read_points_csv, to_uint8,
                 write_image, write_json, write_mask_png, write_points_csv)
from .metrics import embed_features, fid, kid, sample_diversity, score_segmentation
from .networks import NetConfig, build_networks
from .phantom import make_phantom_set
from .segmentor import SegTrainConfig, load_segmentor, predict_instances, save_segmentor, train_segmentor
from .synthesis import (SynthItem, SynthTrainConfig, generate_image, load_checkpoint, synthesize_dataset,
                        train_synthesis)

log = logging.getLogger(__name__)

STAGES = ("sample", "train-synth", "synth", "train-seg", "eval")
UPSTREAM = {"sample": (), "train-synth": (), "synth": ("sample", "train-synth"),
            "train-seg": ("synth",), "eval": ("train-seg",)}
REPORT_COLUMNS = ("run", "metric", "item", "value", "mean", "std")


class StageFailure(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        super().__init__(f"stage {stage!r} failed: {cause}")


# ---------------------------------------------------------------------------
# manifests

@dataclass
class ManifestItem:
    stem: str
    image: str
    points: str
    canvas: tuple[int, int]
    mask: str | None = None
    provenance: dict = field(default_factory=lambda: {"kind": "real"})


@dataclass
class DatasetManifest:
    split: str
    items: list[ManifestItem]
    errata: list[dict] = field(default_factory=list)
    config_hash: str = ""
    root: Path | None = None

    def save(self, directory) -> Path:
        path = Path(directory) / "manifest.json"
        body = {"split": self.split, "config_hash": self.config_hash, "errata": self.errata,
                "items": [{**asdict(it), "canvas": list(it.canvas)} for it in self.items]}
        write_json(path, body)
        return path

    @classmethod
    def load(cls, directory) -> "DatasetManifest":
        root = Path(directory)
        path = root / "manifest.json" if root.is_dir() else root
        root = path.parent
        raw = read_json(path)
        items = [ManifestItem(**{**it, "canvas": tuple(it["canvas"])}) for it in raw["items"]]
        m = cls(raw["split"], items, raw.get("errata", []), raw.get("config_hash", ""), root)
        m.validate()
        return m

    def validate(self) -> None:
        stems = [it.stem for it in self.items]
        dupes = sorted({s for s in stems if stems.count(s) > 1})
        if dupes:
            raise ValueError(f"duplicate stems in split {self.split!r}: {dupes}")
        for it in self.items:
            for rel in (it.image, it.points, it.mask):
                if rel is not None and not (self.root / rel).is_file():
                    raise FileNotFoundError(f"{self.root / rel} listed in manifest but missing")
            with Image.open(self.root / it.image) as im:
                if (im.height, im.width) != tuple(it.canvas):
                    raise ValueError(f"{it.stem}: image is {im.height}x{im.width}, manifest says {it.canvas}")

    def load_item(self, it: ManifestItem):
        """Return (image in [-1, 1], mask or None, PointLabel)."""
        image = from_uint8(read_image(self.root / it.image))
        mask = read_mask_png(self.root / it.mask) if it.mask else None
        return image, mask, read_points_csv(self.root / it.points, it.canvas)


def write_item(out_dir: Path, stem: str, image: np.ndarray, mask: np.ndarray | None,
               points: PointLabel, provenance: dict) -> ManifestItem:
    for sub in ("images", "points") + (("masks",) if mask is not None else ()):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    write_image(out_dir / "images" / f"{stem}.png", image if image.dtype == np.uint8 else to_uint8(image))
    write_points_csv(out_dir / "points" / f"{stem}.csv", points)
    mask_rel = None
    if mask is not None:
        mask_rel = f"masks/{stem}.png"
        write_mask_png(out_dir / mask_rel, mask)
    return ManifestItem(stem, f"images/{stem}.png", f"points/{stem}.csv", tuple(points.canvas_size),
                        mask_rel, provenance)


# ---------------------------------------------------------------------------
# ingestion

def _find_dir(root: Path, names):
    for n in names:
        if (root / n).is_dir():
            return root / n
    raise FileNotFoundError(f"{root}: none of {list(names)} found")


def parse_monuseg_xml(path, shape) -> np.ndarray:
    """Rasterize every Region polygon; later regions win on overlap."""
    tree = ET.parse(path)
    mask = np.zeros(shape, dtype=np.int32)
    n = 0
    for region in tree.iter("Region"):
        verts = [(float(v.get("Y")), float(v.get("X"))) for v in region.iter("Vertex")]
        if len(verts) < 3:
            continue
        rows, cols = np.array(verts).T
        rr, cc = draw_polygon(rows, cols, shape)
        if rr.size == 0:
            continue
        n += 1
        mask[rr, cc] = n
    if n == 0:
        raise ValueError("no polygon regions")
    return relabel_sequential(mask)


def ingest_dataset(source_dir, fmt: str, out_dir, split: str = "train") -> DatasetManifest:
    """Normalize a raw dataset into images/ masks/ points/ plus manifest.json."""
    if fmt not in ("monuseg_xml", "mask_png"):
        raise ConfigError(f"unknown format {fmt!r}")
    src, out = Path(source_dir), Path(out_dir)
    img_dir = _find_dir(src, ("images", "Tissue Images", "Tissue images"))
    if fmt == "monuseg_xml":
        ann_dir, ann_ext = _find_dir(src, ("annotations", "Annotations")), ".xml"
    else:
        ann_dir, ann_ext = _find_dir(src, ("masks", "Masks", "labels")), ".png"
    out.mkdir(parents=True, exist_ok=True)
    items, errata = [], []
    for img_path in list_images(img_dir):
        stem = img_path.stem
        ann = ann_dir / f"{stem}{ann_ext}"
        try:
            image = read_image(img_path)
            if not ann.is_file():
                raise FileNotFoundError(f"missing annotation {ann.name}")
            if fmt == "monuseg_xml":
                mask = parse_monuseg_xml(ann, image.shape[:2])
            else:
                mask = relabel_sequential(read_mask_png(ann))
                if mask.shape != image.shape[:2]:
                    raise ValueError(f"mask {mask.shape} does not match image {image.shape[:2]}")
        except (ET.ParseError, OSError, TypeError, ValueError) as exc:
            errata.append({"stem": stem, "reason": str(exc)})
            log.warning("skipping %s: %s", stem, exc)
            continue
        points = centroids_from_instances(mask)
        items.append(write_item(out, stem, image, mask, points,
                                {"kind": "real", "source": img_path.name, "format": fmt}))
    manifest = DatasetManifest(split, items, errata, config_hash({"format": fmt, "split": split}), out)
    manifest.save(out)
    return manifest


def load_split(directory):
    """Load ``[(stem, image, mask, points)]`` from a manifest directory."""
    m = DatasetManifest.load(directory)
    return [(it.stem, *m.load_item(it)) for it in m.items]


# ---------------------------------------------------------------------------
# configuration

@dataclass
class ExperimentSettings:
    seed: int = 0
    out: str = "runs/default"
    stages: str = ",".join(STAGES)
    train_data: str = ""
    test_data: str = ""
    phantom_train: int = 4
    phantom_test: int = 2
    phantom_size: int = 128
    label_canvas: tuple[int, int] = (128, 128)
    n_synthetic: tuple[int, ...] = (8,)

    def __post_init__(self):
        bad = [s for s in self.stage_list if s not in STAGES]
        if bad:
            raise ValueError(f"unknown stage(s) {bad}; choose from {list(STAGES)}")
        if not self.n_synthetic or min(self.n_synthetic) < 1:
            raise ValueError("n_synthetic needs at least one positive count")
        if len(self.label_canvas) != 2:
            raise ValueError("label_canvas needs two integers")

    @property
    def stage_list(self) -> list[str]:
        return [s.strip() for s in self.stages.split(",") if s.strip()]


@dataclass
class SynthGenConfig:
    n_variants: int = 1

    def __post_init__(self):
        if self.n_variants < 1:
            raise ValueError("n_variants must be >= 1")


@dataclass
class EvalConfig:
    tile: int = 256
    overlap: int = 32
    seg_threshold: float = 0.5
    marker_threshold: float = 0.4
    min_area: int = 10
    extractor: str = "toy"
    kid_block: int = 1024
    diversity_labels: int = 2
    diversity_variants: int = 10

    @property
    def thresholds(self) -> DecodeThresholds:
        return DecodeThresholds(self.seg_threshold, self.marker_threshold, self.min_area)


SECTIONS = {
    "experiment": ExperimentSettings,
    "sampler": SamplerConfig,
    "network": NetConfig,
    "synth_train": SynthTrainConfig,
    "synth_gen": SynthGenConfig,
    "seg_network": NetConfig,
    "seg_train": SegTrainConfig,
    "eval": EvalConfig,
}


@dataclass
class ExperimentConfig:
    experiment: ExperimentSettings = field(default_factory=ExperimentSettings)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    network: NetConfig = field(default_factory=NetConfig)
    synth_train: SynthTrainConfig = field(default_factory=SynthTrainConfig)
    synth_gen: SynthGenConfig = field(default_factory=SynthGenConfig)
    seg_network: NetConfig = field(default_factory=NetConfig)
    seg_train: SegTrainConfig = field(default_factory=SegTrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def from_sections(cls, sections: dict) -> "ExperimentConfig":
        unknown = sorted(set(sections) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
        kwargs = {name: from_mapping(tp, sections.get(name, {}), name) for name, tp in SECTIONS.items()}
        cfg = cls(**kwargs)
        cfg.network.validate()
        cfg.seg_network.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        return cls.from_sections(read_sections(path))

    def override(self, seed: int | None = None, out: str | None = None, stages: str | None = None,
                 n_synthetic=None) -> "ExperimentConfig":
        exp = self.experiment
        changes = {k: v for k, v in (("seed", seed), ("out", out), ("stages", stages)) if v is not None}
        if n_synthetic:
            changes["n_synthetic"] = tuple(int(n) for n in n_synthetic)
        try:
            return replace(self, experiment=replace(exp, **changes))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# stage runner

def _stage_hashes(cfg: ExperimentConfig) -> dict[str, str]:
    e = cfg.experiment
    data = {"train": e.train_data, "test": e.test_data, "phantom": (e.phantom_train, e.phantom_test, e.phantom_size)}
    h = {}
    h["sample"] = config_hash({"seed": e.seed, "canvas": e.label_canvas, "n": _n_labels(cfg)}, cfg.sampler)
    h["train-synth"] = config_hash({"seed": e.seed, "data": data}, cfg.network, cfg.synth_train, cfg.sampler)
    h["synth"] = config_hash({"up": [h["sample"], h["train-synth"]]}, cfg.synth_gen)
    h["train-seg"] = config_hash({"up": h["synth"], "n": e.n_synthetic}, cfg.seg_network, cfg.seg_train)
    h["eval"] = config_hash({"up": h["train-seg"], "data": data}, cfg.eval)
    return h


def _n_labels(cfg: ExperimentConfig) -> int:
    return -(-max(cfg.experiment.n_synthetic) // cfg.synth_gen.n_variants)


def _real_split(cfg: ExperimentConfig, split: str):
    e = cfg.experiment
    path = e.train_data if split == "train" else e.test_data
    if path:
        return load_split(path)
    n = e.phantom_train if split == "train" else e.phantom_test
    data = make_phantom_set(n, e.phantom_size, seed=substream_seed(e.seed, "phantom", split) % 2 ** 31)
    return [(f"{split}_{i:03d}", img, mask, pts) for i, (img, mask, pts) in enumerate(data)]


def _stage_sample(cfg, run_dir: Path, out: Path):
    e = cfg.experiment
    s = cfg.sampler
    seed = substream_seed(e.seed, "sample")
    labels = generate_point_labels(_n_labels(cfg), (s.count_min, s.count_max), s.min_spacing,
                                   tuple(e.label_canvas), seed)
    out.mkdir(parents=True, exist_ok=True)
    for i, p in enumerate(labels):
        write_points_csv(out / f"label_{i:04d}.csv", p)


def _stage_train_synth(cfg, run_dir: Path, out: Path):
    seed = substream_seed(cfg.experiment.seed, "train-synth")
    train_cfg = replace(cfg.synth_train, seed=seed % 2 ** 31)
    items = [SynthItem(img, pts, stem) for stem, img, _, pts in _real_split(cfg, "train")]
    bundle = build_networks(cfg.network, seed=seed % 2 ** 31)
    train_synthesis(bundle, items, train_cfg, cfg.sampler, out_dir=out)


def _label_files(run_dir: Path):
    return sorted((run_dir / "sample").glob("label_*.csv"))


def _stage_synth(cfg, run_dir: Path, out: Path):
    e = cfg.experiment
    bundle, _, _, _ = load_checkpoint(run_dir / "train-synth" / "checkpoint.pt")
    files = _label_files(run_dir)
    labels = [read_points_csv(f, tuple(e.label_canvas)) for f in files]
    seed = substream_seed(e.seed, "synth")
    pairs, records = synthesize_dataset(bundle, labels, cfg.sampler, cfg.synth_gen.n_variants, seed,
                                        sources=[f.name for f in files])
    items = []
    for k, ((img, mask), rec) in enumerate(zip(pairs, records)):
        pts = read_points_csv(files[rec["label_index"]], tuple(e.label_canvas))
        items.append(write_item(out, f"synth_{k:04d}", img, mask, pts, {"kind": "synthetic", **rec}))
    DatasetManifest("synthetic", items, [], _stage_hashes(cfg)["synth"], out).save(out)


def _synthetic_pairs(run_dir: Path, n: int):
    m = DatasetManifest.load(run_dir / "synth")
    if n > len(m.items):
        raise ValueError(f"asked for {n} synthetic pairs, only {len(m.items)} generated")
    return [m.load_item(it)[:2] for it in m.items[:n]]


def _stage_train_seg(cfg, run_dir: Path, out: Path):
    for n in cfg.experiment.n_synthetic:
        seed = substream_seed(cfg.experiment.seed, "train-seg", n) % 2 ** 31
        seg_cfg = replace(cfg.seg_train, seed=seed)
        model, records = train_segmentor(_synthetic_pairs(run_dir, n), seg_cfg, cfg.seg_network)
        d = out / f"n{n}"
        d.mkdir(parents=True, exist_ok=True)
        save_segmentor(d / "segmentor.pt", model, cfg.seg_network, seg_cfg, records)
        with open(d / "train_log.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("epoch", "phase", "lr", "loss"))
            w.writerows((r["epoch"], r["phase"], repr(r["lr"]), repr(r["loss"])) for r in records)


def _fmt(v) -> str:
    return "" if v == "" else repr(float(v))


def write_report(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for run, metric, item, value, mean, std in rows:
            w.writerow((run, metric, item, _fmt(value), _fmt(mean), _fmt(std)))


def evaluate_predictions(preds, gts, names, run: str = "eval"):
    """Report rows for one set of predicted instance masks."""
    scores = score_segmentation(preds, gts, names)
    return [(run, *row) for row in scores.rows()]


def synthesis_rows(real_images, fake_images, ec: EvalConfig, extractor_seed: int, run: str = "synthesis"):
    a = embed_features(real_images, ec.extractor, seed=extractor_seed)
    b = embed_features(fake_images, ec.extractor, seed=extractor_seed)
    rows = []
    if len(real_images) >= 2 and len(fake_images) >= 2:
        rows.append((run, "fid", "", fid(a, b), "", ""))
        k_mean, k_std = kid(a, b, ec.kid_block)
        rows.append((run, "kid", "", k_mean, k_mean, k_std))
    return rows


def _stage_eval(cfg, run_dir: Path, out: Path):
    e, ec = cfg.experiment, cfg.eval
    test = _real_split(cfg, "test")
    names = [t[0] for t in test]
    gts = [t[2] for t in test]
    if any(g is None for g in gts):
        raise ValueError("test split needs dense masks for evaluation")
    rows = []
    for n in e.n_synthetic:
        model, _, _ = load_segmentor(run_dir / "train-seg" / f"n{n}" / "segmentor.pt")
        pred_dir = out / f"n{n}" / "predictions"
        pred_dir.mkdir(parents=True, exist_ok=True)
        preds = []
        for stem, img, _, _ in test:
            pred = predict_instances(model, img, ec.tile, ec.overlap, ec.thresholds)
            write_mask_png(pred_dir / f"{stem}.png", pred)
            preds.append(pred)
        rows += evaluate_predictions(preds, gts, names, run=f"n{n}")

    synth = DatasetManifest.load(run_dir / "synth")
    fakes = [synth.load_item(it)[0] for it in synth.items]
    rows += synthesis_rows([t[1] for t in test], fakes, ec, substream_seed(e.seed, "extractor") % 2 ** 31)
    bundle, _, _, _ = load_checkpoint(run_dir / "train-synth" / "checkpoint.pt")
    divs = []
    for i, f in enumerate(_label_files(run_dir)[:ec.diversity_labels]):
        p = read_points_csv(f, tuple(e.label_canvas))
        hv = encode_hv(sample_instance_mask(p, cfg.sampler, seed=substream_seed(e.seed, "diversity-mask", i)))
        imgs = [generate_image(bundle, hv, substream_seed(e.seed, "diversity", i, v))
                for v in range(ec.diversity_variants)]
        divs.append(sample_diversity(imgs))
    if divs:
        rows.append(("synthesis", "diversity", "", float(np.mean(divs)), float(np.mean(divs)), float(np.std(divs))))
    write_report(out / "report.csv", rows)
    shutil.copyfile(out / "report.csv", run_dir / "report.csv")


STAGE_FUNCS = {"sample": _stage_sample, "train-synth": _stage_train_synth, "synth": _stage_synth,
               "train-seg": _stage_train_seg, "eval": _stage_eval}


def _is_done(stage_dir: Path, digest: str) -> bool:
    marker = stage_dir / "done.json"
    return marker.is_file() and read_json(marker).get("config_hash") == digest


def run_pipeline(cfg: ExperimentConfig, run_dir=None) -> Path:
    """Run the selected stages in order, skipping ones already completed
    under the same cumulative config hash."""
    run_dir = Path(run_dir or cfg.experiment.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    hashes = _stage_hashes(cfg)
    selected = [s for s in STAGES if s in cfg.experiment.stage_list]
    for s in selected:
        for up in UPSTREAM[s]:
            if up not in selected and not _is_done(run_dir / up, hashes[up]):
                raise ConfigError(f"stage {s!r} needs {up!r}, which is neither selected nor completed")
    write_json(run_dir / "config.json", {name: asdict(getattr(cfg, name)) for name in SECTIONS})
    torch.use_deterministic_algorithms(True, warn_only=True)
    for s in selected:
        stage_dir = run_dir / s
        if _is_done(stage_dir, hashes[s]):
            log.info("skipping %s (already complete)", s)
            continue
        if stage_dir.exists():
            shutil.rmtree(stage_dir)
        stage_dir.mkdir(parents=True)
        torch.manual_seed(substream_seed(cfg.experiment.seed, "torch", s) % 2 ** 31)
        log.info("running %s", s)
        try:
            STAGE_FUNCS[s](cfg, run_dir, stage_dir)
        except Exception as exc:
            (stage_dir / "error.log").write_text(traceback.format_exc())
            raise StageFailure(s, exc) from exc
        write_json(stage_dir / "done.json", {"stage": s, "config_hash": hashes[s], "seed": cfg.experiment.seed})
    return run_dir
