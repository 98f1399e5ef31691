"""Stage orchestration: every stage reads and writes plain files under the output directory."""
from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, TypeVar

import numpy as np
import tomli_w
from threadpoolctl import threadpool_limits

from . import GROUND, IGNORE
from ._toml import load_toml
from .config import PipelineConfig
from .distill import (TrainHyper, classifier_forward, load_classifier, pixel_features, refine_predictions,
                      save_classifier, train, write_train_log)
from .evaluation import (ConfusionMatrix, EvalReport, confusion_matrix, evaluate, hungarian_match,
                         normalized_confusion_report, write_normalized_confusion, write_report)
from .netpbm import read_pgm, read_ppm, write_pgm16
from .projection import (DensifyParams, ImageSegmentMap, ProjectionParams, densify, project_segments,
                         read_calibration, read_segment_map, write_segment_map)
from .pseudolabel import (FeatureParams, KMeansParams, assemble_pseudo_labels, kmeans_fit,
                          load_external_features, read_pseudo_labels, save_cluster_model, save_features,
                          segment_features, write_pseudo_labels)
from .rangeseg import (GroundParams, SegParams, build_range_image, read_cloud_csv, read_segmentation_pgm,
                       segment_ground, segment_objects, write_range_pgm, write_segmentation_pgm)
from .synth import FRAME_FILES, FrameSpec, SceneSpec, lidar_from_dict, simulate_frame, write_frame

log = logging.getLogger(__name__)

STAGES = ("synth", "segment", "project", "cluster", "train-teacher", "refine", "train-student", "eval")
_SALTS = {"synth": 1, "cluster": 2, "teacher": 3, "student": 4}

T = TypeVar("T")
R = TypeVar("R")


class StageError(RuntimeError):
    pass


def derive_seed(root: int, stage: str, index: int = 0) -> int:
    ss = np.random.SeedSequence([int(root), _SALTS[stage], int(index)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def thread_count() -> int:
    raw = os.environ.get("DSEG_THREADS", "")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise StageError(f"DSEG_THREADS must be an integer, got {raw!r}") from None
    return os.cpu_count() or 1


def parallel_map(fn: Callable[[T], R], items: Iterable[T]) -> list[R]:
    items = list(items)
    n = min(thread_count(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


# -- manifest ----------------------------------------------------------------

@dataclass
class FrameEntry:
    frame_id: str
    directory: Path
    files: dict[str, Path] = field(default_factory=dict)

    def path(self, component: str) -> Path:
        return self.files.get(component, self.directory / FRAME_FILES[component])


@dataclass
class FrameManifest:
    frames: list[FrameEntry]

    def __len__(self) -> int:
        return len(self.frames)

    def ids(self) -> list[str]:
        return [f.frame_id for f in self.frames]


def write_manifest(path: str | Path, manifest: FrameManifest) -> None:
    path = Path(path)
    base = path.parent
    entries = []
    for f in manifest.frames:
        entry = {"id": f.frame_id, "dir": os.path.relpath(f.directory, base)}
        for comp, p in sorted(f.files.items()):
            entry[comp] = os.path.relpath(p, base)
        entries.append(entry)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(tomli_w.dumps({"frames": entries}))


def load_manifest(path: str | Path, check_files: bool = True) -> FrameManifest:
    path = Path(path)
    if not path.exists():
        raise StageError(f"missing manifest: {path}")
    doc = load_toml(path)
    base = path.parent
    frames, seen = [], set()
    for n, entry in enumerate(doc.get("frames", [])):
        try:
            fid = str(entry["id"])
            directory = base / entry["dir"]
        except KeyError as exc:
            raise StageError(f"{path}: frame #{n} lacks {exc}") from None
        if fid in seen:
            raise StageError(f"{path}: duplicate frame id {fid!r}")
        seen.add(fid)
        files = {c: base / entry[c] for c in FRAME_FILES if c in entry}
        frame = FrameEntry(fid, directory, files)
        if check_files:
            for comp in ("cloud", "calib", "image", "meta"):
                if not frame.path(comp).exists():
                    raise StageError(f"frame {fid}: missing {comp} file {frame.path(comp)}")
        frames.append(frame)
    return FrameManifest(frames)


# -- stage runner ------------------------------------------------------------

class Pipeline:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.out = Path(cfg.run.out_dir)

    # paths
    def art(self, *parts: str) -> Path:
        return self.out.joinpath(*parts)

    def seg_path(self, fid: str) -> Path:
        return self.art("segment", f"{fid}.pgm")

    def proj_path(self, fid: str) -> Path:
        return self.art("project", f"{fid}.pgm")

    def pseudo_path(self, fid: str) -> Path:
        return self.art("pseudo", f"{fid}.pgm")

    def teacher_pred_path(self, fid: str) -> Path:
        return self.art("teacher_pred", f"{fid}.pgm")

    def refined_path(self, fid: str) -> Path:
        return self.art("refine", f"{fid}.pgm")

    @staticmethod
    def require(path: Path, stage: str) -> Path:
        if not path.exists():
            raise StageError(f"missing upstream artifact: {path} (run the '{stage}' stage first)")
        return path

    def manifest(self) -> FrameManifest:
        m = load_manifest(self.cfg.manifest_path())
        if not len(m):
            raise StageError("empty manifest")
        return m

    def run(self, stage: str):
        if stage not in STAGES:
            raise StageError(f"unknown stage {stage!r}; choose from {', '.join(STAGES)}")
        log.info("stage %s", stage)
        with threadpool_limits(limits=1):
            return getattr(self, "stage_" + stage.replace("-", "_"))()

    def run_all(self) -> EvalReport:
        with threadpool_limits(limits=1):
            if not self.cfg.run.manifest:
                self.run("synth")
            for stage in STAGES[1:]:
                result = self.run(stage)
        return result

    # stages
    def stage_synth(self) -> FrameManifest:
        c = self.cfg.synth
        spec = FrameSpec(SceneSpec(n_objects=c.n_objects), c.width, c.height, c.lidar_height,
                         c.camera_height, c.beams, c.azimuth_steps, c.min_elevation, c.max_elevation,
                         c.noise_sigma)
        root = self.cfg.run.root_seed

        def make(i: int) -> FrameEntry:
            fid = f"frame_{i:04d}"
            directory = self.art("frames", fid)
            write_frame(directory, simulate_frame(derive_seed(root, "synth", i), fid, spec))
            return FrameEntry(fid, directory)

        manifest = FrameManifest(parallel_map(make, range(c.n_frames)))
        write_manifest(self.cfg.manifest_path(), manifest)
        return manifest

    @staticmethod
    def _meta(frame: FrameEntry) -> dict:
        return load_toml(frame.path("meta"))

    def stage_segment(self) -> None:
        manifest = self.manifest()
        rc = self.cfg.rangeseg
        gp = GroundParams(rc.ground_angle_threshold, rc.max_height_step)
        sp = SegParams(rc.theta, rc.min_segment_size)
        self.art("segment").mkdir(parents=True, exist_ok=True)
        self.art("range").mkdir(parents=True, exist_ok=True)

        def work(frame: FrameEntry) -> None:
            lidar = lidar_from_dict(self._meta(frame)["lidar"])
            cloud = read_cloud_csv(frame.path("cloud"), frame_id=frame.frame_id)
            ri = build_range_image(cloud, lidar)
            seg = segment_objects(ri, segment_ground(ri, lidar, gp), lidar, sp)
            write_segmentation_pgm(self.seg_path(frame.frame_id), seg)
            write_range_pgm(self.art("range", f"{frame.frame_id}.pgm"), ri)

        parallel_map(work, manifest.frames)

    def stage_project(self) -> None:
        manifest = self.manifest()
        pc = self.cfg.projection
        pparams = ProjectionParams(pc.project_invalid, pc.invalid_range)
        dparams = DensifyParams(pc.max_radius, pc.ignore_competes)
        for frame in manifest.frames:
            self.require(self.seg_path(frame.frame_id), "segment")
        self.art("project").mkdir(parents=True, exist_ok=True)

        def work(frame: FrameEntry) -> None:
            lidar = lidar_from_dict(self._meta(frame)["lidar"])
            cloud = read_cloud_csv(frame.path("cloud"), frame_id=frame.frame_id)
            calib = read_calibration(frame.path("calib"))
            seg = read_segmentation_pgm(self.seg_path(frame.frame_id))
            sparse = project_segments(seg, cloud, calib, pparams, lidar=lidar)
            write_segment_map(self.proj_path(frame.frame_id), densify(sparse, dparams))

        parallel_map(work, manifest.frames)

    def stage_cluster(self) -> None:
        manifest = self.manifest()
        cc = self.cfg.cluster
        fparams = FeatureParams(cc.color_weight, cc.occupancy_weight, cc.shape_weight)
        for frame in manifest.frames:
            self.require(self.proj_path(frame.frame_id), "project")

        def work(frame: FrameEntry):
            segmap = read_segment_map(self.proj_path(frame.frame_id))
            image = read_ppm(frame.path("image"))
            feats, dropped = segment_features(image, segmap, frame.frame_id, cc.min_segment_pixels,
                                              cc.cluster_ground, fparams)
            return segmap, feats, dropped

        per_frame = parallel_map(work, manifest.frames)
        feats = [f for _, fs, _ in per_frame for f in fs]
        if cc.external_features:
            ext = load_external_features(cc.external_features, known=[f.source for f in feats])
            by_key = {f.source: f for f in ext}
            missing = [f.source for f in feats if f.source not in by_key]
            if missing:
                raise StageError(f"external features lack segment {missing[0]}")
            feats = [by_key[f.source] for f in feats]
        if len(feats) < cc.k:
            raise StageError(f"only {len(feats)} segments to cluster into k={cc.k} clusters")
        x = np.stack([f.vector for f in feats])
        model = kmeans_fit(x, cc.k, derive_seed(self.cfg.run.root_seed, "cluster"),
                           KMeansParams(cc.max_iter, cc.tol))
        cluster_of = {f.source: int(l) + 1 for f, l in zip(feats, model.labels)}

        self.art("cluster").mkdir(parents=True, exist_ok=True)
        self.art("pseudo").mkdir(parents=True, exist_ok=True)
        save_features(self.art("cluster", "features.csv"), feats)
        save_cluster_model(self.art("cluster", "model.csv"), model)
        with open(self.art("cluster", "assignments.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["frame_id", "segment_id", "cluster"])
            for (fid, sid), cl in cluster_of.items():
                w.writerow([fid, sid, cl])
        for frame, (segmap, fs, dropped) in zip(manifest.frames, per_frame):
            assignment = {f.source[1]: cluster_of[f.source] for f in fs}
            assignment.update({sid: IGNORE for sid in dropped})
            pl = assemble_pseudo_labels(segmap, assignment, cc.cluster_ground)
            write_pseudo_labels(self.pseudo_path(frame.frame_id), pl)

    def _hyper(self, stage: str) -> TrainHyper:
        t = self.cfg.train
        return TrainHyper(t.lr, t.batch, t.epochs, derive_seed(self.cfg.run.root_seed, stage), t.hidden,
                          t.pixels_per_frame or None, t.optimizer, t.power, t.augment, t.crop_size)

    def _cluster_k(self) -> int:
        path = self.require(self.art("cluster", "model.csv"), "cluster")
        with open(path) as fh:
            fh.readline()
            return int(fh.readline().split(",")[0])

    def _features(self, manifest: FrameManifest) -> list[np.ndarray]:
        return parallel_map(lambda f: pixel_features(read_ppm(f.path("image"))), manifest.frames)

    def _train(self, kind: str, target_path: Callable[[str], Path], upstream: str, out_name: str) -> None:
        manifest = self.manifest()
        k = self._cluster_k()
        targets = [read_pgm(self.require(target_path(f.frame_id), upstream)) for f in manifest.frames]
        result = train(self._features(manifest), targets, kind, self._hyper(out_name), k=k)
        self.art(out_name).mkdir(parents=True, exist_ok=True)
        save_classifier(self.art(out_name, "model.bin"), result.params)
        write_train_log(self.art(out_name, "log.csv"), result.log)

    def stage_train_teacher(self) -> None:
        self._train("teacher", self.pseudo_path, "cluster", "teacher")

    def stage_refine(self) -> None:
        manifest = self.manifest()
        params = load_classifier(self.require(self.art("teacher", "model.bin"), "train-teacher"))
        include_ground = self.cfg.refine.include_ground
        for frame in manifest.frames:
            self.require(self.proj_path(frame.frame_id), "project")
        self.art("refine").mkdir(parents=True, exist_ok=True)
        self.art("teacher_pred").mkdir(parents=True, exist_ok=True)

        def work(frame: FrameEntry) -> None:
            feats = pixel_features(read_ppm(frame.path("image")))
            raw = classifier_forward(params, feats).argmax
            segmap = read_segment_map(self.proj_path(frame.frame_id))
            write_pgm16(self.teacher_pred_path(frame.frame_id), raw)
            write_pgm16(self.refined_path(frame.frame_id), refine_predictions(raw, segmap, include_ground))

        parallel_map(work, manifest.frames)

    def stage_train_student(self) -> None:
        self._train("student", self.refined_path, "refine", "student")

    def stage_eval(self) -> EvalReport:
        manifest = self.manifest()
        teacher = load_classifier(self.require(self.art("teacher", "model.bin"), "train-teacher"))
        student = load_classifier(self.require(self.art("student", "model.bin"), "train-student"))
        names = tuple(self._meta(manifest.frames[0]).get("class_names", ()))
        gts = [read_pgm(f.path("gt_class")) for f in manifest.frames]
        if not names:
            top = max((int(g[g != IGNORE].max()) for g in gts if (g != IGNORE).any()), default=0)
            names = tuple(str(c) for c in range(top + 1))
        C = len(names)

        def confusion(params) -> ConfusionMatrix:
            def one(item):
                frame, gt = item
                pred = classifier_forward(params, pixel_features(read_ppm(frame.path("image")))).argmax
                return confusion_matrix(gt, pred, C, params.k)
            parts = parallel_map(one, zip(manifest.frames, gts))
            return sum(parts[1:], parts[0])

        self.art("eval").mkdir(parents=True, exist_ok=True)
        reports = {}
        for name, params in (("teacher", teacher), ("student", student)):
            conf = confusion(params)
            mapping = hungarian_match(conf)
            report = evaluate(conf, mapping)
            write_report(self.art("eval", f"{name}_report.toml"), report, names)
            mat, order = normalized_confusion_report(conf, mapping)
            write_normalized_confusion(self.art("eval", f"{name}_confusion.csv"), mat, order, names)
            reports[name] = report
            log.info("%s: mIoU %s PA %.4f", name, report.miou, report.pixel_accuracy)

        if all(self.refined_path(f.frame_id).exists() and self.teacher_pred_path(f.frame_id).exists()
               for f in manifest.frames):
            self._refinement_report(manifest, gts, C, teacher.k)
        return reports["student"]

    def _refinement_report(self, manifest: FrameManifest, gts: list[np.ndarray], C: int, k: int) -> None:
        """Raw vs refined teacher maps on segment-covered pixels only."""
        include_ground = self.cfg.refine.include_ground
        raw_conf = ConfusionMatrix(np.zeros((C, k), dtype=np.int64))
        ref_conf = ConfusionMatrix(np.zeros((C, k), dtype=np.int64))
        for frame, gt in zip(manifest.frames, gts):
            seg = read_segment_map(self.proj_path(frame.frame_id)).labels
            covered = seg != IGNORE
            if not include_ground:
                covered &= seg != GROUND
            gt_cov = np.where(covered, gt, IGNORE)
            raw_conf = raw_conf + confusion_matrix(gt_cov, read_pgm(self.teacher_pred_path(frame.frame_id)), C, k)
            ref_conf = ref_conf + confusion_matrix(gt_cov, read_pgm(self.refined_path(frame.frame_id)), C, k)
        doc = {}
        for name, conf in (("raw_teacher", raw_conf), ("refined_teacher", ref_conf)):
            rep = evaluate(conf, hungarian_match(conf))
            doc[name] = {"pixel_accuracy": rep.pixel_accuracy, "miou_defined": rep.miou is not None}
            if rep.miou is not None:
                doc[name]["miou"] = rep.miou
        self.art("eval", "refinement.toml").write_text(tomli_w.dumps(doc))


def run_stage(stage: str, cfg: PipelineConfig):
    return Pipeline(cfg).run(stage)


def run_pipeline(cfg: PipelineConfig) -> EvalReport:
    return Pipeline(cfg).run_all()
