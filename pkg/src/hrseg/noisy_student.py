"""Teacher/student self-training with hard, confidence-thresholded pseudo labels.

A teacher trained on the labeled set labels the unlabeled images; per pixel,
the argmax class is kept only when its softmax probability meets the
threshold (default 0.9), otherwise the pixel becomes ignore (255). A freshly
initialized student then trains on the union of both sets, with data
augmentation supplying the noise. The process runs for exactly one generation.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass

import numpy as np

from hrseg.backbone import NetworkSpec
from hrseg.config import PseudoLabelConfig, TrainConfig
from hrseg.data import (
    IGNORE,
    AugmentConfig,
    Dataset,
    Sample,
    _save_image,
    _save_label,
)
from hrseg.layers import softmax_channels
from hrseg.seghead import SegModel, build_seg_model, seg_forward
from hrseg.tensor import Tensor, no_grad
from hrseg.train import TrainReport, train


def pseudo_label(teacher: SegModel, image: Tensor, threshold: float) -> np.ndarray:
    """Hard label map for one [1,3,H,W] image: argmax where confident, else 255."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0,1], got {threshold}")
    teacher.set_mode("eval")
    with no_grad():
        logits = seg_forward(teacher, image).final_logits
        probs = softmax_channels(logits).data[0]  # [K,H,W]
    top = np.argmax(probs, axis=0)
    confident = np.max(probs, axis=0) >= threshold
    return np.where(confident, top, IGNORE).astype(np.uint8)


def coverage_of(label: np.ndarray) -> float:
    return float((label != IGNORE).mean())


@dataclass
class PseudoSetReport:
    per_image: list  # (id, coverage)
    overall: float

    def to_csv(self) -> str:
        lines = ["id,coverage"]
        lines += [f"{ident},{cov:.6f}" for ident, cov in self.per_image]
        lines.append(f"overall,{self.overall:.6f}")
        return "\n".join(lines) + "\n"


def generate_pseudo_set(teacher: SegModel, unlabeled: Dataset, cfg: PseudoLabelConfig):
    """Label every image; returns (pseudo dataset, coverage report).

    With an output_dir set, writes the standard images/labels layout plus
    ``coverage.csv`` so the pseudo set is an ordinary on-disk dataset.
    """
    samples = []
    per_image = []
    total_kept = 0
    total_pixels = 0
    for s in unlabeled:
        label = pseudo_label(teacher, Tensor(s.image[None]), cfg.threshold)
        samples.append(Sample(image=s.image, label=label, id=s.id))
        cov = coverage_of(label)
        per_image.append((s.id, cov))
        total_kept += int((label != IGNORE).sum())
        total_pixels += label.size
    overall = total_kept / total_pixels if total_pixels else 0.0
    report = PseudoSetReport(per_image=per_image, overall=overall)
    pseudo = Dataset.from_samples(samples, num_classes=teacher.spec.num_classes)
    if cfg.output_dir is not None:
        os.makedirs(os.path.join(cfg.output_dir, "images"), exist_ok=True)
        os.makedirs(os.path.join(cfg.output_dir, "labels"), exist_ok=True)
        for s in samples:
            _save_image(s.image, os.path.join(cfg.output_dir, "images", s.id + ".png"))
            _save_label(s.label, os.path.join(cfg.output_dir, "labels", s.id + ".png"))
        with open(os.path.join(cfg.output_dir, "coverage.csv"), "w", encoding="utf-8") as f:
            f.write(report.to_csv())
    return pseudo, report


def combine_datasets(labeled: Dataset, pseudo: Dataset) -> Dataset:
    """Union of both sets; training shuffles it uniformly each epoch."""
    if labeled.num_classes is not None and pseudo.num_classes is not None:
        if labeled.num_classes != pseudo.num_classes:
            raise ValueError(
                f"class counts differ: labeled {labeled.num_classes} vs pseudo {pseudo.num_classes}"
            )
    parts = {"0": labeled, "1": pseudo}
    index = {p: {ident: i for i, ident in enumerate(ds.ids)} for p, ds in parts.items()}

    def fetch(ident):
        part, inner = ident.split("/", 1)
        s = parts[part][index[part][inner]]
        return Sample(image=s.image, label=s.label, id=ident)

    ids = [f"0/{i}" for i in labeled.ids] + [f"1/{i}" for i in pseudo.ids]
    return Dataset(ids, fetch, num_classes=labeled.num_classes or pseudo.num_classes)


def params_digest(model: SegModel) -> str:
    h = hashlib.sha256()
    for name, t in model.named_params():
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return h.hexdigest()


@dataclass
class NoisyStudentResult:
    teacher: SegModel
    student: SegModel
    teacher_report: TrainReport
    student_report: TrainReport
    pseudo_report: PseudoSetReport | None


def noisy_student_train(
    labeled: Dataset,
    unlabeled: Dataset,
    spec: NetworkSpec,
    teacher_cfg: TrainConfig,
    student_cfg: TrainConfig,
    plc: PseudoLabelConfig,
    augment_cfg: AugmentConfig,
    out_dir: str | None = None,
) -> NoisyStudentResult:
    """Teacher on labeled data, one round of pseudo labels, fresh student on the union."""
    teacher = build_seg_model(spec, seed=teacher_cfg.seed)
    teacher_out = os.path.join(out_dir, "teacher") if out_dir else None
    teacher_report = train(teacher, labeled, teacher_cfg, augment_cfg, out_dir=teacher_out)

    if len(unlabeled) > 0:
        if plc.output_dir is None and out_dir is not None:
            plc = PseudoLabelConfig(threshold=plc.threshold, output_dir=os.path.join(out_dir, "pseudo"))
        before = params_digest(teacher)
        pseudo, pseudo_report = generate_pseudo_set(teacher, unlabeled, plc)
        assert params_digest(teacher) == before, "teacher changed during pseudo-labeling"
        student_data = combine_datasets(labeled, pseudo)
    else:
        pseudo_report = None
        student_data = labeled

    student = build_seg_model(spec, seed=student_cfg.seed)
    student_out = os.path.join(out_dir, "student") if out_dir else None
    student_report = train(student, student_data, student_cfg, augment_cfg, out_dir=student_out)
    return NoisyStudentResult(
        teacher=teacher,
        student=student,
        teacher_report=teacher_report,
        student_report=student_report,
        pseudo_report=pseudo_report,
    )
