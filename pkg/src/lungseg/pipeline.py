"""Training, inference and evaluation over manifests."""

from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from . import tinynet
from .augment import augment_pair, sample_rng
from .config import RunConfig
from .metrics import (
    METRICS,
    CaseReport,
    aggregate,
    evaluate_case,
    evaluate_structures,
    tumor_overlap,
)
from .postprocess import keep_largest_components, remove_dense_areas, reassemble_mask
from .preprocess import find_body_box, label_slices, preprocess_volume
from .sampler import StratifiedSampler, build_index
from .volgrid import LabelVolume, load_mask, load_volume

log = logging.getLogger(__name__)

RESOLUTION_TENSOR = "meta.resolution"


class PipelineError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# training


def load_training_data(manifest, resolution, pre_cfg, split="train"):
    """Preprocessed ``{case_id: (images, labels)}`` on the network grid, plus raw masks."""
    data, masks = {}, {}
    for e in manifest.split(split):
        v, m = load_volume(e.image_path), load_mask(e.mask_path)
        if v.dims != m.dims:
            raise PipelineError(f"{e.case_id}: image {v.dims} and mask {m.dims} differ")
        box = find_body_box(v, pre_cfg)
        data[e.case_id] = (preprocess_volume(v, box, resolution), label_slices(m, box, resolution))
        masks[e.case_id] = m
    return data, masks


def steps_per_epoch(n_slices, batch_size):
    return math.ceil(n_slices / batch_size)


def attach_resolution(store, resolution):
    store[RESOLUTION_TENSOR] = np.full((1, 1, 1, 1), float(resolution))
    return store


def stored_resolution(store, default=None):
    if RESOLUTION_TENSOR in store:
        return int(store[RESOLUTION_TENSOR].ravel()[0])
    return default


def train_model(manifest, cfg: RunConfig, out_path=None, log_path=None, resolution=None):
    """Train a network on the manifest's train split.

    Stratified batches are augmented per sample with generators keyed on
    ``(seed, step, position)``, so results depend only on the seed, config and
    data. The weights are checkpointed to ``out_path`` after every epoch.
    Returns ``(store, losses)``.
    """
    tc = cfg.train
    resolution = resolution or cfg.preprocess.target_resolution
    data, masks = load_training_data(manifest, resolution, cfg.preprocess)
    if not data:
        raise PipelineError("manifest has no training cases")
    index = build_index(manifest, masks)
    sampler = StratifiedSampler(index, np.random.default_rng([tc.seed, 1]), tc.batch_size)
    store = tinynet.init_store(cfg.net, np.random.default_rng([tc.seed, 0]))
    n_steps = steps_per_epoch(len(index.entries), tc.batch_size)

    log_fh = open(log_path, "w") if log_path else None
    losses = []
    try:
        step = 0
        for epoch in range(tc.epochs):
            lr = tinynet.step_decay_lr(tc.lr, epoch, tc.epochs, tc.lr_decay, tc.lr_decay_at)
            for _ in range(n_steps):
                refs = sampler.next_batch()
                imgs, labs = [], []
                for i, ref in enumerate(refs):
                    img, lab = data[ref.case_id][0][ref.z], data[ref.case_id][1][ref.z]
                    if tc.augment:
                        img, lab = augment_pair(img, lab, sample_rng(tc.seed, step, i), cfg.augment)
                    imgs.append(img)
                    labs.append(lab)
                x = np.stack(imgs)[:, None].astype(np.float64)
                y = np.stack(labs)
                logits, cache = tinynet.forward(cfg.net, store, x, mode="train")
                loss, dlogits = tinynet.softmax_cross_entropy(logits, y)
                grads = tinynet.backward(cfg.net, store, cache, dlogits)
                tinynet.sgd_momentum_step(store, grads, lr, tc.momentum)
                losses.append(loss)
                step += 1
                line = f"step={step} epoch={epoch} lr={lr!r} loss={loss!r}"
                if log_fh:
                    log_fh.write(line + "\n")
                log.debug(line)
            log.info("epoch %d done, mean loss %.4f", epoch, np.mean(losses[-n_steps:]))
            if out_path:
                save_checkpoint(store, out_path, resolution)
    finally:
        if log_fh:
            log_fh.close()
    attach_resolution(store, resolution)
    return store, losses


def save_checkpoint(store, path, resolution):
    tinynet.save_weights(attach_resolution(store, resolution), path)


def load_model(path):
    """Load weights; returns ``(net_config, store, resolution)``."""
    store = tinynet.load_weights(path)
    cfg = tinynet.infer_config(store)
    return cfg, store, stored_resolution(store)


# --------------------------------------------------------------------------
# inference


def infer_volume(net_cfg, store, v, resolution=None, pre_cfg=None, remove_dense=False, chunk=32):
    """Segment a volume slice by slice and return a LabelVolume on its grid.

    A volume without any body voxel yields an empty mask.
    """
    from .preprocess import PreprocessConfig

    pre_cfg = pre_cfg or PreprocessConfig()
    resolution = resolution or stored_resolution(store, pre_cfg.target_resolution)
    box = find_body_box(v, pre_cfg)
    if box.fallback:
        return LabelVolume(np.zeros(v.dims, dtype=np.uint8), v.spacing)
    stack = preprocess_volume(v, box, resolution)[:, None].astype(np.float64)
    planes = tinynet.predict(net_cfg, store, stack, chunk=chunk)
    mask = keep_largest_components(reassemble_mask(planes, box, v.dims, v.spacing))
    if remove_dense:
        mask = remove_dense_areas(mask, v)
    return mask


def pred_path(pred_dir, case_id):
    return os.path.join(pred_dir, f"{case_id}.rvol")


# --------------------------------------------------------------------------
# evaluation


def evaluate_entry(entry, pred, mode="per_lung"):
    """Report rows for one case: right/left and averaged (or combined)."""
    gt = load_mask(entry.mask_path)
    if pred.dims != gt.dims:
        raise PipelineError(f"{entry.case_id}: prediction grid {pred.dims} != {gt.dims}")
    rows = evaluate_structures(pred, gt, entry.case_id) if mode == "per_lung" else []
    rows.append(evaluate_case(pred, gt, mode, entry.case_id))
    tpath = entry.tag_value("tumor_mask")
    if tpath:
        t = load_mask(tpath).labels > 0
        if t.any():
            ov = tumor_overlap(pred.labels > 0, t)
            rows = [replace(r, tumor_overlap=ov) for r in rows]
    return rows


def evaluate_predictions(pred_dir, manifest, mode="per_lung", split="test", threads=1):
    entries = manifest.split(split)
    if not entries:
        raise PipelineError(f"manifest has no {split!r} cases")
    missing = [e.case_id for e in entries if not os.path.isfile(pred_path(pred_dir, e.case_id))]
    if missing:
        raise PipelineError(f"missing predictions for: {', '.join(missing)}")

    def one(e):
        return evaluate_entry(e, load_mask(pred_path(pred_dir, e.case_id)), mode)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, entries))
    else:
        results = [one(e) for e in entries]
    rows = [r for rs in results for r in rs]
    order = {"right": 0, "left": 1, "averaged": 2, "combined": 3}
    return sorted(rows, key=lambda r: (r.case_id, order[r.structure]))


# --------------------------------------------------------------------------
# CSV


REPORT_COLUMNS = ["case_id", "structure", "dsc", "hd95_mm", "msd_mm"]


def _fmt(x):
    return "" if x is None else repr(float(x))


def write_report(rows, path):
    with_overlap = any(r.tumor_overlap is not None for r in rows)
    cols = REPORT_COLUMNS + (["tumor_overlap"] if with_overlap else [])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            row = [r.case_id, r.structure, _fmt(r.dsc), _fmt(r.hd95_mm), _fmt(r.msd_mm)]
            if with_overlap:
                row.append(_fmt(r.tumor_overlap))
            w.writerow(row)


def read_report(path):
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or reader.fieldnames[:5] != REPORT_COLUMNS:
            raise PipelineError(f"{path}: not a report CSV")
        for rec in reader:
            ov = rec.get("tumor_overlap") or None
            rows.append(CaseReport(
                rec["case_id"], rec["structure"], float(rec["dsc"]),
                float(rec["hd95_mm"]), float(rec["msd_mm"]),
                tumor_overlap=float(ov) if ov is not None else None,
            ))
    return rows


def summary_rows(rows, structure=None):
    """Rows of the structure that summarises each case (averaged or combined)."""
    if structure is None:
        structure = "averaged" if any(r.structure == "averaged" for r in rows) else "combined"
    return [r for r in rows if r.structure == structure]


def write_aggregate(table, path):
    """``table`` maps run label -> {test set -> report rows}.

    One row per (run, metric); for every test set a mean and SD column, then
    the pooled ``all`` mean, SD and case count.
    """
    test_sets = sorted({ts for per_run in table.values() for ts in per_run})
    metrics = list(METRICS)
    if any(r.tumor_overlap is not None for pr in table.values() for rs in pr.values() for r in rs):
        metrics.append("tumor_overlap")
    header = ["run", "metric"]
    for ts in test_sets:
        header += [f"{ts}_mean", f"{ts}_sd"]
    header += ["all_mean", "all_sd", "n"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for run in sorted(table):
            pooled = []
            per = {}
            for ts in test_sets:
                rs = summary_rows(table[run].get(ts, []))
                per[ts] = rs
                pooled += [replace(r, case_id=f"{ts}/{r.case_id}") for r in rs]
            for m in metrics:
                line = [run, m]
                for ts in test_sets:
                    if per[ts]:
                        s = aggregate(per[ts], (m,))[m]
                        line += [_fmt(s.mean), _fmt(s.sd)]
                    else:
                        line += ["", ""]
                s = aggregate(pooled, (m,))[m] if pooled else None
                line += [_fmt(s.mean), _fmt(s.sd), str(s.n)] if s else ["", "", "0"]
                w.writerow(line)
