"""Stage orchestration behind the command-line interface.

Each stage reads the resolved flat config, does one job (generate data,
pretrain, train heads, evaluate, detect, diagnose), and writes its outputs
into a fresh timestamped run directory: delimited text files with a leading
schema line, plus checkpoints. Nothing in a run directory is ever
overwritten.
"""

import logging
import time
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import classifier as cls
from . import datagen
from . import detect as det
from . import evaluation as ev
from . import scoring
from . import slots as sm
from .config import format_value, resolve_cls_schedule, save_config

log = logging.getLogger(__name__)

# one fixed noise draw for every inference forward pass, so any two runs
# (and any two stages of one run) see identical slot features per image
INFER_SEED = 0


# ---------------------------------------------------------------------------
# run directories and delimited output

def new_run_dir(cfg, subcommand):
    base = Path(cfg["out.dir"])
    base.mkdir(parents=True, exist_ok=True)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    candidate = base / f"{stamp}-{subcommand}"
    n = 1
    while candidate.exists():
        n += 1
        candidate = base / f"{stamp}-{subcommand}-{n}"
    candidate.mkdir()
    save_config(cfg, candidate / "config.txt")
    return candidate


def write_csv(path, schema, fieldnames, rows):
    """Schema line, header line, then one comma-joined line per row."""
    lines = [f"schema={schema}", ",".join(fieldnames)]
    for row in rows:
        lines.append(",".join(format_value(row[f]) for f in fieldnames))
    path = Path(path)
    if path.exists():
        raise FileExistsError(f"refusing to overwrite {path}")
    path.write_text("\n".join(lines) + "\n")
    return path


def read_csv(path):
    """Read back a schema-tagged CSV as (schema, fieldnames, row dicts)."""
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("schema="):
        raise ValueError(f"{path}: missing schema line")
    schema = lines[0].split("=", 1)[1]
    fields = lines[1].split(",")
    rows = [dict(zip(fields, line.split(","))) for line in lines[2:] if line]
    return schema, fields, rows


# ---------------------------------------------------------------------------
# shared loading helpers

def _slot_cfg(cfg):
    return sm.SlotModelConfig(
        num_slots=cfg["model.num_slots"], slot_dim=cfg["model.slot_dim"],
        iters=cfg["model.iters"], patch=cfg["model.patch"], canvas=cfg["data.canvas"],
        enc_hidden=cfg["model.enc_hidden"], dec_hidden=cfg["model.dec_hidden"],
        feature_target=cfg["model.feature_target"])


def _load_slot_model(cfg):
    path = cfg["checkpoint.slot"]
    if not path:
        raise ValueError("checkpoint.slot is not set; pretrain first or point at a checkpoint")
    if not Path(path).exists():
        raise FileNotFoundError(f"no slot-model checkpoint at {path}")
    return sm.load_model(path)


def _load_heads(cfg):
    path = cfg["checkpoint.heads"]
    if not path:
        raise ValueError("checkpoint.heads is not set; train-cls first or point at a checkpoint")
    if not Path(path).exists():
        raise FileNotFoundError(f"no heads checkpoint at {path}")
    return cls.load_heads(path)


def _manifest(cfg):
    return datagen.load_manifest(cfg["data.dir"])


def _class_index(header):
    return {cid: i for i, cid in enumerate(header["kkc"])}


def slot_sets_for_rows(params, scfg, data_dir, rows):
    return [sm.compute_slot_set(params, scfg, datagen.load_image(data_dir, row),
                                rng_seed=INFER_SEED)
            for row in rows]


def _fg_logit_arrays(heads, slot_sets):
    with ad.no_grad():
        return [cls.fg_logits(heads, s.slots).values for s in slot_sets]


def _nz_logit_arrays(heads, slot_sets):
    with ad.no_grad():
        return [cls.nz_logits(heads, s.slots).values for s in slot_sets]


# ---------------------------------------------------------------------------
# stages

def run_gen_data(cfg, run_dir):
    mode = cfg["data.mode"]
    sizes = (cfg["data.n_train"], cfg["data.n_test_known"], cfg["data.n_test_h"],
             cfg["data.n_test_m"], cfg["data.n_diag"])
    header = datagen.generate_benchmark(
        cfg["data.dir"], seed=cfg["seed"], sizes=sizes, canvas=cfg["data.canvas"],
        train_objects=(1, 1) if mode == "single" else (2, 3))
    rows = [{"split": s, "count": c} for s, c in sorted(header["counts"].items())]
    write_csv(run_dir / "dataset.csv", "slotosr-datasummary-v1", ["split", "count"], rows)
    log.info("benchmark written to %s", cfg["data.dir"])
    return {"data_dir": cfg["data.dir"], "counts": header["counts"]}


def _mosaic_images(cfg, man):
    data_dir = cfg["data.dir"]
    train = man["splits"]["train"]
    imgs = [datagen.load_image(data_dir, r) for r in train]
    masks = [datagen.load_masks(data_dir, r) for r in train]
    mosaics = sm.build_pretrain_mosaics(
        imgs, masks, cfg["pretrain.mosaics"], cfg["seed"],
        objects_per_scene=(cfg["pretrain.objects_lo"], cfg["pretrain.objects_hi"]))
    if cfg["pretrain.color_aug"]:
        # per-mosaic channel shuffle: the known classes span few colors, and
        # attention trained on them alone binds unseen-color objects poorly
        rng = np.random.default_rng(np.random.SeedSequence([cfg["seed"], 707]))
        for i in range(len(mosaics)):
            mosaics[i] = mosaics[i][:, :, rng.permutation(3)]
    return mosaics


def run_pretrain(cfg, run_dir):
    man = _manifest(cfg)
    mosaics = _mosaic_images(cfg, man)
    scfg = _slot_cfg(cfg)
    history = []
    params, history = sm.pretrain(
        list(range(len(mosaics))), mosaics, scfg, seed=cfg["seed"],
        epochs=cfg["pretrain.epochs"], batch_size=cfg["pretrain.batch_size"],
        lr=cfg["pretrain.lr"],
        log=lambda h: log.info("pretrain epoch %d loss %.5f", h["epoch"], h["loss"]))
    ckpt_path = run_dir / "slot_model.ckpt"
    sm.save_model(ckpt_path, params, scfg)
    if cfg["checkpoint.slot"]:
        sm.save_model(cfg["checkpoint.slot"], params, scfg)
    write_csv(run_dir / "pretrain_history.csv", "slotosr-history-v1",
              ["epoch", "loss"], history)
    return {"checkpoint": str(ckpt_path), "final_loss": history[-1]["loss"]}


def _padded_labels_for(rows, class_index, num_slots, num_classes):
    out = []
    for row in rows:
        ids = [class_index[c] for c in row["label_ids"]]
        out.append(cls.pad_labels(ids, num_slots, num_classes))
    return out


def run_train_cls(cfg, run_dir):
    cfg = resolve_cls_schedule(cfg)
    man = _manifest(cfg)
    params, scfg = _load_slot_model(cfg)
    class_index = _class_index(man["header"])
    train_rows = man["splits"]["train"]
    slot_sets = slot_sets_for_rows(params, scfg, cfg["data.dir"], train_rows)
    labels = _padded_labels_for(train_rows, class_index, scfg.num_slots, len(class_index))
    ans_cfg = cls.AnsConfig(alpha=cfg["ans.alpha"], beta=cfg["ans.beta"],
                            lambda_match=cfg["ans.lambda_match"], w_nz=cfg["ans.w_nz"],
                            warmup_epochs=cfg["ans.warmup_epochs"])
    heads, history = cls.train_classifier(
        slot_sets, labels, len(class_index), config=ans_cfg, mode=cfg["cls.mode"],
        seed=cfg["seed"], epochs=cfg["cls.epochs"], batch_size=cfg["cls.batch_size"],
        lr=cfg["cls.lr"], halve_every=cfg["cls.halve_every"], hidden=cfg["cls.hidden"],
        logger=lambda h: log.info("train-cls epoch %d loss %.5f", h["epoch"], h["loss"]))
    heads_path = run_dir / "heads.ckpt"
    cls.save_heads(heads_path, heads)
    if cfg["checkpoint.heads"]:
        cls.save_heads(cfg["checkpoint.heads"], heads)
    fields = sorted(history[0]) if history else ["epoch", "loss"]
    ordered = ["epoch"] + [f for f in fields if f != "epoch"]
    write_csv(run_dir / "train_history.csv", "slotosr-history-v1", ordered, history)
    return {"checkpoint": str(heads_path), "final_loss": history[-1]["loss"]}


def _build_splits(cfg, man):
    splits = man["splits"]
    test_rows = splits["test_known"] + splits["test_h"] + splits["test_m"]
    return ev.build_osr_splits(splits["train"], test_rows, man["header"]["kkc"],
                               man["header"]["uuc"], cfg["data.mode"])


def _fit_mahalanobis(cfg, heads, params, scfg, man, class_index):
    """Fit class Gaussians on slots the trained matcher assigns to true labels."""
    from .matching import hungarian

    rows = man["splits"]["train"]
    slot_sets = slot_sets_for_rows(params, scfg, cfg["data.dir"], rows)
    labels = _padded_labels_for(rows, class_index, scfg.num_slots, len(class_index))
    feats, ids = [], []
    with ad.no_grad():
        for s, lab in zip(slot_sets, labels):
            cost = cls.pairwise_cost(cls.fg_logits(heads, s.slots), lab).values
            perm = hungarian(cost).perm
            for slot_k, label_j in enumerate(perm):
                if not lab.null_rows[label_j]:
                    feats.append(s.slots[slot_k])
                    ids.append(int(np.argmax(lab.onehot[label_j])))
    return scoring.fit_mahalanobis(np.stack(feats), np.array(ids))


def _decision_scores(cfg, heads, slot_sets, maha_model=None):
    metric = cfg["score.metric"]
    decisions = []
    reports = []
    for s in slot_sets:
        with ad.no_grad():
            logits = cls.fg_logits(heads, s.slots).values
            noise = cls.nz_logits(heads, s.slots).values
        if metric == "mahalanobis":
            per_slot = scoring.score_mahalanobis(maha_model, s.slots)
        elif metric == "energy":
            per_slot = scoring.score_energy(logits, temperature=cfg["score.energy_t"])
        elif metric == "odin":
            per_slot = scoring.score_odin(logits, temperature=cfg["score.odin_t"])
        elif metric in scoring.LOGIT_SCORES:
            per_slot = scoring.LOGIT_SCORES[metric](logits)
        else:
            raise ValueError(f"unknown score.metric {metric!r}")
        report = scoring.aggregate(per_slot, cfg["score.scheme"], nz_logits=noise,
                                   gamma=cfg["score.gamma"])
        reports.append(report)
        decisions.append(report.decision)
    return np.array(decisions), reports


def run_eval_osr(cfg, run_dir):
    man = _manifest(cfg)
    params, scfg = _load_slot_model(cfg)
    heads = _load_heads(cfg)
    class_index = _class_index(man["header"])
    split = _build_splits(cfg, man)
    maha = None
    if cfg["score.metric"] == "mahalanobis":
        maha = _fit_mahalanobis(cfg, heads, params, scfg, man, class_index)

    data_dir = cfg["data.dir"]
    score_rows = []
    decisions = {}
    for name, rows in (("test_known", split.test_known), ("test_h", split.test_h),
                       ("test_m", split.test_m)):
        sets = slot_sets_for_rows(params, scfg, data_dir, rows)
        dec, reports = _decision_scores(cfg, heads, sets, maha)
        decisions[name] = dec
        for row, rep in zip(rows, reports):
            rec = scoring.score_record(row["file"], rep)
            rec["split"] = name
            score_rows.append(rec)

    result_h = ev.osr_metrics(decisions["test_known"], decisions["test_h"])
    result_m = ev.osr_metrics(decisions["test_known"], decisions["test_m"])
    bench_name = f"{cfg['data.mode']}:{cfg['score.metric']}:{cfg['score.scheme']}"
    rows = ev.metric_rows(bench_name, result_h, result_m)
    write_csv(run_dir / "osr_metrics.csv", "slotosr-metrics-v1",
              ["benchmark", "set", "metric", "value"], rows)
    fields = ["image_id", "split", "scheme"] + \
        [f"slot{k}" for k in range(scfg.num_slots)] + ["decision"]
    write_csv(run_dir / "scores.csv", "slotosr-scores-v1", fields, score_rows)
    return {"H": result_h, "M": result_m, "metrics_csv": str(run_dir / "osr_metrics.csv")}


def run_eval_closed(cfg, run_dir):
    man = _manifest(cfg)
    params, scfg = _load_slot_model(cfg)
    heads = _load_heads(cfg)
    class_index = _class_index(man["header"])
    mode = cfg["data.mode"]
    # single-label accuracy needs one-label images; those live in diag
    rows = man["splits"]["diag" if mode == "single" else "test_known"]
    sets = slot_sets_for_rows(params, scfg, cfg["data.dir"], rows)
    preds, labels = [], []
    for row, s in zip(rows, sets):
        with ad.no_grad():
            logits = cls.fg_logits(heads, s.slots).values
        preds.append(cls.closed_set_predict(logits, mode))
        labels.append([class_index[c] for c in row["label_ids"]])
    acc = ev.closed_set_accuracy(preds, labels, mode)
    write_csv(run_dir / "closed_set.csv", "slotosr-accuracy-v1",
              ["mode", "n_images", "accuracy"],
              [{"mode": mode, "n_images": len(rows), "accuracy": acc}])
    return {"accuracy": acc, "n_images": len(rows)}


def run_detect(cfg, run_dir):
    man = _manifest(cfg)
    params, scfg = _load_slot_model(cfg)
    heads = _load_heads(cfg)
    kkc = set(man["header"]["kkc"])
    rows = man["splits"]["test_m"]
    data_dir = cfg["data.dir"]
    det_rows, per_image, gt_boxes, gt_known = [], [], [], []
    for row in rows:
        image = datagen.load_image(data_dir, row)
        detections = det.detect(
            image, (params, scfg), heads,
            energy_threshold=cfg["osod.energy_threshold"],
            fg_threshold=cfg["osod.fg_threshold"], binarize=cfg["osod.binarize"],
            min_pixels=cfg["osod.min_pixels"], rng_seed=INFER_SEED)
        per_image.append(detections)
        gt_boxes.append([tuple(b) for b in row["boxes"]])
        gt_known.append([c in kkc for c in row["label_ids"]])
        det_rows.extend(det.detection_records(row["file"], detections))
    metrics = det.detection_eval(per_image, gt_boxes, gt_known)
    write_csv(run_dir / "detections.csv", "slotosr-detections-v1",
              ["image_id", "x0", "y0", "x1", "y1", "label", "score"], det_rows)
    write_csv(run_dir / "detection_metrics.csv", "slotosr-metrics-v1",
              ["benchmark", "set", "metric", "value"],
              [{"benchmark": "osod", "set": "M", "metric": k, "value": v}
               for k, v in sorted(metrics.items())])
    return {**metrics, "n_images": len(rows)}


def run_diagnose(cfg, run_dir):
    man = _manifest(cfg)
    params, scfg = _load_slot_model(cfg)
    heads = _load_heads(cfg)
    rows = man["splits"]["diag"]
    data_dir = cfg["data.dir"]
    sets = slot_sets_for_rows(params, scfg, data_dir, rows)
    attns = [s.attn for s in sets]
    logits = _fg_logit_arrays(heads, sets)
    masks = [datagen.load_masks(data_dir, row) for row in rows]
    report = ev.misalignment_report(attns, logits, masks)
    write_csv(run_dir / "diagnostics.csv", "slotosr-diagnostics-v1",
              ["field", "value"],
              [{"field": k, "value": report[k]} for k in sorted(report)])
    return report
