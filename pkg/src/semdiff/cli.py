"""Command-line entry point: ``semdiff <command> [flags]``.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 contract violation.
"""

import argparse
import configparser
import hashlib
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, tensorio
from .alignment import ToyEmbedder, condition_distance_matrix
from .condmaps import assemble_guidance, mean_eccentricity, plan_augmentation, plan_from_records, select_fovs
from .dataio import (Fov, fov_record, load_corpus, read_jsonl, read_pgm16, save_fov, write_jsonl)
from .estimator import SemanticDiffusionModel
from .exceptions import ConfigError, ContractError, DatasetIOError, PackingError, SemdiffError
from .metrics import evaluate_fov, wilcoxon_signed_rank
from .toyforge import forge

logger = logging.getLogger("semdiff")

MANIFEST = "manifest.json"


# ---------------------------------------------------------------- helpers


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _artifact_hashes(root, limit=2000):
    root = Path(root)
    if root.is_file():
        return {root.name: _sha256(root)}
    files = sorted(p for p in root.rglob("*") if p.is_file() and p.name != MANIFEST)
    return {str(p.relative_to(root)): _sha256(p) for p in files[:limit]}


def write_manifest(out_dir, command, flags, seeds, inputs, outputs, started):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "version": __version__,
        "flags": {k: (str(v) if isinstance(v, Path) else v) for k, v in flags.items()},
        "seeds": seeds,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "artifacts": {str(p): _artifact_hashes(p) for p in outputs if Path(p).exists()},
        "wall_clock_seconds": round(time.time() - started, 3),
    }
    (out_dir / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def _write_json(path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True, default=float))
    tmp.replace(path)


def load_masks(root):
    """``{fov_id: (cells, nuclei)}`` for every ``cells/<id>.pgm`` under ``root``."""
    root = Path(root)
    cell_files = sorted((root / "cells").glob("*.pgm"))
    if not cell_files:
        raise DatasetIOError(f"no cell masks found under {root / 'cells'}")
    return {p.stem: (read_pgm16(p), read_pgm16(root / "nuclei" / p.name)) for p in cell_files}


# ---------------------------------------------------------------- commands


def cmd_forge(out, n=612, size=64, seed=0):
    started = time.time()
    fovs = forge(out, n_fovs=n, size=size, seed=seed)
    write_manifest(out, "forge", {"n": n, "size": size}, {"seed": seed}, [], [out], started)
    return {"fovs": len(fovs)}


def cmd_maps(data, out, threshold=0.85, replicates=8, seed=0):
    """Guidance caches, per-FOV eccentricity, the selection and the augmentation plan."""
    started = time.time()
    out = Path(out)
    fovs = load_corpus(data)
    for f in fovs:
        tensorio.save(out / "guidance" / f"{f.fov_id}.msdt", assemble_guidance(f.cells, f.nuclei, f.image))
    write_jsonl(out / "eccentricity.jsonl",
                [{"index": i, "fov": f.fov_id, "mean_eccentricity": mean_eccentricity(f.cells)}
                 for i, f in enumerate(fovs)])
    selected = select_fovs(fovs, threshold)
    plan = plan_augmentation(selected, replicates, seed) if selected else []
    write_jsonl(out / "plan.jsonl", [e.to_record() for e in plan])
    _write_json(out / "selected.json", {"threshold": threshold, "indices": selected,
                                        "fovs": [fovs[i].fov_id for i in selected]})
    write_manifest(out, "maps", {"threshold": threshold, "replicates": replicates}, {"seed": seed},
                   [data], [out / "plan.jsonl", out / "selected.json", out / "eccentricity.jsonl"], started)
    return {"fovs": len(fovs), "selected": len(selected), "plan_entries": len(plan)}


TRAIN_KEYS = ("steps", "lr", "batch", "accum", "base_channels", "head_dim", "spade_hidden",
              "val_interval", "val_fraction", "seed")


def cmd_train(data, out, steps=2000, lr=1e-4, batch=5, accum=5, base_channels=32, head_dim=16,
              spade_hidden=32, val_interval=100, val_fraction=0.1, seed=0):
    started = time.time()
    out = Path(out)
    fovs = load_corpus(data)
    model = SemanticDiffusionModel(base_channels=base_channels, head_dim=head_dim, spade_hidden=spade_hidden,
                                   max_steps=steps, learning_rate=lr, batch_size=batch,
                                   accumulation_steps=accum, validation_interval=val_interval,
                                   validation_fraction=val_fraction, random_state=seed)
    model.fit(fovs)
    res = model.result_
    model.save(out / "final")
    model.save(out / "best", state=res.best_state)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "curve.csv", "w") as fh:
        fh.write("step,train_loss,val_loss\n")
        for step, tl, vl in res.curve_rows():
            fh.write(",".join("" if v == "" else repr(v) for v in (step, tl, vl)) + "\n")
    _write_json(out / "split.json", {"train": res.train_index.tolist(), "val": res.val_index.tolist()})
    summary = {"initial_val": res.val_loss[0], "final_val": res.val_loss[-1], "best_val": res.best_val,
               "best_step": res.best_step, "seconds": res.seconds,
               "val_drop": 1.0 - res.val_loss[-1] / res.val_loss[0]}
    _write_json(out / "summary.json", summary)
    flags = {k: v for k, v in locals().items() if k in TRAIN_KEYS}
    write_manifest(out, "train", flags, {"seed": seed}, [data],
                   [out / "final", out / "best", out / "curve.csv", out / "summary.json"], started)
    return summary


def _synth_fov(fovs, entry, k):
    srcs = (entry.mask_src, entry.color_src, entry.meta_src)
    if any(not 0 <= s < len(fovs) for s in srcs):
        raise DatasetIOError(f"plan entry {k} ({entry.to_record()}) references a missing source FOV")
    mask, color, meta = (fovs[s] for s in srcs)
    g = assemble_guidance(mask.cells, mask.nuclei, mask.image, color.image, color.cells, color.nuclei)
    info = {**entry.to_record(), "mask_fov": mask.fov_id, "color_fov": color.fov_id, "meta_fov": meta.fov_id}
    return g, meta.assay, meta.indication, info


def cmd_sample(checkpoint, data, plan, out, steps=None, workers=1, chunk=16):
    """Render every plan entry into a new image with copied masks."""
    started = time.time()
    out = Path(out)
    model = SemanticDiffusionModel.load(checkpoint)
    fovs = load_corpus(data)
    entries = plan_from_records(read_jsonl(plan)) if not isinstance(plan, list) else plan
    jobs = [(k, e) for k, e in enumerate(entries)]

    def render(block):
        parts = [_synth_fov(fovs, e, k) for k, e in block]
        g = np.stack([p[0] for p in parts])
        text = np.stack([model.encode(p[1], p[2]) for p in parts])
        images = model.sample(g, text, seeds=[e.seed for _, e in block], steps=steps)
        records = []
        for (k, e), img, (_, assay, indication, info) in zip(block, images, parts):
            src = fovs[e.mask_src]
            syn = Fov(f"syn_{k:05d}", img, src.cells, src.nuclei, assay, indication, info)
            save_fov(out, syn)
            records.append(fov_record(syn))
        return records

    blocks = [jobs[i:i + chunk] for i in range(0, len(jobs), chunk)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(render, blocks))
    else:
        results = [render(b) for b in blocks]
    records = [r for block in results for r in block]
    write_jsonl(out / "metadata.jsonl", records)
    write_manifest(out, "sample", {"steps": steps or model.sampling_steps, "workers": workers},
                   {"per_entry": [e.seed for e in entries]}, [checkpoint, data, plan if not isinstance(plan, list) else "<inline>"],
                   [out], started)
    return {"emitted": len(records)}


def cmd_evaluate(pred, gt, out, radius=6.0, compare=None):
    started = time.time()
    gt_masks = load_masks(gt)

    def run(pred_dir):
        pm = load_masks(pred_dir)
        missing = sorted(set(gt_masks) - set(pm))
        if missing:
            raise DatasetIOError(f"{pred_dir} lacks predictions for {missing[:5]}")
        return {fid: evaluate_fov(*pm[fid], *gt_masks[fid], radius=radius) for fid in sorted(gt_masks)}

    per_fov = run(pred)
    keys = ("f1", "precision", "recall", "dice_cytoplasm", "dice_nuclei", "assd_membrane")
    report = {"radius": radius, "n_fovs": len(per_fov),
              "mean": {k: float(np.nanmean([r[k] for r in per_fov.values()])) for k in keys},
              "per_fov": per_fov}
    if compare is not None:
        other = run(compare)
        diffs = [per_fov[f]["f1"] - other[f]["f1"] for f in sorted(per_fov)]
        try:
            w = wilcoxon_signed_rank(diffs)
            report["wilcoxon_f1"] = {"statistic": w.statistic, "p_value": w.p_value, "n": w.n}
        except ContractError as exc:
            report["wilcoxon_f1"] = {"error": str(exc)}
    _write_json(out, report)
    write_manifest(Path(out).parent, "evaluate", {"radius": radius}, {}, [pred, gt] + ([compare] if compare else []),
                   [out], started)
    return report["mean"]


def _group_lookup(groups):
    if groups is None:
        return {}
    table = {}
    for rec in read_jsonl(groups):
        label = rec.get("group") or f"{rec['assay']}/{rec['indication']}"
        table[rec["fov"]] = label
    return table


def _embed_groups(root, lookup, embedder):
    by_group = {}
    for f in load_corpus(root, require_masks=False):
        by_group.setdefault(lookup.get(f.fov_id, f.group), []).append(f.image)
    return {g: embedder.transform(imgs) for g, imgs in by_group.items()}


def cmd_distmat(real, synth, out, groups=None, seed=0):
    started = time.time()
    lookup = _group_lookup(groups)
    emb = ToyEmbedder()
    R, S = _embed_groups(real, lookup, emb), _embed_groups(synth, lookup, emb)
    shared = sorted(set(R) & set(S))
    # groups too small for a distribution estimate are reported, not compared
    labels = [g for g in shared if len(R[g]) >= 2 and len(S[g]) >= 2]
    skipped = sorted((set(R) | set(S)) - set(labels))
    if len(labels) < 2:
        raise ContractError(f"need at least 2 shared groups with >= 2 images each, real has "
                            f"{ {g: len(v) for g, v in R.items()} }, synthetic has { {g: len(v) for g, v in S.items()} }")
    dm = condition_distance_matrix(R, S, labels, seed=seed)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dm.to_csv(out)
    summary = {**dm.summary(), "groups": labels, "skipped_groups": skipped}
    _write_json(out.with_suffix(".summary.json"), summary)
    write_manifest(out.parent, "distmat", {"groups": groups}, {"seed": seed}, [real, synth],
                   [out, out.with_suffix(".summary.json")], started)
    return summary


# ---------------------------------------------------------------- pipeline

PIPELINE_KEYS = {
    "run": {"out": str, "seed": int},
    "forge": {"n": int, "size": int, "seed": int},
    "maps": {"threshold": float, "replicates": int, "seed": int},
    "train": {"steps": int, "lr": float, "batch": int, "accum": int, "base_channels": int, "head_dim": int,
              "spade_hidden": int, "val_interval": int, "val_fraction": float, "seed": int},
    "sample": {"steps": int, "workers": int, "limit": int},
    "eval": {"seed": int},
}


def parse_pipeline_config(path, overrides=()):
    """Read an INI-style ``key = value`` file; ``overrides`` are ``section.key=value`` strings that win."""
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except FileNotFoundError as exc:
        raise DatasetIOError(f"missing config file {path}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    raw = {s: dict(parser[s]) for s in parser.sections()}
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        raw.setdefault(section, {})[name] = value.strip()
    cfg = {}
    for section, values in raw.items():
        if section not in PIPELINE_KEYS:
            raise ConfigError(f"unknown section [{section}]; valid sections: {', '.join(PIPELINE_KEYS)}")
        valid = PIPELINE_KEYS[section]
        cfg[section] = {}
        for key, value in values.items():
            if key not in valid:
                raise ConfigError(f"unknown key {key!r} in [{section}]; valid keys: {', '.join(sorted(valid))}")
            try:
                cfg[section][key] = valid[key](value)
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key} = {value!r}: {exc}") from exc
    return cfg


def cmd_pipeline(config, overrides=()):
    started = time.time()
    cfg = parse_pipeline_config(config, overrides)
    run = cfg.get("run", {})
    root = Path(run.get("out", "semdiff_run"))
    seed = run.get("seed", 0)
    corpus, maps_dir, ckpt, synth = root / "corpus", root / "maps", root / "model", root / "synthetic"
    report = {"stages": []}
    if "forge" in cfg:
        c = {"seed": seed, **cfg["forge"]}
        report["forge"] = cmd_forge(corpus, **c)
        report["stages"].append("forge")
    if "maps" in cfg:
        c = {"seed": seed, **cfg["maps"]}
        report["maps"] = cmd_maps(corpus, maps_dir, **c)
        meta = read_jsonl(corpus / "metadata.jsonl")
        sel = json.loads((maps_dir / "selected.json").read_text())["indices"]
        if meta and "component" in meta[0]:
            high = {i for i, r in enumerate(meta) if r["component"] == "high_ecc"}
            report["maps"]["false_positives"] = len(set(sel) - high)
            report["maps"]["missed"] = len(high - set(sel))
        report["stages"].append("maps")
    if "train" in cfg:
        c = {"seed": seed, **cfg["train"]}
        report["train"] = cmd_train(corpus, ckpt, **c)
        report["stages"].append("train")
    if "sample" in cfg:
        c = dict(cfg["sample"])
        entries = plan_from_records(read_jsonl(maps_dir / "plan.jsonl"))
        limit = c.pop("limit", None)
        if limit is not None:
            entries = entries[:limit]
        report["sample"] = {"plan_entries": len(entries),
                            **cmd_sample(ckpt / "final", corpus, entries, synth, **c)}
        report["stages"].append("sample")
    if "eval" in cfg:
        c = {"seed": seed, **cfg["eval"]}
        summary = cmd_distmat(corpus, synth, root / "eval" / "distmat.csv", seed=c["seed"])
        report["eval"] = {"distmat": summary,
                          "matching_below_non_matching": summary["matching_mean"] < summary["non_matching_mean"]}
        report["stages"].append("eval")
    _write_json(root / "report.json", report)
    write_manifest(root, "pipeline", {"config": str(config), "overrides": list(overrides)}, {"seed": seed},
                   [config], [root / "report.json"], started)
    return report


# ---------------------------------------------------------------- argument parsing


def build_parser():
    p = argparse.ArgumentParser(prog="semdiff", description="Guidance-conditioned diffusion toolkit.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("forge", help="generate a toy corpus")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--n", type=int, default=612)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("maps", help="guidance maps, eccentricity selection and augmentation plan")
    s.add_argument("--data", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--threshold", type=float, default=0.85)
    s.add_argument("--replicates", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("train", help="train the denoiser")
    s.add_argument("--data", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--steps", type=int, default=2000)
    s.add_argument("--lr", type=float, default=1e-4)
    s.add_argument("--batch", type=int, default=5)
    s.add_argument("--accum", type=int, default=5)
    s.add_argument("--base-channels", type=int, default=32)
    s.add_argument("--head-dim", type=int, default=16)
    s.add_argument("--spade-hidden", type=int, default=32)
    s.add_argument("--val-interval", type=int, default=100)
    s.add_argument("--val-fraction", type=float, default=0.1)
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("sample", help="render an augmentation plan")
    s.add_argument("--checkpoint", required=True, type=Path)
    s.add_argument("--data", required=True, type=Path)
    s.add_argument("--plan", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--steps", type=int, default=None)
    s.add_argument("--workers", type=int, default=1)

    s = sub.add_parser("evaluate", help="instance segmentation metrics against ground truth")
    s.add_argument("--pred", required=True, type=Path)
    s.add_argument("--gt", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--radius", type=float, default=6.0)
    s.add_argument("--compare", type=Path, default=None, help="second prediction set for a paired test on F1")

    s = sub.add_parser("distmat", help="condition-group Wasserstein distance matrix")
    s.add_argument("--real", required=True, type=Path)
    s.add_argument("--synth", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--groups", type=Path, default=None)
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("pipeline", help="run the configured stages end to end")
    s.add_argument("--config", required=True, type=Path)
    s.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
    return p


def dispatch(args):
    kw = {k: v for k, v in vars(args).items() if k not in ("command", "verbose")}
    if args.command in ("train", "sample", "maps", "forge") and kw.get("workers", 1) < 1:
        raise ConfigError("--workers must be >= 1")
    fn = {"forge": cmd_forge, "maps": cmd_maps, "train": cmd_train, "sample": cmd_sample,
          "evaluate": cmd_evaluate, "distmat": cmd_distmat, "pipeline": cmd_pipeline}[args.command]
    return fn(**kw)


def exit_code_for(exc):
    if isinstance(exc, ConfigError):
        return 2
    if isinstance(exc, (DatasetIOError, OSError)):
        return 3
    if isinstance(exc, (ContractError, PackingError)):
        return 4
    if isinstance(exc, SemdiffError):
        return exc.exit_code
    return 1


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = dispatch(args)
    except (SemdiffError, OSError) as exc:
        code = exit_code_for(exc)
        print(f"semdiff {args.command}: {exc}", file=sys.stderr)
        return code
    print(json.dumps(result, indent=2, sort_keys=True, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
