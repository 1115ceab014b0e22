"""Pipeline stages over one run directory, with an append-only run manifest."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import platform
import time
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .align import AlignItem, load_pooling, pool_patches, save_pooling, train_alignment, write_log, config_dict
from .core import FINDINGS, PRESENT, REGIONS, ROUTING, STATES, ContractError, RegionMask, Sentence, Volume, load_tensor, save_tensor
from .imgenc import (
    encode_patches,
    extract_skeleton,
    load_encoder,
    pretrain_reconstruction,
    sample_grid_patches,
    sample_patches,
    save_encoder,
    weights_digest,
)
from .lexicon import load_lexicon
from .phantom import generate_dataset, manifest_digest
from .textenc import (
    build_text_corpus,
    encode_sentences,
    finetune_text_encoder,
    init_text_model,
    label_sentence,
    load_text_model,
    save_text_model,
    similarity_profile,
    write_history,
)
from .zeroshot import (
    build_codebook,
    classify,
    compute_metrics,
    format_table,
    load_codebook,
    majority_baseline,
    save_codebook,
    write_metrics_csv,
)

log = logging.getLogger(__name__)

STAGES = ("gen-data", "text", "image", "align", "codebook", "eval")
PREREQS = {
    "gen-data": (),
    "text": ("gen-data",),
    "image": ("gen-data",),
    "align": ("text", "image"),
    "codebook": ("text",),
    "eval": ("align", "codebook"),
}


class StageError(RuntimeError):
    """A stage cannot run (missing prerequisite, locked run directory)."""


class PrerequisiteError(StageError):
    """A stage was asked to run before the stages it depends on."""


class DataError(RuntimeError):
    """Input data is missing, inconsistent or corrupt."""


def fingerprint():
    """Version and a hash over the package's source files."""
    root = Path(__file__).parent
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.suffix in (".py", ".pyx", ".yaml") and "__pycache__" not in p.parts:
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return {
        "version": __version__,
        "source_sha256": h.hexdigest(),
        "python": platform.python_version(),
        "torch": torch.__version__,
        "numpy": np.__version__,
    }


class RunManifest:
    """Append-only record of completed stages in ``run_dir/manifest.json``."""

    def __init__(self, run_dir):
        self.path = Path(run_dir) / "manifest.json"
        self.records = json.loads(self.path.read_text())["records"] if self.path.exists() else []

    def completed(self, stage):
        return any(r["stage"] == stage for r in self.records)

    def latest(self, stage):
        hits = [r for r in self.records if r["stage"] == stage]
        return hits[-1] if hits else None

    def require(self, stage):
        missing = [p for p in PREREQS[stage] if not self.completed(p)]
        if missing:
            raise PrerequisiteError(f"stage {stage!r} needs {', '.join(missing)} to be completed first")

    def append(self, stage, seconds, outputs=None, **extra):
        rec = {
            "stage": stage,
            "finished": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            "seconds": round(seconds, 3),
            "outputs": outputs or {},
            **extra,
        }
        self.records.append(rec)
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps({"records": self.records}, indent=2))
        os.replace(tmp, self.path)


@contextmanager
def run_lock(run_dir):
    lock = Path(run_dir) / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise StageError(f"{run_dir} is in use by another process (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


class Run:
    def __init__(self, cfg, run_dir, workers=1):
        self.cfg = cfg
        self.dir = Path(run_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.workers = workers
        self.manifest = RunManifest(self.dir)
        data = cfg["paths"]["data"]
        self.data_dir = Path(data) if data else self.dir / "data"
        self.lexicon = load_lexicon(cfg["paths"]["lexicon"])
        (self.dir / "config.resolved.yaml").write_text(cfg.dump())
        (self.dir / "fingerprint.json").write_text(json.dumps(fingerprint(), indent=2))

    # -- helpers -----------------------------------------------------------

    def _dataset(self):
        path = self.data_dir / "manifest.json"
        if not path.exists():
            raise DataError(f"no dataset manifest at {path}")
        return json.loads(path.read_text())

    def split(self):
        return json.loads((self.dir / "split.json").read_text())

    def _samples(self, part):
        ds = {s["id"]: s for s in self._dataset()["samples"]}
        return [ds[i] for i in self.split()[part]]

    def _report(self, sample):
        text = (self.data_dir / sample["report"]).read_text(encoding="utf-8")
        return [Sentence(line, sample["id"]) for line in text.splitlines() if line.strip()]

    def _load(self, sample, key):
        try:
            return load_tensor(self.data_dir / sample[key])
        except FileNotFoundError as exc:
            raise DataError(str(exc)) from exc

    def _stage(self, name, fn):
        self.manifest.require(name)
        t0 = time.perf_counter()
        outputs = fn()
        self.manifest.append(name, time.perf_counter() - t0, outputs)
        log.info("stage %s done in %.1fs", name, time.perf_counter() - t0)
        return outputs

    # -- stages ------------------------------------------------------------

    def gen_data(self, n=None):
        def go():
            pc = self.cfg["phantom"]
            n_samples = int(n or pc["n_samples"])
            spec = self.cfg.phantom_spec()
            if (self.data_dir / "manifest.json").exists():
                manifest = self._dataset()
                if len(manifest["samples"]) != n_samples or manifest["master_seed"] != spec.seed:
                    raise DataError(f"{self.data_dir} holds a different dataset; choose another --out")
            else:
                manifest = generate_dataset(spec, n_samples, self.data_dir, self.cfg["paths"]["lexicon"], self.workers)
            ids = [s["id"] for s in manifest["samples"]]
            split = split_ids(ids, pc["split"], self.cfg.seed)
            (self.dir / "split.json").write_text(json.dumps(split, indent=1))
            return {"dataset": str(self.data_dir), "dataset_sha256": manifest_digest(manifest),
                    "split": {k: len(v) for k, v in split.items()}}

        return self._stage("gen-data", go)

    def train_text(self):
        def go():
            tcfg = self.cfg.text_config()
            sents = [s for smp in self._samples("train") for s in self._report(smp)]
            warns = []
            corpus = build_text_corpus(sents, self.lexicon, warns)
            out = self.dir / "text"
            out.mkdir(exist_ok=True)
            acc = {}
            for f in FINDINGS:
                res = finetune_text_encoder(corpus[f], tcfg)
                save_text_model(out / f"text_{f}.pt", res.encoder, res.head)
                write_history(out / f"text_{f}_history.csv", res.history)
                acc[f] = res.history[-1][2]
            return {"dir": str(out), "train_accuracy": acc, "label_warnings": len(warns)}

        return self._stage("text", go)

    def _sample_region(self, volume, mask, region):
        ic = self.cfg["imgenc"]
        p = ic["p_size"][region]
        if ic["sampler"][region] == "grid":
            return sample_grid_patches(volume, mask, region, p, ic["stride"])
        return sample_patches(volume, extract_skeleton(mask, region), p, ic["stride"])

    def _patches(self, sample):
        volume = Volume(self._load(sample, "volume"))
        mask = RegionMask(self._load(sample, "mask"))
        return {r: self._sample_region(volume, mask, r) for r in REGIONS}

    def train_image(self):
        def go():
            pcfg = self.cfg.pretrain_config()
            cap = self.cfg["imgenc"]["max_pretrain_patches"]
            out = self.dir / "image"
            cache = out / "cache"
            cache.mkdir(parents=True, exist_ok=True)
            samples = self._samples("train") + self._samples("val") + self._samples("test")
            train_ids = set(self.split()["train"])
            per_sample = {s["id"]: self._patches(s) for s in samples}
            report = {}
            for r in REGIONS:
                pool = [p for sid in sorted(train_ids) for p in per_sample[sid][r]]
                if cap and len(pool) > cap:
                    rng = np.random.default_rng(pcfg.seed)
                    pool = [pool[i] for i in np.sort(rng.choice(len(pool), cap, replace=False))]
                res = pretrain_reconstruction(pool, pcfg, region=r)
                save_encoder(out / f"encoder_{r}.pt", res.encoder)
                with open(out / f"pretrain_{r}.csv", "w") as fh:
                    fh.write("epoch,mse\n")
                    fh.write(f"-1,{res.initial_loss:.6f}\n")
                    fh.writelines(f"{i},{v:.6f}\n" for i, v in enumerate(res.losses))
                for sid, bags in per_sample.items():
                    emb = encode_patches(res.encoder, bags[r])
                    save_tensor(cache / f"{sid}_{r}.mapl", emb.astype(np.float32))
                    save_tensor(cache / f"{sid}_{r}_centers.mapl",
                                np.array([p.center for p in bags[r]], dtype=np.float32).reshape(-1, 3))
                report[r] = {"patches": len(pool), "initial_mse": res.initial_loss,
                             "final_mse": res.losses[-1] if res.losses else res.initial_loss}
            return report

        return self._stage("image", go)

    def bag(self, sid, region):
        return load_tensor(self.dir / "image" / "cache" / f"{sid}_{region}.mapl").astype(np.float64)

    def centers(self, sid, region):
        return load_tensor(self.dir / "image" / "cache" / f"{sid}_{region}_centers.mapl").astype(np.int64)

    def text_models(self):
        return {f: load_text_model(self.dir / "text" / f"text_{f}.pt") for f in FINDINGS}

    def image_models(self):
        return {r: load_encoder(self.dir / "image" / f"encoder_{r}.pt") for r in REGIONS}

    def sentence_pools(self, models, part="train"):
        sents = [s for smp in self._samples(part) for s in self._report(smp)]
        corpus = build_text_corpus(sents, self.lexicon)
        pools = {}
        for f in FINDINGS:
            for c in STATES:
                texts = [s.text for s, st in corpus[f] if st == c]
                if texts:
                    pools[(f, c)] = encode_sentences(models[f][0], texts)
        return pools

    def train_align(self):
        def go():
            acfg = self.cfg.align_config()
            text, image = self.text_models(), self.image_models()
            frozen = [m for enc, head in text.values() for m in (enc, head)] + list(image.values())
            before = [weights_digest(m) for m in frozen]
            pools = self.sentence_pools(text)
            train = self._samples("train")
            bags, items = [], []
            for i, smp in enumerate(train):
                bags.append({r: self.bag(smp["id"], r) for r in REGIONS})
                for s in self._report(smp):
                    lab = label_sentence(s, self.lexicon)
                    if lab is not None:
                        items.append(AlignItem(i, lab.finding, lab.state))
            res = train_alignment(bags, items, pools, acfg)
            after = [weights_digest(m) for m in frozen]
            out = self.dir / "align"
            out.mkdir(exist_ok=True)
            for f, net in res.nets.items():
                save_pooling(out / f"pool_{f}.pt", net)
            write_log(out / "align_log.csv", res.log)
            (out / "align_config.json").write_text(json.dumps(config_dict(acfg), indent=2))
            checks = {"before": before, "after": after, "unchanged": before == after}
            (out / "frozen_checksums.json").write_text(json.dumps(checks, indent=2))
            if before != after:
                raise ContractError("frozen encoder weights changed during alignment")
            first, last = res.log[0][1], res.log[-1][1]
            return {"dir": str(out), "triplet_loss_first": first, "triplet_loss_last": last,
                    "frozen_unchanged": True}

        return self._stage("align", go)

    def build_codebook(self):
        def go():
            zc = self.cfg["zeroshot"]
            pools = self.sentence_pools(self.text_models())
            cb = build_codebook(pools, zc["k"], self.cfg.seed + 4, zc["method"])
            path = self.dir / "codebook" / "codebook.mapl"
            save_codebook(path, cb)
            return {"path": str(path), "vectors": len(cb)}

        return self._stage("codebook", go)

    def evaluate(self):
        def go():
            split = self.split()
            if set(split["train"]) & set(split["test"]):
                raise DataError("train and test splits overlap")
            nets = {f: load_pooling(self.dir / "align" / f"pool_{f}.pt") for f in FINDINGS}
            cb = load_codebook(self.dir / "codebook" / "codebook.mapl")
            test = self._samples("test")
            preds = {f: [] for f in FINDINGS}
            truth = {f: [] for f in FINDINGS}
            attention = []
            p_size = self.cfg["imgenc"]["p_size"]
            for smp in test:
                emb, weights = {}, {}
                for f in FINDINGS:
                    bag = self.bag(smp["id"], ROUTING[f])
                    if len(bag):
                        vec, w = pool_patches(nets[f], bag)
                        emb[f], weights[f] = vec.values, w
                out = classify(emb, cb)
                lesions = None
                for f in FINDINGS:
                    preds[f].append(out[f][0])
                    truth[f].append(smp["ground_truth"][f])
                    if smp["ground_truth"][f] == PRESENT and f in weights:
                        if lesions is None:
                            lesions = self._load(smp, "lesions").astype(np.int64)
                        region = ROUTING[f]
                        hit = lesion_overlap(self.centers(smp["id"], region), lesions,
                                             FINDINGS.index(f), p_size[region])
                        attention.append(attention_record(smp["id"], f, weights[f], hit))
            train_truth = {f: [s["ground_truth"][f] for s in self._samples("train")] for f in FINDINGS}
            rows = compute_metrics(preds, truth)
            base = compute_metrics(majority_baseline(train_truth, len(test)), truth)
            out = self.dir / "eval"
            out.mkdir(exist_ok=True)
            write_metrics_csv(out / "metrics.csv", rows, "maple")
            write_metrics_csv(out / "baseline_metrics.csv", base, "majority")
            (out / "metrics.txt").write_text(format_table({"maple": rows, "majority": base}) + "\n")
            with open(out / "predictions.csv", "w") as fh:
                fh.write("sample,finding,truth,prediction\n")
                for f in FINDINGS:
                    for smp, p, t in zip(test, preds[f], truth[f]):
                        fh.write(f"{smp['id']},{f},{t},{p}\n")
            write_attention(out / "attention.csv", attention)
            self._similarity(out / "similarity.csv", test)
            return {
                "f1": {r.task: r.f1 for r in rows},
                "collapsed": {r.task: r.collapsed for r in rows},
                "baseline_collapsed": {r.task: r.collapsed for r in base},
                "localization": localization_summary(attention),
            }

        return self._stage("eval", go)

    def _similarity(self, path, samples):
        sents = [s for smp in samples for s in self._report(smp)]
        corpus = build_text_corpus(sents, self.lexicon)
        text = self.text_models()
        trained = similarity_profile({f: text[f][0] for f in FINDINGS}, corpus)
        tcfg = self.cfg.text_config()
        base = {}
        for f in FINDINGS:
            enc, _ = init_text_model(text[f][0].vocab, tcfg)
            base[f] = enc
        untrained = similarity_profile(base, corpus)
        with open(path, "w") as fh:
            fh.write("encoder,finding,within_present,within_absent,cross\n")
            for name, prof in (("finetuned", trained), ("untrained", untrained)):
                for f, v in prof.items():
                    fh.write(f"{name},{f},{v['within_present']:.4f},{v['within_absent']:.4f},{v['cross']:.4f}\n")

    def run_all(self):
        for stage, fn in (
            ("gen-data", self.gen_data), ("text", self.train_text), ("image", self.train_image),
            ("align", self.train_align), ("codebook", self.build_codebook), ("eval", self.evaluate),
        ):
            if self.manifest.completed(stage):
                log.info("stage %s already complete, skipping", stage)
                continue
            fn()
        return self.manifest.latest("eval")["outputs"]


def _unit(sid):
    return int.from_bytes(hashlib.sha256(sid.encode()).digest()[:8], "big") / 2.0**64


def split_ids(ids, split, seed=0):
    """Assign ids to train/val/test by a hash of the id.

    Fractions threshold the hash value; integer counts take ids in hash
    order. Either way an id's part does not depend on the other ids' order.
    """
    ids = sorted(ids)
    vals = [split["train"], split["val"], split["test"]]
    if all(isinstance(v, int) for v in vals):
        if sum(vals) != len(ids):
            raise ContractError(f"split counts {vals} do not add up to {len(ids)} samples")
        ranked = sorted(ids, key=_unit)
        a, b = vals[0], vals[0] + vals[1]
        parts = {"train": ranked[:a], "val": ranked[a:b], "test": ranked[b:]}
    else:
        parts = {"train": [], "val": [], "test": []}
        for i in ids:
            u = _unit(i)
            part = "train" if u < vals[0] else "val" if u < vals[0] + vals[1] else "test"
            parts[part].append(i)
    return {k: sorted(v) for k, v in parts.items()}


def lesion_overlap(centers, lesion_bits, finding_index, p_size):
    """Which patches (given by centre) contain a voxel of the given finding."""
    bit = 1 << finding_index
    hit = (lesion_bits & bit) != 0
    shape = np.array(hit.shape)
    out = np.zeros(len(centers), dtype=bool)
    for i, c in enumerate(centers):
        lo = np.maximum(c - p_size // 2, 0)
        hi = np.minimum(c - p_size // 2 + p_size, shape)
        if np.all(hi > lo):
            out[i] = hit[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]].any()
    return out


def attention_record(sid, finding, weights, hit):
    n = len(weights)
    mean_hit = float(weights[hit].mean()) if hit.any() else 0.0
    return {
        "sample": sid,
        "finding": finding,
        "n_patches": n,
        "n_lesion_patches": int(hit.sum()),
        "lesion_mass": float(weights[hit].sum()),
        "ratio_to_uniform": mean_hit * n,
    }


def write_attention(path, records):
    keys = ("sample", "finding", "n_patches", "n_lesion_patches", "lesion_mass", "ratio_to_uniform")
    with open(path, "w") as fh:
        fh.write(",".join(keys) + "\n")
        for r in records:
            fh.write(",".join(f"{r[k]:.4f}" if isinstance(r[k], float) else str(r[k]) for k in keys) + "\n")


def localization_summary(records, factor=2.0):
    """Per finding: share of positive volumes whose lesion patches get >= factor x uniform."""
    out = {}
    for f in FINDINGS:
        rs = [r for r in records if r["finding"] == f]
        if rs:
            out[f] = sum(r["ratio_to_uniform"] >= factor for r in rs) / len(rs)
    return out
