"""Stage orchestration for the end-to-end vocabulary adaptation pipeline.

Stages run in a fixed order, each reading its predecessors' artifacts from
the output directory and writing its own plus a run manifest (input/output
hashes, seed, duration). A stage whose manifest still matches the hashes of
everything it consumed and produced is skipped on rerun, which makes the
`pipeline` command restartable after an interruption and a no-op when
nothing changed.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import adapter as adapter_mod
from . import batching, checkpoint, corpus, evalmetrics, tokenizer as tok_mod, vocabmap
from . import tinylm
from .errors import ConfigError, ValidationError

log = logging.getLogger(__name__)

STAGES = [
    "mix-corpus",
    "train-vocab",
    "pretrain",
    "init-adapter",
    "train-adapter",
    "merge",
    "finetune",
    "eval-frag",
    "eval-bpb",
    "report",
]

# artifact -> stage that produces it, for actionable error messages
ARTIFACTS = {
    "mixtures.json": "mix-corpus",
    "vocab_old.json": "train-vocab",
    "vocab_new.json": "train-vocab",
    "base.ckpt": "pretrain",
    "adapter_init.ckpt": "init-adapter",
    "init_report.json": "init-adapter",
    "adapter_trained.ckpt": "train-adapter",
    "adapter_log.jsonl": "train-adapter",
    "merged.ckpt": "merge",
    "merged_init.ckpt": "merge",
    "finetuned.ckpt": "finetune",
    "frag_report.json": "eval-frag",
    "bpb_report.json": "eval-bpb",
    "report.json": "report",
}

STAGE_INPUTS: dict[str, list[str]] = {
    "mix-corpus": [],
    "train-vocab": ["mixtures.json"],
    "pretrain": ["mixtures.json", "vocab_old.json"],
    "init-adapter": ["vocab_old.json", "vocab_new.json"],
    "train-adapter": ["mixtures.json", "vocab_new.json", "base.ckpt", "adapter_init.ckpt"],
    "merge": ["base.ckpt", "adapter_init.ckpt", "adapter_trained.ckpt", "vocab_new.json"],
    "finetune": ["mixtures.json", "vocab_new.json", "merged.ckpt"],
    "eval-frag": ["vocab_old.json", "vocab_new.json"],
    "eval-bpb": ["vocab_old.json", "vocab_new.json", "base.ckpt", "merged.ckpt", "merged_init.ckpt", "finetuned.ckpt"],
    "report": ["init_report.json", "frag_report.json", "bpb_report.json"],
}

STAGE_OUTPUTS: dict[str, list[str]] = {
    "mix-corpus": ["mixtures.json"],
    "train-vocab": ["vocab_old.json", "vocab_new.json"],
    "pretrain": ["base.ckpt", "pretrain_log.jsonl"],
    "init-adapter": ["adapter_init.ckpt", "init_report.json"],
    "train-adapter": ["adapter_trained.ckpt", "adapter_log.jsonl"],
    "merge": ["merged.ckpt", "merged_init.ckpt"],
    "finetune": ["finetuned.ckpt", "finetune_log.jsonl"],
    "eval-frag": ["frag_report.json"],
    "eval-bpb": ["bpb_report.json"],
    "report": ["report.json", "report.csv"],
}


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def derive_seed(master: int, label: str) -> int:
    digest = hashlib.sha256(f"{master}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little") % (2**63)


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


DEFAULT_STAGE_PARAMS = {
    "batch_size": 16,
    "seq_len": 64,
    "lr": 1e-3,
    "weight_decay": 0.01,
    "warmup_ratio": 0.01,
}


@dataclass
class PipelineConfig:
    raw: dict
    base_dir: Path

    @staticmethod
    def load(path: str | Path) -> "PipelineConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {path}: {exc}")
        return PipelineConfig(raw=raw, base_dir=path.parent.resolve())

    def validate(self) -> None:
        for key in ("seed", "out_dir", "manifest", "vocab", "model"):
            if key not in self.raw:
                raise ConfigError(f"config missing required key {key!r}")
        vocab = self.raw["vocab"]
        for side in ("old_size", "new_size"):
            if vocab.get(side, 0) < tok_mod.MIN_VOCAB:
                raise ConfigError(
                    f"vocab.{side} must be at least {tok_mod.MIN_VOCAB}"
                )
        self.model_config(vocab_size=vocab["old_size"])  # shape sanity
        manifest_langs = {s.language_id for s in self.load_specs()}
        for key in ("old_languages", "new_languages"):
            missing = set(vocab.get(key, [])) - manifest_langs
            if missing:
                raise ConfigError(f"vocab.{key} not in manifest: {sorted(missing)}")
        for stage in ("pretrain", "adapter", "finetune"):
            langs = set(self.stage_params(stage).get("languages", []))
            missing = langs - manifest_langs
            if missing:
                raise ConfigError(f"{stage}.languages not in manifest: {sorted(missing)}")

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else (self.base_dir / p)

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def out_dir(self) -> Path:
        return self.resolve(self.raw["out_dir"])

    @property
    def doc_unit(self) -> str:
        return self.raw.get("doc_unit", "para")

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(_canonical(self.raw).encode()).hexdigest()

    def load_specs(self) -> list[corpus.CorpusSpec]:
        return corpus.load_manifest(self.resolve(self.raw["manifest"]))

    def load_heldout(self) -> list[corpus.CorpusSpec]:
        rel = self.raw.get("heldout_manifest")
        if not rel:
            raise ConfigError("config has no heldout_manifest; eval stages need one")
        return corpus.load_manifest(self.resolve(rel))

    @property
    def temperature(self) -> float:
        return float(self.raw.get("mixture_temperature", 2.0))

    def model_config(self, vocab_size: int) -> tinylm.ModelConfig:
        return tinylm.ModelConfig(vocab_size=vocab_size, **self.raw["model"])

    def stage_params(self, stage: str) -> dict:
        params = dict(DEFAULT_STAGE_PARAMS)
        params.update(self.raw.get(stage, {}))
        return params

    def alpha(self) -> float:
        params = self.raw.get("adapter", {})
        if params.get("alpha") is not None:
            return float(params["alpha"])
        script = self.raw.get("group", {}).get("script", "latin")
        return 0.0 if script == "latin" else 0.1

    def optimizer_for(self, stage: str) -> tinylm.OptimizerConfig:
        p = self.stage_params(stage)
        return tinylm.OptimizerConfig(
            lr=float(p["lr"]),
            weight_decay=float(p["weight_decay"]),
            warmup_ratio=float(p["warmup_ratio"]),
        )


class PipelineRunner:
    def __init__(self, config: PipelineConfig):
        config.validate()
        self.cfg = config
        self.out = config.out_dir
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "manifests").mkdir(exist_ok=True)

    # ------------------------------------------------------------------ io

    def path(self, artifact: str) -> Path:
        return self.out / artifact

    def require(self, stage: str) -> None:
        missing = [a for a in STAGE_INPUTS[stage] if not self.path(a).is_file()]
        if missing:
            hints = ", ".join(
                f"{a} (produced by {ARTIFACTS.get(a, '?')})" for a in missing
            )
            raise ValidationError(f"stage {stage!r} is missing input artifacts: {hints}")

    def _manifest_path(self, stage: str) -> Path:
        return self.out / "manifests" / f"{stage}.json"

    def _hash_artifacts(self, names: list[str]) -> dict[str, str]:
        return {name: sha256_file(self.path(name)) for name in names if self.path(name).is_file()}

    def _external_inputs(self, stage: str) -> dict[str, str]:
        hashes = {}
        specs = self.cfg.load_specs()
        for spec in specs:
            for src in spec.sources:
                hashes[str(src)] = sha256_file(src)
        return hashes

    def is_current(self, stage: str) -> bool:
        mpath = self._manifest_path(stage)
        if not mpath.is_file():
            return False
        try:
            manifest = json.loads(mpath.read_text(encoding="utf-8"))
        except json.JSONDecodeError:
            return False
        if manifest.get("config_hash") != self.cfg.config_hash:
            return False
        for name, digest in manifest.get("inputs", {}).items():
            p = self.path(name) if not Path(name).is_absolute() else Path(name)
            if not p.is_file() or sha256_file(p) != digest:
                return False
        for name, digest in manifest.get("outputs", {}).items():
            p = self.path(name)
            if not p.is_file() or sha256_file(p) != digest:
                return False
        return True

    def run_stage(self, stage: str) -> bool:
        """Run one stage; returns False when skipped as already current."""
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}; stages are {STAGES}")
        if self.is_current(stage):
            log.info("stage %s is current, skipping", stage)
            return False
        self.require(stage)
        started = time.time()
        getattr(self, "_stage_" + stage.replace("-", "_"))()
        duration = time.time() - started

        inputs = self._hash_artifacts(STAGE_INPUTS[stage])
        inputs.update(self._external_inputs(stage))
        manifest = {
            "stage": stage,
            "config_hash": self.cfg.config_hash,
            "seed": self.cfg.seed,
            "inputs": inputs,
            "outputs": self._hash_artifacts(STAGE_OUTPUTS[stage]),
            "duration_s": round(duration, 3),
            "finished_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        }
        self._manifest_path(stage).write_text(
            json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8"
        )
        log.info("stage %s finished in %.1fs", stage, duration)
        return True

    def run_pipeline(self, upto: str | None = None) -> None:
        for stage in STAGES:
            self.run_stage(stage)
            if stage == upto:
                break

    # ------------------------------------------------------------- helpers

    def _specs_for(self, languages: list[str]) -> list[corpus.CorpusSpec]:
        specs = [s for s in self.cfg.load_specs() if s.language_id in set(languages)]
        if len(specs) != len(set(languages)):
            raise ConfigError(f"languages {languages} not all present in manifest")
        return specs

    def _mixture(self, languages: list[str]) -> corpus.MixtureWeights:
        mixtures = json.loads(self.path("mixtures.json").read_text(encoding="utf-8"))
        key = ",".join(sorted(languages))
        if key not in mixtures:
            raise ValidationError(f"mixtures.json lacks an entry for languages {key!r}")
        return corpus.MixtureWeights(weights=mixtures[key])

    def _doc_stream(self, languages, seed_label: str, budget: int, handle=None):
        return corpus.sample_documents(
            self._specs_for(languages),
            self._mixture(languages),
            derive_seed(self.cfg.seed, seed_label),
            budget,
            tokenizer_handle=handle,
            doc_unit=self.cfg.doc_unit,
        )

    def _train_batches(self, stage: str, tok: tok_mod.TokenizerModel):
        p = self.cfg.stage_params(stage)
        needed = int(p["steps"]) * int(p["batch_size"]) * int(p["seq_len"])
        budget = int(p.get("sample_tokens", min(needed, 500_000)))
        docs = self._doc_stream(p["languages"], f"{stage}-data", max(budget, 1), handle=tok)
        windows = batching.pack_windows(docs, tok, int(p["seq_len"]))
        return batching.batch_cycle(
            windows, int(p["batch_size"]), derive_seed(self.cfg.seed, f"{stage}-order")
        )

    def _heldout_docs(self, languages: list[str]) -> dict[str, list[str]]:
        max_docs = int(self.cfg.raw.get("eval", {}).get("max_docs", 200))
        specs = {s.language_id: s for s in self.cfg.load_heldout()}
        out: dict[str, list[str]] = {}
        for lang in languages:
            if lang not in specs:
                raise ConfigError(f"heldout manifest lacks language {lang!r}")
            docs: list[str] = []
            for raw in corpus._iter_documents(specs[lang].sources[0], self.cfg.doc_unit):
                try:
                    doc = corpus.normalize_text(raw.decode("utf-8"))
                except UnicodeDecodeError:
                    continue
                if doc:
                    docs.append(doc)
                if len(docs) >= max_docs:
                    break
            out[lang] = docs
        return out

    def _vocab_hashes(self) -> dict[str, str]:
        return {
            "vocab_old_hash": sha256_file(self.path("vocab_old.json")),
            "vocab_new_hash": sha256_file(self.path("vocab_new.json")),
        }

    # -------------------------------------------------------------- stages

    def _stage_mix_corpus(self) -> None:
        groups: set[tuple[str, ...]] = set()
        vocab = self.cfg.raw["vocab"]
        groups.add(tuple(sorted(vocab["old_languages"])))
        groups.add(tuple(sorted(vocab["new_languages"])))
        for stage in ("pretrain", "adapter", "finetune"):
            groups.add(tuple(sorted(self.cfg.stage_params(stage)["languages"])))
        mixtures = {}
        for langs in sorted(groups):
            weights = corpus.compute_mixture(self._specs_for(list(langs)), self.cfg.temperature)
            mixtures[",".join(langs)] = weights.weights
        self.path("mixtures.json").write_text(
            json.dumps(mixtures, indent=2, sort_keys=True), encoding="utf-8"
        )

    def _stage_train_vocab(self) -> None:
        vocab = self.cfg.raw["vocab"]
        budget = int(vocab.get("sample_budget", 200_000))
        cap = int(vocab.get("token_cap", 2_000_000))
        for side, size_key, langs_key in (
            ("vocab_old.json", "old_size", "old_languages"),
            ("vocab_new.json", "new_size", "new_languages"),
        ):
            stream = self._doc_stream(vocab[langs_key], f"vocab-{side}", budget)
            model = tok_mod.train_vocab(stream, int(vocab[size_key]), cap)
            tok_mod.save_vocab(model, self.path(side))

    def _stage_pretrain(self) -> None:
        tok = tok_mod.load_vocab(self.path("vocab_old.json"))
        p = self.cfg.stage_params("pretrain")
        cfg = self.cfg.model_config(vocab_size=tok.vocab_size)
        batches = self._train_batches("pretrain", tok)
        model, logs = tinylm.pretrain(
            cfg,
            batches,
            int(p["steps"]),
            derive_seed(self.cfg.seed, "pretrain-init"),
            self.cfg.optimizer_for("pretrain"),
        )
        checkpoint.save_model(
            self.path("base.ckpt"),
            model,
            vocab_hash=sha256_file(self.path("vocab_old.json")),
        )
        self._write_jsonl("pretrain_log.jsonl", logs)

    def _stage_init_adapter(self) -> None:
        old = tok_mod.load_vocab(self.path("vocab_old.json"))
        new = tok_mod.load_vocab(self.path("vocab_new.json"))
        plan = vocabmap.classify_tokens(new.vocabulary, old.vocabulary, old)
        a_in = vocabmap.init_adapter(
            plan, len(old.vocabulary), derive_seed(self.cfg.seed, "adapter-init-in")
        )
        a_out = vocabmap.init_adapter(
            plan, len(old.vocabulary), derive_seed(self.cfg.seed, "adapter-init-out")
        )
        save_adapters(
            self.path("adapter_init.ckpt"), a_in, a_out, extra=self._vocab_hashes()
        )
        report = vocabmap.init_report(plan, new.vocabulary)
        self.path("init_report.json").write_text(
            json.dumps(report, indent=2, sort_keys=True), encoding="utf-8"
        )

    def _stage_train_adapter(self) -> None:
        base, _ = checkpoint.load_model(self.path("base.ckpt"))
        a_in, a_out, _ = load_adapters(self.path("adapter_init.ckpt"))
        new_tok = tok_mod.load_vocab(self.path("vocab_new.json"))
        p = self.cfg.stage_params("adapter")
        train_cfg = adapter_mod.TrainConfig(
            alpha=self.cfg.alpha(),
            steps=int(p["steps"]),
            batch_size=int(p["batch_size"]),
            seq_len=int(p["seq_len"]),
            seed=derive_seed(self.cfg.seed, "adapter-order"),
            optimizer=self.cfg.optimizer_for("adapter"),
        )
        batches = self._train_batches("adapter", new_tok)
        adapted, reports = adapter_mod.train_adapter(base, a_in, a_out, batches, train_cfg)
        save_adapters(
            self.path("adapter_trained.ckpt"),
            adapted.a_in,
            adapted.a_out,
            extra=self._vocab_hashes(),
        )
        self._write_jsonl("adapter_log.jsonl", [r.to_dict() for r in reports])

    def _stage_merge(self) -> None:
        base, _ = checkpoint.load_model(self.path("base.ckpt"))
        new_hash = sha256_file(self.path("vocab_new.json"))
        for src, dst in (("adapter_trained.ckpt", "merged.ckpt"), ("adapter_init.ckpt", "merged_init.ckpt")):
            a_in, a_out, _ = load_adapters(self.path(src))
            merged = adapter_mod.merge(adapter_mod.AdaptedModel(base=base, a_in=a_in, a_out=a_out))
            checkpoint.save_model(self.path(dst), merged, vocab_hash=new_hash)

    def _stage_finetune(self) -> None:
        merged, _ = checkpoint.load_model(self.path("merged.ckpt"))
        new_tok = tok_mod.load_vocab(self.path("vocab_new.json"))
        p = self.cfg.stage_params("finetune")
        batches = self._train_batches("finetune", new_tok)
        tuned, logs = adapter_mod.finetune_full(
            merged, batches, int(p["steps"]), self.cfg.optimizer_for("finetune")
        )
        checkpoint.save_model(
            self.path("finetuned.ckpt"),
            tuned,
            vocab_hash=sha256_file(self.path("vocab_new.json")),
        )
        self._write_jsonl("finetune_log.jsonl", logs)

    def _stage_eval_frag(self) -> None:
        old = tok_mod.load_vocab(self.path("vocab_old.json"))
        new = tok_mod.load_vocab(self.path("vocab_new.json"))
        langs = self.cfg.raw.get("eval", {}).get(
            "frag_languages", self.cfg.raw["vocab"]["new_languages"]
        )
        docs = self._heldout_docs(langs)
        report = evalmetrics.fragmentation_report({"old": old, "new": new}, docs, baseline="old")
        self.path("frag_report.json").write_text(
            json.dumps(report, indent=2, sort_keys=True), encoding="utf-8"
        )

    def _stage_eval_bpb(self) -> None:
        old = tok_mod.load_vocab(self.path("vocab_old.json"))
        new = tok_mod.load_vocab(self.path("vocab_new.json"))
        langs = self.cfg.raw.get("eval", {}).get(
            "bpb_languages", self.cfg.raw["vocab"]["new_languages"]
        )
        docs = self._heldout_docs(langs)
        models = {
            "base": (checkpoint.load_model(self.path("base.ckpt"))[0], old),
            "merged_init": (checkpoint.load_model(self.path("merged_init.ckpt"))[0], new),
            "merged": (checkpoint.load_model(self.path("merged.ckpt"))[0], new),
            "finetuned": (checkpoint.load_model(self.path("finetuned.ckpt"))[0], new),
        }
        report = evalmetrics.quality_report(models, docs)
        self.path("bpb_report.json").write_text(
            json.dumps(report, indent=2, sort_keys=True), encoding="utf-8"
        )

    def _stage_report(self) -> None:
        frag = json.loads(self.path("frag_report.json").read_text(encoding="utf-8"))
        bpb = json.loads(self.path("bpb_report.json").read_text(encoding="utf-8"))
        init = json.loads(self.path("init_report.json").read_text(encoding="utf-8"))
        vocab = self.cfg.raw["vocab"]
        flops = {
            name: evalmetrics.estimate_flops_per_token(self.cfg.model_config(size))
            for name, size in (("old_vocab", vocab["old_size"]), ("new_vocab", vocab["new_size"]))
        }
        report = {
            "config_hash": self.cfg.config_hash,
            "seed": self.cfg.seed,
            "fragmentation": frag,
            "quality": bpb,
            "initialization": init,
            "flops_per_token": flops,
            "flops_formula": evalmetrics.FLOPS_FORMULA,
            "artifact_hashes": self._hash_artifacts(sorted(set(ARTIFACTS) - {"report.json"})),
        }
        evalmetrics.emit_report(report, self.path("report"), fmt="both")

    def _write_jsonl(self, name: str, rows: list[dict]) -> None:
        with self.path(name).open("w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")


def save_adapters(
    path: Path, a_in: vocabmap.AdapterMatrix, a_out: vocabmap.AdapterMatrix, extra: dict | None = None
) -> None:
    """Adapter checkpoint: both matrices, the shared init snapshot, overlap ids."""
    if not np.array_equal(a_in.overlap_ids, a_out.overlap_ids):
        raise ValidationError("input/output adapters disagree on overlap ids")
    tensors = {
        "adapter.in": a_in.values,
        "adapter.out": a_out.values,
        "adapter.in.init_overlap": a_in.init_overlap_rows,
        "adapter.out.init_overlap": a_out.init_overlap_rows,
        "adapter.overlap_ids": a_in.overlap_ids.astype(np.uint32),
    }
    trailer = {"kind": "adapters", "n_new": int(a_in.n_new), "n_old": int(a_in.n_old)}
    if extra:
        trailer.update(extra)
    checkpoint.save_tensors(path, tensors, trailer)


def load_adapters(path: Path) -> tuple[vocabmap.AdapterMatrix, vocabmap.AdapterMatrix, dict]:
    tensors, trailer = checkpoint.load_tensors(path)
    if trailer.get("kind") != "adapters":
        raise ValidationError(f"{path} is not an adapter checkpoint")
    try:
        ids = tensors["adapter.overlap_ids"].astype(np.int64)
        a_in = vocabmap.AdapterMatrix(
            values=tensors["adapter.in"],
            overlap_ids=ids,
            init_overlap_rows=tensors["adapter.in.init_overlap"],
        )
        a_out = vocabmap.AdapterMatrix(
            values=tensors["adapter.out"],
            overlap_ids=ids.copy(),
            init_overlap_rows=tensors["adapter.out.init_overlap"],
        )
    except KeyError as exc:
        raise ValidationError(f"adapter checkpoint {path} lacks tensor {exc}")
    return a_in, a_out, trailer
