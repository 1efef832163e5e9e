"""
Command implementations behind run.py: corpus generation and FUNSD import,
MLM pretraining, BIOES fine-tuning, evaluation, the four-way fine-tuning and
pretraining ablations and the oracle suite.

Every command takes a RunConfig, writes its outputs plus manifest.json into
config.out_dir and returns a small summary dict (or the scores) for callers
and tests. Randomness comes from the run seed only: parameter init draws
from default_rng([seed, INIT_STREAM]), and training step t draws from
utils.step_rng(seed, t, stream).
"""

import dataclasses
import glob
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

import autodiff as ad
import derivation_oracles as oracles
import rich_attention as ra
from autodiff import Adam, ParameterStore, Tensor
from config_helpers import RunConfig, model_config, write_manifest
from data_service import (
    PreparedDoc,
    check_schema,
    load_split,
    open_vocabulary,
    prepare_corpus,
    prepare_document,
)
from decoder_metrics import (
    EntityScores,
    LabelSchema,
    bioes_decode,
    bioes_encode,
    brute_force_decode,
    corpus_prf,
    viterbi,
    write_prf_report,
)
from doc_model import BoundingBox, Document, EntitySpan, Token, Vocabulary, read_funsd, write_corpus
from errors import ConfigError, InvalidInputError, OracleFailure
from etc_backbone import BackboneConfig, forward_details, init_model
from graph_builder import beta_skeleton_edges, brute_force_skeleton_edges, connected_components, dump_graph
from reports import write_ablation_chart, write_layout_graph, write_loss_curve, write_pretrain_ablation_chart
from supertoken_gcn import encode_supertokens
from synth_corpus import GenConfig, generate_corpus, label_distribution, generate_layout, split_rate
from utils import mean_spread, merge_counts, sample_batch, step_rng, token_accuracy, warmup_lr

logger = logging.getLogger(__name__)

INIT_STREAM = 7
PRETRAIN_STREAM = 1
FINETUNE_STREAM = 2
CHECKPOINT_DIR = "checkpoints"

# name, use_rich_attention, use_gcn
VARIANTS: Tuple[Tuple[str, bool, bool], ...] = (
    ("baseline", False, False),
    ("+rich_attention", True, False),
    ("+gcn", False, True),
    ("+both", True, True),
)


def _progress(iterable, **kwargs):
    return tqdm(iterable, disable=not sys.stderr.isatty(), leave=False, **kwargs)


def _checkpoint_prefix(out_dir: str, name: str) -> str:
    return os.path.join(out_dir, CHECKPOINT_DIR, name)


def _meta_bool(meta: Dict[str, str], key: str, default: bool) -> bool:
    value = meta.get(key)
    return default if value is None else value.strip().lower() == "true"


# ---------------------------------------------------------------------------
# Model construction and checkpoints
# ---------------------------------------------------------------------------
def new_model(bconfig: BackboneConfig, seed: int) -> ParameterStore:
    store = ParameterStore()
    init_model(store, bconfig, np.random.default_rng([int(seed), INIT_STREAM]))
    return store


def save_training_checkpoint(
    prefix: str, store: ParameterStore, optimizer: Adam, bconfig: BackboneConfig, kind: str, **extra: Any
) -> str:
    arrays = dict(store.state_dict())
    arrays.update(optimizer.state_arrays())
    meta = {
        "kind": kind,
        "step": optimizer.step_count,
        "vocab_size": bconfig.vocab_size,
        "num_tags": bconfig.num_tags,
        "hidden_dim": bconfig.hidden_dim,
        "num_layers": bconfig.num_layers,
        "use_gcn": bconfig.use_gcn,
        "use_rich_attention": bconfig.use_rich_attention,
    }
    meta.update(extra)
    return ad.save_checkpoint(prefix, arrays, meta)


# ---------------------------------------------------------------------------
# Objectives
# ---------------------------------------------------------------------------
@dataclass
class MaskedInput:
    ids: np.ndarray  # model input ids, document order
    targets: np.ndarray  # original ids, serialized order
    weights: np.ndarray  # 1 at selected positions, serialized order
    selected: int


def mask_tokens(prepared: PreparedDoc, vocab: Vocabulary, mask_rate: float, rng: np.random.Generator) -> MaskedInput:
    """
    Select ``mask_rate`` of the tokens (at least one when the rate is positive);
    80% of them become the mask id, 10% a random regular id and 10% stay as they are.
    """
    original = np.asarray(prepared.doc.vocab_ids, dtype=np.int64)
    n = len(original)
    ids = original.copy()
    count = 0 if mask_rate <= 0.0 else min(n, max(1, int(round(mask_rate * n))))
    picked = rng.choice(n, size=count, replace=False) if count else np.zeros(0, dtype=np.int64)
    mask_id = vocab.require_mask()
    regular = vocab.regular_ids
    for i in picked:
        r = rng.random()
        if r < 0.8:
            ids[i] = mask_id
        elif r < 0.9:
            ids[i] = regular[int(rng.integers(len(regular)))]
    weights = np.zeros(n)
    weights[picked] = 1.0
    order = prepared.order
    return MaskedInput(ids=ids, targets=original[order], weights=weights[order], selected=count)


def mlm_loss(prepared: PreparedDoc, store: ParameterStore, bconfig: BackboneConfig, masked: MaskedInput) -> Tensor:
    result = forward_details(prepared.doc, prepared.graph, store, bconfig, mode="mlm", ids=masked.ids)
    return ad.cross_entropy_with_logits(result.logits, masked.targets, masked.weights)


def tagging_loss(
    prepared: PreparedDoc, store: ParameterStore, bconfig: BackboneConfig, distance_fn: ra.DistanceFn = ra.distance_score
) -> Tensor:
    if prepared.tags is None:
        raise ConfigError(f"document {prepared.doc.doc_id or '?'} was prepared without a label schema")
    result = forward_details(prepared.doc, prepared.graph, store, bconfig, mode="tagging", distance_fn=distance_fn)
    return ad.cross_entropy_with_logits(result.logits, prepared.tags)


def predict_tags(prepared: PreparedDoc, store: ParameterStore, bconfig: BackboneConfig, schema: LabelSchema) -> List[int]:
    result = forward_details(prepared.doc, prepared.graph, store, bconfig, mode="tagging")
    return viterbi(result.logits.values, schema)


def predict_spans(prepared: PreparedDoc, store: ParameterStore, bconfig: BackboneConfig, schema: LabelSchema) -> List[EntitySpan]:
    return bioes_decode(predict_tags(prepared, store, bconfig, schema), schema)


def evaluate_prepared(
    prepared: Sequence[PreparedDoc],
    store: ParameterStore,
    bconfig: BackboneConfig,
    schema: LabelSchema,
    workers: int = 1,
) -> EntityScores:
    """Forward, Viterbi and exact-match scoring; documents run in parallel, results merge in corpus order."""
    if workers > 1 and len(prepared) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            predictions = list(pool.map(lambda p: predict_spans(p, store, bconfig, schema), prepared))
    else:
        predictions = [predict_spans(p, store, bconfig, schema) for p in prepared]
    return corpus_prf(predictions, [p.gold for p in prepared])


def train_token_accuracy(
    prepared: Sequence[PreparedDoc], store: ParameterStore, bconfig: BackboneConfig, schema: LabelSchema
) -> float:
    correct, total = 0, 0
    for p in prepared:
        c, t = token_accuracy(predict_tags(p, store, bconfig, schema), p.tags.tolist())
        correct += c
        total += t
    return correct / total if total else 1.0


# ---------------------------------------------------------------------------
# Corpus commands
# ---------------------------------------------------------------------------
def gen_config(config: RunConfig) -> GenConfig:
    return GenConfig(
        n_docs=config.n_docs,
        entity_types=config.entity_types,
        columns=config.columns,
        rows_per_column=config.rows_per_column,
        interleave_prob=config.interleave_prob,
        seed=config.seed,
        vocab_path=config.vocab_path,
    )


def cmd_gen_corpus(config: RunConfig) -> Dict[str, Any]:
    gen = gen_config(config)
    vocab = open_vocabulary(config.vocab_path, config.lowercase_vocab)
    paths = generate_corpus(gen, config.corpus_dir, vocab)
    sample = [generate_layout(gen, seed, vocab) for seed in range(config.seed, config.seed + min(gen.n_docs, 50))]
    stats = label_distribution([layout.doc for layout in sample])
    stats.to_csv(os.path.join(config.corpus_dir, "label_distribution.csv"), index=False)
    rate = split_rate(sample)
    logger.info("Entities broken by serialization in %.0f%% of sampled documents", 100 * rate)
    if config.dump_graphs and sample:
        prepared = prepare_document(sample[0].doc, max_neighbors=config.max_neighbors)
        dump_graph(prepared.graph, os.path.join(config.corpus_dir, "graphs"), prepared.doc.doc_id)
        if config.plots:
            write_layout_graph(prepared.doc, prepared.graph, os.path.join(config.corpus_dir, "graphs", f"{prepared.doc.doc_id}.html"))
    write_manifest(config.corpus_dir, "gen-corpus", config, {"files": paths, "split_rate": rate})
    return {"paths": paths, "split_rate": rate}


def funsd_files(source: str) -> List[str]:
    """Annotation JSON files under ``source`` (or its annotations/ subdirectory), sorted."""
    if os.path.isfile(source):
        return [source]
    folder = os.path.join(source, "annotations") if os.path.isdir(os.path.join(source, "annotations")) else source
    files = sorted(glob.glob(os.path.join(folder, "*.json")))
    if not files:
        raise ConfigError(f"no FUNSD annotation files under {source}")
    return files


def cmd_import_funsd(config: RunConfig, source: str, split: str = "train", limit: Optional[int] = None) -> Dict[str, Any]:
    vocab = open_vocabulary(config.vocab_path, config.lowercase_vocab)
    files = funsd_files(source)[: limit or None]
    docs, reports = [], []
    for path in _progress(files, desc="funsd"):
        doc, report = read_funsd(path, vocab)
        if not len(doc):
            logger.warning("%s has no words; skipped", path)
            continue
        docs.append(doc)
        reports.append(report)
    out_path = os.path.join(config.corpus_dir, f"{split}.jsonl")
    write_corpus(out_path, docs)
    frame = pd.DataFrame([r.as_dict() for r in reports])
    if not frame.empty:
        frame["labels"] = frame["labels"].apply(lambda d: ";".join(f"{k}={v}" for k, v in sorted(d.items())))
    frame.to_csv(os.path.join(config.corpus_dir, f"{split}_load_report.csv"), index=False)
    labels = merge_counts([r.label_counts for r in reports])
    logger.info("Imported %d FUNSD documents with %d label classes: %s", len(docs), len(labels), labels)
    write_manifest(config.corpus_dir, "import-funsd", config, {"source": source, "split": split, "labels": labels})
    return {"path": out_path, "documents": len(docs), "labels": labels}


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------
def _mean_head(values: Sequence[float], k: int = 10) -> float:
    return float(np.mean(values[:k])) if len(values) else float("nan")


def _mean_tail(values: Sequence[float], k: int = 10) -> float:
    return float(np.mean(values[-k:])) if len(values) else float("nan")


def cmd_pretrain(config: RunConfig) -> Dict[str, Any]:
    vocab = open_vocabulary(config.vocab_path, config.lowercase_vocab)
    vocab.require_mask()
    docs = load_split(config.corpus_dir, "train", vocab)
    if not docs:
        raise ConfigError(f"training corpus in {config.corpus_dir} is empty")
    prepared = prepare_corpus(docs, None, config.max_neighbors)
    bconfig = model_config(config, len(vocab))
    store = new_model(bconfig, config.seed)
    optimizer = Adam(store, lr=config.pretrain_learning_rate)
    logger.info("Pretraining %d parameters (%d values) for %d steps", len(store), store.num_values(), config.pretrain_steps)

    rows = []
    for step in _progress(range(config.pretrain_steps), desc="pretrain"):
        rng = step_rng(config.seed, step, PRETRAIN_STREAM)
        batch = sample_batch(rng, len(prepared), config.pretrain_batch_size)
        store.zero_grad()
        total = 0.0
        for i in batch:
            masked = mask_tokens(prepared[i], vocab, config.mask_rate, rng)
            loss = mlm_loss(prepared[i], store, bconfig, masked)
            ad.backprop(loss * (1.0 / len(batch)))
            total += loss.item()
        lr = warmup_lr(step, config.pretrain_steps, config.pretrain_learning_rate, config.warmup_proportion)
        optimizer.step(lr)
        rows.append({"step": step, "loss": total / len(batch), "lr": lr})
        if step % 50 == 0:
            logger.debug("pretrain step %d loss %.4f", step, rows[-1]["loss"])

    os.makedirs(config.out_dir, exist_ok=True)
    log = pd.DataFrame(rows, columns=["step", "loss", "lr"])
    log_path = os.path.join(config.out_dir, "pretrain_loss.csv")
    log.to_csv(log_path, index=False, float_format="%.8f")
    prefix = save_training_checkpoint(_checkpoint_prefix(config.out_dir, "pretrain"), store, optimizer, bconfig, "pretrain")
    if config.plots:
        write_loss_curve(log, os.path.join(config.out_dir, "pretrain_loss.html"), "MLM pretraining loss")
    summary = {
        "checkpoint": prefix,
        "loss_log": log_path,
        "initial_loss": _mean_head(log["loss"].tolist()),
        "final_loss": _mean_tail(log["loss"].tolist()),
    }
    write_manifest(config.out_dir, "pretrain", config, summary)
    logger.info("Pretraining done: loss %.4f -> %.4f", summary["initial_loss"], summary["final_loss"])
    return summary


def cmd_finetune(config: RunConfig, init_checkpoint: Optional[str] = None, resume: bool = False) -> Dict[str, Any]:
    """
    Token-level BIOES cross-entropy, no warm-up. Evaluates on dev every
    ``eval_every`` steps and keeps the best-dev checkpoint; ``last`` always holds
    the newest parameters and optimizer state so a run can be resumed.
    """
    vocab = open_vocabulary(config.vocab_path, config.lowercase_vocab)
    schema = LabelSchema(config.entity_types)
    train_docs = load_split(config.corpus_dir, "train", vocab)
    if not train_docs:
        raise ConfigError(f"training corpus in {config.corpus_dir} is empty")
    dev_docs = load_split(config.corpus_dir, "dev", vocab, required=False)
    check_schema(list(train_docs) + list(dev_docs), schema)
    train = prepare_corpus(train_docs, schema, config.max_neighbors)
    dev = prepare_corpus(dev_docs, schema, config.max_neighbors)

    bconfig = model_config(config, len(vocab), schema.num_tags)
    store = new_model(bconfig, config.seed)
    optimizer = Adam(store, lr=config.learning_rate)
    last_prefix = _checkpoint_prefix(config.out_dir, "last")
    best_prefix = _checkpoint_prefix(config.out_dir, "best")
    log_path = os.path.join(config.out_dir, "finetune_loss.csv")
    rows: List[Dict[str, Any]] = []
    best_f1 = -1.0
    start = 0

    if resume and os.path.isfile(last_prefix + ad.MANIFEST_SUFFIX):
        arrays, meta = ad.load_checkpoint(last_prefix)
        store.load_state(arrays)
        start = int(meta.get("step", 0))
        optimizer.load_state_arrays(arrays, start)
        best_f1 = float(meta.get("best_dev_f1", -1.0))
        if os.path.isfile(log_path):
            rows = pd.read_csv(log_path).to_dict("records")
            rows = [r for r in rows if r["step"] < start]
        logger.info("Resumed fine-tuning at step %d", start)
    elif init_checkpoint:
        arrays, _ = ad.load_checkpoint(init_checkpoint)
        loaded = store.load_state(arrays, skip_prefixes=("etc/tagger",))
        logger.info("Initialized %d parameters from %s", len(loaded), init_checkpoint)
    else:
        logger.info("Training from scratch without pretraining")

    for step in _progress(range(start, config.steps), desc="finetune"):
        rng = step_rng(config.seed, step, FINETUNE_STREAM)
        batch = sample_batch(rng, len(train), config.batch_size)
        store.zero_grad()
        total = 0.0
        for i in batch:
            loss = tagging_loss(train[i], store, bconfig)
            ad.backprop(loss * (1.0 / len(batch)))
            total += loss.item()
        optimizer.step(config.learning_rate)
        row: Dict[str, Any] = {"step": step, "loss": total / len(batch), "dev_f1": np.nan}
        done = step + 1
        if dev and (done % config.eval_every == 0 or done == config.steps):
            scores = evaluate_prepared(dev, store, bconfig, schema, config.workers)
            row["dev_f1"] = scores.micro.f1
            logger.info("step %d: loss %.4f, dev F1 %.4f", done, row["loss"], scores.micro.f1)
            if scores.micro.f1 > best_f1:
                best_f1 = scores.micro.f1
                save_training_checkpoint(best_prefix, store, optimizer, bconfig, "finetune", best_dev_f1=best_f1)
            save_training_checkpoint(last_prefix, store, optimizer, bconfig, "finetune", best_dev_f1=best_f1)
        rows.append(row)

    save_training_checkpoint(last_prefix, store, optimizer, bconfig, "finetune", best_dev_f1=best_f1)
    if not dev:
        # no dev split: the newest parameters are the best we know of
        save_training_checkpoint(best_prefix, store, optimizer, bconfig, "finetune", best_dev_f1=best_f1)
    log = pd.DataFrame(rows, columns=["step", "loss", "dev_f1"])
    log.to_csv(log_path, index=False, float_format="%.8f")
    if config.plots:
        write_loss_curve(log, os.path.join(config.out_dir, "finetune_loss.html"), "Fine-tuning loss")
    summary = {
        "best_checkpoint": best_prefix,
        "last_checkpoint": last_prefix,
        "loss_log": log_path,
        "best_dev_f1": best_f1 if dev else None,
        "train_token_accuracy": train_token_accuracy(train, store, bconfig, schema),
        "losses": log["loss"].tolist(),
    }
    write_manifest(config.out_dir, "finetune", config, {k: v for k, v in summary.items() if k != "losses"})
    logger.info("Fine-tuning done: train token accuracy %.4f", summary["train_token_accuracy"])
    return summary


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------
def load_for_eval(config: RunConfig, checkpoint: str, vocab: Vocabulary, schema: LabelSchema) -> Tuple[ParameterStore, BackboneConfig]:
    arrays, meta = ad.load_checkpoint(checkpoint)
    if "num_tags" in meta and int(meta["num_tags"]) != schema.num_tags:
        raise ConfigError(
            f"checkpoint {checkpoint} has {meta['num_tags']} tags; entity types {schema.entity_types} need {schema.num_tags}"
        )
    bconfig = model_config(
        config,
        len(vocab),
        schema.num_tags,
        use_gcn=_meta_bool(meta, "use_gcn", config.use_gcn),
        use_rich_attention=_meta_bool(meta, "use_rich_attention", config.use_rich_attention),
    )
    store = new_model(bconfig, config.seed)
    store.load_state(arrays)
    return store, bconfig


def _dump_scores(prepared: PreparedDoc, store: ParameterStore, bconfig: BackboneConfig, out_dir: str) -> None:
    """Layer-0 penalty matrices of every head for one document."""
    if not bconfig.use_rich_attention:
        return
    result = forward_details(prepared.doc, prepared.graph, store, bconfig, mode="tagging")
    states = ad.concat([store["etc/global"], result.inputs], axis=0)
    for head in range(bconfig.num_heads):
        p = f"etc/layer0/head{head}"
        params = ra.gather_head_params(
            store, (store[f"{p}/query/w"], store[f"{p}/query/b"]), (store[f"{p}/key/w"], store[f"{p}/key/b"]), 0, head
        )
        terms = ra.score_terms(states, result.features, params, bconfig.num_global)
        ra.dump_score_terms(terms, out_dir, f"{prepared.doc.doc_id or 'doc'}_head{head}")


def cmd_eval(
    config: RunConfig, checkpoint: Optional[str] = None, split: str = "test", gold_as_predictions: bool = False
) -> EntityScores:
    vocab = open_vocabulary(config.vocab_path, config.lowercase_vocab)
    schema = LabelSchema(config.entity_types)
    docs = load_split(config.corpus_dir, split, vocab)
    if not docs:
        raise InvalidInputError(f"{split} corpus in {config.corpus_dir} is empty; nothing to evaluate")
    check_schema(docs, schema)
    prepared = prepare_corpus(docs, schema, config.max_neighbors)

    if gold_as_predictions:
        logger.warning("Scoring gold labels as predictions")
        scores = corpus_prf([p.gold for p in prepared], [p.gold for p in prepared])
    else:
        if not checkpoint:
            raise ConfigError("eval needs --checkpoint")
        store, bconfig = load_for_eval(config, checkpoint, vocab, schema)
        scores = evaluate_prepared(prepared, store, bconfig, schema, config.workers)
        if config.dump_scores:
            _dump_scores(prepared[0], store, bconfig, os.path.join(config.out_dir, "scores"))
        if config.dump_graphs:
            dump_graph(prepared[0].graph, os.path.join(config.out_dir, "graphs"), prepared[0].doc.doc_id or "doc")

    report = write_prf_report(scores, os.path.join(config.out_dir, f"eval_{split}.csv"))
    write_manifest(
        config.out_dir,
        "eval",
        config,
        {"checkpoint": checkpoint, "split": split, "report": report, "micro_f1": scores.micro.f1},
    )
    return scores


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------
ABLATION_COLUMNS = ["variant", "seed", "precision", "recall", "f1", "f1_std"]


def cmd_ablate(config: RunConfig) -> pd.DataFrame:
    """Fine-tune and evaluate every variant from scratch for each seed; one row per run plus one mean row per variant."""
    rows = []
    for name, use_rich, use_gcn in VARIANTS:
        f1s = []
        per_seed = []
        for seed in config.ablate_seeds:
            run = dataclasses.replace(
                config,
                seed=seed,
                use_rich_attention=use_rich,
                use_gcn=use_gcn,
                out_dir=os.path.join(config.out_dir, "ablate", name.lstrip("+"), f"seed{seed}"),
                plots=False,
            )
            logger.info("Ablation %s, seed %d", name, seed)
            trained = cmd_finetune(run)
            scores = cmd_eval(run, trained["best_checkpoint"], split="test")
            m = scores.micro
            per_seed.append((m.precision, m.recall, m.f1))
            f1s.append(m.f1)
            rows.append({"variant": name, "seed": str(seed), "precision": m.precision, "recall": m.recall, "f1": m.f1, "f1_std": np.nan})
        mean_f1, spread = mean_spread(f1s)
        rows.append(
            {
                "variant": name,
                "seed": "mean",
                "precision": float(np.mean([p for p, _, _ in per_seed])),
                "recall": float(np.mean([r for _, r, _ in per_seed])),
                "f1": mean_f1,
                "f1_std": spread,
            }
        )
    table = pd.DataFrame(rows, columns=ABLATION_COLUMNS)
    os.makedirs(config.out_dir, exist_ok=True)
    table.to_csv(os.path.join(config.out_dir, "ablation.csv"), index=False, float_format="%.6f")
    if config.plots:
        write_ablation_chart(table, os.path.join(config.out_dir, "ablation.html"))
    write_manifest(config.out_dir, "ablate", config, {"variants": [v[0] for v in VARIANTS]})
    logger.info("Ablation results:\n%s", table[table["seed"] == "mean"].to_string(index=False))
    return table


PRETRAIN_ABLATION_COLUMNS = ["variant", "seed", "initial_loss", "final_loss", "final_loss_std"]
PRETRAIN_CURVE_COLUMNS = ["variant", "seed", "step", "loss", "loss_std"]


def cmd_ablate_pretrain(config: RunConfig) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """
    MLM-pretrain every variant from scratch for each seed and compare the
    masked-token loss curves. Runs of one seed see the same batches and masks.

    Returns (summary, curves): the summary has one row per run plus a mean row
    per variant; the curves are long-format step losses with a per-step mean.
    """
    rows, curve_frames = [], []
    for name, use_rich, use_gcn in VARIANTS:
        finals, starts, logs = [], [], []
        for seed in config.ablate_seeds:
            run = dataclasses.replace(
                config,
                seed=seed,
                use_rich_attention=use_rich,
                use_gcn=use_gcn,
                out_dir=os.path.join(config.out_dir, "ablate_pretrain", name.lstrip("+"), f"seed{seed}"),
                plots=False,
            )
            logger.info("Pretraining ablation %s, seed %d", name, seed)
            summary = cmd_pretrain(run)
            log = pd.read_csv(summary["loss_log"])[["step", "loss"]]
            logs.append(log)
            starts.append(summary["initial_loss"])
            finals.append(summary["final_loss"])
            rows.append(
                {
                    "variant": name,
                    "seed": str(seed),
                    "initial_loss": summary["initial_loss"],
                    "final_loss": summary["final_loss"],
                    "final_loss_std": np.nan,
                }
            )
            curve_frames.append(log.assign(variant=name, seed=str(seed), loss_std=np.nan))
        mean_final, spread = mean_spread(finals)
        rows.append(
            {
                "variant": name,
                "seed": "mean",
                "initial_loss": float(np.mean(starts)),
                "final_loss": mean_final,
                "final_loss_std": spread,
            }
        )
        stacked = pd.concat(logs)
        per_step = stacked.groupby("step", sort=True)["loss"].agg(["mean", "std"]).reset_index()
        curve_frames.append(
            pd.DataFrame(
                {
                    "variant": name,
                    "seed": "mean",
                    "step": per_step["step"],
                    "loss": per_step["mean"],
                    "loss_std": per_step["std"].fillna(0.0),
                }
            )
        )

    table = pd.DataFrame(rows, columns=PRETRAIN_ABLATION_COLUMNS)
    curves = pd.concat(curve_frames, ignore_index=True)[PRETRAIN_CURVE_COLUMNS]
    os.makedirs(config.out_dir, exist_ok=True)
    table.to_csv(os.path.join(config.out_dir, "pretrain_ablation.csv"), index=False, float_format="%.6f")
    curves.to_csv(os.path.join(config.out_dir, "pretrain_ablation_curves.csv"), index=False, float_format="%.8f")
    if config.plots:
        write_pretrain_ablation_chart(curves, os.path.join(config.out_dir, "pretrain_ablation.html"))
    write_manifest(config.out_dir, "ablate-pretrain", config, {"variants": [v[0] for v in VARIANTS]})
    logger.info("Pretraining ablation:\n%s", table[table["seed"] == "mean"].to_string(index=False))
    return table, curves


# ---------------------------------------------------------------------------
# Oracle suite
# ---------------------------------------------------------------------------
BUGS = ("negate-distance",)


def negated_distance_score(d, mu, theta):
    """Wrong-sign distance penalty; negative control for the oracle suite."""
    return -ra.distance_score(d, mu, theta)


def skeleton_mismatches(rng: np.random.Generator, trials: int = 20, n: int = 50) -> int:
    mismatched = 0
    for _ in range(trials):
        points = rng.random((n, 2))
        mismatched += len(beta_skeleton_edges(points) ^ brute_force_skeleton_edges(points))
    return mismatched


def disconnected_skeletons(rng: np.random.Generator, trials: int = 100) -> int:
    failures = 0
    for _ in range(trials):
        n = int(rng.integers(2, 61))
        points = rng.random((n, 2))
        if len(set(connected_components(n, beta_skeleton_edges(points)))) != 1:
            failures += 1
    return failures


def viterbi_mismatches(rng: np.random.Generator, trials: int = 200, max_len: int = 6) -> int:
    """Half the trials use small integer scores so ties are common."""
    schema = LabelSchema(["a", "b"])
    mismatched = 0
    for t in range(trials):
        n = int(rng.integers(1, max_len + 1))
        if t % 2:
            logits = rng.integers(-1, 2, size=(n, schema.num_tags)).astype(np.float64)
        else:
            logits = rng.standard_normal((n, schema.num_tags))
        if viterbi(logits, schema) != brute_force_decode(logits, schema):
            mismatched += 1
    return mismatched


def random_spans(rng: np.random.Generator, n: int, types: Sequence[str]) -> List[EntitySpan]:
    spans, i = [], 0
    while i < n:
        if rng.random() < 0.4:
            length = int(rng.integers(1, min(4, n - i) + 1))
            spans.append(EntitySpan(types[int(rng.integers(len(types)))], i, i + length - 1))
            i += length
        else:
            i += 1
    return spans


def bioes_roundtrip_failures(rng: np.random.Generator, trials: int = 1000) -> int:
    schema = LabelSchema(["header", "question", "answer"])
    failures = 0
    for _ in range(trials):
        n = int(rng.integers(0, 13))
        spans = random_spans(rng, n, schema.entity_types)
        if bioes_decode(bioes_encode(spans, n, schema), schema) != spans:
            failures += 1
    return failures


def toy_document(vocab: Vocabulary, rng: np.random.Generator, n: int = 6) -> Document:
    """``n`` tokens on two lines at dyadic coordinates of a unit page, in reading order."""
    words = [i for i in vocab.regular_ids if not vocab.piece(i).startswith("##")]
    tokens = []
    for i in range(n):
        line, slot = divmod(i, (n + 1) // 2)
        x0, y0 = 0.0625 + slot * 0.25, 0.125 + line * 0.25
        vocab_id = int(words[int(rng.integers(len(words)))])
        tokens.append(Token(vocab.piece(vocab_id), vocab_id, BoundingBox(x0, y0, x0 + 0.1875, y0 + 0.0625), i))
    spans = (EntitySpan("question", 0, 1), EntitySpan("answer", 2, 2))
    return Document(tuple(tokens), 1.0, 1.0, gold_spans=spans, doc_id="toy")


def model_grad_error(vocab: Vocabulary, seed: int, distance_fn: ra.DistanceFn = ra.distance_score) -> float:
    """Max relative error of backprop against central differences on the desk model (hidden 16, 2+2 layers)."""
    rng = np.random.default_rng([seed, INIT_STREAM])
    schema = LabelSchema(["question", "answer"])
    prepared = prepare_document(toy_document(vocab, rng), schema)
    config = RunConfig(hidden_dim=16, num_heads=2, gcn_hidden_dim=16, embed_dim=16, init_std=0.2)
    bconfig = model_config(config, len(vocab), schema.num_tags)
    store = new_model(bconfig, seed)
    return ad.grad_check(
        lambda s: tagging_loss(prepared, s, bconfig, distance_fn), store, max_coords=200, rng=np.random.default_rng(seed)
    )


def supertoken_permutation_deviation(vocab: Vocabulary, seed: int) -> float:
    rng = np.random.default_rng([seed, INIT_STREAM])
    doc = toy_document(vocab, rng)
    config = RunConfig(gcn_hidden_dim=16, embed_dim=16, init_std=0.2)
    bconfig = model_config(config, len(vocab))
    store = new_model(bconfig, seed)
    base = prepare_document(doc)
    perm = [int(i) for i in rng.permutation(len(doc))]
    shuffled = prepare_document(dataclasses.replace(doc, tokens=tuple(doc.tokens[i] for i in perm), gold_spans=()))
    a = encode_supertokens(base.doc, base.graph, bconfig.gcn, store).values
    b = encode_supertokens(shuffled.doc, shuffled.graph, bconfig.gcn, store).values
    return float(np.abs(a - b).max())


def rich_translation_deviation(vocab: Vocabulary, seed: int) -> float:
    """Rich Attention scores before and after shifting every box by a dyadic offset."""
    rng = np.random.default_rng([seed, INIT_STREAM])
    doc = toy_document(vocab, rng)
    shifted = [dataclasses.replace(t, box=t.box.translated(0.125, 0.25)) for t in doc.tokens]
    store = ParameterStore()
    head_dim, hidden = 4, 8
    for role in ("query", "key"):
        store.create(f"head/{role}/w", (hidden, head_dim), rng, std=0.5)
        store.create(f"head/{role}/b", (head_dim,), rng, std=0.5)
    ra.init_head_params(store, 0, 0, head_dim, rng, std=0.5)
    head = ra.gather_head_params(
        store, (store["head/query/w"], store["head/query/b"]), (store["head/key/w"], store["head/key/b"]), 0, 0
    )
    states = ad.constant(rng.standard_normal((len(doc) + 1, hidden)))
    mask = np.ones((len(doc) + 1, len(doc) + 1), dtype=bool)
    a = ra.rich_scores(states, ra.pair_features(doc.tokens), mask, head).values
    b = ra.rich_scores(states, ra.pair_features(shifted), mask, head).values
    return float(np.abs(a - b).max())


def run_oracle_suite(config: RunConfig, inject_bug: Optional[str] = None) -> List[oracles.OracleResult]:
    if inject_bug and inject_bug not in BUGS:
        raise ConfigError(f"unknown bug {inject_bug!r}; known: {', '.join(BUGS)}")
    distance_fn: Callable = negated_distance_score if inject_bug == "negate-distance" else ra.distance_score
    seed = config.seed
    results = oracles.run_all(seed, distance_fn)
    rng = np.random.default_rng([seed, 11])
    vocab = open_vocabulary(config.vocab_path, config.lowercase_vocab)
    results += [
        oracles.OracleResult("beta_skeleton_vs_brute_force", 0.5, skeleton_mismatches(rng)),
        oracles.OracleResult("gabriel_connectivity", 0.5, disconnected_skeletons(rng)),
        oracles.OracleResult("viterbi_vs_enumeration", 0.5, viterbi_mismatches(rng)),
        oracles.OracleResult("bioes_roundtrip", 0.5, bioes_roundtrip_failures(rng)),
        oracles.OracleResult("model_gradients", 1e-4, model_grad_error(vocab, seed, distance_fn)),
        oracles.OracleResult("supertoken_permutation", 1e-9, supertoken_permutation_deviation(vocab, seed)),
        oracles.OracleResult("rich_attention_translation", 1e-12, rich_translation_deviation(vocab, seed)),
    ]
    return results


def cmd_oracles(config: RunConfig, inject_bug: Optional[str] = None) -> List[oracles.OracleResult]:
    """Run every check, write oracles.csv, raise OracleFailure listing the failed checks."""
    results = run_oracle_suite(config, inject_bug)
    frame = oracles.results_frame(results)
    os.makedirs(config.out_dir, exist_ok=True)
    path = os.path.join(config.out_dir, "oracles.csv")
    frame.to_csv(path, index=False)
    logger.info("Oracle report (%s):\n%s", path, oracles.oracle_table(results))
    write_manifest(config.out_dir, "oracles", config, {"inject_bug": inject_bug, "report": path})
    failed = [f"{r.name} ({r.deviation:.3e})" for r in results if not r.passed]
    if failed:
        raise OracleFailure(failed)
    return results
