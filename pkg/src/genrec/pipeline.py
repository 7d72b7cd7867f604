"""Commands composing the modules into an end-to-end run.

Every command reads and writes plain files under the configured data and
output directories so that steps can run in separate processes:

    data_dir/interactions.tsv, data_dir/emb_<modality>.bin   (synth or user supplied)
    out_dir/codec_<modality>.bin, out_dir/table_<modality>.tsv, out_dir/semantic_ids.tsv
    out_dir/model.ckpt, out_dir/log.jsonl
    out_dir/report_<subset>.txt|json, out_dir/shapley.txt|json
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import evalkit as ek
from . import rq
from . import sasrec as sr
from . import semantic_id as sid
from . import seq2seq as s2s
from . import ssl_quant as sq
from . import synth
from .config import Config
from .embeddings import read_embeddings
from .errors import CollisionOverflow, ConfigError, FormatError, IncompatibleCheckpoint, UnknownItem
from .trie import CodeTrie

MAX_ABLATION_MODALITIES = 6


class JsonlLog:
    """Appends one JSON object per line; also usable as a plain callback."""

    def __init__(self, path, command: str):
        self.path = Path(path)
        self.command = command
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def __call__(self, record: dict) -> None:
        with self.path.open("a") as fh:
            fh.write(json.dumps({"cmd": self.command, **record}, sort_keys=False) + "\n")


def _log(cfg: Config, command: str) -> JsonlLog:
    return JsonlLog(cfg.out_dir / "log.jsonl", command)


def _sub_seed(seed: int, name: str) -> int:
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(1)[0])


# ----------------------------------------------------------------------------
# synth


def synth_spec(cfg: Config) -> synth.SyntheticSpec:
    return synth.SyntheticSpec(
        n_items=cfg["synth.n_items"],
        branching=tuple(cfg["synth.branching"]),
        n_users=cfg["synth.n_users"],
        min_len=cfg["synth.min_len"],
        max_len=cfg["synth.max_len"],
        locality=cfg["synth.locality"],
        fanout=cfg["synth.fanout"],
        dim=cfg["synth.dim"],
        noise={m: cfg[f"synth.noise_{m}"] for m in ("image", "text", "collab")},
        seed=cfg.seed_for("synth"),
    )


def cmd_synth(cfg: Config) -> dict[str, Path]:
    return synth.write(synth.generate(synth_spec(cfg)), cfg.data_dir)


# ----------------------------------------------------------------------------
# data


def load_split(cfg: Config) -> ek.SplitDataset:
    records = ek.five_core_filter(ek.read_interactions(cfg.interactions))
    if not records:
        raise FormatError(f"{cfg.interactions}: no interactions survive 5-core filtering")
    return ek.leave_one_out_split(ek.user_sequences(records), cfg["train.max_history"], cfg["train.every_prefix"])


def _vectors_for(path: Path, items: Sequence[int]) -> np.ndarray:
    if not path.exists():
        raise FormatError(f"missing embedding file {path}")
    ids, vecs = read_embeddings(path)
    row = {int(i): r for r, i in enumerate(ids)}
    missing = [i for i in items if i not in row]
    if missing:
        raise FormatError(f"{path}: no vector for {len(missing)} items (first: {missing[0]})")
    return vecs[[row[i] for i in items]]


def _training_sequences(split: ek.SplitDataset) -> list[list[int]]:
    return [seq[:-2] for seq in split.sequences.values()]


# ----------------------------------------------------------------------------
# fit-codecs


def modality_spec(cfg: Config, name: str) -> sid.ModalitySpec:
    return sid.ModalitySpec(name, (cfg["rq.codebook_size"],) * cfg["rq.levels"] + (cfg["rq.collision_vocab"],))


def _collab_vectors(cfg: Config, split: ek.SplitDataset, items: list[int], log) -> np.ndarray:
    if cfg["collab.source"] == "file":
        return _vectors_for(cfg.embedding_file("collab"), items)
    scfg = sr.SasrecConfig(
        dim=cfg["sasrec.dim"], layers=cfg["sasrec.layers"], epochs=cfg["sasrec.epochs"],
        negatives=cfg["sasrec.negatives"], max_len=cfg["train.max_history"],
        seed=cfg.seed_for("sasrec"), dtype=cfg["model.dtype"],
    )
    model = sr.train_sasrec(_training_sequences(split), items, scfg, log=lambda r: log({"stage": "sasrec", **r}))
    table = model.table()
    path = cfg.out_dir / "emb_collab_sasrec.bin"
    sr.export_embeddings(table, path)
    return _vectors_for(path, items)


def fit_modality(cfg: Config, name: str, vectors: np.ndarray, log) -> tuple[rq.RqCodec, np.ndarray]:
    """Codec plus codes ``(n, L)`` for one modality's item vectors."""
    seed = _sub_seed(cfg.seed_for("codec"), name)
    L, K = cfg["rq.levels"], cfg["rq.codebook_size"]
    if name == "image" and cfg["image.source"] == "ssl":
        dcfg = sq.DistillConfig(levels=L, codebook_size=K, epochs=cfg["ssl.epochs"])
        state = sq.train_rq_dino(vectors, dcfg, seed=_sub_seed(cfg.seed_for("ssl"), name),
                                 log=lambda r: log({"stage": "ssl", **r}))
        codec = state.codec
        codec.collision_vocab = cfg["rq.collision_vocab"]
        vectors = state.embed(vectors)
    else:
        codec = rq.fit(vectors, L=L, K=K, seed=seed, collision_vocab=cfg["rq.collision_vocab"])
    # the checkpoint stores 32-bit entries; encode with exactly those
    codec = rq.round_to_storage(codec)
    codes, _ = codec.encode(vectors)
    return codec, codes


def cmd_fit_codecs(cfg: Config) -> dict[str, Path]:
    log = _log(cfg, "fit-codecs")
    split = load_split(cfg)
    items = split.items
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    full_codes: dict[str, dict[int, np.ndarray]] = {}
    paths = {}
    for name in cfg["modalities"]:
        vectors = _collab_vectors(cfg, split, items, log) if name == "collab" else _vectors_for(cfg.embedding_file(name), items)
        codec, codes = fit_modality(cfg, name, vectors, log)
        try:
            full = rq.assign_collision_levels(codec, {it: codes[r] for r, it in enumerate(items)})
        except CollisionOverflow as exc:
            raise CollisionOverflow(f"modality {name!r}: {exc}") from None
        full_codes[name] = full
        rq.save_codec(codec, out / f"codec_{name}.bin")
        single = sid.CodeTable.from_items(
            sid.build_layout([modality_spec(cfg, name)]),
            [sid.ItemCodes(it, {name: full[it]}) for it in items],
        )
        sid.write_table(single, out / f"table_{name}.tsv")
        paths[name] = out / f"table_{name}.tsv"
        log({"modality": name, "items": len(items), "max_ordinal": int(max(v[-1] for v in full.values()))})
    layout = sid.build_layout([modality_spec(cfg, m) for m in cfg["modalities"]])
    table = sid.CodeTable.from_items(
        layout, [sid.ItemCodes(it, {m: full_codes[m][it] for m in cfg["modalities"]}) for it in items]
    )
    sid.write_table(table, out / "semantic_ids.tsv")
    paths["semantic_ids"] = out / "semantic_ids.tsv"
    return paths


# ----------------------------------------------------------------------------
# train


@dataclass
class Workspace:
    """Everything evaluation and training need besides the model."""

    table: sid.CodeTable
    vocab: sid.TargetVocab
    trie: CodeTrie
    split: ek.SplitDataset

    def examples(self, pairs) -> list[s2s.Example]:
        return [s2s.Example(self.table.rows(h), self.table.row_of[t]) for h, t in pairs]


def _layout_signature(layout: sid.ModalityLayout) -> list:
    return [[m.name, list(m.level_sizes)] for m in layout.modalities]


def load_workspace(cfg: Config) -> Workspace:
    table = sid.read_table(cfg.out_dir / "semantic_ids.tsv")
    names = table.layout.names
    if names != list(cfg["modalities"]):
        table = table.restrict([m for m in cfg["modalities"]])
    target = cfg["target"]
    table.require_target(target)
    vocab = sid.target_vocab(table.layout, target)
    codes = table.target_codes(target)
    trie = CodeTrie.build({int(i): codes[r] for r, i in enumerate(table.item_ids)})
    return Workspace(table, vocab, trie, load_split(cfg))


def model_config(cfg: Config, ws: Workspace) -> s2s.ModelConfig:
    return s2s.ModelConfig(
        input_vocab=ws.table.layout.vocab_size,
        output_vocab=ws.vocab.size,
        codes_per_item=ws.table.layout.item_width,
        target_depth=ws.vocab.depth,
        enc_layers=cfg["model.enc_layers"],
        dec_layers=cfg["model.dec_layers"],
        heads=cfg["model.heads"],
        head_dim=cfg["model.head_dim"],
        d_ff=cfg["model.d_ff"],
        max_items=cfg["train.max_history"],
        across_bins=cfg["model.across_bins"],
        within_bins=cfg["model.within_bins"],
        dropout=cfg["model.dropout"],
        seed=cfg.seed_for("model"),
        dtype=cfg["model.dtype"],
    )


def train_settings(cfg: Config) -> s2s.TrainSettings:
    return s2s.TrainSettings(
        epochs=cfg["train.epochs"],
        patience=cfg["train.patience"],
        batch_size=cfg["train.batch_size"],
        lr=cfg["train.lr"],
        weight_decay=cfg["train.weight_decay"],
        mask_p=cfg["train.mask_p"],
        constrained=cfg["train.constrained"],
        seed=cfg.seed_for("masking"),
    )


def checkpoint_path(cfg: Config) -> Path:
    return cfg.out_dir / "model.ckpt"


def cmd_train(cfg: Config) -> s2s.TrainResult:
    log = _log(cfg, "train")
    ws = load_workspace(cfg)
    result = s2s.train(
        ws.table, ws.examples(ws.split.train), ws.examples(ws.split.valid),
        model_config(cfg, ws), ws.trie, ws.vocab, train_settings(cfg), log=log,
    )
    extra = {
        "target": cfg["target"],
        "layout": _layout_signature(ws.table.layout),
        "best_epoch": result.best_epoch,
        "mask_p": cfg["train.mask_p"],
        "constrained": cfg["train.constrained"],
    }
    s2s.save_checkpoint(result.model, checkpoint_path(cfg), extra)
    log({"split": "best", "epoch": result.best_epoch, "valid_loss": result.history[result.best_epoch - 1]["valid_loss"]})
    return result


# ----------------------------------------------------------------------------
# eval


def load_model(cfg: Config, ws: Workspace, checkpoint=None) -> s2s.Seq2SeqModel:
    path = Path(checkpoint) if checkpoint else checkpoint_path(cfg)
    model, extra = s2s.load_checkpoint(path)
    if extra.get("layout") != _layout_signature(ws.table.layout) or extra.get("target") != cfg["target"]:
        raise IncompatibleCheckpoint(
            f"{path}: trained for layout {extra.get('layout')} / target {extra.get('target')!r}, "
            f"tables have {_layout_signature(ws.table.layout)} / target {cfg['target']!r}"
        )
    return model


def subset_tag(visible: Sequence[str], modalities: Sequence[str]) -> str:
    if list(visible) == list(modalities):
        return "full"
    return "+".join(visible) if visible else "none"


def evaluate(cfg: Config, ws: Workspace, model: s2s.Seq2SeqModel, visible: Sequence[str]) -> dict[str, float]:
    histories = [ws.table.rows(h) for h, _ in ws.split.test]
    ranked = s2s.recommend(model, ws.table, histories, ws.trie, ws.vocab, cfg["eval.beam_width"], visible=list(visible))
    results = [
        ek.RankingResult(int(gold), [i for i, _ in r], [s for _, s in r])
        for (_, gold), r in zip(ws.split.test, ranked)
    ]
    return ek.metric_report(results, cfg["eval.ks"])


def cmd_eval(cfg: Config, checkpoint=None, visible: Sequence[str] | None = None) -> dict[str, float]:
    log = _log(cfg, "eval")
    ws = load_workspace(cfg)
    model = load_model(cfg, ws, checkpoint)
    visible = cfg.visible() if visible is None else [m for m in cfg["modalities"] if m in visible]
    report = evaluate(cfg, ws, model, visible)
    tag = subset_tag(visible, cfg["modalities"])
    ek.write_report(report, cfg.out_dir / f"report_{tag}")
    log({"split": "test", "visible": list(visible), "metrics": report})
    return report


# ----------------------------------------------------------------------------
# ablate-shapley


def cmd_ablate_shapley(cfg: Config, checkpoint=None) -> dict:
    mods = list(cfg["modalities"])
    if len(mods) > MAX_ABLATION_MODALITIES:
        raise ConfigError(f"Shapley ablation needs 2^D evaluations; refusing D={len(mods)} > {MAX_ABLATION_MODALITIES}")
    log = _log(cfg, "ablate-shapley")
    ws = load_workspace(cfg)
    model = load_model(cfg, ws, checkpoint)
    values: dict[frozenset, dict[str, float]] = {}
    for subset in ek.all_subsets(mods):
        visible = [m for m in mods if m in subset]
        values[subset] = evaluate(cfg, ws, model, visible)
        log({"split": "test", "visible": visible, "metrics": values[subset]})
    metrics = list(values[frozenset(mods)])
    shapley, efficiency = {}, {}
    for metric in metrics:
        phi = ek.shapley_modalities({s: v[metric] for s, v in values.items()}, mods)
        shapley[metric] = phi
        efficiency[metric] = sum(phi.values()) - (values[frozenset(mods)][metric] - values[frozenset()][metric])
    report = {
        "runs": len(values),
        "values": {subset_tag([m for m in mods if m in s], mods): v for s, v in values.items()},
        "shapley": shapley,
        "efficiency_residual": efficiency,
    }
    out = cfg.out_dir
    (out / "shapley.json").write_text(json.dumps(report, indent=2) + "\n")
    lines = [f"shapley.{metric}.{m}={phi[m]!r}" for metric, phi in shapley.items() for m in mods]
    lines += [f"efficiency_residual.{metric}={r!r}" for metric, r in efficiency.items()]
    (out / "shapley.txt").write_text("\n".join(lines) + "\n")
    return report


# ----------------------------------------------------------------------------
# decode


def cmd_decode(cfg: Config, history: Sequence[int], top_k: int = 10, checkpoint=None) -> list[tuple[int, float]]:
    ws = load_workspace(cfg)
    model = load_model(cfg, ws, checkpoint)
    unknown = [i for i in history if int(i) not in ws.table.row_of]
    if unknown:
        raise UnknownItem(f"items not in the semantic-ID table: {unknown}")
    hist = list(history)[-cfg["train.max_history"]:]
    ranked = s2s.recommend(model, ws.table, [ws.table.rows(hist)], ws.trie, ws.vocab, cfg["eval.beam_width"], visible=cfg.visible())
    return ranked[0][:top_k]
