"""``nere`` command line: one subcommand per pipeline stage.

    nere synth | embed | features | train | index | recommend
    nere evaluate | ablate | sweep | run | config

Common flags: ``--config PATH``, ``--seed N``, ``--out DIR`` and repeated
``--set section.key=value``.  Every command writes a manifest with the
effective configuration and the sha256 of its inputs and outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from nere import annindex, evalkit, plotting, synthgen, textvec
from nere.config import RunConfig, load_config
from nere.errors import NereError
from nere.features import FeatureEncoders, SequenceTensorTriple, assemble_latest, encode_set_meta, read_tensor, write_tensor
from nere.pipeline import make_features
from nere.recsys.cache import export_cache, load_cache
from nere.recsys.model import ModelConfig, NereModel, build_model
from nere.recsys.recommend import build_cache
from nere.recsys.training import train

log = logging.getLogger("nere")

STAGES = ("synth", "embed", "features", "train", "index", "recommend", "evaluate")


class MissingArtifact(NereError):
    pass


# -- helpers ----------------------------------------------------------------------

def _sha256(path):
    path = Path(path)
    h = hashlib.sha256()
    if path.is_dir():
        for f in sorted(p for p in path.rglob("*") if p.is_file()):
            h.update(str(f.relative_to(path)).encode())
            h.update(f.read_bytes())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


def _need(cfg: RunConfig, name, producer):
    path = cfg.path(name)
    if not path.exists():
        raise MissingArtifact(f"missing {path}; run `nere {producer}` (cmd_{producer}) first")
    return path


def _out(cfg: RunConfig, name):
    path = cfg.path(name)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _manifest(cfg: RunConfig, command, inputs, outputs, extra=None):
    doc = {
        "command": command,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {str(p): _sha256(p) for p in outputs},
    }
    if extra:
        doc.update(extra)
    path = _out(cfg, "manifests") / f"{command}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return path


def _load_vectors(cfg):
    ids = read_tensor(_need(cfg, "set_ids", "embed")).astype(np.int64)
    vecs = read_tensor(_need(cfg, "set_vectors", "embed")).astype(np.float64)
    return ids, vecs


def _load_split(cfg):
    doc = json.loads(_need(cfg, "split", "features").read_text(encoding="utf-8"))
    return np.array(doc["train_rows"], dtype=np.int64), np.array(doc["test_rows"], dtype=np.int64)


def _load_graph(cfg, ids, vecs):
    return annindex.KNNGraph.load(_need(cfg, "graph", "index"), ids, vecs, cfg.index_config())


def _eval_data(cfg):
    catalog = synthgen.read_catalog(_need(cfg, "catalog", "synth"))
    ids, vecs = _load_vectors(cfg)
    encoders = FeatureEncoders.load(_need(cfg, "encoders", "features"))
    triple = SequenceTensorTriple.load(_need(cfg, "tensors", "features"))
    train_rows, test_rows = _load_split(cfg)
    graph = _load_graph(cfg, ids, vecs)
    data = evalkit.EvalData(
        triple=triple,
        train_rows=train_rows,
        test_rows=test_rows,
        set_ids=ids,
        set_vectors=vecs,
        set_meta=encode_set_meta(catalog, encoders),
        graph=graph,
        manifest=encoders.manifest(),
    )
    return data


# -- stages -----------------------------------------------------------------------

def cmd_synth(cfg: RunConfig):
    sc = cfg.synth_config()
    catalog = synthgen.generate_catalog(sc)
    sessions = synthgen.generate_sessions(sc, catalog)
    cat_p, ses_p = _out(cfg, "catalog"), _out(cfg, "sessions")
    synthgen.write_jsonl(catalog, cat_p)
    synthgen.write_jsonl(sessions, ses_p)
    hits, eligible = synthgen.successor_rate(sessions, catalog)
    print(f"synth: {len(catalog)} sets, {len(sessions)} sessions, successor rate {hits}/{eligible}")
    _manifest(cfg, "synth", [], [cat_p, ses_p])
    return 0


def cmd_embed(cfg: RunConfig):
    catalog = synthgen.read_catalog(_need(cfg, "catalog", "synth"))
    e = cfg.embed_config()
    table, ids, vecs = textvec.embed_catalog(
        catalog, dim=e.dim, window=e.window, epochs=e.epochs, x_max=e.x_max, alpha=e.alpha, lr=e.lr, seed=e.seed
    )
    outs = [_out(cfg, "glove"), _out(cfg, "set_vectors"), _out(cfg, "set_ids")]
    table.save(outs[0])
    write_tensor(outs[1], vecs)
    write_tensor(outs[2], ids)
    print(f"embed: vocabulary {len(table.vocab)}, {len(ids)} set vectors of dim {table.dim}")
    _manifest(cfg, "embed", [cfg.path("catalog")], outs, {"glove_final_loss": table.loss_history[-1] if table.loss_history else None})
    return 0


def cmd_features(cfg: RunConfig):
    catalog = synthgen.read_catalog(_need(cfg, "catalog", "synth"))
    sessions = synthgen.read_sessions(_need(cfg, "sessions", "synth"))
    ids, vecs = _load_vectors(cfg)
    f = cfg.features
    triple, encoders, train_rows, test_rows = make_features(sessions, catalog, ids, vecs, f.T, f.test_fraction, cfg.seed)
    enc_p, ten_p, spl_p = _out(cfg, "encoders"), _out(cfg, "tensors"), _out(cfg, "split")
    encoders.save(enc_p)
    triple.save(ten_p)
    spl_p.write_text(json.dumps({"train_rows": train_rows.tolist(), "test_rows": test_rows.tolist()}) + "\n", encoding="utf-8")
    print(f"features: {len(triple)} windows (T={triple.T}), {len(train_rows)} train / {len(test_rows)} test")
    _manifest(cfg, "features", [cfg.path("catalog"), cfg.path("sessions"), cfg.path("set_vectors")], [enc_p, ten_p, spl_p])
    return 0


def cmd_train(cfg: RunConfig):
    encoders = FeatureEncoders.load(_need(cfg, "encoders", "features"))
    triple = SequenceTensorTriple.load(_need(cfg, "tensors", "features"))
    train_rows, _ = _load_split(cfg)
    model = build_model(encoders.manifest(), cfg.variant.variant, cfg.model, seed=cfg.seed)
    history = train(model, triple, cfg.train_config(), rows=train_rows)
    model_p, hist_p = _out(cfg, "model"), _out(cfg, "history")
    digest = model.save(model_p)
    with hist_p.open("w", encoding="utf-8", newline="\n") as fh:
        for h in history:
            fh.write(json.dumps(h, sort_keys=True) + "\n")
    png = plotting.plot_history(history, hist_p.with_suffix(".png")) if history else None
    best = min((h["val_mse"] for h in history), default=float("nan"))
    print(f"train: {len(history)} epochs, best validation MSE {best:.6f}, checkpoint sha256 {digest[:12]}")
    _manifest(cfg, "train", [cfg.path("tensors"), cfg.path("split")], [model_p, hist_p] + ([png] if png else []))
    return 0


def cmd_index(cfg: RunConfig):
    ids, vecs = _load_vectors(cfg)
    graph = annindex.build(vecs, cfg.index_config(), ids=ids)
    path = _out(cfg, "graph")
    graph.save(path)
    print(f"index: {graph.N} points, K={graph.K}, {len(graph.history)} descent iterations")
    _manifest(cfg, "index", [cfg.path("set_vectors")], [path])
    return 0


def cmd_recommend(cfg: RunConfig):
    model_p = _need(cfg, "model", "train")
    model = NereModel.load(model_p)
    catalog = synthgen.read_catalog(_need(cfg, "catalog", "synth"))
    sessions = synthgen.read_sessions(_need(cfg, "sessions", "synth"))
    encoders = FeatureEncoders.load(_need(cfg, "encoders", "features"))
    ids, vecs = _load_vectors(cfg)
    graph = _load_graph(cfg, ids, vecs)
    keys, um, sm, ct = assemble_latest(sessions, catalog, ids, vecs, encoders, L=model.config.input_len)
    generated_at = max((s.end_timestamp for s in sessions), default=0)
    m = cfg.recommend.m
    cache = build_cache(model, graph, keys, um, sm, ct, m, _sha256(model_p), generated_at)
    path = _out(cfg, "cache")
    export_cache(cache, path)
    load_cache(path, catalog_ids=set(ids.tolist()))  # validate what was written
    print(f"recommend: {len(cache)} user-subject lists of {m} sets")
    _manifest(cfg, "recommend", [model_p, cfg.path("graph"), cfg.path("sessions")], [path])
    return 0


def cmd_evaluate(cfg: RunConfig):
    model_p = _need(cfg, "model", "train")
    model = NereModel.load(model_p)
    data = _eval_data(cfg)
    ev = cfg.evaluate
    res = evalkit.evaluate_model(model, data, k=ev.k)
    _, mf = evalkit.evaluate_mf(data, d=ev.mf_d, epochs=ev.mf_epochs, lr=ev.mf_lr, neg_ratio=ev.mf_neg_ratio, seed=cfg.seed, k=ev.k)
    rnd = evalkit.evaluate_random(data, k=ev.k, seed=cfg.seed)
    report = evalkit.EvaluationReport(
        k=ev.k,
        recall_at_k=res["recall"],
        r_squared=res["r_squared"],
        n_evaluated=res["n"],
        variant=model.variant,
        baselines={"mf": mf, "random": rnd},
    )
    rep_p = _out(cfg, "report")
    report.write_jsonl(rep_p)
    print(report.table())

    from nere.recsys.model import window_inputs

    um, sm, ct = window_inputs(data.triple, model.config.input_len, data.test_rows[:1])
    alpha = evalkit.attention_heatmap(model, (um[0], sm[0], ct[0]))
    prefix = _out(cfg, "heatmap")
    txt, pgm = evalkit.export_heatmap(alpha, prefix)
    png = plotting.plot_attention(alpha, prefix.with_name(prefix.name + ".png"), feature_stride=model.config.hidden)
    _manifest(cfg, "evaluate", [model_p, cfg.path("tensors"), cfg.path("graph")], [rep_p, txt, pgm, png])
    return 0


def cmd_ablate(cfg: RunConfig):
    data = _eval_data(cfg)
    k = cfg.evaluate.k
    out = evalkit.ablation_suite(data, cfg.ablate.variants, cfg.model, cfg.train_config(), seed=cfg.seed, k=k)
    variants = {v: r["result"] for v, r in out.items()}
    first = next(iter(variants.values()))
    main_v = "both" if "both" in variants else next(iter(variants))
    report = evalkit.EvaluationReport(
        k=k,
        recall_at_k=variants[main_v]["recall"],
        r_squared=variants[main_v]["r_squared"],
        n_evaluated=first["n"],
        variant=main_v,
        variants=variants,
    )
    path = _out(cfg, "ablation")
    report.write_jsonl(path)
    png = plotting.plot_ablation(variants, first["n"], k, path.with_suffix(".png"))
    print(report.table())
    _manifest(cfg, "ablate", [cfg.path("tensors"), cfg.path("graph")], [path, png])
    return 0


def cmd_sweep(cfg: RunConfig):
    data = _eval_data(cfg)
    k = cfg.evaluate.k
    sw = cfg.sweep
    out = evalkit.sequence_length_sweep(data, sw.lengths, sw.variant, cfg.model, cfg.train_config(), seed=cfg.seed, k=k)
    lengths = {L: r["result"] for L, r in out.items()}
    last = lengths[max(lengths)]
    report = evalkit.EvaluationReport(
        k=k,
        recall_at_k=last["recall"],
        r_squared=last["r_squared"],
        n_evaluated=last["n"],
        variant=sw.variant,
        lengths=lengths,
    )
    path = _out(cfg, "sweep")
    report.write_jsonl(path)
    png = plotting.plot_sweep(lengths, last["n"], k, path.with_suffix(".png"))
    print(report.table())
    _manifest(cfg, "sweep", [cfg.path("tensors"), cfg.path("graph")], [path, png])
    return 0


def cmd_run(cfg: RunConfig):
    """Full pipeline: synth -> embed -> features -> train -> index -> recommend -> evaluate."""
    for stage in STAGES:
        log.info("stage %s", stage)
        status = COMMANDS[stage](cfg)
        if status:
            return status
    return 0


def cmd_config(cfg: RunConfig):
    """Print the effective configuration as an INI file."""
    print(cfg.to_ini(), end="")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "embed": cmd_embed,
    "features": cmd_features,
    "train": cmd_train,
    "index": cmd_index,
    "recommend": cmd_recommend,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "run": cmd_run,
    "config": cmd_config,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration")
    common.add_argument("--seed", type=int, help="global seed (overrides run.seed)")
    common.add_argument("--out", help="artifact directory (overrides run.out)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value; repeatable")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    parser = argparse.ArgumentParser(prog="nere", description="Neural educational recommendation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=(fn.__doc__ or name).strip().splitlines()[0])
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides, seed=args.seed, out=args.out)
        return COMMANDS[args.command](cfg)
    except NereError as exc:
        print(f"nere {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
