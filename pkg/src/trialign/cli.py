"""Command-line entry points for corpus generation, the two pre-training
stages, evaluation tasks, and the query service.

Training and evaluation commands accept --config cfg.json --seed S; report
paths write a CSV plus a rendered figure next to it.
"""

from __future__ import annotations

import json
from pathlib import Path

import click

from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import DEFAULT_TEMPLATES, build_corpus, eval_records, load_manifest
from .geometry import SHAPE_CLASSES, read_pc, SceneCloud
from .inference import (DEFAULT_BANK_TEMPLATE, InferenceSession, build_text_bank,
                        cluster_scene, export_embeddings, retrieve, scene_query,
                        zero_shot_classify)
from .report import save_accuracy_bars, save_loss_curves, save_series, write_rows_csv
from .training import TrainConfig, finetune, linear_probe, pretrain_bimodal, pretrain_cg3d


def _load_config(path, seed):
    cfg = TrainConfig.from_file(path) if path else TrainConfig()
    if seed is not None:
        cfg.seed = seed
    return cfg


@click.group()
def main():
    """Point cloud / image / caption alignment toolkit."""


@main.command("gen-data")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="JSON with classes, per_class, n_points, unseen, templates, "
                   "image_size, view_elevation_deg.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--per-class", type=int, default=None, help="Override sample count.")
def gen_data(config_path, seed, out_dir, per_class):
    """Generate a triplet corpus with a manifest."""
    opts = {}
    if config_path:
        with open(config_path) as fh:
            opts = json.load(fh).get("corpus", {})
    classes = opts.get("classes", list(SHAPE_CLASSES))
    manifest = build_corpus(
        classes=classes,
        per_class=per_class or opts.get("per_class", 32),
        n_points=opts.get("n_points", 1024),
        out_dir=out_dir,
        seed=seed,
        unseen=opts.get("unseen", []),
        templates=opts.get("templates", list(DEFAULT_TEMPLATES)),
        image_size=opts.get("image_size", 64),
        view_elevation_deg=opts.get("view_elevation_deg", 30.0),
    )
    click.echo(f"wrote {len(manifest.records)} records for {len(classes)} classes "
               f"to {out_dir}")


@main.command("pretrain-bimodal")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--corpus", "corpus_dir", type=click.Path(exists=True), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--steps", type=int, default=None)
def pretrain_bimodal_cmd(config_path, seed, corpus_dir, out_path, steps):
    """Stage 0: train the image-text towers, then freeze them."""
    cfg = _load_config(config_path, seed)
    manifest = load_manifest(Path(corpus_dir) / "manifest.jsonl")
    out_path = Path(out_path)
    log_csv = out_path.with_suffix(".log.csv")
    ckpt, losses = pretrain_bimodal(manifest, cfg, log_path=log_csv, steps=steps)
    save_checkpoint(ckpt, out_path)
    fig = save_loss_curves(log_csv, out_path.with_suffix(".log.png"),
                           title="bimodal pre-training")
    click.echo(f"checkpoint {out_path} (final loss {losses[-1]:.4f}); "
               f"log {log_csv}, figure {fig}")


@main.command("pretrain")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--corpus", "corpus_dir", type=click.Path(exists=True), required=True)
@click.option("--base", "base_path", type=click.Path(exists=True), required=True,
              help="Stage-0 checkpoint providing the frozen towers.")
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--resume", "resume_path", type=click.Path(exists=True), default=None)
@click.option("--steps", type=int, default=None)
def pretrain_cmd(config_path, seed, corpus_dir, base_path, out_path, resume_path, steps):
    """Align the 3D tower (and prompts) against the frozen towers."""
    cfg = _load_config(config_path, seed)
    manifest = load_manifest(Path(corpus_dir) / "manifest.jsonl")
    base = load_checkpoint(base_path)
    resume = load_checkpoint(resume_path) if resume_path else None
    out_path = Path(out_path)
    log_csv = out_path.with_suffix(".log.csv")
    ckpt, log = pretrain_cg3d(manifest, base, cfg, log_path=log_csv,
                              resume=resume, steps=steps)
    save_checkpoint(ckpt, out_path)
    fig = save_loss_curves(log_csv, out_path.with_suffix(".log.png"),
                           title="3D alignment pre-training")
    click.echo(f"checkpoint {out_path} after {ckpt.step} steps; "
               f"log {log_csv}, figure {fig}")


@main.command("zeroshot")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--ckpt", "ckpt_path", type=click.Path(exists=True), required=True)
@click.option("--corpus", "corpus_dir", type=click.Path(exists=True), required=True)
@click.option("--classes", default=None,
              help="Comma-separated class names; default: the corpus' unseen classes.")
@click.option("--template", default=DEFAULT_BANK_TEMPLATE, show_default=True)
@click.option("--report", "report_path", type=click.Path(), default=None)
def zeroshot_cmd(config_path, seed, ckpt_path, corpus_dir, classes, template,
                 report_path):
    """Zero-shot classification of held-out records against a text bank."""
    cfg = _load_config(config_path, seed)
    manifest = load_manifest(Path(corpus_dir) / "manifest.jsonl")
    session = InferenceSession(load_checkpoint(ckpt_path), n_points=cfg.n_points)
    names = classes.split(",") if classes else (manifest.unseen or manifest.classes)
    bank = build_text_bank(names, template, session)
    records = eval_records(manifest, cfg.eval_frac, classes=names)
    hits = {c: [0, 0] for c in names}
    for rec in records:
        pc = read_pc(manifest.resolve(rec.pc_path))
        label, _ = zero_shot_classify(pc, bank, session)
        hits[rec.class_name][1] += 1
        hits[rec.class_name][0] += label == rec.class_name
    per_class = {c: (h[0] / h[1] if h[1] else 0.0) for c, h in hits.items()}
    overall = sum(h[0] for h in hits.values()) / max(1, sum(h[1] for h in hits.values()))
    for c, acc in per_class.items():
        click.echo(f"{c}: {acc:.4f} ({hits[c][0]}/{hits[c][1]})")
    click.echo(f"overall: {overall:.4f}")
    if report_path:
        report_path = Path(report_path)
        write_rows_csv(report_path, ["class", "accuracy", "correct", "total"],
                       [[c, per_class[c], hits[c][0], hits[c][1]] for c in names])
        save_accuracy_bars(per_class, report_path.with_suffix(".png"),
                           title="zero-shot accuracy", overall=overall)
        click.echo(f"report {report_path}")


@main.command("retrieve")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--ckpt", "ckpt_path", type=click.Path(exists=True), required=True)
@click.option("--corpus", "corpus_dir", type=click.Path(exists=True), required=True)
@click.option("--query", "query_text", default=None, help="Text query.")
@click.option("--query-pc", type=click.Path(exists=True), default=None,
              help="Point cloud file query.")
@click.option("--topk", type=int, default=5, show_default=True)
@click.option("--report", "report_path", type=click.Path(), default=None)
def retrieve_cmd(config_path, seed, ckpt_path, corpus_dir, query_text, query_pc,
                 topk, report_path):
    """Rank database point clouds against a text or point cloud query."""
    if (query_text is None) == (query_pc is None):
        raise click.UsageError("provide exactly one of --query / --query-pc")
    cfg = _load_config(config_path, seed)
    manifest = load_manifest(Path(corpus_dir) / "manifest.jsonl")
    session = InferenceSession(load_checkpoint(ckpt_path), n_points=cfg.n_points)
    query = query_text if query_text is not None else read_pc(query_pc)
    hits = retrieve(query, manifest, session, topk=topk)
    for h in hits:
        click.echo(f"{h.rank:3d}  {h.record_id}  {h.similarity:+.4f}")
    if report_path:
        write_rows_csv(report_path, ["rank", "id", "similarity"],
                       [[h.rank, h.record_id, h.similarity] for h in hits])
        click.echo(f"report {report_path}")


@main.command("scene-query")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--ckpt", "ckpt_path", type=click.Path(exists=True), required=True)
@click.option("--scene", "scene_path", type=click.Path(exists=True), required=True)
@click.option("--k", type=int, required=True)
@click.option("--query", "query_text", required=True)
@click.option("--strip-floor", is_flag=True, default=False)
@click.option("--json-out", "json_path", type=click.Path(), default=None)
def scene_query_cmd(config_path, seed, ckpt_path, scene_path, k, query_text,
                    strip_floor, json_path):
    """Cluster a scene file and rank clusters against a text query."""
    cfg = _load_config(config_path, seed)
    session = InferenceSession(load_checkpoint(ckpt_path), n_points=cfg.n_points)
    scene = SceneCloud(points=read_pc(scene_path).points)
    clusters = cluster_scene(scene, k, seed, strip_floor=strip_floor, session=session)
    ranked = scene_query(clusters, query_text, session)
    payload = {"query": query_text,
               "results": [{"cluster": s.cluster, "score": s.score, "rank": s.rank}
                           for s in ranked]}
    text = json.dumps(payload, indent=2)
    click.echo(text)
    if json_path:
        Path(json_path).write_text(text + "\n")


@main.command("finetune")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--corpus", "corpus_dir", type=click.Path(exists=True), required=True)
@click.option("--ckpt", "ckpt_path", type=click.Path(exists=True), default=None,
              help="Starting weights; omit for from-scratch training.")
@click.option("--fraction", type=float, default=1.0, show_default=True,
              help="Fraction of the training split used.")
@click.option("--steps", type=int, default=None)
@click.option("--report", "report_path", type=click.Path(), default=None)
def finetune_cmd(config_path, seed, corpus_dir, ckpt_path, fraction, steps,
                 report_path):
    """Supervised classification on labeled clouds, from scratch or a checkpoint."""
    from .evaltools import classification_arrays

    cfg = _load_config(config_path, seed)
    manifest = load_manifest(Path(corpus_dir) / "manifest.jsonl")
    xs_tr, ys_tr, xs_te, ys_te = classification_arrays(
        manifest, cfg.n_points, cfg.eval_frac, fraction=fraction, seed=cfg.seed)
    init = load_checkpoint(ckpt_path) if ckpt_path else None
    result = finetune(xs_tr, ys_tr, xs_te, ys_te, len(manifest.classes), cfg,
                      cfg.seed, init=init, steps=steps)
    click.echo(f"train accuracy {result.train_accuracy:.4f}  "
               f"test accuracy {result.test_accuracy:.4f}")
    if report_path:
        report_path = Path(report_path)
        write_rows_csv(report_path, ["metric", "value"],
                       [["train_accuracy", result.train_accuracy],
                        ["test_accuracy", result.test_accuracy],
                        ["fraction", fraction],
                        ["init", "checkpoint" if ckpt_path else "scratch"]])
        save_series({"loss": result.losses}, report_path.with_suffix(".png"),
                    xlabel="step", ylabel="cross-entropy", title="fine-tuning loss")
        click.echo(f"report {report_path}")


@main.command("linear-probe")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--ckpt", "ckpt_path", type=click.Path(exists=True), required=True)
@click.option("--corpus", "corpus_dir", type=click.Path(exists=True), required=True)
@click.option("--pathway", type=click.Choice(["prompted", "base"]), default="prompted",
              show_default=True)
@click.option("--classes", default=None, help="Comma-separated; default unseen classes.")
@click.option("--l2", type=float, default=1e-3, show_default=True)
@click.option("--report", "report_path", type=click.Path(), default=None)
def linear_probe_cmd(config_path, seed, ckpt_path, corpus_dir, pathway, classes, l2,
                     report_path):
    """Logistic-regression probe on frozen image features."""
    from .evaltools import probe_features

    cfg = _load_config(config_path, seed)
    manifest = load_manifest(Path(corpus_dir) / "manifest.jsonl")
    session = InferenceSession(load_checkpoint(ckpt_path), n_points=cfg.n_points)
    names = classes.split(",") if classes else (manifest.unseen or manifest.classes)
    x_tr, y_tr, x_te, y_te = probe_features(manifest, session, names,
                                            use_prompts=pathway == "prompted",
                                            seed=cfg.seed)
    probe = linear_probe(x_tr, y_tr, l2=l2)
    held_out = probe.score(x_te, y_te)
    click.echo(f"pathway {pathway}: train accuracy {probe.accuracy:.4f}  "
               f"held-out accuracy {held_out:.4f} "
               f"({probe.iterations} iterations, converged={probe.converged})")
    if report_path:
        write_rows_csv(report_path, ["metric", "value"],
                       [["pathway", pathway], ["train_accuracy", probe.accuracy],
                        ["held_out_accuracy", held_out]])
        click.echo(f"report {report_path}")


@main.command("export-embeddings")
@click.option("--ckpt", "ckpt_path", type=click.Path(exists=True), required=True)
@click.option("--corpus", "corpus_dir", type=click.Path(exists=True), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--modalities", default="3D", show_default=True,
              help="Comma-separated subset of 3D,2D.")
def export_embeddings_cmd(ckpt_path, corpus_dir, out_path, modalities):
    """Dump raw per-record embeddings as CSV."""
    manifest = load_manifest(Path(corpus_dir) / "manifest.jsonl")
    session = InferenceSession(load_checkpoint(ckpt_path))
    mods = [m.strip().upper() for m in modalities.split(",") if m.strip()]
    n = export_embeddings(manifest, session, out_path, modalities=mods)
    click.echo(f"wrote {n} rows to {out_path}")


@main.command("serve")
@click.option("--ckpt", "ckpt_path", type=click.Path(exists=True), required=True)
@click.option("--port", type=int, default=8000, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--static", "static_dir", type=click.Path(), default=None,
              help="Optional built viewer directory to serve at /.")
def serve_cmd(ckpt_path, port, host, static_dir):
    """Run the scene query HTTP service."""
    from .service import serve

    serve(ckpt_path, port=port, host=host,
          static_dir=Path(static_dir) if static_dir else None)


if __name__ == "__main__":
    main()
