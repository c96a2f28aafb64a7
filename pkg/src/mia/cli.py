"""Command-line surface: corpus generation, training, evaluation, sweeps,
gradient checking and caption chunking."""

from __future__ import annotations

import json
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import data, eval as evalmod, gradcheck, textpipe
from .config import ModelConfig, TrainConfig, load_config_file
from .training import Trainer, load_trained_model


def _load_configs(config_path, scale, seed, batch_size):
    model_cfg = ModelConfig.desk() if scale == "desk" else ModelConfig()
    train_cfg = TrainConfig.desk() if scale == "desk" else TrainConfig()
    if config_path:
        load_config_file(config_path, model_cfg, train_cfg)
    if seed is not None:
        model_cfg.seed = seed
        train_cfg.seed = seed
    if batch_size is not None:
        train_cfg.batch_size = batch_size
    return model_cfg, train_cfg


def _print_report(rows):
    keys = list(rows[0].keys())
    widths = [max(len(str(k)), max(len(_fmt(r[k])) for r in rows)) for k in keys]
    click.echo("  ".join(k.ljust(w) for k, w in zip(keys, widths)))
    for r in rows:
        click.echo("  ".join(_fmt(r[k]).ljust(w) for k, w in zip(keys, widths)))


def _fmt(v):
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def _parse_grid(spec: str):
    """'0:2:0.2' -> inclusive range; a single number or comma list also works."""
    if ":" in spec:
        lo, hi, step = (float(x) for x in spec.split(":"))
        n = int(round((hi - lo) / step)) + 1
        return [round(lo + i * step, 10) for i in range(n)]
    return [float(x) for x in spec.split(",")]


@click.group()
def main():
    """Multi-granularity image-text alignment (desk scale)."""


@main.command("gen-data")
@click.option("--ids", default=16, show_default=True, help="Training identities.")
@click.option("--per-id", default=4, show_default=True, help="Images per identity.")
@click.option("--val-ids", default=0, show_default=True)
@click.option("--test-ids", default=0, show_default=True)
@click.option("--seed", default=42, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
def gen_data(ids, per_id, val_ids, test_ids, seed, out_dir):
    """Generate the synthetic attribute-person corpus."""
    paths = data.synth_generate(ids, per_id, seed, out_dir,
                                val_ids=val_ids, test_ids=test_ids)
    for split, path in paths.items():
        click.echo(f"{split}: {path}")


@main.command()
@click.option("--corpus", required=True, type=click.Path(exists=True),
              help="Corpus directory (contains train.jsonl).")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(exists=True),
              help="key = value config file; flags override file values.")
@click.option("--step", type=click.Choice(["1", "2", "3", "all"]), default="all",
              show_default=True)
@click.option("--scale", type=click.Choice(["desk", "paper"]), default="desk",
              show_default=True,
              help="Paper scale: 1024-dim globals, batch 96-style settings; "
                   "desk scale shrinks dimensions for CPU runs.")
@click.option("--seed", type=int, default=None)
@click.option("--batch-size", type=int, default=None,
              help="Default 32 (desk); the reference setting is 96.")
def train(corpus, out_dir, config_path, step, scale, seed, batch_size):
    """Run the three-step training strategy.

    Defaults: step 1 trains global representations with the identity
    objective at lr 0.001; step 2 adds the matching objectives at lr 0.0002
    decaying x0.1 every 10 epochs; step 3 trains only the two fine-grained
    matching MLPs at lr 0.0002. Margin 0.2.
    """
    model_cfg, train_cfg = _load_configs(config_path, scale, seed, batch_size)
    dataset = data.load_dataset(Path(corpus) / "train.jsonl")
    trainer = Trainer(dataset, model_cfg, train_cfg, out_dir)
    if step == "all":
        t0 = time.monotonic()
        final = trainer.run()
        click.echo(f"finished steps 1-3 in {time.monotonic() - t0:.1f}s -> {final}")
    else:
        sid = int(step)
        if sid > 1:
            prev = Path(out_dir) / f"step{sid - 1}.miac"
            if not prev.exists():
                raise click.ClickException(
                    f"step {sid} requires {prev} from the previous step")
            trainer.load_checkpoint(prev)
        trainer.run_step(sid)
        click.echo(f"finished step {sid} -> {Path(out_dir) / f'step{sid}.miac'}")


def _cache_for(ckpt, corpus, split):
    corpus = Path(corpus)
    train_ds = data.load_dataset(corpus / "train.jsonl")
    model, vocab = load_trained_model(ckpt, train_ds)
    ds = train_ds if split == "train" else data.load_dataset(corpus / f"{split}.jsonl")
    return model, vocab, ds, evalmod.BundleCache(model, ds, vocab)


@main.command("eval")
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--corpus", required=True, type=click.Path(exists=True))
@click.option("--split", default="test", show_default=True,
              type=click.Choice(["train", "val", "test"]))
@click.option("--lambda1", default=1.0, show_default=True)
@click.option("--lambda2", default=0.5, show_default=True)
@click.option("--report", "granularity", default="sF", show_default=True,
              type=click.Choice(list(evalmod.GRANULARITIES)))
@click.option("--json", "as_json", is_flag=True, help="Emit JSON instead of a table.")
@click.option("--dump-attn", "dump_dir", type=click.Path(), default=None,
              help="Write per-pair attention weights as JSON files.")
def eval_cmd(ckpt, corpus, split, lambda1, lambda2, granularity, as_json, dump_dir):
    """Text-to-image retrieval report (R@1/R@5/R@10 and Total)."""
    model, vocab, ds, cache = _cache_for(ckpt, corpus, split)
    report = evalmod.evaluate(cache, granularity, lambda1, lambda2)
    row = {"split": split, "lambda1": lambda1, "lambda2": lambda2,
           **report.as_dict()}
    if as_json:
        click.echo(json.dumps(row))
    else:
        _print_report([row])
    if dump_dir:
        out = Path(dump_dir)
        out.mkdir(parents=True, exist_ok=True)
        for entry in evalmod.dump_attention(model, ds, vocab):
            with open(out / f"{entry['pair_id'].replace('#', '_')}.json", "w") as f:
                json.dump(entry, f)
        click.echo(f"attention dumps -> {out}")


@main.command()
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--corpus", required=True, type=click.Path(exists=True))
@click.option("--split", default="test", show_default=True)
@click.option("--caption", required=True)
@click.option("--topk", default=10, show_default=True)
@click.option("--lambda1", default=1.0, show_default=True)
@click.option("--lambda2", default=0.5, show_default=True)
def retrieve(ckpt, corpus, split, caption, topk, lambda1, lambda2):
    """Rank the gallery images of a split against one free-form caption."""
    corpus = Path(corpus)
    train_ds = data.load_dataset(corpus / "train.jsonl")
    model, vocab = load_trained_model(ckpt, train_ds)
    ds = train_ds if split == "train" else data.load_dataset(corpus / f"{split}.jsonl")
    from .alignment import pair_bundle
    from .autodiff import Tensor, no_grad
    toks = textpipe.tokenize(caption)
    phrases = textpipe.chunk_noun_phrases(textpipe.pos_tag(toks))
    sent = textpipe.numericalize(toks, vocab)
    phr = [textpipe.numericalize(p.tokens, vocab) for p in phrases]
    if not sent:
        raise click.ClickException("caption produced no tokens")
    scores = []
    with no_grad():
        t_vec, phrase_mat = model.encode_caption(sent, phr)
        for i in range(len(ds.records)):
            i_vec, parts = model.encode_image(Tensor(ds.image(i)))
            b = pair_bundle(model, i_vec, parts, t_vec, phrase_mat)
            scores.append(b.fused(lambda1, lambda2))
    order = np.argsort(-np.asarray(scores), kind="stable")[:topk]
    rows = [{"rank": int(r + 1), "image": ds.records[g].image_id,
             "person_id": ds.records[g].person_id, "sF": float(scores[g])}
            for r, g in enumerate(order)]
    _print_report(rows)


@main.command()
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--corpus", required=True, type=click.Path(exists=True))
@click.option("--split", default="test", show_default=True)
@click.option("--l1", default="0:2:0.2", show_default=True,
              help="lambda1 grid as lo:hi:step or comma list.")
@click.option("--l2", default="0:2:0.2", show_default=True)
@click.option("--json", "as_json", is_flag=True)
def sweep(ckpt, corpus, split, l1, l2, as_json):
    """Evaluate a lambda1 x lambda2 grid, reusing cached similarity bundles."""
    _, _, _, cache = _cache_for(ckpt, corpus, split)
    rows = evalmod.sweep(cache, _parse_grid(l1), _parse_grid(l2))
    if as_json:
        click.echo(json.dumps(rows))
    else:
        _print_report(rows)


@main.command("grad-check")
@click.option("--ckpt", type=click.Path(exists=True), default=None,
              help="Optional checkpoint; defaults to a fresh desk-scale model.")
@click.option("--corpus", type=click.Path(exists=True), default=None,
              help="Needed with --ckpt to rebuild the vocabulary.")
@click.option("--samples", default=200, show_default=True)
@click.option("--h", default=1e-5, show_default=True)
@click.option("--tolerance", default=1e-4, show_default=True)
def grad_check(ckpt, corpus, samples, h, tolerance):
    """Central-difference check of the step-2 and step-3 loss gradients."""
    if ckpt:
        if not corpus:
            raise click.ClickException("--ckpt requires --corpus")
        train_ds = data.load_dataset(Path(corpus) / "train.jsonl")
        model, vocab = load_trained_model(ckpt, train_ds)
        model, batch = gradcheck.build_check_batch(model=model, vocab=vocab)
    else:
        model, batch = gradcheck.build_check_batch()
    t0 = time.monotonic()
    results = gradcheck.run_grad_check(model, batch, sample_count=samples,
                                       h=h, tolerance=tolerance)
    for step in ("step2", "step3"):
        r = results[step]
        status = "PASS" if r["passed"] else "FAIL"
        click.echo(f"{step}: max relative error {r['max_rel_error']:.3e} "
                   f"over {r['samples']} samples (tol {r['tolerance']:.0e}) {status}")
    click.echo(f"elapsed {time.monotonic() - t0:.1f}s")
    sys.exit(0 if results["passed"] else 1)


@main.command()
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--lexicon", "lexicon_path", type=click.Path(exists=True), default=None)
def chunk(in_path, lexicon_path):
    """Emit one JSON object per caption line: {"caption": ..., "phrases": [...]}."""
    lexicon = textpipe.load_lexicon(lexicon_path) if lexicon_path else None
    with open(in_path, encoding="utf-8") as f:
        for line in f:
            caption = line.rstrip("\n")
            if not caption.strip():
                continue
            phrases = textpipe.extract_phrases(caption, lexicon=lexicon)
            click.echo(json.dumps({"caption": caption,
                                   "phrases": [p.text for p in phrases]}))


if __name__ == "__main__":
    main()
