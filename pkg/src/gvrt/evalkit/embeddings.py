"""Joint-space embedding export and the alignment / collapse diagnostics computed on it."""

from __future__ import annotations

from pathlib import Path

import torch

from gvrt.data import iter_eval_batches


@torch.no_grad()
def joint_embeddings(model, ds, keys, batch_size=256):
    """``g_proj(x)`` for each key (plain ``x`` for models without projection heads), eval mode."""
    was = model.training
    model.eval()
    out = []
    for b in iter_eval_batches(ds, keys, batch_size):
        x, _ = model.encoder(b.images)
        out.append(model.heads.g_proj(x) if model.heads is not None else x)
    model.train(was)
    return torch.cat(out)


def export_embeddings(model, ds, keys, path):
    """Write ``id, domain, label, g_0 .. g_{d-1}`` rows as TSV with a header line."""
    keys = list(keys)
    emb = joint_embeddings(model, ds, keys)
    head = ["id", "domain", "label"] + [f"g{j}" for j in range(emb.shape[1])]
    lines = ["\t".join(head)]
    for (i, d), row in zip(keys, emb.tolist()):
        lines.append("\t".join([str(i), str(d), str(ds.label_of(i))] + [f"{v:.8e}" for v in row]))
    Path(path).write_text("\n".join(lines) + "\n")
    return path


def alignment_ratio(emb, labels, domains) -> float:
    """Mean same-class cross-domain distance over mean same-class within-domain distance."""
    dist = torch.cdist(emb.double(), emb.double())
    labels = torch.as_tensor(labels)
    domains = torch.as_tensor(domains)
    same_class = labels[:, None] == labels[None, :]
    same_dom = domains[:, None] == domains[None, :]
    off_diag = ~torch.eye(len(labels), dtype=torch.bool)
    cross = dist[same_class & ~same_dom]
    within = dist[same_class & same_dom & off_diag]
    return float(cross.mean() / within.mean())


def model_alignment_ratio(model, ds, keys) -> float:
    keys = list(keys)
    emb = joint_embeddings(model, ds, keys)
    return alignment_ratio(emb, [ds.label_of(i) for i, _ in keys], [d for _, d in keys])


def covariance_trace(emb) -> float:
    """Trace of the sample covariance of the rows of ``emb``."""
    return float(torch.var(emb.double(), dim=0, unbiased=True).sum())
