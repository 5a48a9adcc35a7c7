from __future__ import annotations

import json
from pathlib import Path

import torch
import torch.nn.functional as F

from gvrt.data import decode_tokens, iter_eval_batches
from gvrt.encoders import project_and_classify
from gvrt.evalkit.metrics import bleu4, rouge_l
from gvrt.explainer import greedy_decode, reward


@torch.no_grad()
def generate_explanations(model, ds, keys, vocab, max_len=20, batch_size=256):
    """Greedy explanations conditioned on the predicted class distribution."""
    if model.generator is None:
        raise ValueError("model has no explanation generator")
    was = model.training
    model.eval()
    rows = []
    for b in iter_eval_batches(ds, keys, batch_size):
        x, logits = model.encoder(b.images)
        y_hat = F.softmax(logits, dim=-1)
        g_x, _ = project_and_classify(model.heads, x)
        out = greedy_decode(model.generator, g_x, y_hat, max_len)
        pred = y_hat.argmax(-1)
        r = reward(model.reward_model, out.tokens, pred) if model.reward_model is not None else None
        for j in range(len(b)):
            rows.append({
                "sample_id": int(b.ids[j]),
                "domain": int(b.domains[j]),
                "true_class": int(b.labels[j]),
                "predicted_class": int(pred[j]),
                "sentence": decode_tokens(vocab, out.tokens[j]),
                "reward": None if r is None else float(r[j]),
            })
    model.train(was)
    return rows


def write_explanations(rows, path):
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps(r) + "\n")
    return Path(path)


def caption_scores(rows, ds) -> dict:
    """BLEU-4 and ROUGE_L of generated sentences against each sample's reference texts."""
    hyps = [r["sentence"] for r in rows]
    refs = [ds.texts_of(r["sample_id"]) for r in rows]
    return {"bleu4": bleu4(hyps, refs), "rouge_l": rouge_l(hyps, refs)}
