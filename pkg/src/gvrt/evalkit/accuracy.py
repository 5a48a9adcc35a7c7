from __future__ import annotations

import torch

from gvrt.data import iter_eval_batches


@torch.no_grad()
def predict(model, ds, keys, batch_size=256):
    """Class probabilities for ``(id, domain)`` keys, computed in eval mode."""
    encoder = model.encoder if hasattr(model, "encoder") else model
    was_training = encoder.training
    encoder.eval()
    out = []
    for b in iter_eval_batches(ds, keys, batch_size):
        _, logits = encoder(b.images)
        out.append(torch.softmax(logits, dim=-1))
    encoder.train(was_training)
    return torch.cat(out) if out else torch.empty(0, ds.num_classes)


def accuracy_from_probs(probs, labels) -> float:
    """Percentage of rows whose argmax (lowest class id on ties) equals the label."""
    if len(labels) == 0:
        raise ValueError("accuracy of an empty id list is undefined")
    pred = probs.argmax(dim=-1)
    return 100.0 * float((pred == torch.as_tensor(labels)).sum()) / len(labels)


def evaluate_accuracy(model, ds, ids, domain) -> float:
    """Accuracy in [0, 100] over ``ids`` rendered in ``domain``."""
    ids = list(ids)
    if not ids:
        raise ValueError("accuracy of an empty id list is undefined")
    probs = predict(model, ds, [(i, domain) for i in ids])
    return accuracy_from_probs(probs, [ds.label_of(i) for i in ids])


def evaluate_keys(model, ds, keys) -> float:
    keys = list(keys)
    if not keys:
        raise ValueError("accuracy of an empty id list is undefined")
    return accuracy_from_probs(predict(model, ds, keys), [ds.label_of(i) for i, _ in keys])
