"""Shared test utilities: tiny datasets and independent numerical oracles."""

import numpy as np
import torch

from lorot.datasets import LabeledDataset


def tiny_dataset(n=64, num_classes=2, image_size=8, seed=0, split="train", one_pixel=False):
    """Small random dataset; with ``one_pixel`` the class is encoded in a single
    corner pixel (0.1 vs 0.9) on an otherwise noisy background.
    """
    rng = np.random.default_rng(seed)
    labels = np.arange(n, dtype=np.int64) % num_classes
    images = rng.uniform(0.3, 0.7, size=(n, image_size, image_size, 3)).astype(np.float32)
    if one_pixel:
        for i, label in enumerate(labels):
            images[i, 0, 0, :] = 0.1 + 0.8 * (label % 2)
    else:
        for i, label in enumerate(labels):
            images[i, :, :, label % 3] += 0.2 * (label + 1) / num_classes
    images = np.clip(images, 0.0, 1.0)
    return LabeledDataset(
        name=f"tiny-{n}", split=split, images=images, labels=labels, num_classes=num_classes
    )


def central_difference_grads(loss_fn, params, coords, h_scale=1e-5):
    """Finite-difference gradient oracle: central differences on selected flat
    coordinates of ``params``. ``coords`` is a list of (param_index, flat_index).
    """
    grads = []
    with torch.no_grad():
        for pi, fi in coords:
            flat = params[pi].data.view(-1)
            orig = flat[fi].item()
            h = h_scale * max(1.0, abs(orig))
            flat[fi] = orig + h
            up = float(loss_fn())
            flat[fi] = orig - h
            down = float(loss_fn())
            flat[fi] = orig
            grads.append((up - down) / (2.0 * h))
    return np.array(grads)


def auroc_bruteforce(in_scores, out_scores):
    """O(n*m) pair-counting AUROC with half credit for ties."""
    in_scores = np.asarray(in_scores, dtype=np.float64)
    out_scores = np.asarray(out_scores, dtype=np.float64)
    total = 0.0
    for a in in_scores:
        for b in out_scores:
            if a > b:
                total += 1.0
            elif a == b:
                total += 0.5
    return total / (len(in_scores) * len(out_scores))
