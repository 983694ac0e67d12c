"""Compare language-aware head initialisation with random initialisation.

Class embeddings are the teacher's class prototypes mapped through the
student's initial extractor (centred, norm-matched). Both variants use the
cosine-aligned KD head and identical data, teacher and batch order.
"""
import argparse
import logging

import numpy as np

from dholab.experiments import CONFLICT_BENCHMARK, make_benchmark
from dholab.inference import evaluate_heads, grid_search
from dholab.model import DHO, build_model, init_language_aware, prototype_embeddings
from dholab.seeding import rng_for
from dholab.trainer import TrainConfig, train


def final_accuracy(seed: int, language: bool, kd_head: str) -> float:
    cfg = TrainConfig(seed=seed)
    data = make_benchmark(CONFLICT_BENCHMARK, seed, cfg.zeta)
    spec = data.spec
    model = build_model(spec.input_dim, spec.num_classes, (64, 64), 32, mode=DHO, kd_head=kd_head,
                        seed=int(rng_for(seed, "init").integers(2**31)))
    if language:
        norm = float(np.linalg.norm(model.ce_head.W, axis=1).mean())
        emb = prototype_embeddings(model.extractor, data.means, norm)
        init_language_aware(model.ce_head, emb)
        init_language_aware(model.kd_head, emb)
    train(model, data.split.strip_labels(data.train), data.split, data.teacher, cfg)
    return evaluate_heads(model, data.test, grid_search(model, data.val).best).combined


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--kd-head", choices=["cosine", "linear"], default="cosine")
    args = ap.parse_args()
    logging.basicConfig(level=logging.ERROR)
    wins = 0
    for seed in args.seeds:
        rand, lang = final_accuracy(seed, False, args.kd_head), final_accuracy(seed, True, args.kd_head)
        wins += lang >= rand
        print(f"seed {seed}: random={rand:.4f} language={lang:.4f}")
    print(f"language >= random on {wins}/{len(args.seeds)} seeds")


if __name__ == "__main__":
    main()
