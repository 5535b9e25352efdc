"""Scaled-down benchmark runs on the synthetic corpus (noise mixtures, cluster
counts, pairing strategies, flip symmetry).  Shared by the CLI and the tests."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import synth
from .keypoints import KeypointSet, init_mixture
from .pipeline import evaluate_stage1, evaluate_stage2
from .training import TrainConfig, run_stage1, run_stage2

log = logging.getLogger(__name__)

__all__ = ["DESK", "BenchmarkResult", "mixture_keypoints", "train_and_evaluate", "noise_mixture",
           "cluster_sweep", "strategy_sweep", "symmetric_corpus"]

# Desk-scale training schedule: a CPU-sized version of the full defaults.
DESK = dict(warmup_iters=300, batch_size=8, hidden=16, recluster_every=150, total_rounds=10,
            learning_rate=1e-3, stage2_iters=600, K=10, M=30, nms_threshold=0.1)


@dataclass
class BenchmarkResult:
    label: str
    config: TrainConfig
    stage1_nme: list = field(default_factory=list)  # forward NME after each round
    stage1_bwd: list = field(default_factory=list)
    points_per_image: list = field(default_factory=list)
    stage1_report: object = None
    stage2_report: object = None
    stage2_flip_report: object = None
    state: object = None
    stage2: object = None

    def summary(self) -> dict:
        out = {"label": self.label, "stage1_forward_nme": self.stage1_nme[-1] if self.stage1_nme else None,
               "stage1_backward_nme": self.stage1_bwd[-1] if self.stage1_bwd else None,
               "points_per_image": self.points_per_image[-1] if self.points_per_image else None}
        if self.stage2_report is not None:
            out["stage2_forward_nme"] = self.stage2_report.forward_nme
            out["stage2_backward_nme"] = self.stage2_report.backward_nme
        if self.stage2_flip_report is not None:
            out["stage2_flip_forward_nme"] = self.stage2_flip_report.forward_nme
        return out


def mixture_keypoints(corpus, n_points: int, real_ratio: float, jitter_px: float, seed: int = 0,
                      grid=(32, 32)) -> list[KeypointSet]:
    """Noise-mixture initial keypoints; images with fewer visible landmarks than
    requested real points use all visible ones and pad with random points."""
    out = []
    for s in corpus:
        n_real = min(int(round(real_ratio * n_points)), int(s.visible.sum()))
        out.append(init_mixture(s, n_points, n_real / n_points, jitter_px, seed, grid))
    return out


def _corpora(n_train, n_test, seed, **kw):
    train = synth.generate_corpus(n_train, seed=seed, **kw)
    test = synth.generate_corpus(n_test, seed=seed + 10_000, **kw)
    return train, test


def train_and_evaluate(label, train, test, keypoints, config: TrainConfig, stage2: bool = True,
                       test_flip: bool = False, track_rounds: bool = True) -> BenchmarkResult:
    res = BenchmarkResult(label, config)

    def on_round(state):
        if not track_rounds and state.round < config.total_rounds:
            return
        rep = evaluate_stage1(state, train, test, config)
        res.stage1_nme.append(rep.forward_nme)
        res.stage1_bwd.append(rep.backward_nme)
        res.points_per_image.append(state.labels.points_per_image())
        res.stage1_report = rep
        log.info("%s round %d: forward %.2f backward %.2f ppi %.2f", label, state.round,
                 rep.forward_nme, rep.backward_nme, res.points_per_image[-1])

    res.state = run_stage1(train, keypoints, config, round_callback=on_round)
    if stage2:
        res.stage2 = run_stage2(res.state, train, config)
        res.stage2_report = evaluate_stage2(res.stage2, train, test)
        if test_flip:
            res.stage2_flip_report = evaluate_stage2(res.stage2, train, test, test_flip=True)
    return res


def noise_mixture(ratios=(1.0, 0.4, 0.2), jitter_px: float = 3.0, n_points: int = 15, n_train: int = 300,
                  n_test: int = 100, seed: int = 0, corpora=None, **overrides) -> dict[float, BenchmarkResult]:
    """One run per real-point ratio on the same corpus."""
    cfg = TrainConfig(**{**DESK, "seed": seed, **overrides})
    train, test = corpora or _corpora(n_train, n_test, seed)
    out = {}
    for r in ratios:
        kps = mixture_keypoints(train, n_points, r, jitter_px, seed)
        out[r] = train_and_evaluate(f"ratio={r}", train, test, kps, cfg)
    return out


def cluster_sweep(Ms=(10, 30), K: int = 10, n_train: int = 300, n_test: int = 100, seed: int = 0,
                  flip_prob: float = 0.5, max_rotation: float = np.pi, n_points: int = 15,
                  jitter_px: float = 0.0, corpora=None, **overrides) -> dict[int, BenchmarkResult]:
    """Stage-1 accuracy against the number of training clusters M under strong viewpoint change."""
    train, test = corpora or _corpora(n_train, n_test, seed, flip_prob=flip_prob, max_rotation=max_rotation)
    kps = mixture_keypoints(train, n_points, 1.0, jitter_px, seed)
    out = {}
    for M in Ms:
        cfg = TrainConfig(**{**DESK, "seed": seed, "K": K, **overrides, "M": M})
        out[M] = train_and_evaluate(f"M={M}", train, test, kps, cfg, stage2=False, track_rounds=False)
    return out


STRATEGIES = {
    f"{c}+{n}": dict(correspondence=c, negative_strategy=n)
    for c in ("clustering", "equivariance") for n in ("same_image", "different_cluster")
}


def strategy_sweep(names=tuple(STRATEGIES), n_train: int = 300, n_test: int = 100, seed: int = 0,
                   real_ratio: float = 1.0, jitter_px: float = 3.0, n_points: int = 15,
                   corpora=None, **overrides) -> dict[str, BenchmarkResult]:
    train, test = corpora or _corpora(n_train, n_test, seed)
    kps = mixture_keypoints(train, n_points, real_ratio, jitter_px, seed)
    out = {}
    for name in names:
        cfg = TrainConfig(**{**DESK, "seed": seed, **overrides, **STRATEGIES[name]})
        out[name] = train_and_evaluate(name, train, test, kps, cfg, stage2=False, track_rounds=False)
    return out


def symmetric_corpus(n_train: int = 300, n_test: int = 100, seed: int = 0, flip_prob: float = 0.0):
    """Bilaterally symmetric templates (every instance is mirror-symmetric)."""
    return _corpora(n_train, n_test, seed, flip_prob=flip_prob)
