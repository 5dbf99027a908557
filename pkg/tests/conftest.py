"""Shared fixtures, including the desk-scale end-to-end experiment used by
the acceptance suite: a 51-volume seeded phantom dataset split 40/11 by
eye, trained once per input arm (OCT-only plus three fusion factors), with
paired clean/shadowed test variants for the artifact-robustness check."""

import time
from dataclasses import dataclass, field

import numpy as np
import pytest

from octfluid.datasets import LabeledVolume, random_phantom_spec
from octfluid.metrics import MetricRow, evaluate_model
from octfluid.network import ModelConfig
from octfluid.phantom import ShadowSpec, apply_shadows, generate_phantom
from octfluid.training import TrainConfig, split_dataset, train

DATASET_SEED = 9000
SPLIT_SEED = 777
ARM_SEED = 20
N_VOLUMES = 51
SHAPE = (64, 128, 128)
# six healthy eyes with no fluid, like a small control group
HEALTHY = {8, 17, 26, 35, 44, 50}
BETAS = (0.1, 0.2, 0.3)

ACCEPT_MODEL = ModelConfig(levels=3, base_channels=8, seed=ARM_SEED)


def accept_train_config(beta):
    return TrainConfig(
        max_epochs=2, batch_size=16, seed=ARM_SEED, beta=beta,
        bscan_stride=3, val_fraction=0.1, plateau_patience=2,
    )


def _extra_shadows(seed):
    """Standard artifact set for test volumes whose recipe carries none."""
    rng = np.random.default_rng([seed, 23])
    return [
        ShadowSpec(
            kind="vessel",
            location={"width": int(rng.integers(12, SHAPE[2] - 12)), "half_width": 2},
            attenuation=float(rng.uniform(0.4, 0.6)),
        ),
        ShadowSpec(
            kind="floater",
            location={
                "bscan": int(rng.integers(8, SHAPE[0] - 8)),
                "width": int(rng.integers(12, SHAPE[2] - 12)),
                "radius": float(rng.uniform(5.0, 9.0)),
            },
            attenuation=float(rng.uniform(0.4, 0.6)),
        ),
    ]


@dataclass
class PhantomExperiment:
    rows: dict  # beta (None for OCT-only) -> MetricRow on the shared test split
    f1_clean: float  # best fused arm on all-clean test variants
    f1_shadowed: float  # same model on the same anatomies with shadows applied
    n_volumes: int
    n_train: int
    n_test: int
    shape: tuple
    seconds: dict = field(default_factory=dict)


def _spec_for(i):
    return random_phantom_spec(
        seed=DATASET_SEED + i,
        shape=SHAPE,
        with_fluid=(i not in HEALTHY),
        shadowed=(i % 5 < 4),
    )


@pytest.fixture(scope="session")
def phantom_experiment():
    specs = [_spec_for(i) for i in range(N_VOLUMES)]
    eye_ids = [f"eye-{spec.seed:05d}" for spec in specs]
    train_eyes, test_eyes = split_dataset(eye_ids, 40 / 51, seed=SPLIT_SEED)
    test_set = set(test_eyes)

    t0 = time.perf_counter()
    train_vols = []
    test_vols = []
    test_variants = []  # (clean, shadowed) pairs over identical anatomy + speckle
    for spec, eye in zip(specs, eye_ids):
        oct_v, octa_v, truth = generate_phantom(spec)
        clean = LabeledVolume(oct=oct_v, octa=octa_v, labels=truth)
        if eye in test_set:
            shadows = spec.shadow_spec or _extra_shadows(spec.seed)
            s_oct, s_octa = apply_shadows(oct_v, octa_v, shadows, seed=spec.seed)
            shadowed = LabeledVolume(oct=s_oct, octa=s_octa, labels=truth)
            test_vols.append(shadowed if spec.shadow_spec else clean)
            test_variants.append((clean, shadowed))
        elif spec.shadow_spec:
            s_oct, s_octa = apply_shadows(oct_v, octa_v, spec.shadow_spec, seed=spec.seed)
            train_vols.append(LabeledVolume(oct=s_oct, octa=s_octa, labels=truth))
        else:
            train_vols.append(clean)
    gen_seconds = time.perf_counter() - t0
    assert len(train_vols) == 40 and len(test_vols) == 11

    rows = {}
    seconds = {"dataset": gen_seconds}
    best_fused_model = None
    best_fused_f1 = -1.0
    for beta in (None,) + BETAS:
        t0 = time.perf_counter()
        model, _ = train(train_vols, accept_train_config(beta), ACCEPT_MODEL)
        row = evaluate_model(model, test_vols, beta)
        rows[beta] = row
        seconds[row.label] = time.perf_counter() - t0
        print(
            f"[experiment] {row.label}: F1 {row.f1_mean:.3f}+/-{row.f1_std:.3f} "
            f"AROC {row.aroc_mean:.3f} IoU {row.iou_mean:.3f} "
            f"({seconds[row.label]:.0f}s)",
            flush=True,
        )
        if beta is not None and row.f1_mean > best_fused_f1:
            best_fused_f1 = row.f1_mean
            best_fused_model = (beta, model)

    beta_best, model_best = best_fused_model
    clean_row = evaluate_model(
        model_best, [c for c, _ in test_variants], beta_best, label="clean-test"
    )
    shadow_row = evaluate_model(
        model_best, [s for _, s in test_variants], beta_best, label="shadowed-test"
    )
    print(
        f"[experiment] shadow check (beta={beta_best}): clean F1 {clean_row.f1_mean:.3f} "
        f"vs shadowed F1 {shadow_row.f1_mean:.3f}",
        flush=True,
    )

    return PhantomExperiment(
        rows=rows,
        f1_clean=clean_row.f1_mean,
        f1_shadowed=shadow_row.f1_mean,
        n_volumes=N_VOLUMES,
        n_train=len(train_vols),
        n_test=len(test_vols),
        shape=SHAPE,
        seconds=seconds,
    )
