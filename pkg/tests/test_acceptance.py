"""Acceptance suite: every release gate runs here at its pinned tolerance
and prints one PASS/FAIL line (run with -s to stream them).

The desk-scale end-to-end gates (training on the 51-volume seeded phantom
dataset) share the session-scoped `phantom_experiment` fixture, so the
four model trainings run once for the whole suite.
"""

import numpy as np
import pytest
import torch

from octfluid.grading import GraderSet, vote_merge
from octfluid.losses import LossConfig, jaccard_class_loss, total_loss
from octfluid.metrics import ConfusionCounts, aroc, f1, iou
from octfluid.network import ModelConfig, build_model
from octfluid.phantom import Ellipsoid, PhantomSpec, SurfaceUndulation
from octfluid.preprocess import FusionConfig, fuse
from octfluid.registration import (
    estimate_bm_surface,
    flatten_axial,
    register_lateral,
    vessel_enface,
)
from octfluid.datasets import LabeledVolume, synthesize_labeled
from octfluid.volumes import (
    FLUID,
    LabelVolume,
    ProbabilityVolume,
    ScanVolume,
    VolumeFormatError,
    load_volume,
    save_volume,
)
from octfluid.volumetry import connected_components, enface_projection, fluid_volume


def check(name, condition, detail=""):
    line = f"[{'PASS' if condition else 'FAIL'}] {name}"
    if detail:
        line += f" :: {detail}"
    print(line, flush=True)
    assert condition, line


# ---------------------------------------------------------------- formulas


class TestFormulaOracles:
    def test_fusion_formula(self):
        oct_v = ScanVolume(voxels=np.full((1, 1, 1), 0.5, dtype=np.float32),
                           spacing_um=(10, 3, 10), modality="oct", volume_id="v")
        octa_v = ScanVolume(voxels=np.full((1, 1, 1), 0.9, dtype=np.float32),
                            spacing_um=(10, 3, 10), modality="octa", volume_id="v")
        fused = float(fuse(oct_v, octa_v, FusionConfig(0.20)).voxels[0, 0, 0])
        exact_oct = np.array_equal(fuse(oct_v, octa_v, FusionConfig(0.0)).voxels, oct_v.voxels)
        exact_octa = np.array_equal(fuse(oct_v, octa_v, FusionConfig(1.0)).voxels, octa_v.voxels)
        check("fusion blend hand value (float32)", abs(fused - 0.58) <= 1e-4,
              f"(1-0.2)*0.5 + 0.2*0.9 = {fused}")
        check("fusion endpoints exact", exact_oct and exact_octa)

    def test_jaccard_loss_formula(self):
        y = torch.zeros(20, 20, dtype=torch.float64)
        y[:5, :] = 1  # 100 positive pixels
        j_missed = float(jaccard_class_loss(y, torch.zeros_like(y), 100.0))
        j_perfect = float(jaccard_class_loss(y, y.clone(), 100.0))
        j_empty = float(jaccard_class_loss(torch.zeros(8, 8), torch.zeros(8, 8), 100.0))
        check("per-class smoothed Jaccard, all missed", abs(j_missed - 50.0) <= 1e-6,
              f"expected 100*100/200 = 50, got {j_missed}")
        check("per-class smoothed Jaccard, perfect and empty",
              abs(j_perfect) <= 1e-6 and abs(j_empty) <= 1e-6)

    def test_weighted_total_formula(self):
        y = np.zeros((20, 20, 3))
        y[:5, :, 2] = 1
        y[5:, :, 0] = 1
        yhat = np.zeros_like(y)
        yhat[..., 0] = y[..., 0]
        yhat[..., 1] = y[..., 1]
        cfg = LossConfig(include_cross_entropy=False)
        total = float(total_loss(torch.tensor(y), torch.tensor(yhat), cfg))
        check("weighted class combination", abs(total - 25.0) <= 1e-6,
              f"0.5*50 + 0.25*0 + 0.25*0 = {total}")
        with pytest.raises(ValueError):
            LossConfig(class_weights=(0.5, 0.3, 0.3))
        check("weight normalization enforced", True, "(0.5, 0.3, 0.3) rejected")

    def test_f1_and_iou_formulas(self):
        c = ConfusionCounts(tp=40, fp=10, fn=10, tn=100)
        check("overlap F1", abs(f1(c) - 0.8) <= 1e-6, f"2*40/(80+10+10) = {f1(c)}")
        c2 = ConfusionCounts(tp=40, fp=12, fn=8, tn=0)
        check("IoU", abs(iou(c2) - 40 / 60) <= 1e-4, f"40/60 = {iou(c2)}")

    def test_aroc_formula(self):
        hand = aroc(np.array([0.9, 0.8, 0.7, 0.1]), np.array([1, 0, 1, 0], dtype=bool))
        check("rank-based AROC hand case", abs(hand - 0.75) <= 1e-6, f"3 of 4 pairs = {hand}")
        rng = np.random.default_rng(12)
        scores = rng.choice([0.1, 0.25, 0.5, 0.75, 0.9], size=200)
        mask = rng.random(200) > 0.6
        pos, neg = scores[mask], scores[~mask]
        wins = sum(float(p > n) + 0.5 * float(p == n) for p in pos for n in neg)
        brute = wins / (len(pos) * len(neg))
        check("rank-based AROC vs exhaustive pairwise oracle",
              abs(aroc(scores, mask) - brute) <= 1e-6, f"{aroc(scores, mask)} vs {brute}")


# ---------------------------------------------------------------- gradients


class TestGradientCheck:
    def test_loss_gradient_float32(self):
        # FD oracle: central differences at float32-quantized points,
        # evaluated in float64 so the oracle itself is not the noise floor
        rng = np.random.default_rng(2024)
        cfg = LossConfig()
        worst = 0.0
        for _ in range(20):
            yhat = rng.uniform(0.05, 0.95, size=(8, 8, 3)).astype(np.float32)
            y = np.eye(3, dtype=np.float32)[rng.integers(0, 3, size=(8, 8))]
            t = torch.tensor(yhat, requires_grad=True)
            total_loss(torch.tensor(y), t, cfg).backward()
            analytic = t.grad.numpy().astype(np.float64)
            y64 = torch.tensor(y, dtype=torch.float64)
            eps = np.float32(1e-3)
            fd = np.zeros(yhat.shape)
            for idx in np.ndindex(yhat.shape):
                plus, minus = yhat.copy(), yhat.copy()
                plus[idx] += eps
                minus[idx] -= eps
                fd[idx] = (
                    float(total_loss(y64, torch.tensor(plus, dtype=torch.float64), cfg))
                    - float(total_loss(y64, torch.tensor(minus, dtype=torch.float64), cfg))
                ) / (float(plus[idx]) - float(minus[idx]))
            rel = np.linalg.norm(fd - analytic) / np.linalg.norm(fd)
            worst = max(worst, rel)
        check("loss gradient vs central differences (float32, 20 instances)",
              worst <= 1e-3, f"worst relative error {worst:.2e} <= 1e-3")

    def test_loss_gradient_float64(self):
        rng = np.random.default_rng(77)
        cfg = LossConfig()
        worst = 0.0
        for _ in range(5):
            yhat = rng.uniform(0.05, 0.95, size=(8, 8, 3))
            y = np.eye(3)[rng.integers(0, 3, size=(8, 8))]
            t = torch.tensor(yhat, requires_grad=True)
            total_loss(torch.tensor(y), t, cfg).backward()
            analytic = t.grad.numpy()
            y64 = torch.tensor(y)
            eps = 1e-6
            fd = np.zeros_like(yhat)
            for idx in np.ndindex(yhat.shape):
                plus, minus = yhat.copy(), yhat.copy()
                plus[idx] += eps
                minus[idx] -= eps
                fd[idx] = (
                    float(total_loss(y64, torch.tensor(plus), cfg))
                    - float(total_loss(y64, torch.tensor(minus), cfg))
                ) / (2 * eps)
            worst = max(worst, np.linalg.norm(fd - analytic) / np.linalg.norm(fd))
        check("loss gradient vs central differences (float64)",
              worst <= 1e-6, f"worst relative error {worst:.2e} <= 1e-6")


# ---------------------------------------------------------------- network


class TestNetworkContracts:
    def test_network_contracts(self):
        config = ModelConfig(levels=3, base_channels=8, seed=9)
        m1, m2 = build_model(config), build_model(config)
        deterministic = all(
            torch.equal(a, b) for a, b in zip(m1.state_dict().values(), m2.state_dict().values())
        )
        check("build determinism under fixed seed", deterministic)

        shapes_ok = True
        for h, w in [(128, 128), (61, 77), (40, 96)]:
            with torch.no_grad():
                out = m1(torch.rand(1, 1, h, w))
            shapes_ok &= out.shape == (1, 3, h, w)
        check("output spatial shape equals input shape", shapes_ok)

        with torch.no_grad():
            probs = m1(torch.rand(2, 1, 64, 64))
        softmax_err = float((probs.sum(dim=1) - 1.0).abs().max())
        check("per-pixel softmax sums to 1", softmax_err <= 1e-5, f"max error {softmax_err:.1e}")

        x = torch.rand(8, 1, 64, 64)
        with torch.no_grad():
            alone = m1(x[:1])
            batched = m1(x)
        batch_err = float((alone[0] - batched[0]).abs().max())
        check("eval-mode batch independence", batch_err <= 1e-5, f"max deviation {batch_err:.1e}")


# ---------------------------------------------------------------- voting


class TestVoting:
    def test_voting_exhaustive(self):
        from collections import Counter
        from itertools import product

        def make(codes, gid):
            return LabelVolume(codes=np.array(codes, dtype=np.uint8).reshape(1, 1, 1),
                               spacing_um=(1, 1, 1), provenance="grader",
                               volume_id="v", grader_id=gid)

        mismatches = 0
        unresolved_total = 0
        for a, b, c in product(range(3), repeat=3):
            merged, count = vote_merge(GraderSet(grades=(make(a, "g1"), make(b, "g2"),
                                                         make(c, "g3"))))
            code, votes = Counter((a, b, c)).most_common(1)[0]
            expected = code if votes >= 2 else 255
            mismatches += int(merged.codes[0, 0, 0] != expected)
            unresolved_total += count
        check("all 27 vote triples match the majority oracle", mismatches == 0)
        check("exactly 6 triples flagged unresolved", unresolved_total == 6,
              f"found {unresolved_total}")

        rng = np.random.default_rng(5)
        grids = [rng.integers(0, 3, size=(4, 16, 16)) for _ in range(3)]
        outputs = []
        from itertools import permutations
        for perm in permutations(range(3)):
            gs = GraderSet(grades=tuple(
                LabelVolume(codes=grids[i].astype(np.uint8), spacing_um=(1, 1, 1),
                            provenance="grader", volume_id="v", grader_id=f"g{k+1}")
                for k, i in enumerate(perm)
            ))
            merged, count = vote_merge(gs)
            outputs.append((merged.codes.tobytes(), count))
        check("voting is permutation-invariant on random volumes",
              len(set(outputs)) == 1)


# ---------------------------------------------------------------- end-to-end (shared fixture)


class TestPhantomEndToEnd:
    def test_trained_fused_model_meets_gates(self, phantom_experiment):
        exp = phantom_experiment
        check("dataset matches the desk-scale protocol",
              exp.n_volumes == 51 and exp.n_train == 40 and exp.n_test == 11
              and exp.shape == (64, 128, 128),
              f"{exp.n_volumes} volumes of {exp.shape} split {exp.n_train}/{exp.n_test}")
        row = exp.rows[0.2]
        check("fused model (factor 0.20) fluid F1 >= 0.80 on held-out volumes",
              row.f1_mean >= 0.80, f"F1 {row.f1_mean:.3f} +/- {row.f1_std:.3f}")
        check("fused model (factor 0.20) AROC >= 0.95 on held-out volumes",
              row.aroc_mean >= 0.95, f"AROC {row.aroc_mean:.3f} +/- {row.aroc_std:.3f}")

    def test_fusion_benefit(self, phantom_experiment):
        exp = phantom_experiment
        oct_only = exp.rows[None].f1_mean
        fused_best = max(exp.rows[b].f1_mean for b in (0.1, 0.2, 0.3))
        detail = (f"best fused F1 {fused_best:.3f} vs OCT-only {oct_only:.3f} "
                  + str({f"{b}": round(exp.rows[b].f1_mean, 3) for b in (0.1, 0.2, 0.3)}))
        check("best fused model F1 >= OCT-only model F1", fused_best >= oct_only, detail)

    def test_shadow_robustness(self, phantom_experiment):
        exp = phantom_experiment
        gap = abs(exp.f1_shadowed - exp.f1_clean)
        check("shadowed-test F1 within 0.05 of clean-test F1", gap <= 0.05,
              f"clean {exp.f1_clean:.3f} vs shadowed {exp.f1_shadowed:.3f} (gap {gap:.3f})")


# ---------------------------------------------------------------- volumetry


class TestVolumetryAcceptance:
    def test_ellipsoid_volumes_and_components(self):
        spacing = (20.0, 5.0, 15.0)
        pockets = [
            Ellipsoid(center=(20.0, 55.0, 40.0), semi_axes=(9.0, 12.0, 8.0)),
            Ellipsoid(center=(46.0, 62.0, 92.0), semi_axes=(8.0, 10.0, 11.0)),
        ]
        spec = PhantomSpec(
            shape=(64, 120, 128), spacing_um=spacing, ilm_mean_row=22.0, bm_mean_row=102.0,
            surface_undulation=SurfaceUndulation(amplitude=2.0, smoothness=0.8),
            fluid_pockets=pockets, vessel_density=0.0, seed=404,
        )
        labels = synthesize_labeled(spec).labels
        comps = connected_components(labels)
        total_fluid = int((labels.codes == FLUID).sum())
        check("component decomposition conserves voxel counts exactly",
              sum(c.voxel_count for c in comps) == total_fluid and len(comps) == 2,
              f"{len(comps)} components totalling {total_fluid} voxels")

        worst = 0.0
        for pocket, comp in zip(pockets, sorted(comps, key=lambda c: c.bounding_box[0][0])):
            axes_um = [pocket.semi_axes[i] * spacing[i] for i in range(3)]
            analytic = 4.0 / 3.0 * np.pi * np.prod(axes_um) / 1e9
            worst = max(worst, abs(comp.volume_mm3 - analytic) / analytic)
        check("ellipsoid volume within 5% of (4/3)*pi*abc for semi-axes >= 8 voxels",
              worst <= 0.05, f"worst relative error {worst:.3f}")

    def test_equal_area_double_volume_pair(self):
        def make(depth_semi):
            spec = PhantomSpec(
                shape=(64, 120, 128), ilm_mean_row=22.0, bm_mean_row=102.0,
                surface_undulation=SurfaceUndulation(amplitude=2.0, smoothness=0.8),
                fluid_pockets=[Ellipsoid(center=(32, 58, 64), semi_axes=(12, depth_semi, 14))],
                vessel_density=0.0, seed=405,
            )
            return synthesize_labeled(spec).labels

        shallow, deep = make(8.0), make(16.0)
        _, area_shallow = enface_projection(shallow)
        _, area_deep = enface_projection(deep)
        ratio = fluid_volume(deep) / fluid_volume(shallow)
        check("equal-footprint pair: en-face projection cannot separate them",
              abs(area_deep - area_shallow) / area_shallow <= 0.02,
              f"areas {area_shallow:.3f} vs {area_deep:.3f} mm^2")
        check("equal-footprint pair: volume report separates them by ~2x",
              1.9 <= ratio <= 2.1, f"volume ratio {ratio:.3f}")


# ---------------------------------------------------------------- registration


class TestRegistrationAcceptance:
    def test_fifty_random_shifts_recovered_exactly(self):
        def big_spec(noise_seed):
            return PhantomSpec(
                shape=(64, 80, 128), ilm_mean_row=18.0, bm_mean_row=58.0,
                surface_undulation=SurfaceUndulation(amplitude=3.0, smoothness=0.8),
                vessel_density=14.0, seed=500, noise_seed=noise_seed,
            )

        base = synthesize_labeled(big_spec(None))
        fresh = synthesize_labeled(big_spec(12345))  # same anatomy, fresh speckle
        enface_base = vessel_enface(base.octa, base.labels)
        enface_fresh = vessel_enface(fresh.octa, fresh.labels)

        crop_b, crop_w = 32, 64  # max search: +/- 8, +/- 16 (a quarter of each dim)
        origin = (16, 32)
        fixed = enface_base[origin[0]: origin[0] + crop_b, origin[1]: origin[1] + crop_w]
        rng = np.random.default_rng(501)
        failures = []
        for _ in range(50):
            shift = (int(rng.integers(-8, 9)), int(rng.integers(-16, 17)))
            moving = enface_fresh[
                origin[0] + shift[0]: origin[0] + shift[0] + crop_b,
                origin[1] + shift[1]: origin[1] + shift[1] + crop_w,
            ]
            recovered, _ = register_lateral(fixed, moving)
            if recovered != (-shift[0], -shift[1]):
                failures.append((shift, recovered))
        check("50 random lateral shifts recovered exactly under fresh speckle",
              not failures, f"failures: {failures[:3]}" if failures else "50/50 exact")

    def test_axial_flattening_residual(self):
        spec = PhantomSpec(
            shape=(32, 80, 64), ilm_mean_row=18.0, bm_mean_row=58.0,
            surface_undulation=SurfaceUndulation(amplitude=4.0, smoothness=0.7),
            vessel_density=0.0, speckle_contrast=0.0, seed=502,
        )
        vol = synthesize_labeled(spec)
        surface = estimate_bm_surface(vol.labels)
        _, flat_labels = flatten_axial(vol.oct, vol.labels, surface)
        residual = estimate_bm_surface(flat_labels)
        spread = int(residual.max() - residual.min())
        check("axial flattening residual <= 1 row on noiseless phantom",
              spread <= 1, f"post-flatten surface spread {spread} rows")


# ---------------------------------------------------------------- persistence


class TestPersistenceAcceptance:
    def test_hundred_round_trips_per_dtype(self, tmp_path):
        rng = np.random.default_rng(600)
        failures = 0
        for k in range(100):
            shape = tuple(int(rng.integers(1, 7)) for _ in range(3))
            scan = ScanVolume(voxels=rng.random(shape).astype(np.float32),
                              spacing_um=(10, 3, 10), modality="oct", volume_id=f"s{k}")
            labels = LabelVolume(codes=rng.integers(0, 3, size=shape).astype(np.uint8),
                                 spacing_um=(10, 3, 10), provenance="grader",
                                 volume_id=f"l{k}", grader_id="g1")
            raw = rng.random(shape + (3,)) + 0.05
            probs = ProbabilityVolume(probs=(raw / raw.sum(-1, keepdims=True)).astype(np.float32),
                                      spacing_um=(10, 3, 10), volume_id=f"p{k}")
            for tag, vol, payload in (
                ("scan", scan, scan.voxels), ("labels", labels, labels.codes),
                ("probs", probs, probs.probs),
            ):
                path = tmp_path / f"{tag}-{k}.rfnv"
                save_volume(vol, path)
                loaded = load_volume(path)
                loaded_payload = (loaded.codes if tag == "labels"
                                  else loaded.voxels if tag == "scan" else loaded.probs)
                if loaded_payload.tobytes() != payload.tobytes():
                    failures += 1
        check("300 random volumes (100 per dtype) round-trip bit-exactly",
              failures == 0, f"{failures} payload mismatches")

    def test_malformed_file_rejection(self, tmp_path):
        import json
        import struct

        from octfluid.volumes import MAGIC

        good = ScanVolume(voxels=np.zeros((2, 4, 4), dtype=np.float32),
                          spacing_um=(10, 3, 10), modality="oct", volume_id="v")
        path = tmp_path / "good.rfnv"
        save_volume(good, path)
        raw = path.read_bytes()

        cases = {
            "bad magic": b"XXXX" + raw[4:],
            "truncated payload": raw[:-10],
            "trailing bytes": raw + b"\x00" * 4,
            "corrupt header": raw[:10] + b"{" * (len(raw) - 10),
        }
        header = json.dumps({"dtype": "f32", "shape": [1], "order": "bdw",
                             "spacing_um": [1, 1, 1], "modality": "oct"}).encode()
        cases["missing keys"] = MAGIC + struct.pack("<I", len(header)) + header + b"\x00" * 4
        bad_codes_header = json.dumps({
            "dtype": "u8", "shape": [1, 1, 2], "order": "bdw", "spacing_um": [1, 1, 1],
            "modality": "labels", "volume_id": "v", "provenance": "grader",
        }).encode()
        cases["invalid label payload"] = (
            MAGIC + struct.pack("<I", len(bad_codes_header)) + bad_codes_header + bytes([0, 9])
        )

        survived = []
        for name, blob in cases.items():
            target = tmp_path / "bad.rfnv"
            target.write_bytes(blob)
            try:
                load_volume(target)
                survived.append(name)
            except VolumeFormatError:
                pass
        check("malformed-file rejection suite", not survived,
              f"accepted: {survived}" if survived else f"{len(cases)} corruptions rejected")
