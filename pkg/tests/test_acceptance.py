"""End-to-end acceptance suite.

One test per criterion, each at its stated tolerance and runtime bound;
the terminal summary prints one pass/fail line per criterion (see
conftest). Training-based criteria share the session-scoped toy runs.
"""

import math
import time

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from meer import evaluation as ev
from meer import face_data as fd
from meer import losses
from meer import training as tr
from meer.generator_gan import plain_skips, suppress_skips
from meer.losses import LossWeights
from meer.model_core import (
    ArcClassifier,
    MaskDecouplingModule,
    ModelConfig,
    RecognitionModel,
    decouple,
)
from test_evaluation import concordance_auc, random_instance, scan_fold_accuracy, scan_tpr_at_far
from test_losses import finite_difference_grad, rel_error


@pytest.mark.criterion(1, "x_id + x_mask reproduces X for 1000 random draws (rel err < 1e-6)")
def test_criterion_1_decoupling_identity():
    t0 = time.perf_counter()
    g = torch.Generator().manual_seed(100)
    worst = 0.0
    for _ in range(1000):
        x = torch.randn(2, 16, 7, 7, generator=g) * 10
        phi = torch.rand(2, 16, 7, 7, generator=g).clamp(1e-6, 1 - 1e-6)
        x_id, x_mask = decouple(x, phi)
        rel = ((x_id + x_mask - x).abs() / x.abs().clamp(min=1e-3)).max().item()
        worst = max(worst, rel)
    assert worst < 1e-6
    assert time.perf_counter() - t0 < 5.0


@pytest.mark.criterion(2, "attention map stays strictly inside (0, 1) over 1000 passes")
def test_criterion_2_attention_range():
    t0 = time.perf_counter()
    torch.manual_seed(101)
    g = torch.Generator().manual_seed(102)
    passes = 0
    for trial in range(50):
        mdm = MaskDecouplingModule(16)
        with torch.no_grad():
            for p in mdm.parameters():
                p.add_(torch.randn(p.shape, generator=g))  # widen the weight spread
        for _ in range(20):
            x = torch.randn(2, 16, 7, 7, generator=g) * (10.0 ** (trial % 4))
            with torch.no_grad():
                phi = mdm.attention_map(x)
            assert (phi > 0.0).all() and (phi < 1.0).all()
            passes += 1
    assert passes == 1000
    assert time.perf_counter() - t0 < 10.0


@pytest.mark.criterion(3, "pattern vocabulary has exactly 101 classes and round-trips")
def test_criterion_3_pattern_vocabulary():
    from meer import mask_patterns as mp
    from test_mask_patterns import brute_force_rectangles

    t0 = time.perf_counter()
    vocab = mp.enumerate_patterns(4)
    assert len(vocab) == 101
    assert list(vocab.rectangles[1:]) == brute_force_rectangles(4)
    for cls, rect in enumerate(vocab.rectangles[1:], start=1):
        region = mp.rectangle_pixel_region(rect, 4, 112, 112)
        assert mp.pattern_class_of_region(region, vocab) == cls
    assert time.perf_counter() - t0 < 5.0


@pytest.mark.criterion(4, "closed-form loss values (LSGAN, ln(101), ArcFace degenerate)")
def test_criterion_4_closed_form_losses():
    ones = torch.ones(2, 1, 4, 4)
    halves = torch.full((2, 1, 4, 4), 0.5)
    zeros = torch.zeros(2, 1, 4, 4)
    assert losses.gan_generator_loss(ones).item() == pytest.approx(0.0, abs=1e-8)
    assert losses.gan_generator_loss(halves).item() == pytest.approx(0.125, abs=1e-8)
    assert losses.gan_generator_loss(zeros).item() == pytest.approx(0.5, abs=1e-8)
    assert losses.gan_discriminator_loss(ones, zeros).item() == pytest.approx(0.0, abs=1e-8)
    assert losses.gan_discriminator_loss(halves, halves).item() == pytest.approx(0.25, abs=1e-8)
    assert losses.gan_discriminator_loss(zeros, ones).item() == pytest.approx(1.0, abs=1e-8)

    uniform = losses.mask_pattern_loss(torch.zeros(4, 101), torch.tensor([0, 1, 50, 100]))
    assert abs(uniform.item() - math.log(101)) < 1e-6

    torch.manual_seed(103)
    emb = torch.randn(16, 32, dtype=torch.float64)
    w = torch.randn(7, 32, dtype=torch.float64)
    y = torch.randint(0, 7, (16,))
    got = losses.arcface_loss(emb, w, y, scale=1.0, margin=0.0)
    cosine = F.normalize(emb, dim=1) @ F.normalize(w, dim=1).t()
    assert abs(got.item() - F.cross_entropy(cosine, y).item()) < 1e-7


@pytest.mark.criterion(5, "finite-difference gradient checks at float64 (rel err < 1e-4)")
def test_criterion_5_gradient_checks():
    t0 = time.perf_counter()
    torch.manual_seed(104)

    # ArcFace wrt embeddings and class weights
    emb = torch.randn(4, 6, dtype=torch.float64, requires_grad=True)
    w = torch.randn(3, 6, dtype=torch.float64, requires_grad=True)
    y = torch.tensor([0, 1, 2, 1])
    losses.arcface_loss(emb, w, y, scale=8.0, margin=0.3).backward()
    fd_emb = finite_difference_grad(
        lambda e: losses.arcface_loss(e, w.detach(), y, scale=8.0, margin=0.3),
        emb.detach().clone())
    fd_w = finite_difference_grad(
        lambda ww: losses.arcface_loss(emb.detach(), ww, y, scale=8.0, margin=0.3),
        w.detach().clone())
    assert rel_error(emb.grad, fd_emb) < 1e-4
    assert rel_error(w.grad, fd_w) < 1e-4

    # reconstruction
    a = torch.randn(1, 3, 4, 4, dtype=torch.float64, requires_grad=True)
    b = torch.randn(1, 3, 4, 4, dtype=torch.float64)
    losses.reconstruction_loss(a, b).backward()
    assert rel_error(a.grad, finite_difference_grad(
        lambda x: losses.reconstruction_loss(x, b), a.detach().clone())) < 1e-4

    # id-preserving
    zf = torch.randn(3, 8, dtype=torch.float64, requires_grad=True)
    zr = torch.randn(3, 8, dtype=torch.float64)
    losses.id_preserving_loss(zf, zr).backward()
    assert rel_error(zf.grad, finite_difference_grad(
        lambda z: losses.id_preserving_loss(z, zr), zf.detach().clone())) < 1e-4

    # LSGAN, both sides
    s = torch.randn(2, 1, 3, 3, dtype=torch.float64, requires_grad=True)
    losses.gan_generator_loss(s).backward()
    assert rel_error(s.grad, finite_difference_grad(
        losses.gan_generator_loss, s.detach().clone())) < 1e-4
    r = torch.randn(2, 1, 3, 3, dtype=torch.float64, requires_grad=True)
    fk = torch.randn(2, 1, 3, 3, dtype=torch.float64)
    losses.gan_discriminator_loss(r, fk).backward()
    assert rel_error(r.grad, finite_difference_grad(
        lambda x: losses.gan_discriminator_loss(x, fk), r.detach().clone())) < 1e-4

    # full image -> Z_id composite on a 16x16 toy model
    cfg = ModelConfig(image_size=16, channels=(4, 8, 8, 16), embed_dim=8,
                      mask_head_hidden=8)
    model = RecognitionModel(cfg).double().eval()
    probe = torch.randn(8, dtype=torch.float64)

    def scalar(img):
        return model(img).z_id[0] @ probe

    img = (torch.rand(1, 3, 16, 16, dtype=torch.float64) * 2 - 1).requires_grad_(True)
    scalar(img).backward()
    auto = img.grad.detach().clone()
    rng = np.random.default_rng(105)
    x0 = img.detach().clone()
    h = 1e-5
    for _ in range(24):
        c = tuple(rng.integers(d) for d in img.shape)
        xp = x0.clone()
        xp[c] += h
        xm = x0.clone()
        xm[c] -= h
        fd_val = (scalar(xp).item() - scalar(xm).item()) / (2 * h)
        ref = auto[c].item()
        assert abs(fd_val - ref) / max(abs(fd_val), abs(ref), 1e-8) < 1e-4

    assert time.perf_counter() - t0 < 120.0


@pytest.mark.criterion(6, "metric implementations equal their exhaustive oracles")
def test_criterion_6_metric_oracles():
    rng = np.random.default_rng(106)
    for _ in range(50):
        sims, labels = random_instance(rng, n=200)
        sims = np.round(sims, 2)  # force ties
        assert abs(ev.roc_auc(sims, labels) - concordance_auc(sims, labels)) < 1e-9
    for _ in range(10):
        sims, labels = random_instance(rng, n=150)
        assert abs(ev.fold_accuracy(sims, labels) - scan_fold_accuracy(sims, labels)) < 1e-9
    for far in (0.01, 0.1):
        for _ in range(10):
            sims, labels = random_instance(rng, n=200)
            assert ev.tpr_at_far(sims, labels, far) == pytest.approx(
                scan_tpr_at_far(sims, labels, far), abs=1e-12)


@pytest.mark.criterion(7, "stage-1 toy overfit: identity acc >= 0.95, pattern acc >= 0.90")
def test_criterion_7_stage1_overfit(stage1_result, toy_dataset):
    assert stage1_result.build_seconds < 600.0
    id_acc = tr.identity_accuracy(stage1_result.model, stage1_result.classifier, toy_dataset)
    pat_acc = tr.pattern_accuracy(stage1_result.model, toy_dataset)
    assert id_acc >= 0.95
    assert pat_acc >= 0.90


def _mean_cos_fake_real(result, toy_dataset, mis_on=True):
    model, decoder = result.model, result.decoder
    model.eval()
    decoder.eval()
    with torch.no_grad():
        sm = torch.from_numpy(toy_dataset.images[toy_dataset.pair_indices])
        ru = torch.from_numpy(toy_dataset.paired_images)
        out = model(sm)
        if mis_on and out.attention is not None:
            skips = suppress_skips(out.encoder, out.attention)
        else:
            skips = plain_skips(out.encoder)
        fake = decoder(skips, out.x_id)
        zf = F.normalize(model(fake).z_id, dim=1)
        zr = F.normalize(model(ru).z_id, dim=1)
    return float((zf * zr).sum(dim=1).mean()), fake, ru, sm


@pytest.mark.criterion(8, "stage-2 direction checks (id-preserving, recon curve, Fig-6 shift)")
def test_criterion_8_stage2_directions(stage1_result, stage2_result, stage2_eta0_result,
                                       toy_manifest, toy_dataset):
    assert stage2_result.build_seconds + stage2_eta0_result.build_seconds < 1200.0

    # (a) id-preserving loss lifts cos(Z_fu, Z_ru)
    cos_eta, *_ = _mean_cos_fake_real(stage2_result, toy_dataset)
    cos_zero, *_ = _mean_cos_fake_real(stage2_eta0_result, toy_dataset)
    assert cos_eta > cos_zero

    # (b) smoothed reconstruction loss decreases from first to last window
    rec = stage2_result.history["L_rec"]
    window = min(50, len(rec) // 2)
    assert np.mean(rec[-window:]) <= np.mean(rec[:window])

    # (c) masked-unmasked intra-class similarity mean rises from stage 1 to stage 2
    m1 = tr.load_recognition_model(stage1_result.checkpoint_path)
    m2 = tr.load_recognition_model(stage2_result.checkpoint_path)
    mean1 = np.mean(list(ev.similarity_distribution(m1, toy_manifest).per_identity.values()))
    mean2 = np.mean(list(ev.similarity_distribution(m2, toy_manifest).per_identity.values()))
    assert mean2 > mean1


@pytest.mark.criterion(9, "all ablation switch combinations run; MIS lowers mask-region error")
def test_criterion_9_ablation_plumbing(toy_root, toy_manifest, toy_model_cfg, toy_weights,
                                       toy_pairs_file, stage2_result, stage2_mis_off_result,
                                       toy_dataset):
    from conftest import toy_train_cfg

    labels = np.array([p.same_identity for p in ev.read_pairs_file(toy_pairs_file)])
    stage1_cache = {}
    metrics = {}
    for mdm_on in (True, False):
        for sc_count in (0, 1, 3):
            for mis_on in (True, False):
                if mdm_on not in stage1_cache:
                    cfg1 = toy_train_cfg(4, mdm_on=mdm_on)
                    stage1_cache[mdm_on] = tr.train_stage1(
                        toy_manifest, cfg1, toy_model_cfg, toy_weights,
                        toy_root / f"abl_s1_mdm{int(mdm_on)}")
                cfg2 = toy_train_cfg(2, mdm_on=mdm_on, sc_count=sc_count, mis_on=mis_on)
                tag = f"abl_mdm{int(mdm_on)}_sc{sc_count}_mis{int(mis_on)}"
                res = tr.train_stage2(stage1_cache[mdm_on].checkpoint_path, toy_manifest,
                                      cfg2, toy_root / tag)
                model = tr.load_recognition_model(res.checkpoint_path)
                pairs = ev.read_pairs_file(toy_pairs_file)
                sims = ev.verify_pairs(model, pairs)
                metrics[tag] = {
                    "acc": ev.fold_accuracy(sims, labels),
                    "auc": ev.roc_auc(sims, labels),
                    "tpr": ev.tpr_at_far(sims, labels, 0.01),
                }
    assert len(metrics) == 12
    for tag, vals in metrics.items():
        for name, v in vals.items():
            assert np.isfinite(v) and 0.0 <= v <= 1.0, (tag, name, v)

    # MIS on vs off: pixel error inside the occluded region of paired toy faces
    def mask_region_error(result, mis_on):
        _, fake, ru, sm = _mean_cos_fake_real(result, toy_dataset, mis_on=mis_on)
        region = (sm != ru).any(dim=1, keepdim=True).float()
        return float(((fake - ru).abs() * region).sum() / (region.sum() * 3))

    err_on = mask_region_error(stage2_result, True)
    err_off = mask_region_error(stage2_mis_off_result, False)
    assert err_on < err_off


@pytest.mark.criterion(10, "fixed-seed reruns match (1e-6); checkpoints round-trip exactly")
def test_criterion_10_determinism_and_persistence(toy_root, toy_manifest, toy_model_cfg,
                                                  toy_weights, stage1_result, toy_dataset):
    from conftest import toy_train_cfg

    a = tr.train_stage1(toy_manifest, toy_train_cfg(3), toy_model_cfg, toy_weights,
                        toy_root / "det_a")
    b = tr.train_stage1(toy_manifest, toy_train_cfg(3), toy_model_cfg, toy_weights,
                        toy_root / "det_b")
    assert abs(a.final_loss - b.final_loss) < 1e-6
    assert np.allclose(a.history["total"], b.history["total"], atol=1e-6)

    model = tr.load_recognition_model(stage1_result.checkpoint_path)
    batch = torch.from_numpy(toy_dataset.images[:16])
    stage1_result.model.eval()
    with torch.no_grad():
        assert torch.equal(model(batch).z_id, stage1_result.model(batch).z_id)
