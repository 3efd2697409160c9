import csv
from dataclasses import replace

import numpy as np
import pytest
import torch

from oarseg.networks import NetworkSpec, build_generator
from oarseg.training import (
    ConfigError,
    PreprocessConfig,
    SegTrainConfig,
    SliceSample,
    SynthesisConfig,
    TrainingDiverged,
    augment,
    desk_segmentation,
    desk_synthesis,
    dump_config,
    hflip,
    load_config,
    lr_schedule,
    param_digest,
    parse_override,
    preprocess_slice,
    random_crop,
    rescale,
    slices_from_volumes,
    train_segmentation,
    train_synthesis,
    unpaired_pools,
)
from oarseg.training.config import DESK_PREPROCESS
from oarseg.voxelio import compute_instance_bbox, rasterize_contour

# ---------------------------------------------------------------- schedule


@pytest.mark.parametrize("epoch,lr", [(0, 0.001), (1.5, 0.0055), (3, 0.01), (4.99, 0.01), (5, 0.001), (7, 0.001), (10, 0.0001), (12, 0.0001)])
def test_full_lr_schedule(epoch, lr):
    assert lr_schedule(epoch, SegTrainConfig()) == pytest.approx(lr, rel=1e-12)


def test_lr_schedule_rejects_negative_epoch():
    with pytest.raises(ValueError):
        lr_schedule(-0.1, SegTrainConfig())


# ---------------------------------------------------------------- preprocessing


def test_full_scale_crop_and_resize():
    out = preprocess_slice(np.random.default_rng(0).normal(40, 100, (512, 512)), "CT", PreprocessConfig())
    assert out.shape == (1, 256, 256)
    assert out.min() >= -1 and out.max() <= 1


def test_phantom_scale_proportional_config():
    assert preprocess_slice(np.zeros((80, 80)), "CT", PreprocessConfig(crop=62, size=64)).shape == (1, 64, 64)


@pytest.mark.parametrize("value,mapped", [(40.0, 0.0), (140.0, 0.5), (-1000.0, -1.0), (3000.0, 1.0)])
def test_constant_slice_maps_to_constant(value, mapped):
    out = preprocess_slice(np.full((300, 300), value), "CT", PreprocessConfig())
    assert torch.allclose(out, torch.full_like(out, mapped), atol=1e-6)


def test_mr_uses_its_own_range():
    out = preprocess_slice(np.full((64, 64), 250.0), "MR", DESK_PREPROCESS)
    assert torch.allclose(out, torch.full_like(out, -0.5))


def test_slice_smaller_than_crop_is_an_error():
    with pytest.raises(ValueError, match="smaller"):
        preprocess_slice(np.zeros((200, 200)), "CT", PreprocessConfig())


def test_annotated_slices_keep_boxes_masks_and_labels_aligned(desk_corpus):
    case = desk_corpus[0]
    samples = slices_from_volumes([(case.ct, case.annotations)], DESK_PREPROCESS)
    assert len(samples) == case.ct.n_slices
    for s in samples:
        assert s.labels.shape == (64, 64) and len(s.boxes) == len(s.classes) == len(s.instance_masks())
        for box, mask, cid in zip(s.boxes.tolist(), s.instance_masks(), s.classes.tolist()):
            assert (s.labels[mask] == cid).all()
            assert compute_instance_bbox(mask.numpy(), min_area=1).bbox == pytest.approx(box, abs=1e-5)


# ---------------------------------------------------------------- augmentation


def _sample(w=64, h=64):
    mask = torch.zeros(1, h, w, dtype=torch.bool)
    mask[0, 10:20, 10:20] = True
    labels = mask[0].long() * 3
    return SliceSample(torch.randn(1, h, w), labels, torch.tensor([[10.0, 10.0, 20.0, 20.0]]), torch.tensor([3]), mask)


def test_flip_example_and_involution():
    s = _sample()
    f = hflip(s)
    assert f.boxes.tolist() == [[44.0, 10.0, 54.0, 20.0]]
    ff = hflip(f)
    assert torch.equal(ff.image, s.image) and torch.equal(ff.boxes, s.boxes) and torch.equal(ff.masks, s.masks)


def test_jitter_scales_boxes_exactly():
    s = _sample(1000, 1000)
    out = rescale(s, 1100)
    assert out.size == (1100, 1100)
    assert out.boxes.tolist() == [[11.0, 11.0, 22.0, 22.0]]


def test_flip_commutes_with_rasterization():
    rng = np.random.default_rng(0)
    for _ in range(20):
        pts = rng.uniform(2, 40, (6, 2))
        w = 48
        a = np.flip(rasterize_contour(pts, (40, w)), axis=1)
        b = rasterize_contour(np.stack([w - pts[:, 0], pts[:, 1]], 1), (40, w))
        np.testing.assert_array_equal(a, b)
        if a.sum() >= 10:
            x0, y0, x1, y1 = compute_instance_bbox(rasterize_contour(pts, (40, w))).tight_bbox
            assert compute_instance_bbox(a).tight_bbox == (w - x1, y0, w - x0, y1)


def test_crop_shift_commutes_with_rasterization():
    rng = np.random.default_rng(1)
    pts = rng.uniform(8, 40, (5, 2))
    mask = torch.from_numpy(rasterize_contour(pts, (48, 48)))[None]
    s = SliceSample(torch.randn(1, 48, 48), mask[0].long(), torch.zeros(0, 4), torch.zeros(0, dtype=torch.long), mask)
    out = random_crop(s, pad=4, top=1, left=7)
    dx, dy = 4 - 7, 4 - 1
    shifted = rasterize_contour(pts + [dx, dy], (48, 48))
    np.testing.assert_array_equal(out.masks[0].numpy(), shifted)


@pytest.mark.parametrize("mode", ["synthesis", "segmentation"])
def test_augment_is_seed_deterministic_and_consistent(mode):
    s = _sample()
    kw = {"scale_jitter": (52, 76)} if mode == "segmentation" else {}
    a, b = augment(s, mode, 5, **kw), augment(s, mode, 5, **kw)
    assert torch.equal(a.image, b.image) and torch.equal(a.boxes, b.boxes)
    # nearest resampling at a non-integer scale moves mask edges by under a pixel
    tol = 1e-6 if mode == "synthesis" else 1.0
    for box, m in zip(a.boxes.tolist(), a.masks):
        assert compute_instance_bbox(m.numpy(), min_area=1, enlarge=1.0).bbox == pytest.approx(box, abs=tol)


def test_unknown_augment_mode():
    with pytest.raises(ValueError):
        augment(_sample(), "rotate", 0)


# ---------------------------------------------------------------- configuration


def test_full_presets_carry_the_full_scale_recipe():
    syn, seg = load_config("synthesis", preset="full"), load_config("segmentation", preset="full")
    assert (syn.lr, syn.batch_size, syn.generator.base_channels) == (2e-4, 1, 64)
    assert (seg.momentum, seg.base_lr, seg.peak_lr, seg.warmup_epochs, seg.epochs) == (0.9, 0.001, 0.01, 3.0, 18)
    assert seg.decay_epochs == (5.0, 10.0) and seg.scale_jitter == (800, 900, 1100, 1200) and seg.roi_batch == 256


def test_config_file_round_trip(tmp_path):
    cfg = desk_synthesis(steps=17, lambda_task=0.5)
    path = tmp_path / "c.yaml"
    path.write_text(dump_config(cfg))
    assert load_config("synthesis", path) == cfg


def test_overrides_reach_nested_keys():
    cfg = load_config("segmentation", overrides=dict([parse_override("preprocess.size=80"), parse_override("anchor_sizes=[4, 8]")]))
    assert cfg.preprocess.size == 80 and cfg.anchor_sizes == (4, 8)


@pytest.mark.parametrize("overrides,key", [({"lr2": 1}, "lr2"), ({"preprocess.zoom": 2}, "preprocess.zoom"), ({"generator.width": 3}, "generator.width")])
def test_unknown_config_keys_are_named(overrides, key):
    with pytest.raises(ConfigError) as err:
        load_config("synthesis", overrides=overrides)
    assert err.value.key == key


def test_config_invariants():
    with pytest.raises(ValueError):
        SynthesisConfig(batch_size=0)
    with pytest.raises(ValueError):
        SegTrainConfig(decay_epochs=(20,))
    with pytest.raises(ValueError):
        SegTrainConfig(scale_jitter=())
    with pytest.raises(ConfigError):
        parse_override("no-equals-sign")


# ---------------------------------------------------------------- synthesis loop


@pytest.fixture(scope="module")
def pools(desk_corpus):
    return unpaired_pools(desk_corpus, DESK_PREPROCESS, seed=0)


def _tiny_synthesis(**kw):
    spec = {"base_channels": 4}
    cfg = desk_synthesis(**{"steps": 4, "checkpoint_every": 2, **kw})
    return replace(
        cfg,
        generator=replace(cfg.generator, **spec),
        discriminator=replace(cfg.discriminator, **spec),
        seg_subnet=replace(cfg.seg_subnet, **spec),
    )


def test_unpaired_pools_are_disjoint(pools):
    ct, mr = pools
    assert not {s.case_id for s in ct} & {s.case_id for s in mr}
    assert all(s.labels is not None for s in ct) and all(s.labels is None for s in mr)


def test_alternation_contract(pools):
    digests = []
    train_synthesis(*pools, _tiny_synthesis(steps=2), hook=lambda step, phase, st: digests.append((phase, st.digests())))
    owners = {"D_t": {"D_t"}, "D_s": {"D_s"}, "generators": {"G_st", "G_ts"}, "subnet": {"subnet"}}
    assert [p for p, _ in digests[:4]] == ["D_t", "D_s", "generators", "subnet"]
    for (_, before), (phase, after) in zip(digests, digests[1:]):
        changed = {k for k in after if after[k] != before[k]}
        assert changed == owners[phase], phase


def test_task_gradient_never_reaches_the_reverse_generator(pools):
    seen = {}

    def hook(step, phase, st):
        if phase == "D_s":
            seen["before"] = {n: p.detach().clone() for n, p in st.modules["G_ts"].named_parameters()}

    cfg = _tiny_synthesis(steps=1, lambda_content=0.0)
    zero_task = train_synthesis(*pools, replace(cfg, lambda_task=0.0), hook=hook)
    with_task = train_synthesis(*pools, cfg, hook=hook)
    for (n, a), (_, b) in zip(zero_task.modules["G_ts"].named_parameters(), with_task.modules["G_ts"].named_parameters()):
        assert torch.equal(a, b), n
    g_a = dict(zero_task.modules["G_st"].named_parameters())
    assert any(not torch.equal(g_a[n], p) for n, p in with_task.modules["G_st"].named_parameters())


def test_zero_lambdas_reduce_to_adversarial_training(pools):
    state = train_synthesis(*pools, _tiny_synthesis(steps=2, lambda_content=0.0, lambda_task=0.0))
    row = state.log[-1]
    assert row["total"] == pytest.approx(row["gan_forward"] + row["gan_backward"])


def test_synthesis_reruns_are_identical(pools):
    a = train_synthesis(*pools, _tiny_synthesis())
    b = train_synthesis(*pools, _tiny_synthesis())
    assert a.log == b.log and a.digests() == b.digests()


def test_synthesis_resume_equals_uninterrupted(pools, tmp_path):
    full = train_synthesis(*pools, _tiny_synthesis(), tmp_path / "full")
    part = train_synthesis(*pools, _tiny_synthesis(), tmp_path / "part", stop_at=2)
    assert part.step == 2 and (tmp_path / "part" / "ckpt_000002").exists()
    resumed = train_synthesis(*pools, _tiny_synthesis(), tmp_path / "part", resume_from=tmp_path / "part" / "ckpt_000002")
    assert resumed.log == full.log[2:]
    assert resumed.digests() == full.digests()
    with open(tmp_path / "part" / "train_log.csv") as fh, open(tmp_path / "full" / "train_log.csv") as gh:
        assert list(csv.DictReader(fh)) == list(csv.DictReader(gh))


def test_divergence_guard_names_the_term(pools):
    ct, mr = pools
    bad = [replace(ct[0], image=torch.full_like(ct[0].image, float("nan")))]
    with pytest.raises(TrainingDiverged) as err:
        train_synthesis(bad, mr, _tiny_synthesis(steps=1))
    assert err.value.step == 0 and err.value.last_checkpoint is None


def test_synthesis_rejects_shared_cases(pools):
    ct, _ = pools
    with pytest.raises(ValueError, match="share"):
        train_synthesis(ct, [replace(ct[0], labels=None)], _tiny_synthesis())


# ---------------------------------------------------------------- segmentation loop


def _tiny_seg(**kw):
    return desk_segmentation(
        epochs=2, warmup_epochs=0.5, decay_epochs=(1.0,), base_channels=4, roi_batch=8, rpn_batch=32,
        validate_every_epoch=False, **kw,
    )


@pytest.fixture(scope="module")
def seg_train(desk_corpus):
    samples = slices_from_volumes([(c.ct, c.annotations) for c in desk_corpus[:2]], DESK_PREPROCESS)
    return [s for s in samples if len(s.boxes) >= 2][:6]


def test_ct_only_training_needs_no_generator(seg_train):
    state = train_segmentation(seg_train, _tiny_seg())
    assert state.step == 2 * len(seg_train) and state.epoch == 2
    lrs = [r["lr"] for r in state.log]
    assert lrs[0] == pytest.approx(0.001) and lrs[-1] == pytest.approx(0.001)


def test_realized_roi_ratio_is_one_to_three(seg_train):
    state = train_segmentation(seg_train, _tiny_seg())
    pos = sum(r["num_pos"] for r in state.log)
    neg = sum(r["num_neg"] for r in state.log)
    assert (pos, neg) == (2 * len(state.log), 6 * len(state.log))


def test_frozen_generator_is_untouched(seg_train):
    torch.manual_seed(0)
    g = build_generator(NetworkSpec("generator", base_channels=4))
    before = param_digest(g)
    train_segmentation(seg_train, _tiny_seg(fusion="fusion@i"), g)
    assert param_digest(g) == before
    assert not any(p.requires_grad for p in g.parameters())


def test_fusion_requires_a_generator(seg_train):
    with pytest.raises(ValueError):
        train_segmentation(seg_train, _tiny_seg(fusion="fusion@f"))


def test_uncovered_anchors_warn(seg_train):
    with pytest.warns(UserWarning, match="anchor"):
        train_segmentation(seg_train[:1], _tiny_seg(anchor_sizes=(500.0,)), stop_at=1)


def test_segmentation_resume_equals_uninterrupted(seg_train, tmp_path):
    full = train_segmentation(seg_train, _tiny_seg(), out_dir=tmp_path / "full")
    train_segmentation(seg_train, _tiny_seg(), out_dir=tmp_path / "part", stop_at=5, checkpoint_every=5)
    resumed = train_segmentation(seg_train, _tiny_seg(), out_dir=tmp_path / "part", resume_from=tmp_path / "part" / "ckpt_000005")
    assert resumed.log == full.log[5:]
    assert resumed.digests() == full.digests()
