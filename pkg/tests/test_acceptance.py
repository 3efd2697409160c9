"""Acceptance suite.

One test per criterion; each prints a single ``criterion N: PASS|FAIL`` line
(repeated in the terminal summary) and then asserts.  The training criteria
share module-scoped runs, so the whole file takes a little over an hour
on one CPU core.
"""

import time
import warnings
from pathlib import Path

import numpy as np
import pytest

from oarseg.evaluation import evaluate_instance, evaluate_semantic
from oarseg.phantoms import generate_corpus
from oarseg.taxonomy import class_id
from oarseg.training import (
    InstanceModel,
    SemanticConfig,
    SemanticModel,
    SynthesisInputs,
    deterministic_mode,
    desk_segmentation,
    desk_synthesis,
    moving_average,
    slices_from_volumes,
    train_segmentation,
    train_semantic,
    train_synthesis,
    unpaired_pools,
)
from oarseg.training.config import DESK_PREPROCESS
from oarseg.voxelio import compute_dataset_stats
from suites import (
    annotation_pipeline_mismatches,
    checkerboard_energies,
    gradient_errors,
    mask_decoupling_max_grad,
    median_frequency_cases,
    oracle_errors,
    reduction_identities,
    stats_mismatches,
)

SEEDS = (0, 1, 2)
SYN_CASES, SEG_CASES, TEST_CASES = 20, 30, 10
MA_WINDOW = 10


# ---------------------------------------------------------------- property criteria


def test_criterion_01_loss_oracles(criterion):
    t = time.perf_counter()
    errs = oracle_errors(seed=101, trials=50)
    secs = time.perf_counter() - t
    worst = max(errs, key=errs.get)
    ok = errs[worst] <= 1e-9 and secs < 60
    assert criterion(1, ok, f"{len(errs)} ops x 50 trials, worst abs err {errs[worst]:.2e} ({worst}), {secs:.1f}s"), errs


def test_criterion_02_gradients(criterion):
    t = time.perf_counter()
    errs = gradient_errors(seed=102, trials=50)
    secs = time.perf_counter() - t
    worst = max(errs, key=errs.get)
    ok = errs[worst] <= 1e-4 and secs < 300
    assert criterion(2, ok, f"{len(errs)} losses x 50 instances, worst rel err {errs[worst]:.2e} ({worst}), {secs:.1f}s"), errs


def test_criterion_03_reduction_identities(criterion):
    res = reduction_identities(seed=103, trials=50)
    ok = all(res.values())
    assert criterion(3, ok, ", ".join(f"{k}={v}" for k, v in res.items()))


def test_criterion_04_median_frequency(criterion):
    cases = median_frequency_cases()
    ok = all(got == want for got, want in cases)
    assert criterion(4, ok, "; ".join(f"{got} vs {want}" for got, want in cases))


def test_criterion_05_annotation_pipeline(criterion):
    t = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # degenerate random polygons warn by design
        grids, bad = annotation_pipeline_mismatches(seed=105)
    corpus = generate_corpus(200, seed=105)
    wrong = stats_mismatches((c.ct, c.annotations) for c in corpus)
    secs = time.perf_counter() - t
    ok = not bad and not wrong and secs < 120
    detail = f"{grids} grids <=32x32, {len(bad)} mismatches; stats on 200 cases, mismatched classes {wrong}; {secs:.1f}s"
    assert criterion(5, ok, detail)


def test_criterion_06_mask_decoupling(criterion):
    worst = mask_decoupling_max_grad(seed=106, trials=20)
    assert criterion(6, worst <= 1e-12, f"max |grad| on non-GT channels {worst:.1e} over 20 trials")


def test_criterion_07_no_checkerboard(criterion):
    energies = checkerboard_energies(n_init=20)
    ok = max(energies) <= 1e-3
    assert criterion(7, ok, f"worst lattice energy fraction {max(energies):.2e} over 20 initializations")


# ---------------------------------------------------------------- shared training runs


@pytest.fixture(scope="module")
def syn_pools():
    return unpaired_pools(generate_corpus(SYN_CASES, seed=0), DESK_PREPROCESS, seed=0)


@pytest.fixture(scope="module")
def syn_run(syn_pools, tmp_path_factory):
    deterministic_mode()
    out = tmp_path_factory.mktemp("synthesis")
    t = time.perf_counter()
    state = train_synthesis(*syn_pools, desk_synthesis(), out)
    return state, out, time.perf_counter() - t


@pytest.fixture(scope="module")
def seg_data():
    train_cases = generate_corpus(SEG_CASES, seed=0)
    stats = compute_dataset_stats((c.ct, c.annotations) for c in train_cases)
    train = slices_from_volumes(((c.ct, c.annotations) for c in train_cases), DESK_PREPROCESS)
    test = slices_from_volumes(((c.ct, c.annotations) for c in generate_corpus(TEST_CASES, seed=99)), DESK_PREPROCESS)
    present = {name: cs for name, cs in stats.per_class.items() if cs.image_count}
    largest = sorted(present, key=lambda n: present[n].median_relative_area_pct, reverse=True)[:2]
    rarest = min(present, key=lambda n: present[n].image_count)
    return train, test, largest, rarest


@pytest.fixture(scope="module")
def ct_runs(seg_data, tmp_path_factory):
    """Seed -> (state, report, out_dir); every run checkpoints each epoch."""
    train, test, _, _ = seg_data
    deterministic_mode()
    runs = {}
    for seed in SEEDS:
        out = tmp_path_factory.mktemp(f"ct_only_{seed}")
        state = train_segmentation(train, desk_segmentation(seed=seed), out_dir=out, checkpoint_every=len(train))
        runs[seed] = (state, evaluate_instance(InstanceModel(state.modules["model"]), test), out)
    return runs


@pytest.fixture(scope="module")
def semantic_runs(seg_data):
    train, test, _, _ = seg_data
    deterministic_mode()
    out = {}
    for seed in SEEDS:
        for weighting in ("median_frequency", "uniform"):
            state = train_semantic(train, SemanticConfig(seed=seed, class_weighting=weighting))
            out[seed, weighting] = evaluate_semantic(SemanticModel(state.modules["model"]), test)
    return out


# ---------------------------------------------------------------- end-to-end criteria


@pytest.mark.slow
def test_criterion_08_synthesis_smoke(syn_run, criterion):
    state, _, secs = syn_run
    content = np.array([r["content"] for r in state.log])
    task = np.array([r["task"] for r in state.log])
    start = moving_average(content, MA_WINDOW)[MA_WINDOW]
    end_content = moving_average(content, MA_WINDOW)[-1]
    end_task = moving_average(task, MA_WINDOW)[-1]
    drop = 1 - end_content / start
    ok = len(state.log) <= 2000 and drop >= 0.5 and end_task < task[0] and secs < 7200
    detail = (f"{len(state.log)} steps in {secs / 60:.1f} min; content MA{MA_WINDOW} {start:.3f} -> {end_content:.3f} "
              f"(-{drop:.0%}); task {task[0]:.3f} -> MA{MA_WINDOW} {end_task:.3f}")
    assert criterion(8, ok, detail)


@pytest.mark.slow
def test_criterion_09_segmentation_smoke(seg_data, ct_runs, semantic_runs, criterion):
    _, _, largest, rarest = seg_data
    votes, parts = [], []
    for seed in SEEDS:
        rep = ct_runs[seed][1]
        means = rep.means()
        inst_ok = all(means[n] >= 0.7 for n in largest) and means[rarest] >= 0.3
        weighted = semantic_runs[seed, "median_frequency"].means()[rarest]
        uniform = semantic_runs[seed, "uniform"].means()[rarest]
        votes.append((inst_ok, weighted > uniform))
        parts.append(
            f"seed {seed}: " + " ".join(f"{n} {means[n]:.3f}" for n in [*largest, rarest])
            + f", {rarest} weighted {weighted:.3f} vs unweighted {uniform:.3f}"
        )
    inst_votes = sum(v[0] for v in votes)
    wl_votes = sum(v[1] for v in votes)
    ok = inst_votes * 2 > len(SEEDS) and wl_votes * 2 > len(SEEDS)
    detail = (f"largest {largest}, rarest {rarest}; instance thresholds met {inst_votes}/{len(SEEDS)}, "
              f"weighted > unweighted {wl_votes}/{len(SEEDS)} | " + "; ".join(parts))
    assert criterion(9, ok, detail)


@pytest.mark.slow
def test_criterion_10_fusion_direction(seg_data, ct_runs, syn_run, criterion):
    train, test, _, _ = seg_data
    generator = syn_run[0].modules["G_st"]
    tumor = class_id("GTV")
    wins, parts = 0, []
    deterministic_mode()
    for seed in SEEDS:
        state = train_segmentation(train, desk_segmentation(seed=seed, fusion="fusion@i"), generator)
        fused = evaluate_instance(InstanceModel(state.modules["model"], SynthesisInputs("fusion@i", generator)), test)
        a, b = fused.mean(tumor), ct_runs[seed][1].mean(tumor)
        wins += a >= b
        parts.append(f"seed {seed}: fusion@i {a:.3f} vs ct-only {b:.3f}")
    assert criterion(10, wins >= 2, f"GTV fusion@i >= ct-only in {wins}/{len(SEEDS)} seeds | " + "; ".join(parts))


def _latest_checkpoint_before(out: Path, end: int) -> Path:
    ckpts = sorted(p for p in out.glob("ckpt_*") if int(p.name[5:]) < end)
    return ckpts[len(ckpts) // 2]


@pytest.mark.slow
def test_criterion_11_determinism(syn_pools, syn_run, seg_data, ct_runs, tmp_path, criterion):
    train = seg_data[0]
    syn_state, syn_out, _ = syn_run
    seg_state, _, seg_out = ct_runs[0]
    deterministic_mode()
    checks = {}

    rerun = train_synthesis(*syn_pools, desk_synthesis())
    checks["synthesis rerun"] = rerun.log == syn_state.log and rerun.digests() == syn_state.digests()
    ckpt = _latest_checkpoint_before(syn_out, syn_state.step)
    resumed = train_synthesis(*syn_pools, desk_synthesis(), tmp_path / "syn", resume_from=ckpt)
    k = int(ckpt.name[5:])
    checks[f"synthesis resume@{k}"] = resumed.log == syn_state.log[k:] and resumed.digests() == syn_state.digests()

    rerun = train_segmentation(train, desk_segmentation(seed=0))
    checks["segmentation rerun"] = rerun.log == seg_state.log and rerun.digests() == seg_state.digests()
    ckpt = _latest_checkpoint_before(seg_out, seg_state.step)
    resumed = train_segmentation(train, desk_segmentation(seed=0), out_dir=tmp_path / "seg", resume_from=ckpt)
    k = int(ckpt.name[5:])
    checks[f"segmentation resume@{k}"] = resumed.log == seg_state.log[k:] and resumed.digests() == seg_state.digests()

    ok = all(checks.values())
    assert criterion(11, ok, ", ".join(f"{name} identical={v}" for name, v in checks.items()))


# ---------------------------------------------------------------- supplementary


@pytest.mark.slow
def test_synthesized_mr_makes_the_tumor_more_salient_than_ct(syn_run):
    """Trained phantom generator: GTV contrast against soft tissue is larger in synth MR than in CT.

    Both images are in normalized [-1, 1] units; the desk preprocessing keeps
    the 64x64 phantom grid, so the phantom tissue map lines up pixel for pixel.
    """
    import torch

    from oarseg.phantoms import class_contrast

    generator = syn_run[0].modules["G_st"].eval()
    gtv = class_id("GTV")
    ct_c, syn_c = [], []
    for case in generate_corpus(TEST_CASES, seed=99):
        samples = slices_from_volumes([(case.ct, case.annotations)], DESK_PREPROCESS)
        for s, tissue in zip(samples, case.structure.tissue):
            labels = s.labels.numpy()
            if not (labels == gtv).any():
                continue
            with torch.no_grad():
                synth = generator(s.image[None])[0, 0].numpy()
            ct_c.append(abs(class_contrast(s.image[0].numpy(), labels, tissue, gtv)))
            syn_c.append(abs(class_contrast(synth, labels, tissue, gtv)))
    print(f"\nGTV contrast, median over {len(ct_c)} slices: synth MR {np.median(syn_c):.3f} vs CT {np.median(ct_c):.3f}")
    assert np.median(syn_c) > np.median(ct_c)
