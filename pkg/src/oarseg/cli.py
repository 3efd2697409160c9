"""``oarseg`` command line.

Every command writes ``run_manifest.json`` (command, arguments, resolved
config, seed, package version) next to its outputs.  Exit codes: 0 on
success, 1 on a runtime error, 2 on a usage or configuration error.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from oarseg import __version__


def _manifest(out: Path, command: str, params: dict, config: dict | None = None, seed=None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "command": command,
        "argv": sys.argv[1:],
        "params": {k: str(v) if isinstance(v, Path) else v for k, v in params.items()},
        "config": config,
        "seed": seed,
        "version": __version__,
    }
    (out / "run_manifest.json").write_text(json.dumps(doc, indent=1, default=str))


def _load_cfg(kind: str, config_path, preset: str, overrides: tuple[str, ...]):
    from oarseg.training.config import ConfigError, load_config, parse_override

    try:
        pairs = dict(parse_override(o) for o in overrides)
        return load_config(kind, config_path, preset, pairs)
    except ConfigError as exc:
        raise click.UsageError(f"invalid config key: {exc.key} ({exc})") from exc
    except (TypeError, ValueError) as exc:
        raise click.UsageError(f"invalid config: {exc}") from exc


def _read_split(split_path, corpus):
    if split_path is None:
        return corpus, corpus
    split = json.loads(Path(split_path).read_text())
    train = [c for c in corpus if c["info"]["case_id"] in set(split["train"])]
    test = [c for c in corpus if c["info"]["case_id"] in set(split["test"])]
    return train, test


class _Group(click.Group):
    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except (click.ClickException, click.exceptions.Exit, click.exceptions.Abort):
            raise
        except Exception as exc:  # surfaced as a structured one-line error
            click.echo(json.dumps({"error": type(exc).__name__, "message": str(exc)}), err=True)
            ctx.exit(1)


@click.group(cls=_Group)
@click.version_option(__version__)
def main():
    """Cross-modality synthesis and organ-at-risk segmentation toolkit."""


# ---------------------------------------------------------------- data


@main.command()
@click.option("--rtstruct", type=click.Path(exists=True, path_type=Path), required=True,
              help="DICOM-RT structure set or portable JSON contour file.")
@click.option("--volume", type=click.Path(exists=True, path_type=Path), required=True,
              help="DICOM series directory or raw-volume JSON header.")
@click.option("--out", type=click.Path(path_type=Path), required=True, help="Output directory.")
@click.option("--class-map", type=click.Path(exists=True, path_type=Path), default=None, help="YAML alias table.")
@click.option("--enlarge", type=float, default=1.2, show_default=True)
@click.option("--min-area", type=int, default=10, show_default=True)
def extract(rtstruct, volume, out, class_map, enlarge, min_area):
    """Extract contours, rasterize them and write the instance manifest."""
    from oarseg.voxelio import ClassMap, annotate_instances, extract_contours, load_dicom_series, read_volume
    from oarseg.voxelio.formats import write_annotation_manifest

    vol = load_dicom_series(volume) if volume.is_dir() else read_volume(volume)
    cmap = ClassMap.from_file(class_map) if class_map else None
    ann = annotate_instances(extract_contours(rtstruct, vol, cmap), enlarge, min_area)
    write_annotation_manifest([ann], out)
    _manifest(out, "extract", {"rtstruct": rtstruct, "volume": volume, "enlarge": enlarge, "min_area": min_area})
    click.echo(f"{len(ann.contours)} contours, {len(ann.instances)} instances, {len(ann.rejected)} rejected")
    if ann.unknown_names:
        click.echo(f"unknown structure names: {ann.unknown_names}")


@main.command()
@click.option("--data", type=click.Path(exists=True, file_okay=False, path_type=Path), required=True)
@click.option("--out", type=click.Path(path_type=Path), required=True, help="Stats CSV path.")
def stats(data, out):
    """Per-class image counts, instance counts and median relative areas."""
    from oarseg.voxelio import compute_dataset_stats, read_corpus, write_stats_csv

    corpus = read_corpus(data)
    st = compute_dataset_stats((c["ct"], c["annotations"]) for c in corpus)
    write_stats_csv(st, out)
    _manifest(out.parent, "stats", {"data": data, "out": out})
    for name, cs in st.per_class.items():
        click.echo(f"{name:<12}{cs.image_count:>7}{cs.instance_count:>7}{cs.median_relative_area_pct:>9.3f}")


@main.command()
@click.option("--data", type=click.Path(exists=True, file_okay=False, path_type=Path), required=True)
@click.option("--test-count", type=int, required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(path_type=Path), required=True, help="Split JSON path.")
def split(data, test_count, seed, out):
    """Patient-grouped train/test split drawing test cases only from clean patients."""
    from oarseg.voxelio import CaseInfo, read_corpus, split_dataset

    corpus = read_corpus(data)
    infos = [CaseInfo(c["info"]["case_id"], c["info"].get("patient_id", c["info"]["case_id"]), c["info"].get("clean", True))
             for c in corpus]
    manifest = split_dataset(infos, test_count, seed)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(manifest.to_dict(), indent=1))
    _manifest(out.parent, "split", {"data": data, "test_count": test_count, "out": out}, seed=seed)
    click.echo(f"train {len(manifest.train_case_ids)}, test {len(manifest.test_case_ids)}")


@main.group()
def phantom():
    """Synthetic phantom corpora."""


@phantom.command("generate")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--cases", type=int, default=20, show_default=True)
@click.option("--size", type=int, default=64, show_default=True)
@click.option("--slices", type=int, default=8, show_default=True)
@click.option("--out", type=click.Path(path_type=Path), required=True)
def phantom_generate(seed, cases, size, slices, out):
    """Write a phantom corpus (CT + MR volumes, annotation manifest, masks)."""
    from oarseg.phantoms import desk_config, generate_corpus
    from oarseg.voxelio.formats import write_corpus

    config = desk_config(image_size=size, n_slices=slices)
    corpus = generate_corpus(cases, seed, config)
    write_corpus(((c.ct, c.mr, c.annotations, {"patient_id": c.ct.case_id, "clean": True}) for c in corpus), out)
    _manifest(out, "phantom generate", {"cases": cases, "size": size, "slices": slices}, {"phantom": "desk"}, seed)
    click.echo(f"wrote {cases} cases to {out}")


# ---------------------------------------------------------------- training


_config_options = [
    click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None,
                  help="YAML config file."),
    click.option("--preset", type=click.Choice(["desk", "full"]), default="desk", show_default=True),
    click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE", help="Override one config key (dotted)."),
]


def _with_config(f):
    for opt in reversed(_config_options):
        f = opt(f)
    return f


@main.command("train-syn")
@click.option("--data", type=click.Path(exists=True, file_okay=False, path_type=Path), required=True)
@click.option("--out", type=click.Path(path_type=Path), required=True)
@click.option("--split", "split_path", type=click.Path(exists=True, path_type=Path), default=None)
@click.option("--resume", type=click.Path(exists=True, path_type=Path), default=None, help="Checkpoint directory.")
@_with_config
def train_syn(data, out, split_path, resume, config_path, preset, overrides):
    """Train the synthesis generators with the content-consistency and task losses."""
    from oarseg.training import config_to_dict, deterministic_mode, train_synthesis, unpaired_pools
    from oarseg.voxelio import read_corpus

    cfg = _load_cfg("synthesis", config_path, preset, overrides)
    deterministic_mode()
    train, _ = _read_split(split_path, read_corpus(data))
    ct, mr = unpaired_pools(((c["ct"], c["mr"], c["annotations"]) for c in train), cfg.preprocess, cfg.seed)
    _manifest(out, "train-syn", {"data": data, "split": split_path, "resume": resume}, config_to_dict(cfg), cfg.seed)
    state = train_synthesis(ct, mr, cfg, out, resume_from=resume)
    state.save(out / "final")
    last = state.log[-1] if state.log else {}
    click.echo(f"trained to step {state.step}; last content {last.get('content', float('nan')):.4f}")


@main.command("train-seg")
@click.option("--data", type=click.Path(exists=True, file_okay=False, path_type=Path), required=True)
@click.option("--out", type=click.Path(path_type=Path), required=True)
@click.option("--generator", type=click.Path(exists=True, path_type=Path), default=None,
              help="Synthesis checkpoint (required for fusion schemes).")
@click.option("--split", "split_path", type=click.Path(exists=True, path_type=Path), default=None)
@_with_config
def train_seg(data, out, generator, split_path, config_path, preset, overrides):
    """Train the instance segmentor (CT-only, fusion@i or fusion@f)."""
    from oarseg.networks.spec import Fusion
    from oarseg.training import (
        config_to_dict, deterministic_mode, load_synthesis_generators, slices_from_volumes, train_segmentation,
    )
    from oarseg.voxelio import read_corpus

    cfg = _load_cfg("segmentation", config_path, preset, overrides)
    if cfg.fusion != Fusion.NONE and generator is None:
        raise click.UsageError(f"fusion scheme {cfg.fusion.value} needs --generator")
    deterministic_mode()
    train, _ = _read_split(split_path, read_corpus(data))
    samples = slices_from_volumes(((c["ct"], c["annotations"]) for c in train), cfg.preprocess)
    g = load_synthesis_generators(generator)[0] if generator else None
    _manifest(out, "train-seg", {"data": data, "generator": generator, "split": split_path}, config_to_dict(cfg), cfg.seed)
    state = train_segmentation(samples, cfg, g, out_dir=out)
    state.extra_meta["generator_checkpoint"] = str(generator) if generator else None
    state.save(out / "final")
    click.echo(f"trained {state.step} steps ({state.epoch} epochs)")


@main.command()
@click.option("--generator", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--data", type=click.Path(exists=True, file_okay=False, path_type=Path), required=True)
@click.option("--out", type=click.Path(path_type=Path), required=True)
@click.option("--limit", type=int, default=16, show_default=True, help="Maximum number of slices to export.")
def synthesize(generator, data, out, limit):
    """Export CT | synthesized MR | cycle reconstruction panels and cycle errors."""
    from oarseg.evaluation import export_synthesis_panel
    from oarseg.networks.checkpoint import load_tensors
    from oarseg.training import PreprocessConfig, slices_from_volumes
    from oarseg.voxelio import read_corpus

    gens = _generators(generator)
    _, meta = load_tensors(generator)
    pre = PreprocessConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in meta["config"]["preprocess"].items()})
    samples = slices_from_volumes(((c["ct"], None) for c in read_corpus(data)), pre)[:limit]
    files = export_synthesis_panel(gens, samples, out)
    _manifest(out, "synthesize", {"generator": generator, "data": data, "limit": limit})
    click.echo(f"wrote {len(files)} files" if files else "no input slices; nothing written")


def _generators(path):
    from oarseg.training import load_synthesis_generators

    return load_synthesis_generators(path)


@main.command()
@click.option("--model", type=click.Path(exists=True, path_type=Path), required=True, help="Instance checkpoint.")
@click.option("--data", type=click.Path(exists=True, file_okay=False, path_type=Path), required=True)
@click.option("--out", type=click.Path(path_type=Path), default=None, help="Output directory (default: beside model).")
@click.option("--generator", type=click.Path(exists=True, path_type=Path), default=None)
@click.option("--split", "split_path", type=click.Path(exists=True, path_type=Path), default=None)
@click.option("--score-threshold", type=float, default=0.5, show_default=True)
def evaluate(model, data, out, generator, split_path, score_threshold):
    """Per-class dice of an instance model (union of detections per class, macro over cases)."""
    from oarseg.evaluation import evaluate_instance
    from oarseg.networks.spec import Fusion
    from oarseg.training import InstanceModel, PreprocessConfig, SynthesisInputs, load_instance_model, slices_from_volumes
    from oarseg.voxelio import read_corpus

    net, meta = load_instance_model(model)
    fusion = Fusion(meta["network"]["fusion"])
    gen_path = generator or meta.get("generator_checkpoint")
    if fusion != Fusion.NONE and not gen_path:
        raise click.UsageError(f"model uses {fusion.value}; pass --generator")
    g = _generators(gen_path)[0] if fusion != Fusion.NONE else None
    pre = PreprocessConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in meta["config"]["preprocess"].items()})
    _, test = _read_split(split_path, read_corpus(data))
    samples = slices_from_volumes(((c["ct"], c["annotations"]) for c in test), pre)
    report = evaluate_instance(
        InstanceModel(net, SynthesisInputs(fusion, g)), samples, score_threshold,
        {"model": str(model), "fusion": fusion.value, "seed": meta.get("seed")},
    )
    out = out or Path(model).parent
    report.write_csv(out / "dice_report.csv")
    _manifest(out, "evaluate", {"model": model, "data": data, "score_threshold": score_threshold}, meta.get("config"),
              meta.get("seed"))
    click.echo(report.table())


if __name__ == "__main__":  # pragma: no cover
    main()
