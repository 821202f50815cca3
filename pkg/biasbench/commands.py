"""
The four-step bias measurement procedure, plus the final comparison report.

1. synth: generate a biased and an unbiased dataset
2. train: train one network per (architecture, seed, dataset)
3. attribute: attribution maps for every correctly predicted evaluation image
4. evaluate: RMA / RRA / AOPC per network
5. report: Welch t-tests between biased and unbiased networks, accuracy matrix, AOPC comparison

Artifact layout below `RunConfig.root`:

    datasets/<scenario>/<variant>/            manifest.json, NNNNNN.bten, NNNNNN.mask
    models/<scenario>/<network>-<variant>.bbm + .history.json, accuracy.json
    maps/<scenario>/<network>-<variant>/      maps.json, <method>/NNNNNN.bten
    results/<scenario>/<network>-<variant>/   metrics.csv, aopc.csv, samples.csv
    results/<scenario>/                       ttest.csv, aopc.csv, report.json

`variant` is either "biased" or "unbiased".
"""

import logging
from pathlib import Path

import numpy as np
import pandas as pd
import scipy

from . import attribmaps, biasmetrics, gradnet, synthbias, tensorio, utils
from .exceptions import (DatasetLoadError, RejectedInputError,
                         ReportMismatchError, UsageError)
from .models import (CLASS_NAMES, EVAL_SPLITS, MARKER_OBJECT, AccuracyCell,
                     AttributionEntry, DatasetManifest, GeneratorConfig,
                     GtMask, MapsManifest, MetricsTable, ModelSpec, Provenance,
                     ReportBundle, RunConfig, SampleMetric, SampleRecord,
                     TTestRow)

LOGGER = logging.getLogger(__name__)
LOGGER.addFilter(utils.DuplicateFilter())

VARIANTS: tuple[tuple[str, bool], ...] = (('biased', True), ('unbiased', False))
AOPC_GT = '-'
# samples.csv round-trips float64 exactly
SAMPLE_FLOAT_FORMAT = '%.17g'


def variant_name(biased: bool) -> str:
    return 'biased' if biased else 'unbiased'


def network_names(cfg: RunConfig) -> list[tuple[str, str, int]]:
    """(network name, architecture, seed) for every configured network pair"""
    return [(f'{arch}-s{seed}', arch, seed)
            for arch in cfg.architectures
            for seed in cfg.train_seeds]


def run_hash(cfg: RunConfig) -> str:
    """Hash of the experiment settings. Output locations are excluded."""
    return utils.config_hash(cfg.model_dump(mode='json', exclude={'root', 'paths'}))


def dataset_dir(cfg: RunConfig, biased: bool) -> Path:
    return cfg.path('datasets') / cfg.scenario / variant_name(biased)


def model_path(cfg: RunConfig, network: str, biased: bool) -> Path:
    return cfg.path('models') / cfg.scenario / f'{network}-{variant_name(biased)}.bbm'


def maps_dir(cfg: RunConfig, network: str, biased: bool) -> Path:
    return cfg.path('maps') / cfg.scenario / f'{network}-{variant_name(biased)}'


def results_dir(cfg: RunConfig, network: str | None = None, biased: bool | None = None) -> Path:
    base = cfg.path('results') / cfg.scenario
    if network is None:
        return base
    return base / f'{network}-{variant_name(biased)}'


def _load(directory: Path) -> tuple[DatasetManifest, synthbias.Samples]:
    if not (directory / 'manifest.json').exists():
        raise DatasetLoadError(str(directory), 'dataset not found, run synth first')
    return synthbias.load_dataset(directory)


def _load_model(path: Path) -> ModelSpec:
    if not path.exists():
        raise RejectedInputError(f'Model not found: {path}, run train first')
    return gradnet.load_model(path)


def eval_samples(cfg: RunConfig) -> tuple[DatasetManifest, list[SampleRecord]]:
    manifest, samples = _load(dataset_dir(cfg, cfg.eval_dataset == 'biased'))
    records = samples[EVAL_SPLITS[cfg.scenario]]
    if cfg.max_eval_samples is not None:
        records = records[:cfg.max_eval_samples]
    return manifest, records


def cmd_synth(cfg: RunConfig) -> list[Path]:
    """Writes the biased dataset and its unbiased reference"""
    digest = run_hash(cfg)
    written = []
    for _, biased in VARIANTS:
        gen = GeneratorConfig.desk(cfg.scenario, biased, cfg.data_seed, cfg.splits)
        manifest, samples = synthbias.generate_dataset(gen)
        manifest.config_hash = digest
        directory = dataset_dir(cfg, biased)
        synthbias.save_dataset(manifest, samples, directory)
        LOGGER.info(f'Wrote {directory}')
        written.append(directory)
    return written


def cmd_train(cfg: RunConfig) -> list[Path]:
    """Trains every configured network on both datasets, and records the accuracy cross-matrix"""
    digest = run_hash(cfg)
    datasets = {}
    for name, biased in VARIANTS:
        manifest, samples = _load(dataset_dir(cfg, biased))
        datasets[biased] = (manifest,
                            synthbias.to_arrays(samples['train']),
                            synthbias.to_arrays(samples['val']),
                            synthbias.to_arrays(samples['test']))

    written = []
    cells = []
    for network, arch, seed in network_names(cfg):
        for name, biased in VARIANTS:
            manifest, train_set, val_set, _ = datasets[biased]
            size = manifest.image_size
            model = gradnet.build_model(arch, manifest.num_classes, seed, (size, size, 3))
            training = cfg.training.model_copy(update={'seed': seed})

            LOGGER.info(f'Training {network}-{name}')
            result = gradnet.train(model, train_set, val_set, training)
            result.history.network = network
            result.history.biased = biased

            path = model_path(cfg, network, biased)
            gradnet.save_model(result.model, path)
            utils.write_json(path.with_suffix('.history.json'),
                             {'config_hash': digest, **result.history.model_dump(mode='json')})
            written.append(path)

            for tested_biased in (True, False):
                accuracy = gradnet.evaluate_accuracy(result.model, datasets[tested_biased][3])
                cells.append(AccuracyCell(network=network,
                                          trained_biased=biased,
                                          tested_biased=tested_biased,
                                          accuracy=accuracy))
                LOGGER.info(f'{network}-{name} on {variant_name(tested_biased)} test split: {accuracy:.4f}')

    utils.write_json(cfg.path('models') / cfg.scenario / 'accuracy.json',
                     {'config_hash': digest, 'cells': [c.model_dump() for c in cells]})
    return written


def correct_samples(model: ModelSpec, records: list[SampleRecord]) -> list[SampleRecord]:
    if not records:
        return []
    predicted = np.argmax(gradnet.predict(model, np.stack([rec.image for rec in records])), axis=1)
    return [rec for rec, pred in zip(records, predicted) if pred == rec.label]


def cmd_attribute(cfg: RunConfig) -> list[Path]:
    """Attribution maps for every correctly predicted evaluation image and selected method"""
    digest = run_hash(cfg)
    manifest, records = eval_samples(cfg)
    split = EVAL_SPLITS[cfg.scenario]
    written = []

    for network, _, _ in network_names(cfg):
        for _, biased in VARIANTS:
            model = _load_model(model_path(cfg, network, biased))
            correct = correct_samples(model, records)
            LOGGER.info(f'{network}-{variant_name(biased)}: {len(correct)}/{len(records)} correct')

            directory = maps_dir(cfg, network, biased)
            maps = MapsManifest(scenario=cfg.scenario,
                                split=split,
                                dataset=variant_name(cfg.eval_dataset == 'biased'),
                                config_hash=digest)

            for method in cfg.methods:
                (directory / method).mkdir(parents=True, exist_ok=True)

                def explain(rec: SampleRecord) -> AttributionEntry:
                    result = attribmaps.explain(method, model, rec.image, rec.label,
                                                cfg.attribution, sample_id=rec.sample_id)
                    file = f'{method}/{rec.sample_id}.bten'
                    (directory / file).write_bytes(tensorio.dumps_tensor(result.values))
                    return AttributionEntry(sample_id=rec.sample_id,
                                            network=network,
                                            biased=biased,
                                            method=method,
                                            label=rec.label,
                                            file=file)

                maps.entries.extend(utils.fan_out(explain, correct))

            utils.write_json(directory / 'maps.json', maps)
            written.append(directory)

    return written


def gt_masks(rec: SampleRecord, scenario: str, dilation: float) -> list[tuple[str, GtMask]]:
    """Named, dilated ground truth regions of one sample"""
    masks = [(CLASS_NAMES[scenario][rec.label], GtMask(mask=rec.object_mask, provenance='object'))]
    if rec.marker_mask is not None:
        masks.append((MARKER_OBJECT, GtMask(mask=rec.marker_mask, provenance='marker')))
    return [(name, biasmetrics.dilate_gt(gt, dilation)) for name, gt in masks]


def expected_cells(cfg: RunConfig, manifest: DatasetManifest) -> list[tuple[int, str]]:
    names = CLASS_NAMES[cfg.scenario]
    cells = [(label, name) for label, name in enumerate(names)]
    if cfg.scenario == 'marker_bias' and manifest.biased:
        cells.append((0, MARKER_OBJECT))
    return sorted(cells)


def _evaluate_sample(cfg: RunConfig,
                     model: ModelSpec,
                     network: str,
                     biased: bool,
                     entry: AttributionEntry,
                     rec: SampleRecord,
                     values: np.ndarray) -> list[SampleMetric]:
    common = dict(network=network,
                  scenario=cfg.scenario,
                  biased=biased,
                  method=entry.method,
                  sample_id=entry.sample_id,
                  label=entry.label)
    metrics = []

    if values.shape != rec.object_mask.shape:
        raise RejectedInputError(f'Map {entry.file} shape {values.shape} '
                                 f'does not match mask shape {rec.object_mask.shape}')

    if values.sum() > 0:
        for name, gt in gt_masks(rec, cfg.scenario, cfg.dilation):
            metrics.append(SampleMetric(**common, gt_object=name, metric='rma',
                                        value=biasmetrics.relevance_mass_accuracy(values, gt)))
            metrics.append(SampleMetric(**common, gt_object=name, metric='rra',
                                        value=biasmetrics.relevance_rank_accuracy(values, gt)))
    else:
        LOGGER.warning(f'All-zero {entry.method} map for {network}: RMA / RRA skipped')

    seed = cfg.aopc_seed ^ int(entry.sample_id)
    value, _ = biasmetrics.aopc(model, rec.image, values, cfg.aopc_steps, cfg.aopc_region, seed)
    baseline = biasmetrics.random_perturbation_aopc(model, rec.image, cfg.aopc_steps, cfg.aopc_region, seed)
    metrics.append(SampleMetric(**common, gt_object=AOPC_GT, metric='aopc', value=value))
    metrics.append(SampleMetric(**common, gt_object=AOPC_GT, metric='aopc_random', value=baseline))
    return metrics


def _write_frame(frame: pd.DataFrame, path: Path, float_format: str | None = None):
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path,
                 index=False,
                 float_format=float_format or utils.get_config().float_format,
                 lineterminator='\n')


def sample_frame(records: list[SampleMetric]) -> pd.DataFrame:
    frame = pd.DataFrame([r.model_dump() for r in records], columns=[*SampleMetric.model_fields])
    return frame.rename(columns={'label': 'class'})


def read_samples(path: Path) -> list[SampleMetric]:
    if not path.exists():
        raise RejectedInputError(f'Results not found: {path}, run evaluate first')
    frame = pd.read_csv(path, dtype={'sample_id': str, 'gt_object': str}, float_precision='round_trip')
    frame = frame.rename(columns={'class': 'label'})
    return [SampleMetric(**row) for row in frame.to_dict(orient='records')]


def _load_maps(cfg: RunConfig, network: str, biased: bool) -> tuple[ModelSpec, Path, list[AttributionEntry]]:
    directory = maps_dir(cfg, network, biased)
    maps_path = directory / 'maps.json'
    if not maps_path.exists():
        raise RejectedInputError(f'No attribution maps in {directory}, run attribute first')
    maps = MapsManifest.model_validate(utils.read_json(maps_path))
    entries = [e for e in maps.entries if e.method in cfg.methods]
    if not entries:
        raise RejectedInputError(f'No attribution maps in {directory}')
    return _load_model(model_path(cfg, network, biased)), directory, entries


def cmd_evaluate(cfg: RunConfig) -> list[Path]:
    """
    RMA / RRA per GT object, AOPC and its random baseline, for every network.
    Nothing is written unless every network evaluates successfully.
    """
    manifest, records = eval_samples(cfg)
    by_id = {rec.sample_id: rec for rec in records}

    inputs = {(network, biased): _load_maps(cfg, network, biased)
              for network, _, _ in network_names(cfg)
              for _, biased in VARIANTS}

    frames: dict[Path, list[tuple[str, pd.DataFrame]]] = {}
    for (network, biased), (model, directory, entries) in inputs.items():

        def evaluate(entry: AttributionEntry) -> list[SampleMetric]:
            if entry.sample_id not in by_id:
                raise RejectedInputError(f'Map {entry.file} refers to unknown sample {entry.sample_id}')
            values = tensorio.loads_tensor((directory / entry.file).read_bytes(), squeeze=True)
            return _evaluate_sample(cfg, model, network, biased, entry, by_id[entry.sample_id], values)

        samples = [m for chunk in utils.fan_out(evaluate, entries) for m in chunk]

        expected = [(network, cfg.scenario, biased, method, label, gt_object, metric)
                    for method in cfg.methods
                    for label, gt_object in expected_cells(cfg, manifest)
                    for metric in ('rma', 'rra')]
        table = biasmetrics.aggregate_metrics(samples, expected)
        frames[results_dir(cfg, network, biased)] = [
            ('metrics.csv', biasmetrics.metric_frame(table)),
            ('aopc.csv', biasmetrics.aopc_frame(table)),
            ('samples.csv', sample_frame(samples)),
        ]

    for out, named in frames.items():
        for name, frame in named:
            _write_frame(frame, out / name, SAMPLE_FLOAT_FORMAT if name == 'samples.csv' else None)
        LOGGER.info(f'Wrote {out}')
    return list(frames)


def ttest_table(network: str,
                biased_samples: list[SampleMetric],
                unbiased_samples: list[SampleMetric],
                alpha: float) -> list[TTestRow]:
    """
    Welch's t-test for every (method, gt_object, metric) cell, biased versus unbiased network.
    Both result sets must cover the same cells.
    """
    def cells(samples: list[SampleMetric]) -> dict[tuple[str, str, str], list[float]]:
        grouped: dict[tuple[str, str, str], list[float]] = {}
        for s in samples:
            if s.metric in ('rma', 'rra'):
                grouped.setdefault((s.method, s.gt_object, s.metric), []).append(s.value)
        return grouped

    biased = cells(biased_samples)
    unbiased = cells(unbiased_samples)
    mismatched = sorted(set(biased) ^ set(unbiased))
    if mismatched:
        raise ReportMismatchError([f'{network}/{m}/{g}/{k}' for m, g, k in mismatched])

    rows = []
    for key in sorted(biased):
        method, gt_object, metric = key
        a, b = biased[key], unbiased[key]
        if len(a) < 2 or len(b) < 2:
            LOGGER.warning(f'Too few samples for a t-test in {network}/{method}/{gt_object}/{metric}')
            continue
        result = biasmetrics.welch_t_test(a, b)
        rows.append(TTestRow(network=network,
                             method=method,
                             gt_object=gt_object,
                             metric=metric,
                             t=result.t,
                             df=result.df,
                             p=result.p,
                             p_below_floor=result.p_below_floor,
                             reject=result.p <= alpha))
    return rows


def cmd_report(cfg: RunConfig) -> ReportBundle:
    """Compares every biased network with its unbiased twin"""
    digest = run_hash(cfg)
    ttests: list[TTestRow] = []
    samples: list[SampleMetric] = []
    files: list[Path] = []

    for network, _, _ in network_names(cfg):
        biased_path = results_dir(cfg, network, True) / 'samples.csv'
        unbiased_path = results_dir(cfg, network, False) / 'samples.csv'
        biased_samples = read_samples(biased_path)
        unbiased_samples = read_samples(unbiased_path)
        ttests.extend(ttest_table(network, biased_samples, unbiased_samples, cfg.alpha))
        samples.extend(biased_samples + unbiased_samples)
        files.extend([biased_path, unbiased_path])

    accuracy_path = cfg.path('models') / cfg.scenario / 'accuracy.json'
    accuracy = []
    if accuracy_path.exists():
        accuracy = [AccuracyCell(**c) for c in utils.read_json(accuracy_path)['cells']]
        files.append(accuracy_path)

    table: MetricsTable = biasmetrics.aggregate_metrics(samples)
    out = results_dir(cfg)
    _write_frame(pd.DataFrame([r.model_dump() for r in ttests], columns=[*TTestRow.model_fields]),
                 out / 'ttest.csv')
    _write_frame(biasmetrics.aopc_frame(table), out / 'aopc.csv')

    bundle = ReportBundle(
        scenario=cfg.scenario,
        alpha=cfg.alpha,
        accuracy=accuracy,
        metrics=table,
        ttests=ttests,
        provenance=Provenance(
            config_hash=digest,
            data_seed=cfg.data_seed,
            train_seeds=cfg.train_seeds,
            aopc_seed=cfg.aopc_seed,
            versions={
                'numpy': np.__version__,
                'scipy': scipy.__version__,
                'pandas': pd.__version__,
                'model_format': f'{gradnet.MODEL_MAGIC.decode()}/{gradnet.MODEL_VERSION}',
                'tensor_format': f'{tensorio.TENSOR_MAGIC.decode()}/{tensorio.TENSOR_VERSION}',
            },
            files=[str(f.relative_to(cfg.root)) for f in [*files, out / 'ttest.csv', out / 'aopc.csv']],
        ),
    )
    report_path = out / 'report.json'
    report_path.write_text(bundle.model_dump_json(indent=2) + '\n', encoding='utf-8')
    LOGGER.info(f'Wrote {report_path}: {sum(r.reject for r in ttests)}/{len(ttests)} cells rejected at {cfg.alpha}')
    return bundle


COMMANDS = {
    'synth': cmd_synth,
    'train': cmd_train,
    'attribute': cmd_attribute,
    'evaluate': cmd_evaluate,
    'report': cmd_report,
}


def run(command: str, cfg: RunConfig):
    try:
        func = COMMANDS[command]
    except KeyError:
        raise UsageError(f'Unknown command "{command}", valid: {", ".join(COMMANDS)}')
    return func(cfg)
