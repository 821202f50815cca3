"""
Tests biasbench.commands
"""

from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from pytest_mock import MockerFixture

from biasbench import commands, tensorio, utils
from biasbench.exceptions import (DatasetLoadError, RejectedInputError,
                                  ReportMismatchError, UsageError)
from biasbench.models import (MapsManifest, MethodConfig, RunConfig,
                              SampleMetric, SplitSizes, TrainingConfig)

TESTED = commands.__name__


def run_config(root: Path, scenario='marker_bias', **kwargs) -> RunConfig:
    values = dict(scenario=scenario,
                  root=root,
                  splits=SplitSizes(train=10, val=5, test=5),
                  training=TrainingConfig(max_epochs=1, patience=1, batch_size=5),
                  attribution=MethodConfig(ig_steps=4),
                  aopc_steps=3,
                  max_eval_samples=5)
    return RunConfig(**(values | kwargs))


@pytest.fixture
def m_correct(mocker: MockerFixture):
    """Every evaluation sample counts as correctly predicted"""
    return mocker.patch(TESTED + '.correct_samples', side_effect=lambda model, records: list(records))


@pytest.fixture
def cfg(tmp_path: Path) -> RunConfig:
    return run_config(tmp_path)


def test_paths(cfg: RunConfig):
    assert commands.network_names(cfg) == [('desk-s0', 'desk', 0)]
    assert commands.dataset_dir(cfg, True) == cfg.root / 'datasets/marker_bias/biased'
    assert commands.model_path(cfg, 'desk-s0', False) == cfg.root / 'models/marker_bias/desk-s0-unbiased.bbm'
    assert commands.maps_dir(cfg, 'desk-s0', True) == cfg.root / 'maps/marker_bias/desk-s0-biased'
    assert commands.results_dir(cfg) == cfg.root / 'results/marker_bias'

    multi = cfg.model_copy(update={'architectures': ['desk', 'desk_wide'], 'train_seeds': [0, 3]})
    assert [n for n, _, _ in commands.network_names(multi)] == ['desk-s0', 'desk-s3', 'desk_wide-s0', 'desk_wide-s3']


def test_synth(cfg: RunConfig):
    first = commands.cmd_synth(cfg)
    assert first == [cfg.root / 'datasets/marker_bias/biased', cfg.root / 'datasets/marker_bias/unbiased']

    manifests = [(d / 'manifest.json').read_bytes() for d in first]
    assert utils.read_json(first[0] / 'manifest.json')['config_hash'] == commands.run_hash(cfg)
    assert utils.read_json(first[0] / 'manifest.json')['biased'] is True
    assert utils.read_json(first[1] / 'manifest.json')['biased'] is False

    commands.cmd_synth(cfg)
    assert manifests == [(d / 'manifest.json').read_bytes() for d in first]


def test_run_hash_ignores_locations(cfg: RunConfig, tmp_path: Path):
    moved = cfg.model_copy(update={'root': tmp_path / 'elsewhere'})
    assert commands.run_hash(moved) == commands.run_hash(cfg)

    renamed = cfg.model_copy(update={'paths': cfg.paths.model_copy(update={'results': 'out'})})
    assert commands.run_hash(renamed) == commands.run_hash(cfg)

    reseeded = cfg.model_copy(update={'data_seed': cfg.data_seed + 1})
    assert commands.run_hash(reseeded) != commands.run_hash(cfg)

    first = commands.cmd_synth(cfg)
    second = commands.cmd_synth(moved)
    for a, b in zip(first, second):
        assert (a / 'manifest.json').read_bytes() == (b / 'manifest.json').read_bytes()


def test_train_missing_dataset(cfg: RunConfig):
    with pytest.raises(DatasetLoadError, match='datasets/marker_bias/biased'):
        commands.cmd_train(cfg)


def test_train(cfg: RunConfig):
    commands.cmd_synth(cfg)
    written = commands.cmd_train(cfg)

    assert [p.name for p in written] == ['desk-s0-biased.bbm', 'desk-s0-unbiased.bbm']
    assert all(p.exists() for p in written)

    history = utils.read_json(written[0].with_suffix('.history.json'))
    assert history['network'] == 'desk-s0'
    assert history['biased'] is True
    assert len(history['epochs']) == 1

    accuracy = utils.read_json(cfg.root / 'models/marker_bias/accuracy.json')
    assert len(accuracy['cells']) == 4
    assert {(c['trained_biased'], c['tested_biased']) for c in accuracy['cells']} == {
        (True, True), (True, False), (False, True), (False, False)
    }


@pytest.fixture
def trained(cfg: RunConfig) -> RunConfig:
    commands.cmd_synth(cfg)
    commands.cmd_train(cfg.model_copy(update={'training': TrainingConfig(max_epochs=0)}))
    return cfg


def test_attribute(trained: RunConfig, m_correct):
    written = commands.cmd_attribute(trained)
    assert len(written) == 2

    for directory in written:
        maps = MapsManifest.model_validate(utils.read_json(directory / 'maps.json'))
        assert maps.split == 'val'
        assert maps.dataset == 'biased'
        assert len(maps.entries) == 4 * 5
        for method in ('gradcam', 'scorecam', 'ig', 'lrp'):
            assert len(list((directory / method).glob('*.bten'))) == 5


def test_attribute_subset(trained: RunConfig, m_correct):
    subset = trained.model_copy(update={'methods': ['ig']})
    directory = commands.cmd_attribute(subset)[0]
    assert sorted(p.name for p in directory.iterdir()) == ['ig', 'maps.json']
    maps = MapsManifest.model_validate(utils.read_json(directory / 'maps.json'))
    assert {e.method for e in maps.entries} == {'ig'}


def test_attribute_only_correct(trained: RunConfig, mocker: MockerFixture):
    mocker.patch(TESTED + '.correct_samples', return_value=[])
    directory = commands.cmd_attribute(trained)[0]
    assert MapsManifest.model_validate(utils.read_json(directory / 'maps.json')).entries == []

    with pytest.raises(RejectedInputError, match='No attribution maps'):
        commands.cmd_evaluate(trained)
    assert not (trained.root / 'results').exists()


def test_correct_samples(trained: RunConfig):
    _, records = commands.eval_samples(trained)
    model = commands._load_model(commands.model_path(trained, 'desk-s0', True))
    correct = commands.correct_samples(model, records)
    ids = [rec.sample_id for rec in records]
    assert all(rec.sample_id in ids for rec in correct)
    assert commands.correct_samples(model, []) == []


def test_evaluate_missing_maps(trained: RunConfig):
    with pytest.raises(RejectedInputError, match='run attribute first'):
        commands.cmd_evaluate(trained)
    assert not (trained.root / 'results').exists()


def test_evaluate_incomplete_maps(trained: RunConfig, m_correct):
    commands.cmd_attribute(trained)
    (commands.maps_dir(trained, 'desk-s0', False) / 'maps.json').unlink()

    with pytest.raises(RejectedInputError, match='No attribution maps'):
        commands.cmd_evaluate(trained)
    assert not (trained.root / 'results').exists()
    assert not list(trained.root.rglob('*.csv'))


def test_evaluate_marker(trained: RunConfig, m_correct):
    commands.cmd_attribute(trained)
    written = commands.cmd_evaluate(trained)
    assert len(written) == 2

    metrics = pd.read_csv(written[0] / 'metrics.csv')
    assert list(metrics.columns) == ['network', 'scenario', 'biased', 'method', 'class',
                                     'gt_object', 'metric', 'mean', 'std', 'n']
    assert set(metrics['gt_object']) == {'ellipse', 'rounded_rect', 'marker'}
    assert set(metrics['method']) == {'gradcam', 'scorecam', 'ig', 'lrp'}
    assert len(metrics) == 4 * 3 * 2
    assert metrics[metrics['gt_object'] == 'marker']['class'].unique().tolist() == [0]

    samples = commands.read_samples(written[0] / 'samples.csv')
    assert all(s.network == 'desk-s0' and s.biased for s in samples)
    assert {s.metric for s in samples} >= {'aopc', 'aopc_random'}
    assert all(s.sample_id.isdigit() and len(s.sample_id) == 6 for s in samples)

    aopc = pd.read_csv(written[0] / 'aopc.csv')
    assert set(aopc['class_group']) <= {'ellipse', 'rounded_rect'}


def test_evaluate_background(tmp_path: Path, m_correct):
    cfg = run_config(tmp_path, scenario='background_bias', methods=['ig'], max_eval_samples=10)
    commands.cmd_synth(cfg)
    commands.cmd_train(cfg.model_copy(update={'training': TrainingConfig(max_epochs=0)}))
    commands.cmd_attribute(cfg)
    written = commands.cmd_evaluate(cfg)

    metrics = pd.read_csv(written[0] / 'metrics.csv')
    assert set(metrics['gt_object']) == {'disc', 'triangle', 'cross', 'ring', 'star'}
    assert sorted(metrics['class'].unique().tolist()) == [0, 1, 2, 3, 4]

    aopc = pd.read_csv(written[0] / 'aopc.csv')
    assert set(aopc['class_group']) <= {'disc', 'rest'}


def test_evaluate_shape_mismatch(trained: RunConfig, m_correct):
    subset = trained.model_copy(update={'methods': ['ig']})
    directory = commands.cmd_attribute(subset)[0]
    maps = MapsManifest.model_validate(utils.read_json(directory / 'maps.json'))
    (directory / maps.entries[0].file).write_bytes(tensorio.dumps_tensor(np.zeros((8, 8))))

    with pytest.raises(RejectedInputError, match='does not match'):
        commands.cmd_evaluate(subset)


def sample(value: float, **kwargs) -> SampleMetric:
    values = dict(network='desk-s0',
                  scenario='marker_bias',
                  biased=True,
                  method='ig',
                  sample_id='000000',
                  label=0,
                  gt_object='marker',
                  metric='rma',
                  value=value)
    return SampleMetric(**(values | kwargs))


def test_ttest_table_identical():
    records = [sample(v, sample_id=f'{i:06d}') for i, v in enumerate([0.1, 0.4, 0.2, 0.8])]
    records += [sample(v, metric='rra', gt_object='ellipse') for v in [0.3, 0.3, 0.3]]
    rows = commands.ttest_table('desk-s0', records, records, 0.05)

    assert len(rows) == 2
    assert all(r.t == 0 and r.p == 1 and not r.reject for r in rows)


def test_ttest_table_reject():
    biased = [sample(v) for v in [0.9, 0.8, 0.85, 0.95]]
    unbiased = [sample(v, biased=False) for v in [0.01, 0.02, 0.015, 0.03]]
    rows = commands.ttest_table('desk-s0', biased, unbiased, 0.05)
    assert len(rows) == 1
    assert rows[0].reject
    assert rows[0].t > 0
    assert rows[0].p <= 0.05


def test_ttest_table_mismatch():
    biased = [sample(0.5), sample(0.6), sample(0.4, metric='rra'), sample(0.3, metric='rra')]
    unbiased = [sample(0.5), sample(0.6)]
    with pytest.raises(ReportMismatchError, match='desk-s0/ig/marker/rra') as exc_info:
        commands.ttest_table('desk-s0', biased, unbiased, 0.05)
    assert exc_info.value.cells == ['desk-s0/ig/marker/rra']


def test_ttest_table_small_cells():
    rows = commands.ttest_table('desk-s0', [sample(0.5)], [sample(0.4)], 0.05)
    assert rows == []


def test_report(trained: RunConfig, m_correct):
    commands.cmd_attribute(trained)
    commands.cmd_evaluate(trained)
    bundle = commands.cmd_report(trained)

    out = trained.root / 'results/marker_bias'
    assert (out / 'report.json').exists()
    assert (out / 'ttest.csv').exists()
    assert (out / 'aopc.csv').exists()

    assert bundle.scenario == 'marker_bias'
    assert len(bundle.accuracy) == 4
    assert bundle.provenance.config_hash == commands.run_hash(trained)
    assert bundle.provenance.versions['model_format'] == 'BBM1/1'
    for file in bundle.provenance.files:
        assert (trained.root / file).exists()

    # Untrained twins share their initial weights, so both result sets are identical
    assert bundle.ttests
    for row in bundle.ttests:
        assert row.t == 0
        assert row.p == 1
        assert not row.reject

    report = utils.read_json(out / 'report.json')
    assert report['provenance']['config_hash'] == commands.run_hash(trained)

    # Deterministic output
    text = (out / 'report.json').read_text()
    commands.cmd_report(trained)
    assert (out / 'report.json').read_text() == text


def test_report_missing_results(cfg: RunConfig):
    with pytest.raises(RejectedInputError, match='run evaluate first'):
        commands.cmd_report(cfg)


def test_run(cfg: RunConfig, mocker: MockerFixture):
    m_synth = mocker.Mock(return_value=[])
    mocker.patch.dict(commands.COMMANDS, {'synth': m_synth})
    assert commands.run('synth', cfg) == []
    m_synth.assert_called_once_with(cfg)

    with pytest.raises(UsageError, match='valid: synth, train'):
        commands.run('plot', cfg)


def test_sample_frame():
    frame = commands.sample_frame([sample(0.5), sample(0.25, label=1, gt_object='rounded_rect')])
    assert 'class' in frame.columns
    assert 'label' not in frame.columns
    np.testing.assert_array_equal(frame['value'], [0.5, 0.25])


def test_samples_full_precision(cfg: RunConfig, config):
    config.float_format = '%.3g'
    values = [1 / 3, 0.1 + 0.2, 2 / 7 * 1e-5, 0.1234567890123456789]
    records = [sample(v, sample_id=f'{i:06d}') for i, v in enumerate(values)]
    path = cfg.root / 'samples.csv'

    commands._write_frame(commands.sample_frame(records), path, commands.SAMPLE_FLOAT_FORMAT)
    assert [s.value for s in commands.read_samples(path)] == values

    # Aggregates still follow the configured format
    commands._write_frame(pd.DataFrame({'value': values}), cfg.root / 'rounded.csv')
    assert pd.read_csv(cfg.root / 'rounded.csv')['value'].tolist()[0] == pytest.approx(0.333, abs=1e-12)
