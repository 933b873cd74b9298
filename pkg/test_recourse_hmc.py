import argparse
import dataclasses
import json
import os

import pandas as pd
import pytest

from recourse_hmc import main
from recourse_tools.Commands import parse_sweep, resolve_threads, apply_sweep
from recourse_tools.FeatureSchema import FeatureSchema
from recourse_tools.NutsSampler import NutsConfig
from recourse_tools.PriorConfig import PriorConfig
from recourse_tools.RunManifest import load_manifest
from recourse_tools.errors import SchemaError

SAMPLER = ['--chains', '2', '--burn-in', '60', '--samples', '25', '--seed', '0']


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope='session')
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp('pipeline')
    dirs = {name: root / name for name in ('synth', 'train', 'explain', 'baseline')}
    assert run('synth', '--out', dirs['synth'], '--rows', 200, '--seed', 1) == 0
    data = ['--schema', dirs['synth'] / 'schema.ini', '--data', dirs['synth'] / 'data.csv']
    assert run('train', '--out', dirs['train'], *data, '--epochs', 150, '--hidden-units', 16,
               '--learning-rate', 0.01) == 0
    classifier = ['--classifier', dirs['train'] / 'classifier.json']
    assert run('explain', '--out', dirs['explain'], *data, *classifier, '--instance', 'negatives:2',
               '--levels', 2, *SAMPLER) == 0
    assert run('baseline', '--out', dirs['baseline'], *data, *classifier, '--instance', 'negatives:2',
               '--baseline-restarts', 3, '--steps', 30) == 0
    return {'dirs': dirs, 'data': data, 'classifier': classifier, 'root': root}


def test_synth_and_train_outputs(pipeline):
    dirs = pipeline['dirs']
    schema = FeatureSchema.from_ini(dirs['synth'] / 'schema.ini')
    assert schema.group_feature == 'group'
    assert len(pd.read_csv(dirs['synth'] / 'data.csv')) == 200
    manifest = load_manifest(dirs['train'])
    assert manifest['command'] == 'train'
    assert manifest['artifacts']['classifier.json']['format'] == 'recourse-mlp'
    assert manifest['flags']['accuracy'] > 0.8
    assert set(manifest['inputs']) == {'schema', 'data'}


def test_explain_outputs(pipeline):
    out = pipeline['dirs']['explain']
    samples = pd.read_csv(out / 'samples.csv')
    assert samples['instance'].nunique() == 2
    assert len(samples) == 2 * 2 * 25
    assert {'chain', 'draw', 'log_posterior', 'divergent', 'probability'} <= set(samples.columns)
    assert any(c.startswith('mu_l1[') for c in samples.columns)
    diagnostics = pd.read_csv(out / 'diagnostics.csv')
    assert {'instance', 'parameter', 'rhat', 'ess_bulk', 'iqr'} <= set(diagnostics.columns)
    counterfactuals = pd.read_csv(out / 'counterfactuals.csv')
    assert {'group', 'probability', 'label'} <= set(counterfactuals.columns)
    assert len(pd.read_csv(out / 'instances.csv')) == 2
    manifest = load_manifest(out)
    assert isinstance(manifest['flags']['converged'], bool)
    assert manifest['config']['priors']['levels'] == 2
    assert set(manifest['outputs']) >= {'samples.csv', 'diagnostics.csv', 'rank_histogram.csv'}
    assert 'elapsed_seconds' not in manifest['flags'][f"sampler:{samples['instance'].iloc[0]}"]


def test_explain_is_reproducible(pipeline, tmp_path, monkeypatch):
    monkeypatch.setenv('RECOURSE_HMC_THREADS', '2')
    out = tmp_path / 'again'
    assert run('explain', '--out', out, *pipeline['data'], *pipeline['classifier'], '--instance', 'negatives:2',
               '--levels', 2, *SAMPLER) == 0
    first = load_manifest(pipeline['dirs']['explain'])['outputs']
    second = load_manifest(out)['outputs']
    assert first == second


def test_evaluate(pipeline, tmp_path):
    dirs = pipeline['dirs']
    out = tmp_path / 'evaluate'
    assert run('evaluate', '--out', out, *pipeline['data'], *pipeline['classifier'],
               '--samples', dirs['explain'] / 'samples.csv', '--baseline', dirs['baseline'] / 'baseline.csv',
               '--top-k', 2, '--ks', 3, 5) == 0
    table = pd.read_csv(out / 'table.csv')
    assert list(table.columns) == ['dataset', 'validity', 'sparsity', 'proximity']
    assert table['dataset'].iloc[0] == 'data'
    assert 0.0 <= table['validity'].iloc[0] <= 1.0
    assert list(pd.read_csv(out / 'evaluate_robustness.csv')['k']) == [3, 5]
    assert len(pd.read_csv(out / 'evaluate_fairness.csv')) == 2
    summary = pd.read_csv(out / 'diversity_summary.csv')
    assert list(summary['method']) == ['bayesian', 'baseline']
    assert (summary['instances'] == 2).all()
    top = pd.read_csv(out / 'top_k.csv')
    assert (top.groupby('instance').size() <= 2).all()
    assert (top['probability'] > 0.5).all()
    with open(out / 'evaluate_metrics.json', encoding='utf-8') as fh:
        assert len(json.load(fh)['diversity']) == 2


def test_diagnose(pipeline, tmp_path):
    out = tmp_path / 'diagnose'
    assert run('diagnose', '--out', out, '--samples', pipeline['dirs']['explain'] / 'samples.csv') == 0
    table = pd.read_csv(out / 'diagnostics.csv')
    assert table['instance'].nunique() == 2
    assert not table['parameter'].str.startswith('cf:').any()
    assert 'log_posterior' in set(table['parameter'])
    ranks = pd.read_csv(out / 'rank_histogram.csv')
    assert ranks.groupby(['instance', 'parameter', 'chain'])['count'].sum().eq(25).all()


def test_compare(pipeline, tmp_path):
    out = tmp_path / 'compare'
    assert run('compare', '--out', out, *pipeline['data'], *pipeline['classifier'],
               '--samples', pipeline['dirs']['explain'] / 'samples.csv') == 0
    table = pd.read_csv(out / 'comparison.csv')
    assert {'local', 'population'} <= set(table['level'])
    assert not any(level.startswith('subgroup') for level in table['level'])


def test_input_errors_exit_2(pipeline, tmp_path):
    dirs = pipeline['dirs']
    assert run('train', '--out', tmp_path / 'a', '--schema', tmp_path / 'absent.ini',
               '--data', dirs['synth'] / 'data.csv') == 2
    assert run('baseline', '--out', tmp_path / 'b', *pipeline['data'], *pipeline['classifier'],
               '--instance', 'negatives:x') == 2
    empty = tmp_path / 'empty.csv'
    empty.write_text('', encoding='utf-8')
    assert run('diagnose', '--out', tmp_path / 'c', '--samples', empty) == 2
    assert run('evaluate', '--out', tmp_path / 'd', *pipeline['data'], *pipeline['classifier'],
               '--samples', empty) == 2


def test_out_of_range_value_exits_2(pipeline, tmp_path):
    frame = pd.read_csv(pipeline['dirs']['synth'] / 'data.csv')
    frame.loc[0, 'x0'] = 250.0
    path = tmp_path / 'wide.csv'
    frame.to_csv(path, index=False)
    assert run('train', '--out', tmp_path / 'out', '--schema', pipeline['dirs']['synth'] / 'schema.ini',
               '--data', path, '--epochs', 1) == 2


def test_other_schema_is_refused(pipeline, tmp_path):
    schema = FeatureSchema.from_ini(pipeline['dirs']['synth'] / 'schema.ini')
    widened = dataclasses.replace(schema.continuous[0], max=schema.continuous[0].max * 2)
    features = tuple(widened if f.name == widened.name else f for f in schema.features)
    path = tmp_path / 'other.ini'
    dataclasses.replace(schema, features=features).write_ini(path)
    assert run('compare', '--out', tmp_path / 'out', '--schema', path,
               '--data', pipeline['dirs']['synth'] / 'data.csv', *pipeline['classifier'],
               '--samples', pipeline['dirs']['explain'] / 'samples.csv') == 2


@pytest.mark.slow
def test_sweep(pipeline, tmp_path):
    out = tmp_path / 'sweep'
    assert run('explain', '--out', out, *pipeline['data'], *pipeline['classifier'], '--instance', 'negatives:1',
               '--sweep', 'w_prox=0.5,2', *SAMPLER) == 0
    sweep = pd.read_csv(out / 'sweep.csv')
    assert list(sweep['value']) == [0.5, 2.0]
    for value in ('0.5', '2.0'):
        run_dir = out / f'w_prox={value}'
        assert (run_dir / 'samples.csv').is_file()
        assert load_manifest(run_dir)['config']['priors']['w_prox'] == float(value)
    assert load_manifest(out)['command'] == 'explain-sweep'


def test_parse_sweep():
    assert parse_sweep('samples=100, 200') == ('samples', [100, 200])
    assert parse_sweep('sigma_scale=0.5') == ('sigma_scale', [0.5])
    for bad in ('bandwidth=1', 'samples', 'samples=', 'w_prox=a,b'):
        with pytest.raises(SchemaError):
            parse_sweep(bad)
    priors, nuts = apply_sweep('sigma_scale', 2.0, PriorConfig(), NutsConfig())
    assert priors.sigma_scale_l2 == priors.sigma_scale_l3 == 2.0
    assert apply_sweep('samples', 7, PriorConfig(), NutsConfig())[1].n_samples == 7


def test_resolve_threads(monkeypatch):
    monkeypatch.delenv('RECOURSE_HMC_THREADS', raising=False)
    assert resolve_threads(argparse.Namespace(threads=None)) == 1
    monkeypatch.setenv('RECOURSE_HMC_THREADS', '3')
    assert resolve_threads(argparse.Namespace(threads=None)) == 3
    assert resolve_threads(argparse.Namespace(threads=2)) == 2
    monkeypatch.setenv('RECOURSE_HMC_THREADS', 'many')
    with pytest.raises(SchemaError):
        resolve_threads(argparse.Namespace(threads=None))
    with pytest.raises(SchemaError):
        resolve_threads(argparse.Namespace(threads=-1))


def test_group_feature_override_keeps_classifier(pipeline, tmp_path):
    out = tmp_path / 'override'
    assert run('baseline', '--out', out, *pipeline['data'], *pipeline['classifier'], '--instance', '0',
               '--group-feature', 'c0', '--baseline-restarts', 1, '--steps', 5) == 0
    assert os.path.isfile(out / 'baseline.csv')
