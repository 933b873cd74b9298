# recourse_tools/Commands.py
"""
Subcommand bodies for recourse_hmc.py.

Every command takes the parsed argparse namespace, writes its outputs and a
manifest into --out, and returns an exit code. Library errors propagate as
RecourseError subclasses; the entry script maps them to exit codes.
"""
import configparser
import dataclasses
import logging
import os

import numpy as np
import pandas as pd

from recourse_tools.Diagnostics import (
    summarize, summary_frame, rank_histogram_frame, draws_from_frame, RHAT_THRESHOLD,
)
from recourse_tools.Fairness import recourse_cost, fairness_table, fairness_gaps, format_table
from recourse_tools.FeatureSchema import FeatureSchema
from recourse_tools.Metrics import (
    DistanceContext, evaluate, diversity, diversity_by_sample_count, rank_by_cost,
)
from recourse_tools.MlpClassifier import MlpClassifier, TrainConfig, train, FILE_FORMAT, FILE_VERSION
from recourse_tools.NutsSampler import NutsConfig, run_chains
from recourse_tools.ParameterLayout import ParameterLayout
from recourse_tools.PointEstimate import BaselineConfig, point_estimate_baseline, baseline_frame
from recourse_tools.PosteriorModel import PosteriorModel, hierarchy_comparison
from recourse_tools.PriorConfig import PriorConfig
from recourse_tools.Robustness import robustness_table, cluster_neighborhoods
from recourse_tools.RunManifest import RunManifest, find_manifest
from recourse_tools.TabularData import (
    load_csv, encode_frame, partition, select_instances, SyntheticSpec,
    generate_synthetic_frame, generate_clustered,
)
from recourse_tools.errors import (
    SchemaError, SchemaMismatch, EmptyBatch, MissingColumn, SelectorError,
)

logger = logging.getLogger('Commands')

THREADS_ENV = 'RECOURSE_HMC_THREADS'
SWEEP_KEYS = {'samples': int, 'sigma_scale': float, 'w_prox': float}
DIVERSITY_COUNTS = (10, 50, 100, 250, 500, 1000, 2000, 4000)
META_COLUMNS = ('instance', 'chain', 'draw', 'divergent', 'probability', 'discrete_probability',
                'objective', 'valid')


# ---------------------------------------------------------------------------
# Shared loading
# ---------------------------------------------------------------------------

def resolve_threads(args):
    if getattr(args, 'threads', None):
        threads = args.threads
    else:
        raw = os.environ.get(THREADS_ENV, '1').strip() or '1'
        try:
            threads = int(raw)
        except ValueError:
            raise SchemaError(f"{THREADS_ENV}={raw!r} is not an integer") from None
    if threads < 1:
        raise SchemaError(f"thread count must be positive, got {threads}")
    return threads


def load_schema(args):
    schema = FeatureSchema.from_ini(args.schema)
    if getattr(args, 'group_feature', None):
        schema = dataclasses.replace(schema, group_feature=args.group_feature)
    return schema


def load_priors(path):
    """(PriorConfig, NutsConfig) from one priors INI; defaults without a file."""
    if path is None:
        return PriorConfig(), NutsConfig()
    config = configparser.ConfigParser()
    if not config.read(path):
        raise SchemaError(f"prior config not found: {path}")
    return PriorConfig.from_config(config), NutsConfig.from_config(config, 'sampler')


def apply_overrides(args, priors, nuts):
    if getattr(args, 'levels', None):
        priors = priors.replace(levels=args.levels)
    nuts = nuts.replace(n_chains=getattr(args, 'chains', None), burn_in=getattr(args, 'burn_in', None),
                        n_samples=getattr(args, 'samples', None), seed=getattr(args, 'seed', None))
    return priors, nuts


def load_dataset(args, schema):
    return load_csv(args.data, schema, train_fraction=args.train_fraction, split_seed=args.split_seed)


def snapshot(args):
    return {k: v for k, v in sorted(vars(args).items()) if k != 'func'}


def group_labels(schema):
    return list(schema.feature(schema.group_feature).levels) if schema.group_feature else ['all']


def read_samples(path, schema=None):
    """Samples (or baseline) CSV; refuses an empty file or one produced under another schema."""
    try:
        frame = pd.read_csv(path, encoding='utf-8')
    except pd.errors.EmptyDataError:
        raise EmptyBatch(f"{path} is empty") from None
    if len(frame) == 0:
        raise EmptyBatch(f"{path} holds no draws")
    if schema is not None:
        manifest = find_manifest(path)
        recorded = None if manifest is None else manifest.get('config', {}).get('schema_hash')
        if recorded is not None and recorded != schema.schema_hash():
            raise SchemaMismatch(f"{path} was produced under a different schema")
    return frame


def counterfactual_sets(frame, schema):
    """Per-instance encoded counterfactual sets from the cf:<feature> columns of a samples frame."""
    columns = {f'cf:{name}': name for name in schema.names}
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise MissingColumn(f"samples file lacks column(s): {', '.join(missing)}")
    if 'instance' not in frame.columns or frame['instance'].isna().any():
        raise MissingColumn("samples file needs an 'instance' id on every row")
    decoded = frame[list(columns)].rename(columns=columns)
    encoded, _ = encode_frame(decoded, schema)
    ids = frame['instance'].to_numpy(dtype=int)
    probability = frame['discrete_probability'] if 'discrete_probability' in frame.columns else frame['probability']
    instances = sorted(set(ids.tolist()))
    sets = [encoded[ids == i] for i in instances]
    probs = [probability.to_numpy(dtype=float)[ids == i] for i in instances]
    return np.array(instances, dtype=int), sets, probs


def _check_rows(dataset, ids):
    if (ids < 0).any() or (ids >= len(dataset)).any():
        raise SelectorError(f"samples reference rows outside the dataset ({len(dataset)} rows)")


def parameter_columns(frame):
    return [c for c in frame.columns if c not in META_COLUMNS and not c.startswith('cf:')]


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(args):
    schema = load_schema(args)
    manifest = RunManifest('train', args.out, config=snapshot(args),
                           seeds={'train': args.seed, 'split': args.split_seed})
    manifest.config['schema_hash'] = schema.schema_hash()
    manifest.add_input('schema', args.schema)
    manifest.add_input('data', args.data)
    dataset = load_dataset(args, schema)
    config = TrainConfig(epochs=args.epochs, seed=args.seed, train_fraction=args.train_fraction,
                         hidden_units=args.hidden_units, learning_rate=args.learning_rate)
    with manifest.timed('train'):
        result = train(dataset, config)
    path = manifest.output_path('classifier.json')
    result.classifier.save(path)
    manifest.add_artifact('classifier.json', FILE_FORMAT, FILE_VERSION)
    manifest.set_flag('accuracy', result.accuracy)
    manifest.write()
    print(f"Held-out accuracy: {result.accuracy:.4f}")
    print(f"Classifier written to {path}")
    return 0


# ---------------------------------------------------------------------------
# explain
# ---------------------------------------------------------------------------

def explain_instances(dataset, classifier, indices, priors, nuts, threads, manifest):
    """Sample every selected instance and write samples, diagnostics and decoded tables."""
    schema = dataset.schema
    partitioned = partition(dataset, classifier) if priors.levels >= 2 else None
    samples, diagnostics, ranks, decoded, originals = [], [], [], [], []
    converged = True
    for i in indices:
        i = int(i)
        model = PosteriorModel(dataset.encoded[i], schema, classifier, priors, partitioned)
        logger.info(f"Instance {i}: {model.dim} parameter(s), levels={priors.levels}")
        with manifest.timed('sampling'):
            batch = run_chains(nuts, model, model.dim, threads=threads)
        frame = model.samples_frame(batch, seed=nuts.seed + i, instance=i)
        samples.append(frame)

        names = model.layout.column_names()
        summaries = summarize(draws_from_frame(frame, names), names)
        table = summary_frame(summaries)
        table.insert(0, 'instance', i)
        diagnostics.append(table)
        rank = rank_histogram_frame(summaries, batch.chain_ids)
        rank.insert(0, 'instance', i)
        ranks.append(rank)
        if any(s.rhat_available and not s.converged for s in summaries):
            converged = False
        sampler = batch.summary()
        sampler.pop('elapsed_seconds')
        manifest.set_flag(f'sampler:{i}', sampler)

        cf = frame[['instance', 'chain', 'draw'] + [f'cf:{n}' for n in schema.names]]
        cf = cf.rename(columns={f'cf:{n}': n for n in schema.names})
        cf['probability'] = frame['discrete_probability']
        cf['label'] = (frame['discrete_probability'] > 0.5).astype(int)
        decoded.append(cf)
        original = {'instance': i, **dataset.raw_row(i)}
        original['probability'] = classifier.predict_proba(dataset.encoded[i])
        original['label'] = int(original['probability'] > 0.5)
        originals.append(original)

    samples = pd.concat(samples, ignore_index=True)
    samples.to_csv(manifest.output_path('samples.csv'), index=False)
    pd.concat(diagnostics, ignore_index=True).to_csv(manifest.output_path('diagnostics.csv'), index=False)
    pd.concat(ranks, ignore_index=True).to_csv(manifest.output_path('rank_histogram.csv'), index=False)
    pd.concat(decoded, ignore_index=True).to_csv(manifest.output_path('counterfactuals.csv'), index=False)
    pd.DataFrame(originals).to_csv(manifest.output_path('instances.csv'), index=False)
    manifest.set_flag('converged', converged)
    if not converged:
        logger.warning(f"Some parameters have R-hat >= {RHAT_THRESHOLD}; see diagnostics.csv")
    return samples


def _explain_manifest(command, out, args, priors, nuts, schema, indices):
    config = snapshot(args)
    config.update({'priors': priors.to_dict(), 'sampler': nuts.to_dict(), 'schema_hash': schema.schema_hash(),
                   'instances': [int(i) for i in indices]})
    manifest = RunManifest(command, out, config=config,
                           seeds={'sampler': nuts.seed, 'split': args.split_seed,
                                  'subsample': priors.subsample_seed})
    for role in ('schema', 'data', 'classifier', 'priors'):
        manifest.add_input(role, getattr(args, role, None))
    return manifest


def parse_sweep(text):
    """'key=v1,v2,...' -> (key, [values])."""
    key, sep, values = str(text).partition('=')
    key = key.strip()
    if not sep or key not in SWEEP_KEYS:
        raise SchemaError(f"--sweep must look like KEY=v1,v2 with KEY one of {sorted(SWEEP_KEYS)}")
    try:
        parsed = [SWEEP_KEYS[key](v.strip()) for v in values.split(',') if v.strip()]
    except ValueError:
        raise SchemaError(f"--sweep {key}: cannot parse '{values}'") from None
    if not parsed:
        raise SchemaError(f"--sweep {key}: no values")
    return key, parsed


def apply_sweep(key, value, priors, nuts):
    if key == 'samples':
        return priors, nuts.replace(n_samples=value)
    if key == 'sigma_scale':
        return priors.replace(sigma_scale_l3=value, sigma_scale_l2=value), nuts
    return priors.replace(w_prox=value), nuts


def cmd_explain(args):
    schema = load_schema(args)
    priors, nuts = apply_overrides(args, *load_priors(args.priors))
    dataset = load_dataset(args, schema)
    classifier = MlpClassifier.load(args.classifier, schema)
    indices = select_instances(dataset, classifier, args.instance)
    threads = resolve_threads(args)

    if args.sweep:
        return _sweep(args, schema, dataset, classifier, indices, priors, nuts, threads)

    manifest = _explain_manifest('explain', args.out, args, priors, nuts, schema, indices)
    explain_instances(dataset, classifier, indices, priors, nuts, threads, manifest)
    path = manifest.write()
    if not manifest.flags['converged']:
        print(f"WARNING: convergence not reached (R-hat >= {RHAT_THRESHOLD}); flagged in {path}")
    print(f"Counterfactuals for {len(indices)} instance(s) written to {args.out}")
    return 0


def _sweep(args, schema, dataset, classifier, indices, priors, nuts, threads):
    key, values = parse_sweep(args.sweep)
    top = _explain_manifest('explain-sweep', args.out, args, priors, nuts, schema, indices)
    context = DistanceContext.from_stats(schema, dataset.stats)
    rows = []
    for value in values:
        run_priors, run_nuts = apply_sweep(key, value, priors, nuts)
        out = os.path.join(args.out, f'{key}={value}')
        manifest = _explain_manifest('explain', out, args, run_priors, run_nuts, schema, indices)
        samples = explain_instances(dataset, classifier, indices, run_priors, run_nuts, threads, manifest)
        ids, sets, _ = counterfactual_sets(samples, schema)
        report = evaluate(dataset.encoded[ids], sets, classifier, context)
        for name in report.write(os.path.join(out, 'evaluate')):
            manifest.output_path(os.path.basename(name))
        manifest.write()
        rows.append({'key': key, 'value': value, 'validity': report.validity, 'sparsity': report.sparsity,
                     'proximity': report.proximity, 'diversity_mean': report.diversity_mean,
                     'diversity_var': report.diversity_var, 'converged': manifest.flags['converged']})
        logger.info(f"Sweep {key}={value}: validity {report.validity:.3f}, proximity {report.proximity:.3f}")
    pd.DataFrame(rows).to_csv(top.output_path('sweep.csv'), index=False)
    top.set_flag('converged', all(r['converged'] for r in rows))
    top.write()
    print(f"Sweep over {key} ({len(values)} setting(s)) written to {os.path.join(args.out, 'sweep.csv')}")
    return 0


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def cmd_evaluate(args):
    schema = load_schema(args)
    dataset = load_dataset(args, schema)
    classifier = MlpClassifier.load(args.classifier, schema)
    frame = pd.concat([read_samples(p, schema) for p in args.samples], ignore_index=True)
    ids, sets, probs = counterfactual_sets(frame, schema)
    _check_rows(dataset, ids)
    instances = dataset.encoded[ids]
    context = DistanceContext.from_stats(schema, dataset.stats)

    config = snapshot(args)
    config['schema_hash'] = schema.schema_hash()
    manifest = RunManifest('evaluate', args.out, config=config, seeds={'clusters': args.seed, 'split': args.split_seed})
    for role in ('schema', 'data', 'classifier', 'baseline'):
        manifest.add_input(role, getattr(args, role, None))
    for n, path in enumerate(args.samples):
        manifest.add_input(f'samples:{n}', path)

    with manifest.timed('robustness'):
        reference = partition(dataset, classifier).pooled_positives
        clusters = cluster_neighborhoods(reference, args.clusters, args.seed, context) if args.clusters else None
        robustness = robustness_table(instances, sets, reference, args.ks, context, clusters)
    costs = np.array([recourse_cost(x, s, context) for x, s in zip(instances, sets)])
    fairness = fairness_table(costs, dataset.groups[ids], group_labels(schema))
    with manifest.timed('metrics'):
        report = evaluate(instances, sets, classifier, context, robustness=robustness, fairness=fairness)
    for name in report.write(os.path.join(args.out, 'evaluate')):
        manifest.output_path(os.path.basename(name))

    name = args.dataset_name or os.path.splitext(os.path.basename(args.data))[0]
    pd.DataFrame([{'dataset': name, 'validity': report.validity, 'sparsity': report.sparsity,
                   'proximity': report.proximity}]).to_csv(manifest.output_path('table.csv'), index=False)
    fairness_gaps(fairness).to_csv(manifest.output_path('fairness_gaps.csv'), index=False)
    prefixes = []
    for i, s in zip(ids, sets):
        per = diversity_by_sample_count(s, context, DIVERSITY_COUNTS)
        per.insert(0, 'instance', i)
        prefixes.append(per)
    pd.concat(prefixes, ignore_index=True).to_csv(manifest.output_path('diversity_by_samples.csv'), index=False)

    if args.baseline:
        _compare_diversity(args.baseline, schema, ids, sets, context, manifest)
    if args.top_k:
        _write_top_k(args.top_k, schema, ids, instances, sets, probs, context, manifest)

    manifest.write()
    print(f"Validity {report.validity:.3f}  sparsity {report.sparsity:.3f}  proximity {report.proximity:.3f}")
    for line in format_table(fairness):
        print(f"Recourse cost {line}")
    return 0


def _compare_diversity(path, schema, ids, sets, context, manifest):
    base_ids, base_sets, _ = counterfactual_sets(read_samples(path, schema), schema)
    by_instance = dict(zip(base_ids.tolist(), base_sets))
    rows = [{'instance': int(i), 'bayesian': diversity(s, context), 'baseline': diversity(by_instance[int(i)], context)}
            for i, s in zip(ids, sets) if int(i) in by_instance]
    if not rows:
        raise EmptyBatch("baseline file shares no instance with the samples")
    paired = pd.DataFrame(rows)
    paired.to_csv(manifest.output_path('diversity_comparison.csv'), index=False)
    summary = pd.DataFrame([{'method': method, 'mean': float(paired[method].mean()),
                             'variance': float(paired[method].var(ddof=0)), 'instances': len(paired)}
                            for method in ('bayesian', 'baseline')])
    summary.to_csv(manifest.output_path('diversity_summary.csv'), index=False)
    wins = float((paired['bayesian'] > paired['baseline']).mean())
    manifest.set_flag('diversity_wins', wins)
    logger.info(f"Bayesian diversity exceeds the baseline on {wins:.0%} of {len(paired)} instance(s)")


def _write_top_k(top_k, schema, ids, instances, sets, probs, context, manifest):
    rows = []
    for i, x, s, p in zip(ids, instances, sets, probs):
        order, costs = rank_by_cost(x, s, p, context, top_k)
        for rank, (j, cost) in enumerate(zip(order, costs)):
            rows.append({'instance': int(i), 'rank': rank, 'cost': float(cost), 'probability': float(p[j]),
                         **schema.decode(s[j])})
    columns = ['instance', 'rank', 'cost', 'probability'] + schema.names
    pd.DataFrame(rows, columns=columns).to_csv(manifest.output_path('top_k.csv'), index=False)


# ---------------------------------------------------------------------------
# baseline / diagnose / compare / synth
# ---------------------------------------------------------------------------

def cmd_baseline(args):
    schema = load_schema(args)
    priors, _ = load_priors(args.priors)
    dataset = load_dataset(args, schema)
    classifier = MlpClassifier.load(args.classifier, schema)
    indices = select_instances(dataset, classifier, args.instance)
    config = BaselineConfig(n_restarts=args.baseline_restarts, seed=args.seed, steps=args.steps)
    layout = ParameterLayout(schema, priors)

    snap = snapshot(args)
    snap.update({'priors': priors.to_dict(), 'baseline': dataclasses.asdict(config),
                 'schema_hash': schema.schema_hash()})
    manifest = RunManifest('baseline', args.out, config=snap, seeds={'baseline': args.seed, 'split': args.split_seed})
    for role in ('schema', 'data', 'classifier', 'priors'):
        manifest.add_input(role, getattr(args, role, None))
    frames = []
    with manifest.timed('baseline'):
        for i in indices:
            results = point_estimate_baseline(dataset.encoded[int(i)], classifier, layout, priors, config)
            frames.append(baseline_frame(results, instance=int(i)))
    path = manifest.output_path('baseline.csv')
    pd.concat(frames, ignore_index=True).to_csv(path, index=False)
    manifest.write()
    print(f"Baseline counterfactuals ({config.n_restarts} restart(s) x {len(indices)} instance(s)) written to {path}")
    return 0


def cmd_diagnose(args):
    frame = read_samples(args.samples)
    params = parameter_columns(frame)
    if not params:
        raise EmptyBatch(f"{args.samples} has no parameter columns")
    manifest = RunManifest('diagnose', args.out, config=snapshot(args))
    manifest.add_input('samples', args.samples)
    if 'instance' in frame.columns and frame['instance'].notna().all():
        groups = list(frame.groupby('instance', sort=True))
    else:
        groups = [(None, frame)]

    tables, ranks = [], []
    for instance, sub in groups:
        summaries = summarize(draws_from_frame(sub, params), params)
        table = summary_frame(summaries)
        rank = rank_histogram_frame(summaries, sorted(sub['chain'].unique()))
        if instance is not None:
            table.insert(0, 'instance', int(instance))
            rank.insert(0, 'instance', int(instance))
        tables.append(table)
        ranks.append(rank)
    table = pd.concat(tables, ignore_index=True)
    table.to_csv(manifest.output_path('diagnostics.csv'), index=False)
    pd.concat(ranks, ignore_index=True).to_csv(manifest.output_path('rank_histogram.csv'), index=False)

    available = table['rhat_available']
    flagged = int((available & (table['rhat'] >= RHAT_THRESHOLD)).sum())
    manifest.set_flag('converged', bool(available.any()) and flagged == 0)
    manifest.write()
    if not available.any():
        print("R-hat unavailable (fewer than 2 chains or too few draws)")
    print(f"{len(table)} parameter summaries, {flagged} with R-hat >= {RHAT_THRESHOLD}")
    return 0


def cmd_compare(args):
    schema = load_schema(args)
    priors, _ = load_priors(args.priors)
    frame = read_samples(args.samples, schema)
    manifest_in = find_manifest(args.samples)
    if args.levels:
        priors = priors.replace(levels=args.levels)
    elif manifest_in is not None and 'priors' in manifest_in.get('config', {}):
        priors = priors.replace(levels=int(manifest_in['config']['priors']['levels']))
    dataset = load_dataset(args, schema)
    classifier = MlpClassifier.load(args.classifier, schema)
    partitioned = partition(dataset, classifier) if priors.levels >= 2 else None

    snap = snapshot(args)
    snap.update({'priors': priors.to_dict(), 'schema_hash': schema.schema_hash()})
    manifest = RunManifest('compare', args.out, config=snap, seeds={'split': args.split_seed})
    for role in ('schema', 'data', 'classifier', 'priors', 'samples'):
        manifest.add_input(role, getattr(args, role, None))
    tables = []
    for instance, sub in frame.groupby('instance', sort=True):
        model = PosteriorModel(dataset.encoded[int(instance)], schema, classifier, priors, partitioned)
        try:
            table = hierarchy_comparison(sub, model)
        except KeyError as e:
            raise MissingColumn(f"samples do not match a levels={priors.levels} model: {e}") from None
        table.insert(0, 'instance', int(instance))
        tables.append(table)
    path = manifest.output_path('comparison.csv')
    pd.concat(tables, ignore_index=True).to_csv(path, index=False)
    manifest.write()
    print(f"Hierarchy comparison written to {path}")
    return 0


def cmd_synth(args):
    spec = SyntheticSpec(n=args.rows, d_cont=args.d_cont, d_cat=args.d_cat, n_groups=args.groups,
                         n_levels=args.n_levels)
    if args.clusters:
        dataset = generate_clustered(spec, args.clusters, args.seed)
        frame, schema = dataset.frame, dataset.schema
    else:
        frame, schema = generate_synthetic_frame(spec, args.seed)
    manifest = RunManifest('synth', args.out, config=snapshot(args), seeds={'data': args.seed})
    manifest.config['schema_hash'] = schema.schema_hash()
    data_path = manifest.output_path('data.csv')
    frame.to_csv(data_path, index=False)
    schema_path = manifest.output_path('schema.ini')
    schema.write_ini(schema_path)
    manifest.write()
    print(f"Synthetic dataset ({len(frame)} rows) written to {data_path}, schema to {schema_path}")
    return 0
