# recourse_tools/Fairness.py
"""Recourse cost per instance and its spread across subgroups."""
import itertools
import logging

import numpy as np
import pandas as pd

from recourse_tools.Metrics import sample_costs
from recourse_tools.errors import EmptyBatch

logger = logging.getLogger('Fairness')


def recourse_cost(x, samples, context):
    """Mean pair distance between x and its counterfactuals."""
    samples = np.atleast_2d(samples)
    if len(samples) == 0:
        raise EmptyBatch("no counterfactuals for recourse cost")
    return float(sample_costs(x, samples, context).mean())


def fairness_table(costs, groups, group_labels):
    """One row per subgroup: member count, mean and sd of recourse cost."""
    costs = np.asarray(costs, dtype=float)
    groups = np.asarray(groups, dtype=int)
    rows = []
    for k, label in enumerate(group_labels):
        member = costs[groups == k]
        rows.append({
            'group': label,
            'n': int(len(member)),
            'mean_cost': float(member.mean()) if len(member) else np.nan,
            'sd_cost': float(member.std(ddof=1)) if len(member) > 1 else 0.0 if len(member) else np.nan,
        })
    return pd.DataFrame(rows, columns=['group', 'n', 'mean_cost', 'sd_cost'])


def fairness_gaps(table):
    """Pairwise differences of subgroup mean cost."""
    rows = [{'group_a': a['group'], 'group_b': b['group'], 'gap': a['mean_cost'] - b['mean_cost']}
            for (_, a), (_, b) in itertools.combinations(table.iterrows(), 2)]
    return pd.DataFrame(rows, columns=['group_a', 'group_b', 'gap'])


def instance_deviation(costs, groups, table):
    """Each instance's cost minus its subgroup's mean cost."""
    means = table['mean_cost'].to_numpy()
    groups = np.asarray(groups, dtype=int)
    return pd.DataFrame({'group': table['group'].to_numpy()[groups], 'cost': costs,
                         'deviation': np.asarray(costs) - means[groups]})


def format_table(table):
    """'mean ± sd' strings, one per subgroup."""
    return [f"{row.group}: {row.mean_cost:.2f} ± {row.sd_cost:.2f} (n={row.n})" for row in table.itertuples()]
