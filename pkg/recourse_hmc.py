# recourse_hmc.py
import argparse
import logging
import sys

from recourse_tools.Commands import (
    cmd_train, cmd_explain, cmd_evaluate, cmd_baseline, cmd_diagnose, cmd_compare, cmd_synth,
)
from recourse_tools.errors import RecourseError

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger('Recourse_HMC')


def _data_flags():
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument('--schema', required=True, help='Schema INI describing the feature columns')
    parent.add_argument('--data', required=True, help='UTF-8 CSV with a header row')
    parent.add_argument('--group-feature', help='Categorical feature that defines the subgroups (overrides the schema)')
    parent.add_argument('--train-fraction', type=float, default=0.8, help='Share of rows in the training split (default 0.8)')
    parent.add_argument('--split-seed', type=int, default=0, help='Seed of the train/test split (default 0)')
    return parent


def _common_flags():
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument('--out', required=True, help='Output directory (receives one manifest.json)')
    parent.add_argument('--verbose', action='store_true', help='Log at DEBUG level')
    return parent


def build_parser():
    parser = argparse.ArgumentParser(description="Bayesian hierarchical counterfactual explanations")
    sub = parser.add_subparsers(dest='command', required=True)
    common, data = _common_flags(), _data_flags()

    p = sub.add_parser('train', parents=[common, data], help='Train the MLP classifier')
    p.add_argument('--seed', type=int, default=0, help='Training seed (default 0)')
    p.add_argument('--epochs', type=int, default=50, help='Training epochs (default 50)')
    p.add_argument('--hidden-units', type=int, default=200, help='Hidden layer width (default 200)')
    p.add_argument('--learning-rate', type=float, default=1e-3, help='Adam learning rate (default 1e-3)')
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('explain', parents=[common, data], help='Sample counterfactuals for selected instances')
    p.add_argument('--classifier', required=True, help='Classifier file written by train')
    p.add_argument('--instance', required=True, help="Row index, comma list, or 'negatives:N'")
    p.add_argument('--priors', help='Priors INI ([priors], [feature:<name>], [sampler], [discretize])')
    p.add_argument('--levels', type=int, choices=[1, 2, 3], help='Hierarchy depth (overrides the priors file)')
    p.add_argument('--chains', type=int, help='Number of chains')
    p.add_argument('--burn-in', type=int, help='Warm-up iterations per chain')
    p.add_argument('--samples', type=int, help='Post-warm-up draws per chain')
    p.add_argument('--seed', type=int, help='Master sampler seed')
    p.add_argument('--threads', type=int, help='Worker threads (fallback: RECOURSE_HMC_THREADS, then 1)')
    p.add_argument('--sweep', help='KEY=v1,v2,... with KEY in samples, sigma_scale, w_prox')
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser('evaluate', parents=[common, data], help='Metrics over samples files')
    p.add_argument('--classifier', required=True, help='Classifier file written by train')
    p.add_argument('--samples', nargs='+', required=True, help='Samples CSV(s) written by explain')
    p.add_argument('--baseline', help='Baseline CSV for the paired diversity comparison')
    p.add_argument('--top-k', type=int, default=0, help='Write the k cheapest valid counterfactuals per instance')
    p.add_argument('--ks', type=int, nargs='+', default=[3, 5, 10], help='Neighbourhood sizes for robustness')
    p.add_argument('--clusters', type=int, default=0, help='Score robustness per k-Means cluster of positives')
    p.add_argument('--seed', type=int, default=0, help='Clustering seed (default 0)')
    p.add_argument('--dataset-name', help='Dataset column of table.csv (default: data file stem)')
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser('baseline', parents=[common, data], help='Random-restart point-estimate counterfactuals')
    p.add_argument('--classifier', required=True, help='Classifier file written by train')
    p.add_argument('--instance', required=True, help="Row index, comma list, or 'negatives:N'")
    p.add_argument('--priors', help='Priors INI (w_prox, lambda and bounds are used)')
    p.add_argument('--baseline-restarts', type=int, default=10, help='Random restarts (default 10)')
    p.add_argument('--steps', type=int, default=500, help='Gradient steps per restart (default 500)')
    p.add_argument('--seed', type=int, default=0, help='Restart seed (default 0)')
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser('diagnose', parents=[common], help='R-hat, ESS and rank histograms of a samples file')
    p.add_argument('--samples', required=True, help='Samples CSV written by explain')
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser('compare', parents=[common, data], help='Local vs subgroup vs population summaries')
    p.add_argument('--classifier', required=True, help='Classifier file written by train')
    p.add_argument('--samples', required=True, help='Samples CSV written by explain')
    p.add_argument('--priors', help='Priors INI used for the explain run')
    p.add_argument('--levels', type=int, choices=[1, 2, 3], help='Hierarchy depth (default: from the samples manifest)')
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser('synth', parents=[common], help='Write a synthetic dataset and its schema')
    p.add_argument('--rows', type=int, default=200, help='Number of rows (default 200)')
    p.add_argument('--d-cont', type=int, default=2, help='Continuous features (default 2)')
    p.add_argument('--d-cat', type=int, default=2, help='Categorical features, group included (default 2)')
    p.add_argument('--groups', type=int, default=2, help='Subgroups (default 2)')
    p.add_argument('--n-levels', type=int, default=3, help='Levels per categorical feature (default 3)')
    p.add_argument('--clusters', type=int, default=0, help='Clustered variant with this many clusters')
    p.add_argument('--seed', type=int, default=0, help='Generator seed (default 0)')
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)
    try:
        return args.func(args)
    except RecourseError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except FileNotFoundError as e:
        logger.error(f"Input not found: {e}")
        return 2


if __name__ == '__main__':
    sys.exit(main())
