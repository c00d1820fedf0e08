#!/usr/bin/env python3

"""ldrcli.py

Batch front end for simulating, fitting, predicting, evaluating and embedding
Lomax delegate racing models. Every command writes its artifacts into
--output-dir together with a <command>.manifest.json describing the run:

    lomaxrace simulate --generator data1 --n 1000 --seed 7 --output-dir run
    lomaxrace fit --method gibbs --data run/data.csv --fast --output-dir run
    lomaxrace predict --params run/posterior.json --data run/data.csv --tau 1 2 3
    lomaxrace evaluate --params run/params.json --data run/test.csv --tau 0.5 1 1.5
    lomaxrace embed --params run/params.json --data run/data.csv
    lomaxrace replay run/fit.manifest.json --output-dir rerun

Settings come from flags first, then from a TOML file given with --config
(one table per command, e.g. [fit] and [fit.hyperparams]), then from the
built-in defaults. The seed falls back to the LDR_SEED environment variable
and otherwise is generated and recorded in the manifest.
Replaying a manifest reruns its recorded command line with the recorded seed
and writes byte-identical artifacts into a new --output-dir.

Exit codes: 0 success, 2 usage or parameter error, 3 unreadable data,
4 numerical failure, 1 anything else.
"""

import argparse
import json
import logging
import os
import sys
import time

import numpy as np
import pandas as pd

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

import lomaxrace
from lomaxrace.v1 import datasets
from lomaxrace.v1 import distributions
from lomaxrace.v1 import evaluation
from lomaxrace.v1 import gibbs
from lomaxrace.v1 import interpret
from lomaxrace.v1 import mapfit
from lomaxrace.v1 import model
from lomaxrace.v1.errors import (EXIT_FAILURE, EXIT_INGESTION, EXIT_OK, EXIT_USAGE, ExitCodeFor, IngestionError,
                                 LdrError, UsageError)

SEED_ENV = 'LDR_SEED'

GIBBS = 'gibbs'
MAP = 'map'


def _atomic_write_json(path, doc):
    tmp = '{}.tmp{}'.format(path, os.getpid())
    with open(tmp, 'w') as f:
        json.dump(doc, f, indent=1, sort_keys=True, default=str)
    os.replace(tmp, path)


class RunManifest(object):
    """What a command read, wrote and was configured with."""

    def __init__(self, command, config, seed, inputs=None):
        self.command = command
        self.config = config
        self.seed = seed
        self.inputs = dict(inputs or {})
        self.outputs = {}
        self.argv = None
        self.replay_of = None
        self.started = time.time()

    def add_output(self, name, path):
        self.outputs[name] = path
        logging.info("wrote %s", path)

    def to_dict(self):
        return {
            'command': self.command,
            'config': self.config,
            'seed': self.seed,
            'inputs': self.inputs,
            'outputs': self.outputs,
            'started': self.started,
            'wall_clock_seconds': time.time() - self.started,
            'version': lomaxrace.__version__,
            'argv': self.argv,
            'replay_of': self.replay_of,
        }

    def write(self, output_dir):
        path = os.path.join(output_dir, '{}.manifest.json'.format(self.command))
        _atomic_write_json(path, self.to_dict())
        return path


_REPLACED_ON_REPLAY = ('--output-dir', '--seed')


def replay_argv(doc, output_dir):
    """The recorded command line of a manifest with its seed pinned and a new output directory."""
    argv = doc.get('argv')
    if not argv or doc.get('seed') is None:
        raise IngestionError("manifest has no recorded command line and seed")
    kept = []
    skip = False
    for a in argv:
        if skip:
            skip = False
        elif a in _REPLACED_ON_REPLAY:
            skip = True
        elif a.split('=', 1)[0] not in _REPLACED_ON_REPLAY:
            kept.append(a)
    return kept + ['--seed', str(doc['seed']), '--output-dir', output_dir]


def load_config(path):
    """Reads a TOML config; None gives an empty config."""
    if not path:
        return {}
    try:
        with open(path, 'rb') as f:
            return tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise UsageError("cannot parse config {}: {}".format(path, e))


def resolve_seed(flag, table):
    """Flag, then config, then LDR_SEED, then fresh entropy."""
    for value in (flag, table.get('seed'), os.environ.get(SEED_ENV)):
        if value is not None and value != '':
            try:
                return int(value)
            except (TypeError, ValueError):
                raise UsageError("seed must be an integer, got {!r}".format(value))
    return int(np.random.SeedSequence().entropy)


class Settings(object):
    """Flag > config table > default lookup for one command."""

    def __init__(self, args, table):
        self.args = args
        self.table = table
        self.resolved = {}

    def get(self, name, default=None):
        value = getattr(self.args, name, None)
        if value is None:
            value = self.table.get(name, self.table.get(name.replace('_', '-'), default))
        self.resolved[name] = value
        return value


def load_params_source(path):
    """LdrParams or PosteriorSamples, told apart by a 'draws' key."""
    try:
        with open(path) as f:
            doc = json.load(f)
    except ValueError as e:
        raise IngestionError("{} is not JSON: {}".format(path, e))
    if 'draws' in doc:
        return gibbs.PosteriorSamples.from_dict(doc)
    return model.LdrParams.from_dict(doc)


def _point_params(source):
    if isinstance(source, gibbs.PosteriorSamples):
        return source.point_estimate()
    return source


def _output_dir(args):
    out = args.output_dir or '.'
    os.makedirs(out, exist_ok=True)
    return out


def _risks(values, num_risks):
    if not values:
        return list(range(num_risks))
    risks = [int(v) - 1 for v in values]
    for j in risks:
        if not 0 <= j < num_risks:
            raise UsageError("--risk must be in 1..{}, got {}".format(num_risks, j + 1))
    return risks


def _taus(values):
    if not values:
        raise UsageError("at least one --tau is required")
    taus = sorted(set(float(t) for t in values))
    if taus[0] < 0:
        raise UsageError("--tau values must be >= 0")
    return taus


def cmd_simulate(args, settings):
    generator = settings.get('generator', datasets.DATA1)
    n = settings.get('n', 1000)
    if n is None or int(n) < 1:
        raise UsageError("--n must be >= 1, got {!r}".format(n))
    seed = resolve_seed(args.seed, settings.table)
    spec = datasets.SyntheticSpec(generator=generator, n=int(n), seed=seed,
                                  censor_time=settings.get('censor_time'))
    data = datasets.simulate(spec, distributions.make_rng(seed))
    out = _output_dir(args)
    manifest = RunManifest('simulate', dict(settings.resolved, censor_time=spec.censor_time), seed)
    path = os.path.join(out, 'data.csv')
    datasets.write_csv(data, path)
    manifest.add_output('data', path)
    meta = os.path.join(out, 'data.meta.json')
    datasets.write_metadata(data, meta)
    manifest.add_output('metadata', meta)
    fraction = settings.get('train_fraction')
    if fraction is not None:
        train, test = evaluation.train_test_split(data, float(fraction), seed)
        for name, part in (('train', train), ('test', test)):
            path = os.path.join(out, '{}.csv'.format(name))
            datasets.write_csv(part, path)
            manifest.add_output(name, path)
    return manifest


def _chain_config(args, settings, seed):
    fast = args.fast or settings.table.get('fast', False)
    base = gibbs.ChainConfig.fast() if fast else gibbs.ChainConfig()
    hyper = settings.table.get('hyperparams', {})
    return gibbs.ChainConfig(
        iterations=int(settings.get('iterations', base.iterations)),
        burn_in=int(settings.get('burnin', base.burn_in)),
        thin=int(settings.get('thin', base.thin)),
        K=int(settings.get('K', base.K)),
        seed=seed,
        hyperparams=model.Hyperparams.from_dict(hyper),
        log_every=int(settings.get('log_every', base.log_every)),
    )


def _map_config(settings, seed):
    base = mapfit.MapConfig()
    return mapfit.MapConfig(
        mc_samples=int(settings.get('mc_samples', base.mc_samples)),
        eval_mc_samples=int(settings.get('eval_mc_samples', base.eval_mc_samples)),
        learning_rate=float(settings.get('learning_rate', base.learning_rate)),
        batch_size=int(settings.get('batch_size', base.batch_size)),
        max_epochs=int(settings.get('epochs', base.max_epochs)),
        patience=int(settings.get('patience', base.patience)),
        t_df=float(settings.get('t_df', base.t_df)),
        r_prior=settings.get('r_prior', base.r_prior),
        K=int(settings.get('K', base.K)),
        seed=seed,
    )


def cmd_fit(args, settings):
    method = settings.get('method', GIBBS)
    if method not in (GIBBS, MAP):
        raise UsageError("--method must be gibbs or map, got {!r}".format(method))
    data_path = settings.get('data')
    if not data_path:
        raise UsageError("--data is required")
    data = datasets.load_csv(data_path, datasets.CsvSchema(num_risks=settings.get('num_risks')))
    seed = resolve_seed(args.seed, settings.table)
    rng = distributions.make_rng(seed)
    out = _output_dir(args)
    if method == GIBBS:
        config = _chain_config(args, settings, seed)
        chains = int(settings.get('chains', 1))
        if chains < 1:
            raise UsageError("--chains must be >= 1, got {}".format(chains))
        manifest = RunManifest('fit', dict(settings.resolved, chain=config.to_dict()), seed, {'data': data_path})
        results = gibbs.run_chains(data, config, chains, rng) if chains > 1 else [gibbs.run_chain(data, config, rng)]
        for c, samples in enumerate(results):
            suffix = '' if chains == 1 else '-chain{}'.format(c + 1)
            trace = os.path.join(out, 'trace{}.jsonl'.format(suffix))
            samples.write_trace(trace)
            manifest.add_output('trace' + suffix, trace)
            diag = os.path.join(out, 'diagnostics{}.csv'.format(suffix))
            samples.write_diagnostics(diag)
            manifest.add_output('diagnostics' + suffix, diag)
        posterior = gibbs.PosteriorSamples.concatenate(results)
        path = os.path.join(out, 'posterior.json')
        posterior.save(path)
        manifest.add_output('posterior', path)
        logging.info("dominant sub-risks per risk: %s", gibbs.dominant_subrisks(posterior).tolist())
        params = posterior.point_estimate()
    else:
        config = _map_config(settings, seed)
        manifest = RunManifest('fit', dict(settings.resolved, map=config.to_dict()), seed, {'data': data_path})
        init_path = settings.get('init')
        init = model.LdrParams.load(init_path) if init_path else None
        result = mapfit.fit_map(data, init, config, rng)
        path = os.path.join(out, 'objective.csv')
        result.write_trace(path)
        manifest.add_output('objective', path)
        params = result.params
    path = os.path.join(out, 'params.json')
    params.save(path)
    manifest.add_output('params', path)
    return manifest


def _load_for_scoring(settings):
    params_path = settings.get('params')
    data_path = settings.get('data')
    if not params_path or not data_path:
        raise UsageError("--params and --data are required")
    source = load_params_source(params_path)
    J = source.num_risks
    data = datasets.load_csv(data_path, datasets.CsvSchema(num_risks=J))
    return source, data, {'params': params_path, 'data': data_path}


def cmd_predict(args, settings):
    source, data, inputs = _load_for_scoring(settings)
    taus = _taus(settings.get('tau'))
    risks = _risks(settings.get('risk'), source.num_risks)
    n_mc = int(settings.get('n_mc', evaluation.DEFAULT_N_MC))
    seed = resolve_seed(args.seed, settings.table)
    manifest = RunManifest('predict', settings.resolved, seed, inputs)
    cif = evaluation.predict_cif(source, data, taus, n_mc, distributions.make_rng(seed))
    n, T = cif.shape[0], len(taus)
    frames = []
    for j in risks:
        frames.append({
            'subject': np.repeat(np.arange(1, n + 1), T),
            'risk': j + 1,
            'tau': np.tile(taus, n),
            'cif': cif[:, j, :].reshape(-1),
        })
    table = pd.concat([pd.DataFrame(f) for f in frames], ignore_index=True)
    path = os.path.join(_output_dir(args), 'cif.csv')
    table.to_csv(path, index=False)
    manifest.add_output('cif', path)
    return manifest


def cmd_evaluate(args, settings):
    source, data, inputs = _load_for_scoring(settings)
    taus = _taus(settings.get('tau'))
    metrics = settings.get('metric') or list(evaluation.METRICS)
    risks = _risks(settings.get('risk'), source.num_risks)
    n_mc = int(settings.get('n_mc', evaluation.DEFAULT_N_MC))
    seed = resolve_seed(args.seed, settings.table)
    manifest = RunManifest('evaluate', settings.resolved, seed, inputs)
    reports = evaluation.evaluate(source, data, taus, metrics, risks, n_mc, distributions.make_rng(seed),
                                  split=settings.get('split', 'test'))
    path = os.path.join(_output_dir(args), 'metrics.csv')
    evaluation.reports_frame(reports).to_csv(path, index=False)
    manifest.add_output('metrics', path)
    return manifest


def cmd_embed(args, settings):
    source, data, inputs = _load_for_scoring(settings)
    params = _point_params(source)
    n_mc = int(settings.get('n_mc', evaluation.DEFAULT_N_MC))
    k = int(settings.get('k_neighbors', interpret.DEFAULT_NEIGHBORS))
    seed = resolve_seed(args.seed, settings.table)
    manifest = RunManifest('embed', settings.resolved, seed, inputs)
    emb, weights, reps, assignments = interpret.embed_model(data, params, n_mc, distributions.make_rng(seed), k)
    path = os.path.join(_output_dir(args), 'embedding.csv')
    interpret.embedding_frame(emb, weights, reps, assignments).to_csv(path, index=False)
    manifest.add_output('embedding', path)
    return manifest


def cmd_replay(args, settings, runner):
    if not args.output_dir:
        raise UsageError("replay needs --output-dir")
    try:
        with open(args.manifest) as f:
            doc = json.load(f)
    except ValueError as e:
        raise IngestionError("{} is not JSON: {}".format(args.manifest, e))
    argv = replay_argv(doc, args.output_dir)
    replayed = BuildParser().parse_args(argv)
    if replayed.command == CommandRunner.REPLAY:
        raise UsageError("{} records a replay, not a command".format(args.manifest))
    logging.info("replaying %s: %s", args.manifest, ' '.join(argv))
    f = runner.Implementation(replayed.command)
    manifest = f(replayed, Settings(replayed, load_config(replayed.config).get(replayed.command, {})))
    manifest.argv = argv
    manifest.replay_of = args.manifest
    return manifest


class CommandRunner:
    """Dispatches parsed command lines to registered command implementations."""

    SIMULATE = 'simulate'
    FIT = 'fit'
    PREDICT = 'predict'
    EVALUATE = 'evaluate'
    EMBED = 'embed'
    REPLAY = 'replay'
    # Every subcommand of BuildParser must be listed here.

    _ALLOWED_IMPLS = frozenset([SIMULATE, FIT, PREDICT, EVALUATE, EMBED, REPLAY])

    def __init__(self):
        self._impls = {}

    def RegisterSimulate(self, f):
        return self._RegisterImpl(self.SIMULATE, f)

    def RegisterFit(self, f):
        return self._RegisterImpl(self.FIT, f)

    def RegisterPredict(self, f):
        return self._RegisterImpl(self.PREDICT, f)

    def RegisterEvaluate(self, f):
        return self._RegisterImpl(self.EVALUATE, f)

    def RegisterEmbed(self, f):
        return self._RegisterImpl(self.EMBED, f)

    def RegisterReplay(self, f):
        return self._RegisterImpl(self.REPLAY, f)

    def _RegisterImpl(self, name, f):
        if name not in self._ALLOWED_IMPLS:
            raise ValueError("unknown command {} specified".format(name))
        if name in self._impls:
            raise ValueError("implementation for {} already present".format(name))
        self._impls[name] = f
        return self

    def Implementation(self, name):
        f = self._impls.get(name)
        if not f:
            raise UsageError("command {!r} not implemented".format(name))
        return f

    def _CallCommand(self, name, args):
        """Runs one command and maps whatever it raises to an exit code.

        Args:
            name: the command, one of _ALLOWED_IMPLS.
            args: parsed argparse namespace.

        Returns:
            The process exit code.
        """
        f = self._impls.get(name)
        if not f:
            logging.error("command %r not implemented", name)
            return EXIT_USAGE
        try:
            settings = Settings(args, load_config(args.config).get(name, {}))
            manifest = f(args, settings)
            if manifest is not None:
                if manifest.argv is None:
                    manifest.argv = getattr(args, 'argv', None)
                manifest.write(_output_dir(args))
        except LdrError as e:
            code = ExitCodeFor(e)
            logging.error("%s failed (exit %d): %s: %s", name, code, type(e).__name__, e)
            return code
        except FileNotFoundError as e:
            logging.error("%s failed (exit %d): %s", name, EXIT_INGESTION, e)
            return EXIT_INGESTION
        except ValueError:
            logging.exception('invalid input')
            return EXIT_USAGE
        except Exception:
            logging.exception('unknown error')
            return EXIT_FAILURE
        return EXIT_OK

    def Run(self, argv=None):
        argv = list(sys.argv[1:] if argv is None else argv)
        args = BuildParser().parse_args(argv)
        args.argv = argv
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO)
        return self._CallCommand(args.command, args)


def _common(p, seeded=True):
    p.add_argument('--config', type=str, default=None, help='TOML file with a table per command.')
    p.add_argument('--output-dir', dest='output_dir', type=str, default=None,
                   help='Directory for all artifacts (default: current directory).')
    if seeded:
        p.add_argument('--seed', type=int, default=None, help='Random seed (default: $LDR_SEED, else generated).')
    p.add_argument('--verbose', action='store_true', help='Log at DEBUG level.')


def _scoring(p):
    p.add_argument('--params', type=str, default=None, help='params.json or posterior.json.')
    p.add_argument('--data', type=str, default=None, help='Dataset CSV.')
    p.add_argument('--n-mc', dest='n_mc', type=int, default=None, help='Gamma draws per CIF evaluation.')


def BuildParser():
    parser = argparse.ArgumentParser(
        prog='lomaxrace',
        description='Simulate, fit and evaluate Lomax delegate racing models for competing risks.')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser(CommandRunner.SIMULATE, help='Draw a synthetic dataset.')
    p.add_argument('--generator', choices=sorted(datasets.DEFAULT_BETAS), default=None)
    p.add_argument('--n', type=int, default=None, help='Number of subjects.')
    p.add_argument('--censor-time', dest='censor_time', type=float, default=None)
    p.add_argument('--train-fraction', dest='train_fraction', type=float, default=None,
                   help='Also write train.csv and test.csv split at this fraction.')
    _common(p)

    p = sub.add_parser(CommandRunner.FIT, help='Fit LDR by Gibbs sampling or MAP.')
    p.add_argument('--method', choices=[GIBBS, MAP], default=None)
    p.add_argument('--data', type=str, default=None, help='Training CSV.')
    p.add_argument('--num-risks', dest='num_risks', type=int, default=None, help='J, if not all types appear.')
    p.add_argument('--K', type=int, default=None, help='Truncation level (sub-risks per risk).')
    p.add_argument('--iterations', type=int, default=None)
    p.add_argument('--burnin', type=int, default=None)
    p.add_argument('--thin', type=int, default=None)
    p.add_argument('--chains', type=int, default=None, help='Independent Gibbs chains run concurrently.')
    p.add_argument('--fast', action='store_true', help='Short Gibbs profile (2000 sweeps, 1500 burn-in).')
    p.add_argument('--epochs', type=int, default=None, help='MAP epochs.')
    p.add_argument('--mc-samples', dest='mc_samples', type=int, default=None, help='MAP gamma draws per subject.')
    p.add_argument('--batch-size', dest='batch_size', type=int, default=None)
    p.add_argument('--learning-rate', dest='learning_rate', type=float, default=None)
    p.add_argument('--r-prior', dest='r_prior', choices=mapfit.R_PRIORS, default=None)
    p.add_argument('--init', type=str, default=None, help='params.json to start MAP from.')
    _common(p)

    p = sub.add_parser(CommandRunner.PREDICT, help='Write cumulative incidence predictions.')
    _scoring(p)
    p.add_argument('--tau', type=float, nargs='+', default=None)
    p.add_argument('--risk', type=int, nargs='+', default=None, help='1-based risks (default: all).')
    _common(p)

    p = sub.add_parser(CommandRunner.EVALUATE, help='Score predictions with C-index and Brier score.')
    _scoring(p)
    p.add_argument('--tau', type=float, nargs='+', default=None)
    p.add_argument('--metric', choices=evaluation.METRICS, nargs='+', default=None)
    p.add_argument('--risk', type=int, nargs='+', default=None, help='1-based risks (default: all).')
    p.add_argument('--split', type=str, default=None, help='Label stored with every metric row.')
    _common(p)

    p = sub.add_parser(CommandRunner.EMBED, help='Write sub-risk representatives and an Isomap embedding.')
    _scoring(p)
    p.add_argument('--k-neighbors', dest='k_neighbors', type=int, default=None)
    _common(p)

    p = sub.add_parser(CommandRunner.REPLAY, help='Rerun the command recorded in a manifest.')
    p.add_argument('manifest', type=str, help='A <command>.manifest.json.')
    _common(p, seeded=False)
    return parser


def BuildRunner():
    runner = CommandRunner()
    runner.RegisterSimulate(cmd_simulate)
    runner.RegisterFit(cmd_fit)
    runner.RegisterPredict(cmd_predict)
    runner.RegisterEvaluate(cmd_evaluate)
    runner.RegisterEmbed(cmd_embed)
    runner.RegisterReplay(lambda args, settings: cmd_replay(args, settings, runner))
    return runner


def main(argv=None):
    return BuildRunner().Run(argv)


if __name__ == '__main__':
    sys.exit(main())
