"""Python front end for the deepedge scheduler, simulator and orchestrator.

Every function takes and returns plain dicts in the same JSON schema as the
``deepedge`` command line tool. ``registry`` defaults to the built-in tx2 and
nano profiles.
"""

import json

from . import _deepedge
from ._deepedge import (
    InfeasibleError,
    InsufficientData,
    ParseError,
    ValidationError,
    est_compute_time,
    est_update_time,
    fit_logistic,
    get_max_batch_size,
    refine_num_epoch,
)

__all__ = [
    "InfeasibleError",
    "InsufficientData",
    "ParseError",
    "ValidationError",
    "bench",
    "default_registry",
    "est_compute_time",
    "est_update_time",
    "fairness_plan",
    "fit_logistic",
    "get_max_batch_size",
    "refine_num_epoch",
    "run_job",
    "simulate",
    "solve",
]


def _dump(doc):
    if doc is None:
        return ""
    return doc if isinstance(doc, str) else json.dumps(doc)


def default_registry():
    return json.loads(_deepedge.default_registry())


def solve(cluster, job, registry=None, excluded=()):
    return json.loads(_deepedge.solve(_dump(cluster), _dump(job), _dump(registry), False, list(excluded)))


def fairness_plan(cluster, job, registry=None):
    return json.loads(_deepedge.solve(_dump(cluster), _dump(job), _dump(registry), True, []))


def simulate(plan, cluster, job, config=None, registry=None):
    return json.loads(_deepedge.simulate(_dump(plan), _dump(cluster), _dump(job), _dump(config), _dump(registry)))


def run_job(cluster, job, config=None, registry=None):
    return json.loads(_deepedge.run_job(_dump(cluster), _dump(job), _dump(config), _dump(registry)))


def bench(cluster, job, trials=120, seed=0, config=None, registry=None):
    return json.loads(_deepedge.bench(_dump(cluster), _dump(job), trials, seed, _dump(config), _dump(registry)))
