import numpy as np
import pytest

from mflqg.model import ModelParams
from mflqg.scenario import load_scenario


@pytest.fixture
def example61():
    return load_scenario("bundled:example61")[0]


@pytest.fixture
def bench():
    return load_scenario("bundled:benchmark")[0]


def random_spd(rng, n, lo=0.5, hi=2.0):
    Qm, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return Qm @ np.diag(rng.uniform(lo, hi, n)) @ Qm.T


def random_instance(rng, n=None, r=None, T=None, scale=0.5):
    """Random (H1)-compliant instance with moderate coefficients."""
    n = n or int(rng.integers(1, 4))
    r = r or int(rng.integers(1, 3))
    g = lambda *s: scale * rng.standard_normal(s)
    return ModelParams.build(
        A=g(n, n), B=g(n, r), D=g(n, r), C0=g(n, n), D0=g(n, r),
        Q=random_spd(rng, n), R=random_spd(rng, r), R0=random_spd(rng, n, 3.0, 6.0), G=random_spd(rng, n, 0.1, 1.0),
        Gamma=g(n, n), Gamma0=g(n, n), f=g(n), sigma=g(n), eta=g(n), eta0=g(n), x0=g(n),
        T=float(T if T is not None else rng.uniform(0.5, 1.5)),
    )


def passing_instance(rng, **kw):
    """First random instance whose adversary problem is certified uniformly concave."""
    from mflqg.certify import PASS, certify_model_h2prime
    from mflqg.numerics import TimeGrid

    for _ in range(200):
        p = random_instance(rng, **kw)
        if certify_model_h2prime(p, TimeGrid(p.T, 128)).h2prime_ok == PASS:
            return p
    raise RuntimeError("no certified instance drawn")
