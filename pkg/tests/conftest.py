import numpy as np
import pytest
import torch


def central_difference(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` at ``x`` (float64)."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(x)
        flat[i] = old - h
        down = f(x)
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad


def relative_error(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)


# --- desk-scale synthetic benchmark, shared across test modules --------------------------


@pytest.fixture(scope="session")
def desk_spec():
    from mcl.synthetic import SyntheticSpec

    return SyntheticSpec()


@pytest.fixture(scope="session")
def desk_root(tmp_path_factory):
    return tmp_path_factory.mktemp("desk")


@pytest.fixture(scope="session")
def desk_timings():
    return {}


@pytest.fixture(scope="session")
def desk_data(desk_spec, desk_root, desk_timings):
    import time

    from mcl.synthetic import prepare

    torch.set_num_threads(1)
    started = time.perf_counter()
    prepared = prepare(desk_spec, desk_root)
    desk_timings["prepare"] = time.perf_counter() - started
    return prepared


@pytest.fixture(scope="session")
def desk_cache():
    """Finished runs keyed by config hash, so identical configurations train once per session."""
    return {}


@pytest.fixture(scope="session")
def desk_comparison(desk_spec, desk_root, desk_data, desk_cache, desk_timings):
    import time

    from mcl.synthetic import mode_experiments, run_comparison

    started = time.perf_counter()
    report = run_comparison(desk_spec, mode_experiments(("single", "mutual")), desk_root, out=desk_root / "report.json",
                            prepared=desk_data, cache=desk_cache)
    desk_timings["comparison"] = time.perf_counter() - started
    return report

