import numpy as np
import pytest

from physzern.simulate import SimConfig, generate_dataset, procedural_texture, sample_lens_population

CRITERIA: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    CRITERIA[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        passed, detail = CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Four lenses, three 32x32 patches each, 32-sample pupil."""
    out = tmp_path_factory.mktemp("tiny")
    cfg = SimConfig(patch=32, patches_per_lens=3, n_samples=32, psf_crop=32, noise_sigma=0.0, seed=5)
    lenses = sample_lens_population(4, seed=9)
    images = [("tex", procedural_texture(64, 3))]
    generate_dataset(lenses, images, cfg, out)
    return out


DESK_SEEDS = (0, 1, 2, 3, 4)
DESK_VARIANTS = ("z", "zp", "zpm")


@pytest.fixture(scope="session")
def desk_dataset(tmp_path_factory):
    """Desk-scale corpus: 20 lenses, 50 noisy 64x64 patches each, 64-sample pupil."""
    out = tmp_path_factory.mktemp("desk")
    cfg = SimConfig(seed=1, n_samples=64)
    from physzern.simulate import procedural_sources

    generate_dataset(sample_lens_population(20, seed=11), procedural_sources(cfg), cfg, out)
    return out


@pytest.fixture(scope="session")
def desk_ablation(desk_dataset):
    """Train every ablation variant once per seed; seed s holds out fold s of one 5-fold split."""
    from physzern.regressor import LOSS_VARIANTS, TrainConfig, evaluate, load_dataset, train, zero_predictor_metrics
    from physzern.simulate import split_lens_folds

    data = load_dataset(desk_dataset)
    folds = split_lens_folds(data.targets.lens_ids, 5, seed=0)
    runs = {v: [] for v in DESK_VARIANTS}
    for seed in DESK_SEEDS:
        for variant in DESK_VARIANTS:
            res = train(data, folds, seed, LOSS_VARIANTS[variant], TrainConfig(seed=seed, eval_every=0))
            mae = evaluate(res.model, data, res.test_lens_ids, res.normalizer).mae
            runs[variant].append({"seed": seed, "mae": mae, "history": res.history, "zero_mae": zero_predictor_metrics(data, res.test_lens_ids).mae})
    return runs
