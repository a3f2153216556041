import numpy as np
import pytest

from robust_combat.data_model import DEFAULT_DIRECTIONS, HC, CohortDataset, FeatureTaxonomy


def small_taxonomy(bundles=("CC", "AF_L"), metrics=("fa", "md", "afd")) -> FeatureTaxonomy:
    return FeatureTaxonomy(bundles, metrics, {m: DEFAULT_DIRECTIONS[m] for m in metrics})


def make_dataset(n, taxonomy=None, rng=None, site="s1", groups=None, features=None,
                 covariates=None, id_prefix="sub") -> CohortDataset:
    taxonomy = taxonomy or small_taxonomy()
    rng = np.random.default_rng(0) if rng is None else rng
    if covariates is None:
        covariates = np.column_stack([rng.uniform(20, 80, n), rng.integers(0, 2, n),
                                      rng.integers(0, 2, n)]).astype(float)
    if features is None:
        features = rng.normal(size=(n, taxonomy.n_features))
    return CohortDataset(
        taxonomy=taxonomy,
        subject_ids=[f"{id_prefix}{j:04d}" for j in range(n)],
        site_ids=[site] * n,
        groups=list(groups) if groups is not None else [HC] * n,
        covariates=covariates,
        features=features,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def tax6():
    return small_taxonomy()


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, passed: bool, detail: str) -> None:
    """Print one verdict line per acceptance criterion and keep it for the summary."""
    line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
