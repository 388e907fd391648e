import numpy as np
import pytest

from privrec.dataset import RawRating, preprocess, segment, split_per_user

GENRES = ("Action", "Comedy", "Drama", "Horror", "Romance")


def synthetic_ratings(n_users=40, n_items=30, density=0.35, seed=0):
    """Random ratings with timestamps plus one to three genres per item."""
    rng = np.random.default_rng(seed)
    raw = []
    for u in range(n_users):
        for i in range(n_items):
            if rng.random() < density:
                raw.append(RawRating(str(u + 1), str(i + 1), int(rng.integers(1, 6)), int(rng.integers(10**9))))
    cats = {str(i + 1): tuple(rng.choice(GENRES, size=int(rng.integers(1, 4)), replace=False)) for i in range(n_items)}
    return raw, cats


@pytest.fixture
def small_store():
    raw, cats = synthetic_ratings()
    return preprocess(raw, cats)


@pytest.fixture
def small_split(small_store):
    return split_per_user(small_store, seed=0)


@pytest.fixture
def small_segments(small_store, small_split):
    return segment(small_store, small_split)


@pytest.fixture(scope="session")
def dense_data():
    """A denser store whose users all keep test items after the split."""
    raw, cats = synthetic_ratings(n_users=50, n_items=40, density=0.7, seed=11)
    store = preprocess(raw, cats)
    split = split_per_user(store, seed=0)
    return store, split, segment(store, split)


def write_movielens(directory, raw, cats):
    """Write ratings.dat and movies.dat in the MovieLens '::' layout."""
    directory.mkdir(parents=True, exist_ok=True)
    ratings = directory / "ratings.dat"
    movies = directory / "movies.dat"
    ratings.write_text("".join(f"{r.user_id}::{r.item_id}::{r.rating}::{r.timestamp}\n" for r in raw))
    movies.write_text("".join(f"{i}::Movie {i} (1999)::{'|'.join(c)}\n" for i, c in cats.items()))
    return ratings, movies


@pytest.fixture(scope="session")
def ml_files(tmp_path_factory):
    raw, cats = synthetic_ratings(n_users=40, n_items=30, density=0.6, seed=5)
    return write_movielens(tmp_path_factory.mktemp("ml"), raw, cats)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
