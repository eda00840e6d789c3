import random

import pytest

from dsm_forge.dsm import Dsm, new_dsm


def make_random_dsm(
    rng: random.Random,
    n: int,
    values=(0, 1),
    symmetric: bool = False,
    prefix: str = "N",
) -> Dsm:
    cells = [
        [1 if i == j else rng.choice(values) for j in range(n)] for i in range(n)
    ]
    if symmetric:
        for i in range(n):
            for j in range(i):
                cells[i][j] = cells[j][i]
    return new_dsm([f"{prefix}{i + 1}" for i in range(n)], cells)


@pytest.fixture
def rng() -> random.Random:
    return random.Random(20240817)
