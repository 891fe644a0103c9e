import numpy as np
import pytest
import torch

from itdkit.ingest import Session, default_type_table


@pytest.fixture(scope="session")
def table():
    return default_type_table()


@pytest.fixture(autouse=True)
def _seeded():
    torch.manual_seed(0)
    np.random.seed(0)


def make_session(codes, labels=None, timestamps=None, user="U0001", sid=None):
    labels = labels or [0] * len(codes)
    timestamps = timestamps or [1_000_000 + 600 * i for i in range(len(codes))]
    return Session(user_id=user, session_id=sid or f"{user}-s0000",
                   codes=list(codes), labels=list(labels),
                   timestamps=list(timestamps))
