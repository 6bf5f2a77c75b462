import random

import pytest

from madtls.access import AccessRights, SegmentationInfo, SessionConfig, TemplateTable, derive_key_matrix
from madtls.pipeline.corpus import RandomSession
from madtls.bits import Bits


def build_session(rights: AccessRights, layout: SegmentationInfo, self_verifying=(), seed: int = 0,
                  plaintext: Bits | None = None) -> RandomSession:
    rng = random.Random(seed)
    config = SessionConfig(rights, TemplateTable({0: layout}), frozenset(self_verifying))
    psks = {m: rng.randbytes(32) for m in rights.middleboxes}
    matrix = derive_key_matrix(rng.randbytes(32), psks, rng.randbytes(64), rights)
    if plaintext is None:
        plaintext = Bits.from_int(rng.getrandbits(layout.total_bits), layout.total_bits)
    return RandomSession(config, matrix, layout, plaintext, bool(self_verifying))


@pytest.fixture
def small_session() -> RandomSession:
    # sender, writer(ctx0), reader(ctx0, ctx1), receiver
    from madtls.access import Access
    rights = AccessRights(4, 2, {(0, 1): Access.WRITE, (0, 2): Access.READ, (1, 2): Access.READ})
    return build_session(rights, SegmentationInfo.of((12, 0), (20, 1)), self_verifying={2})


# acceptance criterion number -> one-line verdict, printed after the run
ACCEPTANCE: dict[int, str] = {}
ACCEPTANCE_COUNT = 11


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, ACCEPTANCE_COUNT + 1):
        terminalreporter.write_line(ACCEPTANCE.get(n, f"criterion {n:2d} FAIL  did not complete"))
