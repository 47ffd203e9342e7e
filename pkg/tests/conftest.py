import pytest
import torch

from trimodal.seq2seq import make_batch
from trimodal.tokencore import TokenSequence, build_vocabulary


@pytest.fixture
def tiny_vocab():
    return build_vocabulary(6, 5, 4)


def random_seq(gen, vocab, m, lo=1, hi=6):
    n = int(torch.randint(lo, hi + 1, (1,), generator=gen))
    r = vocab.range(m)
    return TokenSequence(m, tuple(torch.randint(r.start, r.stop, (n,), generator=gen).tolist()))


def random_batch(gen, vocab, src, tgt, size=2, hi=6):
    return make_batch([(random_seq(gen, vocab, src, hi=hi), random_seq(gen, vocab, tgt, hi=hi))
                       for _ in range(size)])


def finite_difference_errors(params, grads, loss_fn, step=1e-4):
    """Per-tensor relative error ||g - fd|| / max(||g||, ||fd||) by central differences."""
    errors = {}
    for name, t in params.items():
        fd = torch.zeros_like(t)
        flat, fdf = t.view(-1), fd.view(-1)
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + step
            up = loss_fn(params)
            flat[i] = orig - step
            down = loss_fn(params)
            flat[i] = orig
            fdf[i] = (up - down) / (2 * step)
        g = grads[name]
        denom = max(float(g.norm()), float(fd.norm()))
        errors[name] = 0.0 if denom < 1e-12 else float((g - fd).norm()) / denom
    return errors


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
