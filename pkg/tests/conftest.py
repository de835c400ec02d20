import textwrap

import pytest

TINY_CONFIG = """
method = "{method}"
seeds = [0, 1]
metric = "accuracy"
out = "{out}"

data.source = "synthetic"
data.train_n = 40

synthetic.input_dim = 5
synthetic.source_n = 1500
synthetic.target_n = 200
synthetic.test_n = 300
synthetic.teacher_hidden = 4
synthetic.shift_angle = 0.3
synthetic.label_noise = 0.1
synthetic.seed = 1

model.hidden = [8, 6]

pretrain.epochs = 2
pretrain.lr = {pretrain_lr}
pretrain.batch_size = 32
pretrain.checkpoint = "pre.bin"

search.eta_w = 1e-3
search.eta_alpha = 2e-2
search.batch_size = 8
search.K = {K}
search.steps_ratio = 0.5

finetune.epochs = [2]
finetune.lr = [3e-3]
"""


@pytest.fixture
def tiny_config(tmp_path):
    """Writes a small run config into ``tmp_path`` and returns a factory for variants."""

    def make(method="ours", out="run", K=1, pretrain_lr=3e-3, extra="", name="cfg.toml"):
        text = TINY_CONFIG.format(method=method, out=out, K=K, pretrain_lr=pretrain_lr)
        path = tmp_path / name
        path.write_text(text + textwrap.dedent(extra), encoding="utf-8")
        return path

    return make


_ACCEPTANCE = pytest.StashKey()


@pytest.fixture
def criterion(request):
    """Record ``(number, passed, detail)`` for the end-of-session acceptance summary."""
    results = request.config.stash.setdefault(_ACCEPTANCE, {})

    def record(number, passed, detail):
        results[number] = (bool(passed), detail)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        passed, detail = results[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
