import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from irlalign.seqcore import PromptSet, RewardModel, SequencePolicy, floor_log_probs, random_policy_table
from irlalign.workbench import InstanceSpec, make_instance


@pytest.fixture(scope="session")
def default_instance():
    return make_instance(InstanceSpec())


@pytest.fixture(scope="session")
def small_instance():
    return make_instance(InstanceSpec(V=3, H=3, prompt_count=3, seed=7))


def random_tabular(seed, V=3, H=3, n_prompts=3, scale=1.0):
    """Random prompts, floored reference policy and tabular reward."""
    rng = np.random.default_rng(seed)
    prompts = PromptSet([(k, k) for k in range(n_prompts)])
    n = V**H
    ref = SequencePolicy(prompts, V, H, floor_log_probs(random_policy_table(rng, n_prompts, n), 1e-6))
    reward = RewardModel.tabular(prompts, V, H, scale * rng.standard_normal((n_prompts, n)))
    return prompts, ref, reward, rng


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    lines = getattr(acceptance, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
