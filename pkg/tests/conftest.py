import numpy as np
import pytest

from poisonbench.data import AugmentationPolicy, synth_generate
from poisonbench.harness import BenchmarkEnv
from poisonbench.models import architecture
from poisonbench.training import hyperparams, pretrain, scaled


@pytest.fixture(scope="session")
def tiny_env(tmp_path_factory):
    """A small but real benchmark environment: 4 classes, 8px images,
    3 checkpoints each for two architectures."""
    root = tmp_path_factory.mktemp("tiny_env")
    pre_train, pre_test = synth_generate(seed=900, class_count=4, per_class=40, size=8,
                                         test_per_class=10, palette="pretrain")
    ft_train, ft_test = synth_generate(seed=901, class_count=4, per_class=40, size=8,
                                       test_per_class=10, palette="finetune")
    checkpoints = {}
    for arch_name, hp_set in [("conv_small", "B"), ("conv_tiny", "B")]:
        spec = architecture(arch_name, in_size=8, num_classes=4)
        hp = scaled(hyperparams(hp_set), 20)  # 10 epochs
        paths = pretrain(spec, pre_train, pre_test, hp, AugmentationPolicy(), seed=77,
                         n_checkpoints=3, out_dir=str(root))
        checkpoints[arch_name] = paths
    return BenchmarkEnv(train=ft_train, test=ft_test, checkpoints=checkpoints)
