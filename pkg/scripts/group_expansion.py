"""Expand the groups of an adapted model and confirm the function is unchanged."""

import sys

import numpy as np

from nora.adapter import count_trainable, expand_groups
from nora.models import AdaptationPlan, ModelConfig, apply_plan, build, default_base_coeffs, swap_activations
from nora.rational import GroupedRationalLayer
from nora.tensor import Tensor


def main():
    rng = np.random.default_rng(0)
    model = apply_plan(swap_activations(build(ModelConfig(groups=4)), default_base_coeffs()), AdaptationPlan(mode="nora"))
    for _, p in model.named_parameters():
        if p.role.startswith("nora"):
            p.data[...] = rng.normal(0, 0.1, p.shape)
    x = rng.normal(size=(32, 16))
    ref = model(Tensor(x)).data
    sites = [n for n, m in model.named_modules() if isinstance(m, GroupedRationalLayer)]
    G = 4
    print(f"G={G:>3}  adapter params {count_trainable(model, include_head=False):>6}")
    while model.config.activation_width % (2 * G) == 0:
        G *= 2
        for s in sites:
            model.set_submodule(s, expand_groups(model.get_submodule(s), G))
        diff = np.max(np.abs(model(Tensor(x)).data - ref))
        print(f"G={G:>3}  adapter params {count_trainable(model, include_head=False):>6}  max |output change| {diff:.1e}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
