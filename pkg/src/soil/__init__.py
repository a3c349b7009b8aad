"""State-only imitation learning with a jointly trained inverse dynamics model.

Submodules: approx (MLPs, Gaussian policy, Fisher algebra), envs (point and
arm relocation tasks), demos (trajectories, scripted expert, demo files),
npg (rollouts, advantages, natural gradient step), inverse (replay buffer,
inverse model, relabeling), algos (SOIL, DAPG, NPG, Chamfer, density) and
bench (configs, CLI, experiment suites).
"""

__version__ = "0.1.0"
