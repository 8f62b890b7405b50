"""Desk-scale gradual pruning for transformer encoders.

Train a small encoder on a synthetic classification task, prune it during
fine-tuning (magnitude or diagonal-Fisher saliency, cubic sparsity schedules,
recurring learning-rate rewinds, optional knowledge distillation), and account
for the parameters and FLOPs the sparsity buys back. Deterministic by
construction: equal seeds give byte-identical run logs.

Submodules:
    tensor        reverse-mode autodiff on NumPy arrays, Adam, gradient checker
    model         encoder architectures, init, forward pass, component tags
    schedules     sparsity curves, learning-rate schedules, pruning timetables
    pruning       scope policies, saliency scores, mask selection and I/O
    distillation  softened-KL loss and frozen-teacher construction
    accounting    parameter/FLOP tables and sparsity reports
    trainer       task generator, dense training, the gradual-pruning loop
    recipes       recipe files (strict JSON) and named presets
    cli           the `sparseforge` command-line entry point
"""

__version__ = "0.1.0"
