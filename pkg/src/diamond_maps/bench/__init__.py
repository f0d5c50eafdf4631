"""Verification metrics, experiment runner and command-line entry point."""

from .metrics import fd_grad_check, ks_test_1d, mean_var_check, rbf_mmd, sliced_w2, w1_1d

__all__ = ["fd_grad_check", "ks_test_1d", "mean_var_check", "rbf_mmd", "sliced_w2", "w1_1d"]
