import math

import pytest
import torch
from torch import nn

from privprune import (NumericError, PruneConfig, SoftMaskSet, SplitModel,
                       StructureRef, ValidationError, build_split_model,
                       fista_step, mask_objective, prune_surgery, soft_threshold,
                       sparsity)
from privprune.models import ResidualBlock


def scalar_mask_set(values, granularity="channel"):
    values = torch.as_tensor(values, dtype=torch.float64)
    structures = [StructureRef(0, "channel", i, 1, f"toy:c{i}")
                  for i in range(values.numel())]
    return SoftMaskSet(values, granularity, structures)


# ---------------------------------------------------------------- prox ----

def test_soft_threshold_analytic():
    assert soft_threshold(0.5, 1.0) == 0.0
    assert soft_threshold(2.0, 0.5) == pytest.approx(1.5)
    assert soft_threshold(-1.2, 0.2) == pytest.approx(-1.0)


def test_soft_threshold_rejects_negative_t():
    with pytest.raises(ValidationError):
        soft_threshold(1.0, -0.1)


def prox_oracle(v, t):
    # enumeration over the stationary candidates of 0.5*(z-v)^2 + t*|z|
    candidates = [0.0, v - t, v + t]
    obj = lambda z: 0.5 * (z - v) ** 2 + t * abs(z)
    return min(candidates, key=obj)


def test_soft_threshold_matches_prox_oracle():
    g = torch.Generator().manual_seed(0)
    v = (torch.rand(200, generator=g, dtype=torch.float64) - 0.5) * 6
    t = torch.rand(200, generator=g, dtype=torch.float64) * 2
    got = soft_threshold(v, t)
    for i in range(200):
        assert abs(float(got[i]) - prox_oracle(float(v[i]), float(t[i]))) <= 1e-12


# --------------------------------------------------------------- fista ----

def test_momentum_recurrence():
    masks = scalar_mask_set([0.0])
    cfg = PruneConfig(lambda1=0.0, lambda2=0.0, mask_step=1.0)
    out = fista_step(masks, torch.zeros(1), cfg)
    assert out.t == pytest.approx((1 + math.sqrt(5)) / 2, abs=1e-12)


def test_zero_gradient_fixed_point():
    masks = scalar_mask_set([0.7, -0.3])
    cfg = PruneConfig(lambda1=0.0, lambda2=0.0, mask_step=0.5)
    out = fista_step(masks, torch.zeros(2), cfg)
    assert torch.equal(out.values, masks.values)


def test_fista_1d_lasso_closed_form():
    # 0.5*(m-1)^2 + 0.3*|m|  has minimizer soft_threshold(1, 0.3) = 0.7
    masks = scalar_mask_set([0.0])
    cfg = PruneConfig(lambda1=0.3, lambda2=0.0, mask_step=1.0)
    for _ in range(200):
        grad = masks.aux - 1.0
        masks = fista_step(masks, grad, cfg)
    assert float(masks.values[0]) == pytest.approx(0.7, abs=1e-8)


def coordinate_descent_lasso(A, b, lam, max_sweeps=4000, tol=1e-14):
    """Independent lasso oracle: cyclic coordinate descent on
    0.5*||A m - b||^2 + lam*||m||_1, run to stationarity."""
    n = A.shape[1]
    m = torch.zeros(n, dtype=torch.float64)
    col_sq = (A * A).sum(dim=0)
    residual = b.clone()
    for _ in range(max_sweeps):
        delta = 0.0
        for j in range(n):
            old = float(m[j])
            rho = float(A[:, j] @ residual) + col_sq[j] * old
            new = soft_threshold(float(rho), lam) / float(col_sq[j])
            if new != old:
                residual -= A[:, j] * (new - old)
                m[j] = new
                delta = max(delta, abs(new - old))
        if delta < tol:
            break
    return m


def lasso_objective(A, b, lam, m):
    return 0.5 * float((A @ m - b).pow(2).sum()) + lam * float(m.abs().sum())


def test_fista_matches_coordinate_descent_oracle():
    g = torch.Generator().manual_seed(3)
    for trial in range(3):
        d = 12
        A = torch.randn(24, d, generator=g, dtype=torch.float64)
        b = torch.randn(24, generator=g, dtype=torch.float64)
        lam = 0.5
        L = float(torch.linalg.matrix_norm(A.T @ A, ord=2))
        cfg = PruneConfig(lambda1=lam, lambda2=0.0, mask_step=1.0 / L)
        masks = scalar_mask_set(torch.zeros(d))
        for _ in range(2000):
            grad = A.T @ (A @ masks.aux - b)
            masks = fista_step(masks, grad, cfg)
        oracle = coordinate_descent_lasso(A, b, lam)
        assert lasso_objective(A, b, lam, masks.values) <= \
            lasso_objective(A, b, lam, oracle) + 1e-6


def test_fista_rejects_bad_gradient():
    masks = scalar_mask_set([0.0, 1.0])
    cfg = PruneConfig()
    with pytest.raises(NumericError, match="index 1"):
        fista_step(masks, torch.tensor([0.0, float("nan")]), cfg)
    with pytest.raises(ValidationError):
        fista_step(masks, torch.zeros(3), cfg)


# ----------------------------------------------------------- objective ----

def test_mask_objective_analytic():
    cfg = PruneConfig(lambda1=1.0, lambda2=10.0)
    assert mask_objective(0.0, scalar_mask_set([0.0, 0.0]), cfg) == 0.0
    assert mask_objective(1.0, scalar_mask_set([3.0, 4.0]), cfg) == pytest.approx(58.0)


def test_mask_objective_matches_independent_norms():
    g = torch.Generator().manual_seed(5)
    v = torch.randn(17, generator=g, dtype=torch.float64)
    cfg = PruneConfig(lambda1=0.7, lambda2=2.3)
    want = 0.25 + 0.7 * sum(abs(float(x)) for x in v) \
        + 2.3 * math.sqrt(sum(float(x) ** 2 for x in v))
    assert mask_objective(0.25, scalar_mask_set(v), cfg) == pytest.approx(want, abs=1e-9)


# ------------------------------------------------------------- sparsity ----

def test_sparsity_trivial():
    assert sparsity(scalar_mask_set([1.0, 2.0]), 0.0).structure_ratio == 0.0
    assert sparsity(scalar_mask_set([-1.0, 0.0]), 0.0).structure_ratio == 1.0
    rep = sparsity(scalar_mask_set([0.5, 0.0, -0.3, 0.2]), 0.0)
    assert rep.structure_ratio == pytest.approx(0.5)
    assert rep.param_ratio == pytest.approx(0.5)  # equal-size structures


def test_sparsity_monotone_in_tau():
    g = torch.Generator().manual_seed(6)
    masks = scalar_mask_set(torch.randn(40, generator=g))
    taus = torch.linspace(-2, 2, 21)
    ratios = [sparsity(masks, float(t)).structure_ratio for t in taus]
    assert all(a <= b for a, b in zip(ratios, ratios[1:]))


def test_sparsity_parameter_weighting():
    values = torch.tensor([-1.0, 1.0], dtype=torch.float64)
    structures = [StructureRef(0, "channel", 0, 90, "big"),
                  StructureRef(0, "channel", 1, 10, "small")]
    rep = sparsity(SoftMaskSet(values, "channel", structures), 0.0)
    assert rep.structure_ratio == pytest.approx(0.5)
    assert rep.param_ratio == pytest.approx(0.9)


# -------------------------------------------------------------- surgery ----

def tiny_model(hidden=4, seed=0):
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        stem = nn.Sequential(nn.Conv2d(3, hidden, 3, padding=1, bias=False),
                             nn.BatchNorm2d(hidden), nn.ReLU())
        blocks = [ResidualBlock(hidden, hidden), ResidualBlock(hidden, hidden)]
        head = nn.Linear(hidden, 5)
        model = SplitModel(stem, blocks, head, split_index=2,
                           task_mode="classification")
    return model


def test_surgery_removal_rule():
    model = tiny_model().eval()
    masks = SoftMaskSet.initialize(model, "channel", seed=0)
    values = torch.ones(len(masks), dtype=torch.float64)
    values[:4] = torch.tensor([0.5, 0.0, -0.3, 0.2])
    masks = masks.replace(values, values.clone(), 1.0)
    cfg = PruneConfig(tau=0.0, keep_min=1)
    pruned, manifest = prune_surgery(model, masks, cfg)
    assert pruned.edge_blocks[0].hidden_channels == 2
    assert "edge0.conv1:c1" in manifest["removed_structures"]
    assert "edge0.conv1:c2" in manifest["removed_structures"]
    assert pruned.edge_blocks[1].hidden_channels == 4


def test_surgery_keep_min():
    model = tiny_model().eval()
    masks = SoftMaskSet.initialize(model, "channel", seed=0)
    values = -torch.ones(len(masks), dtype=torch.float64)
    values[2] = -0.1  # largest in block 0
    masks = masks.replace(values, values.clone(), 1.0)
    pruned, _ = prune_surgery(model, masks, PruneConfig(tau=0.0, keep_min=1))
    for block in pruned.edge_blocks:
        assert block.hidden_channels >= 1
    assert pruned.edge_blocks[0].hidden_channels == 1
    # the survivor is the largest-mask channel
    assert torch.allclose(pruned.edge_blocks[0].conv1.weight,
                          model.edge_blocks[0].conv1.weight[2:3] )


def _zeroed_view(masks, tau):
    z = masks.values.clone()
    z[z <= tau] = 0.0
    return masks.view_at(z)


@pytest.mark.parametrize("granularity", ["channel", "block"])
def test_surgery_equivalence_oracle(granularity):
    model = build_split_model("desk4", split_index=4, seed=2).eval()
    masks = SoftMaskSet.initialize(model, granularity, seed=3)
    cfg = PruneConfig(tau=0.0, keep_min=1)
    pruned, _ = prune_surgery(model, masks, cfg)
    pruned.eval()
    g = torch.Generator().manual_seed(4)
    x = torch.rand(50, 3, 32, 32, generator=g)
    with torch.no_grad():
        ref = model.forward_full(x, masks=_zeroed_view(masks, 0.0))
        got = pruned.forward_full(x)
    rel = (got - ref).flatten(1).norm(dim=1) / ref.flatten(1).norm(dim=1).clamp(min=1e-12)
    assert float(rel.max()) < 1e-5


def test_surgery_cardinality_check():
    model = tiny_model()
    masks = scalar_mask_set(torch.ones(3))
    with pytest.raises(ValidationError):
        prune_surgery(model, masks, PruneConfig())


def test_block_surgery_removes_branch():
    model = tiny_model().eval()
    masks = SoftMaskSet.initialize(model, "block", seed=1)
    values = torch.tensor([-0.5, 2.0], dtype=torch.float64)
    masks = masks.replace(values, values.clone(), 1.0)
    pruned, manifest = prune_surgery(model, masks, PruneConfig(tau=0.0))
    assert pruned.edge_blocks[0].branch_removed
    assert not pruned.edge_blocks[1].branch_removed
    assert manifest["removed_structures"] == ["edge0.branch"]
    # manifest reports the mask sparsity that drove the surgery
    assert manifest["mask_sparsity"]["structure_ratio"] == pytest.approx(0.5)


def test_manifest_compression_accounting():
    model = build_split_model("desk4", split_index=4, seed=5).eval()
    masks = SoftMaskSet.initialize(model, "channel", seed=6)
    pruned, manifest = prune_surgery(model, masks, PruneConfig(tau=0.0))
    assert 0.0 < manifest["param_compression_edge"] < 1.0
    assert manifest["edge_params_after"] < manifest["edge_params_before"]
    spars = sparsity(masks, 0.0)
    assert manifest["mask_sparsity"]["param_ratio"] == pytest.approx(spars.param_ratio)
