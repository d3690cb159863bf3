import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import erf

from retrikt.checkpoints import CheckpointError
from retrikt.tiny_lm import (
    LmConfig,
    PromptedLm,
    SequenceOverflowError,
    SoftPrompt,
    ValueHead,
    base_state_digest,
    batched_target_nll,
    freeze_base,
    generate_batch,
    load_lm,
    load_prompt,
    pretrain_base_lm,
    sample_top_p,
    save_lm,
    save_prompt,
    sequence_nll,
    top_p_filter,
    top_p_mask,
    top_p_sample_step,
)
from retrikt.vocab import EOS_ID


def make_model(vocab=12, layers=2, dim=8, heads=2, max_len=32, seed=0, dtype=torch.float32):
    torch.manual_seed(seed)
    return PromptedLm(LmConfig(layers, dim, heads, vocab, max_len), dtype=dtype)


def make_prompt(model, k=2, view="input_view", seed=1):
    return SoftPrompt(model.cfg.num_layers, k, model.cfg.hidden_dim, view, seed=seed, dtype=model.dtype)


# ---------------------------------------------------------------- forward pass


def numpy_reference_forward(state, cfg, prompt_vecs, tokens):
    """Independent forward implementation used as the oracle for PromptedLm."""

    def layer_norm(x, w, b, eps=1e-5):
        mu = x.mean(-1, keepdims=True)
        var = ((x - mu) ** 2).mean(-1, keepdims=True)
        return (x - mu) / np.sqrt(var + eps) * w + b

    def gelu(x):
        return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))

    k = prompt_vecs.shape[1]
    t = len(tokens)
    d = cfg.hidden_dim
    hd = d // cfg.num_heads
    emb = state["tok_emb.weight"][tokens] + state["pos_emb.weight"][:t]
    s = k + t
    causal = np.tril(np.ones((s, s), dtype=bool))

    token_part = emb
    out = None
    for j in range(cfg.num_layers):
        x = np.concatenate([prompt_vecs[j], token_part if j == 0 else out[k:]], axis=0)
        h = layer_norm(x, state[f"blocks.{j}.ln1.weight"], state[f"blocks.{j}.ln1.bias"])
        qkv = h @ state[f"blocks.{j}.attn_qkv.weight"].T + state[f"blocks.{j}.attn_qkv.bias"]
        q, kk, v = np.split(qkv, 3, axis=-1)
        ctx = np.zeros_like(q)
        for head in range(cfg.num_heads):
            sl = slice(head * hd, (head + 1) * hd)
            scores = q[:, sl] @ kk[:, sl].T / math.sqrt(hd)
            scores = np.where(causal, scores, -np.inf)
            scores = scores - scores.max(-1, keepdims=True)
            att = np.exp(scores)
            att = att / att.sum(-1, keepdims=True)
            ctx[:, sl] = att @ v[:, sl]
        x = x + ctx @ state[f"blocks.{j}.attn_proj.weight"].T + state[f"blocks.{j}.attn_proj.bias"]
        h2 = layer_norm(x, state[f"blocks.{j}.ln2.weight"], state[f"blocks.{j}.ln2.bias"])
        mlp = gelu(h2 @ state[f"blocks.{j}.mlp_fc1.weight"].T + state[f"blocks.{j}.mlp_fc1.bias"])
        out = x + mlp @ state[f"blocks.{j}.mlp_fc2.weight"].T + state[f"blocks.{j}.mlp_fc2.bias"]

    final = layer_norm(out[k:], state["ln_f.weight"], state["ln_f.bias"])
    return final @ state["head.weight"].T


def test_forward_matches_independent_reference():
    model = make_model(dtype=torch.float64)
    prompt = make_prompt(model)
    tokens = [3, 7, 5]
    fwd = model(torch.tensor([tokens]), prompt)
    state = {k: v.numpy() for k, v in model.state_dict().items()}
    ref = numpy_reference_forward(state, model.cfg, prompt.vectors.detach().numpy(), tokens)
    assert np.max(np.abs(fwd.logits[0].detach().numpy() - ref)) < 1e-6


def test_prompt_positions_replaced_exactly():
    model = make_model()
    prompt = make_prompt(model, k=3)
    fwd = model(torch.tensor([[4, 5, 6, 7]]), prompt, return_hiddens=True)
    for j in range(model.cfg.num_layers):
        got = fwd.hiddens[j][0, :3]
        assert torch.equal(got, prompt.vectors[j])


def test_layer0_token_positions_carry_embeddings():
    model = make_model()
    prompt = make_prompt(model, k=2)
    tokens = torch.tensor([[4, 5, 6]])
    fwd = model(tokens, prompt, return_hiddens=True)
    assert torch.equal(fwd.hiddens[0][0, 2:], model.embed(tokens)[0])


def test_sequence_overflow_rejected():
    model = make_model(max_len=8)
    prompt = make_prompt(model, k=4)
    with pytest.raises(SequenceOverflowError, match="4"):
        model(torch.tensor([[1, 2, 3, 4, 5]]), prompt)


def test_padding_does_not_change_valid_rows():
    model = make_model()
    prompt = make_prompt(model)
    t1 = torch.tensor([[3, 4, 5]])
    single = model(t1, prompt).logits
    padded_tokens = torch.tensor([[3, 4, 5, 1, 1], [6, 7, 8, 9, 10]])
    mask = torch.tensor([[True, True, True, False, False], [True] * 5])
    batch = model(padded_tokens, prompt, pad_mask=mask).logits
    assert torch.allclose(single[0], batch[0, :3], atol=1e-5)


# ---------------------------------------------------------------- top-p filter


def brute_force_top_p(probs, p):
    """Enumerate prefixes over desc-sorted positive-probability tokens."""
    items = sorted([(i, q) for i, q in enumerate(probs) if q > 0], key=lambda x: (-x[1], x[0]))
    total = 0.0
    chosen = []
    for i, q in items:
        chosen.append(i)
        total += q
        if total > p:
            break
    return set(chosen)


def test_top_p_hand_example():
    got = top_p_filter([0.5, 0.3, 0.15, 0.05], 0.9)
    assert set(got.tolist()) == {0, 1, 2}


def test_top_p_full_support_at_one():
    assert set(top_p_filter([0.25, 0.25, 0.25, 0.25], 1.0).tolist()) == {0, 1, 2, 3}


def test_top_p_one_hot():
    for p in (0.1, 0.5, 1.0):
        assert set(top_p_filter([0.0, 1.0, 0.0], p).tolist()) == {1}


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=16), st.floats(0.01, 1.0))
def test_top_p_matches_brute_force_and_is_minimal(weights, p):
    total = sum(weights)
    if total <= 0:
        return
    probs = np.array(weights, dtype=np.float64) / total
    got = top_p_filter(probs, p)
    assert set(got.tolist()) == brute_force_top_p(probs, p)
    # minimality: dropping the least probable retained token leaves mass <= p
    if len(got) > 1:
        assert probs[got[:-1]].sum() <= p + 1e-12


def test_top_p_mask_agrees_with_filter():
    rng = np.random.default_rng(0)
    for _ in range(50):
        probs = rng.dirichlet(np.ones(10))
        mask = top_p_mask(torch.tensor(probs).unsqueeze(0), 0.8)[0].numpy()
        assert set(np.flatnonzero(mask).tolist()) == set(top_p_filter(probs, 0.8).tolist())


def test_top_p_sample_step_frequencies():
    gen = torch.Generator().manual_seed(0)
    probs = np.full(4, 0.25)
    counts = np.zeros(4)
    n = 100_000
    draws = torch.multinomial(torch.full((4,), 0.25), n, replacement=True, generator=gen)
    # reference draw stream only proves the generator works; now the unit under test
    gen2 = torch.Generator().manual_seed(1)
    for _ in range(n // 100):
        counts[top_p_sample_step(probs, 0.9, gen2)] += 1
    counts2 = np.bincount(draws.numpy(), minlength=4)
    for c, total in ((counts, n // 100), (counts2, n)):
        freq = c / total
        tol = 0.01 if total >= 100_000 else 0.05
        assert np.all(np.abs(freq - 0.25) < tol)


# ---------------------------------------------------------------- sampling


def test_sampling_deterministic_per_seed():
    model = make_model()
    prompt = make_prompt(model)
    a = sample_top_p(model, prompt, [3, 4], 0.9, 10, rng_seed=42)
    b = sample_top_p(model, prompt, [3, 4], 0.9, 10, rng_seed=42)
    c = sample_top_p(model, prompt, [3, 4], 0.9, 10, rng_seed=43)
    assert a == b
    assert a != c or len(a) <= 2  # different seed almost surely differs


class _FixedLogitHead(torch.nn.Module):
    """Stand-in LM head emitting a near-one-hot distribution on a fixed token."""

    def __init__(self, vocab: int, hot: int):
        super().__init__()
        self.vocab = vocab
        self.hot = hot

    def forward(self, x):
        out = torch.zeros(*x.shape[:-1], self.vocab, dtype=x.dtype)
        out[..., self.hot] = 50.0
        return out


def test_one_hot_model_is_greedy():
    model = make_model()
    model.head = _FixedLogitHead(model.cfg.vocab_size, hot=5)
    out1 = sample_top_p(model, None, [3], 0.9, 4, rng_seed=0)
    out2 = sample_top_p(model, None, [3], 0.9, 4, rng_seed=99)
    assert out1 == out2 == [5, 5, 5, 5]


def test_generate_batch_trims_at_eos():
    model = make_model()
    model.head = _FixedLogitHead(model.cfg.vocab_size, hot=EOS_ID)
    gen = torch.Generator().manual_seed(0)
    res = generate_batch(model, None, [[3, 4], [5, 6]], 0.9, 8, gen)
    for r in res:
        assert r.tokens == [EOS_ID]
        assert len(r.logprobs) == 1


# ---------------------------------------------------------------- NLL


def test_nll_uniform_model():
    model = make_model(vocab=12)
    with torch.no_grad():
        model.head.weight.zero_()
    target = [3, 4, 5, 6]
    nll = sequence_nll(model, None, [7], target)
    assert abs(nll.item() - len(target) * math.log(12)) < 1e-5


def test_nll_perfect_prediction_near_zero():
    model = make_model()
    model.head = _FixedLogitHead(model.cfg.vocab_size, hot=5)
    nll = sequence_nll(model, None, [3], [5, 5])
    assert nll.item() < 1e-4


def test_nll_additivity_under_teacher_forcing():
    model = make_model(dtype=torch.float64)
    prompt = make_prompt(model)
    cond = [3, 4]
    t1, t2 = [5, 6], [7, 8, 9]
    whole = sequence_nll(model, prompt, cond, t1 + t2)
    first = sequence_nll(model, prompt, cond, t1)
    second = sequence_nll(model, prompt, cond + t1, t2)
    assert abs(whole.item() - (first.item() + second.item())) < 1e-9


def test_nll_rejects_bad_tokens():
    model = make_model(vocab=12)
    with pytest.raises(ValueError, match="12"):
        sequence_nll(model, None, [3], [99])
    with pytest.raises(ValueError):
        sequence_nll(model, None, [3], [])


def test_batched_nll_matches_single(tiny_vocab):
    model = make_model(vocab=20, dim=8)
    prompt = make_prompt(model)
    conds = [[3, 4], [5, 6, 7], [8]]
    tgts = [[9, 10, 11], [12], [13, 14]]
    batched = batched_target_nll(model, prompt, conds, tgts)
    for i in range(3):
        solo = sequence_nll(model, prompt, conds[i], tgts[i])
        assert abs(batched[i].item() - solo.item()) < 1e-4


def test_nll_gradient_matches_finite_differences():
    model = make_model(vocab=10, layers=2, dim=8, heads=2, dtype=torch.float64)
    freeze_base(model)
    prompt = make_prompt(model, k=2)
    prompt.to(torch.float64)
    cond, target = [3, 4], [5, 6, 7]

    loss = sequence_nll(model, prompt, cond, target)
    loss.backward()
    analytic = prompt.vectors.grad.clone().numpy()

    eps = 1e-5
    flat = prompt.vectors.detach().numpy()
    fd = np.zeros_like(flat)
    it = np.nditer(flat, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = flat[idx]
        with torch.no_grad():
            prompt.vectors[idx] = orig + eps
        up = sequence_nll(model, prompt, cond, target).item()
        with torch.no_grad():
            prompt.vectors[idx] = orig - eps
        down = sequence_nll(model, prompt, cond, target).item()
        with torch.no_grad():
            prompt.vectors[idx] = orig
        fd[idx] = (up - down) / (2 * eps)
        it.iternext()

    rel = np.abs(analytic - fd) / np.maximum.reduce([np.abs(analytic), np.abs(fd), np.full_like(fd, 1e-8)])
    assert rel.max() <= 1e-4


def test_only_prompt_gets_gradient():
    model = make_model()
    freeze_base(model)
    prompt = make_prompt(model)
    digest_before = base_state_digest(model)
    opt = torch.optim.Adam(prompt.parameters(), lr=1e-2)
    for _ in range(3):
        loss = sequence_nll(model, prompt, [3, 4], [5, 6])
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert base_state_digest(model) == digest_before
    assert all(p.grad is None for p in model.parameters())


# ---------------------------------------------------------------- pretraining + checkpoints


def test_pretrain_reduces_loss_and_is_deterministic():
    cfg = LmConfig(2, 16, 2, 16, 32)
    seqs = [[3, 4, 5, EOS_ID], [3, 4, 6, EOS_ID], [7, 8, 9, EOS_ID]] * 4
    m1 = pretrain_base_lm(cfg, seqs, steps=30, batch_size=8, lr=1e-2, seed=5)
    m2 = pretrain_base_lm(cfg, seqs, steps=30, batch_size=8, lr=1e-2, seed=5)
    assert base_state_digest(m1) == base_state_digest(m2)
    nll_trained = sequence_nll(m1, None, [3], [4]).item()
    fresh = make_model(vocab=16, layers=2, dim=16, heads=2, seed=5)
    nll_fresh = sequence_nll(fresh, None, [3], [4]).item()
    assert nll_trained < nll_fresh


def test_lm_checkpoint_round_trip_bit_exact(tmp_path):
    model = make_model()
    path = tmp_path / "lm.ckpt"
    save_lm(model, path)
    again = load_lm(path)
    for (k1, v1), (k2, v2) in zip(sorted(model.state_dict().items()), sorted(again.state_dict().items())):
        assert k1 == k2
        assert np.array_equal(v1.numpy(), v2.numpy())
    assert all(not p.requires_grad for p in again.parameters())


def test_prompt_checkpoint_round_trip_bit_exact(tmp_path):
    prompt = SoftPrompt(3, 4, 8, "output_view", seed=7)
    path = tmp_path / "p.ckpt"
    save_prompt(prompt, path)
    again = load_prompt(path)
    assert again.view_tag == "output_view"
    assert np.array_equal(prompt.vectors.detach().numpy(), again.vectors.detach().numpy())


def test_checkpoint_truncation_and_corruption_detected(tmp_path):
    prompt = SoftPrompt(2, 2, 4, "input_view")
    path = tmp_path / "p.ckpt"
    save_prompt(prompt, path)
    raw = path.read_bytes()
    (tmp_path / "trunc.ckpt").write_bytes(raw[: len(raw) - 40])
    with pytest.raises(CheckpointError, match="offset"):
        load_prompt(tmp_path / "trunc.ckpt")
    corrupted = bytearray(raw)
    corrupted[-40] ^= 0xFF
    (tmp_path / "bad.ckpt").write_bytes(bytes(corrupted))
    with pytest.raises(CheckpointError, match="checksum"):
        load_prompt(tmp_path / "bad.ckpt")


def test_value_head_zero_init():
    vh = ValueHead(8)
    x = torch.randn(3, 5, 8)
    assert torch.equal(vh(x), torch.zeros(3, 5))
