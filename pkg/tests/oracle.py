"""Plain-numpy reference forward passes, written from the layer equations.

Nothing here imports the library's layers; parameters are read by name from
the same flat dict so the two paths can be compared directly.
"""

import numpy as np


def P(p, name):
    return np.asarray(p[name].data, dtype=np.float64)


def ln(x, p, name, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * P(p, name + ".g") + P(p, name + ".b")


def lin(x, p, name):
    return x @ P(p, name + ".w") + P(p, name + ".b")


def gelu(x):
    return 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))


def ffn(x, p, name):
    return lin(gelu(lin(x, p, name + ".fc1")), p, name + ".fc2")


def softmax(s, mask):
    s = np.where(mask, s, -np.inf)
    m = np.max(s, -1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.where(mask, np.exp(s - m), 0.0)
    tot = e.sum(-1, keepdims=True)
    return e / np.where(tot == 0, 1.0, tot)


def mha(q, k, v, heads, mask):
    """Per-example, per-head loops; q [nq, d], k/v [nk, d], mask [nq, nk]."""
    d = q.shape[-1]
    dh = d // heads
    out = np.zeros((q.shape[0], d))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        s = q[:, sl] @ k[:, sl].T / np.sqrt(dh)
        out[:, sl] = softmax(s, mask) @ v[:, sl]
    return out


def encoder_layer(h, p, name, heads, valid):
    n = h.shape[0]
    x = ln(h, p, name + ".ln1")
    mask = np.broadcast_to(valid[None, :], (n, n))
    a = mha(lin(x, p, name + ".attn.q"), lin(x, p, name + ".attn.k"), lin(x, p, name + ".attn.v"), heads, mask)
    h = h + lin(a, p, name + ".attn.o")
    return h + ffn(ln(h, p, name + ".ln2"), p, name + ".ff")


def dual_layer(h, m, p, name, heads, valid):
    k, n = m.shape[0], h.shape[0]
    hx, mx = ln(h, p, name + ".h.ln1"), ln(m, p, name + ".m.ln1")
    qh, kh, vh = (lin(hx, p, f"{name}.h.attn.{c}") for c in "qkv")
    qm, km, vm = (lin(mx, p, f"{name}.m.attn.{c}") for c in "qkv")
    keys, vals = np.vstack([km, kh]), np.vstack([vm, vh])
    # tokens: all slots + valid tokens
    tok_mask = np.concatenate([np.ones((n, k), bool), np.broadcast_to(valid[None], (n, n))], 1)
    # slots: own slot + valid tokens
    mem_mask = np.concatenate([np.eye(k, dtype=bool), np.broadcast_to(valid[None], (k, n))], 1)
    h = h + lin(mha(qh, keys, vals, heads, tok_mask), p, name + ".h.attn.o")
    m = m + lin(mha(qm, keys, vals, heads, mem_mask), p, name + ".m.attn.o")
    h = h + ffn(ln(h, p, name + ".h.ln2"), p, name + ".h.ff")
    m = m + ffn(ln(m, p, name + ".m.ln2"), p, name + ".m.ff")
    return h, m


def encode_membart(p, cfg, src, memory, reset, valid):
    """Returns (encoder states [B,n,d], next memory [B,k,d], gates [B,k])."""
    outs, mems, gates = [], [], []
    for b in range(src.shape[0]):
        h = P(p, "emb.tok")[src[b]] + P(p, "emb.pos")[: src.shape[1]]
        m = ln((1.0 - reset[b]) * memory[b] + P(p, "mem.v_b"), p, "mem.reset_ln")
        m_in = m
        for i in range(cfg.encoder_layers):
            h, m = dual_layer(h, m, p, f"enc.{i}", cfg.heads, valid[b])
        h = ln(h, p, "enc.ln_f")
        hm = ln(m, p, "enc.m_ln_f")
        cand = ffn(hm, p, "mem.mlp")
        z = 1 / (1 + np.exp(-lin(hm, p, "mem.gate")))
        mems.append(z * cand + (1 - z) * m_in)
        gates.append(z[:, 0])
        outs.append(h)
    return np.stack(outs), np.stack(mems), np.stack(gates)


def encode_stateless(p, cfg, src, valid):
    outs = []
    for b in range(src.shape[0]):
        h = P(p, "emb.tok")[src[b]] + P(p, "emb.pos")[: src.shape[1]]
        for i in range(cfg.encoder_layers):
            h = encoder_layer(h, p, f"enc.{i}.h", cfg.heads, valid[b])
        outs.append(ln(h, p, "enc.ln_f"))
    return np.stack(outs)


def decode(p, cfg, tgt_in, enc, valid):
    outs = []
    for b in range(tgt_in.shape[0]):
        m = tgt_in.shape[1]
        x = P(p, "emb.tok")[tgt_in[b]] + P(p, "emb.pos")[:m]
        causal = np.tril(np.ones((m, m), bool))
        cross = np.broadcast_to(valid[b][None], (m, enc.shape[1]))
        for i in range(cfg.decoder_layers):
            name = f"dec.{i}"
            y = ln(x, p, name + ".ln1")
            x = x + lin(mha(lin(y, p, name + ".self.q"), lin(y, p, name + ".self.k"),
                            lin(y, p, name + ".self.v"), cfg.heads, causal), p, name + ".self.o")
            y = ln(x, p, name + ".ln2")
            x = x + lin(mha(lin(y, p, name + ".cross.q"), lin(enc[b], p, name + ".cross.k"),
                            lin(enc[b], p, name + ".cross.v"), cfg.heads, cross), p, name + ".cross.o")
            x = x + ffn(ln(x, p, name + ".ln3"), p, name + ".ff")
        y = ln(x, p, "dec.ln_f")
        if "out.w" in p:
            outs.append(lin(y, p, "out"))
        else:
            outs.append(y @ P(p, "emb.tok").T / np.sqrt(y.shape[-1]) * P(p, "out.scale") + P(p, "out.b"))
    return np.stack(outs)
