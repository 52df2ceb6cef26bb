//! Naive reference implementations for cross-checking the narvid engine.
//!
//! Everything here is written as plain loops over `Vec<Vec<f64>>` with no
//! shared code and no dependency on the engine crate. Performance is not a
//! concern; readability against the math is.

#![allow(clippy::needless_range_loop)]

use std::collections::{BTreeSet, HashMap};

pub type Matrix = Vec<Vec<f64>>;

const EPS: f64 = 1e-8;

// ---------------------------------------------------------------- basics

pub fn softmax(x: &[f64], tau: f64) -> Vec<f64> {
    let mut m = x[0];
    for &v in x {
        if v > m {
            m = v;
        }
    }
    let mut e = Vec::new();
    let mut z = 0.0;
    for &v in x {
        let t = ((v - m) / tau).exp();
        e.push(t);
        z += t;
    }
    for t in e.iter_mut() {
        *t /= z;
    }
    e
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for k in 0..a.len() {
        ab += a[k] * b[k];
        aa += a[k] * a[k];
        bb += b[k] * b[k];
    }
    let na = if aa.sqrt() > EPS { aa.sqrt() } else { EPS };
    let nb = if bb.sqrt() > EPS { bb.sqrt() } else { EPS };
    ab / (na * nb)
}

fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = vec![vec![0.0; b[0].len()]; a.len()];
    for i in 0..a.len() {
        for j in 0..b[0].len() {
            let mut s = 0.0;
            for k in 0..b.len() {
                s += a[i][k] * b[k][j];
            }
            out[i][j] = s;
        }
    }
    out
}

fn add(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = a.clone();
    for i in 0..a.len() {
        for j in 0..a[i].len() {
            out[i][j] += b[i][j];
        }
    }
    out
}

fn std_pop(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mut mean = 0.0;
    for v in x {
        mean += v;
    }
    mean /= n;
    let mut var = 0.0;
    for v in x {
        var += (v - mean) * (v - mean);
    }
    (var / n).sqrt()
}

// ---------------------------------------------------------------- blocks

/// Named parameters; vectors are stored as a single row.
pub type Params = HashMap<String, Matrix>;

fn p<'a>(params: &'a Params, name: &str) -> &'a Matrix {
    params.get(name).unwrap_or_else(|| panic!("oracle: missing parameter {name}"))
}

fn layer_norm(x: &Matrix, params: &Params, prefix: &str) -> Matrix {
    let gain = &p(params, &format!("{prefix}.gain"))[0];
    let bias = &p(params, &format!("{prefix}.bias"))[0];
    let mut out = Vec::new();
    for row in x {
        let n = row.len() as f64;
        let mut mean = 0.0;
        for v in row {
            mean += v;
        }
        mean /= n;
        let mut var = 0.0;
        for v in row {
            var += (v - mean) * (v - mean);
        }
        var /= n;
        let denom = (var + 1e-5).sqrt();
        let mut r = Vec::new();
        for j in 0..row.len() {
            r.push(gain[j] * (row[j] - mean) / denom + bias[j]);
        }
        out.push(r);
    }
    out
}

fn attention(q_in: &Matrix, kv_in: &Matrix, params: &Params, prefix: &str, heads: usize) -> Matrix {
    let q = matmul(q_in, p(params, &format!("{prefix}.wq")));
    let k = matmul(kv_in, p(params, &format!("{prefix}.wk")));
    let v = matmul(kv_in, p(params, &format!("{prefix}.wv")));
    let d = q[0].len();
    let hd = d / heads;
    let mut concat = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        for i in 0..q.len() {
            let mut scores = Vec::new();
            for j in 0..k.len() {
                let mut s = 0.0;
                for c in h * hd..(h + 1) * hd {
                    s += q[i][c] * k[j][c];
                }
                scores.push(s / (hd as f64).sqrt());
            }
            let w = softmax(&scores, 1.0);
            for c in h * hd..(h + 1) * hd {
                let mut acc = 0.0;
                for j in 0..k.len() {
                    acc += w[j] * v[j][c];
                }
                concat[i][c] = acc;
            }
        }
    }
    matmul(&concat, p(params, &format!("{prefix}.wo")))
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn feed_forward(x: &Matrix, params: &Params, prefix: &str) -> Matrix {
    let w1 = p(params, &format!("{prefix}.w1"));
    let b1 = &p(params, &format!("{prefix}.b1"))[0];
    let w2 = p(params, &format!("{prefix}.w2"));
    let b2 = &p(params, &format!("{prefix}.b2"))[0];
    let mut h = matmul(x, w1);
    for row in h.iter_mut() {
        for j in 0..row.len() {
            row[j] = gelu(row[j] + b1[j]);
        }
    }
    let mut o = matmul(&h, w2);
    for row in o.iter_mut() {
        for j in 0..row.len() {
            row[j] += b2[j];
        }
    }
    o
}

/// One pre-norm co-attention stream (`prefix` is e.g. `co_video`).
pub fn co_attention_stream(x: &Matrix, ctx: &Matrix, params: &Params, prefix: &str, heads: usize) -> Matrix {
    let q = layer_norm(x, params, &format!("{prefix}.ln_query"));
    let c = layer_norm(ctx, params, &format!("{prefix}.ln_context"));
    let a = attention(&q, &c, params, &format!("{prefix}.attn"), heads);
    let h = add(x, &a);
    let n = layer_norm(&h, params, &format!("{prefix}.ln_ffn"));
    let f = feed_forward(&n, params, &format!("{prefix}.ffn"));
    add(&h, &f)
}

/// Temporal block (`prefix` is `temporal_video` or `temporal_narration`):
/// `seq + attn_update + ffn_update` computed on `seq + P`.
pub fn temporal_block(seq: &Matrix, params: &Params, prefix: &str, heads: usize) -> Matrix {
    let pos = p(params, "positional");
    let mut x = seq.clone();
    for i in 0..x.len() {
        for j in 0..x[i].len() {
            x[i][j] += pos[i][j];
        }
    }
    let xn = layer_norm(&x, params, &format!("{prefix}.ln_attn"));
    let u = attention(&xn, &xn, params, &format!("{prefix}.attn"), heads);
    let h = add(&x, &u);
    let hn = layer_norm(&h, params, &format!("{prefix}.ln_ffn"));
    let f = feed_forward(&hn, params, &format!("{prefix}.ffn"));
    add(&add(seq, &u), &f)
}

// ---------------------------------------------------------------- filtering

/// Indices in descending probability (index order on ties), accumulated
/// until the running total reaches `p`.
pub fn nucleus(probs: &[f64], p: f64) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..probs.len()).collect();
    let mut chosen = Vec::new();
    let mut total = 0.0;
    while !remaining.is_empty() {
        // linear scan for the best remaining index
        let mut best = 0;
        for r in 1..remaining.len() {
            if probs[remaining[r]] > probs[remaining[best]] {
                best = r;
            }
        }
        let idx = remaining.remove(best);
        chosen.push(idx);
        total += probs[idx];
        if total >= p {
            break;
        }
    }
    chosen
}

/// Relevance probabilities, selection, and renormalized weights.
pub fn filter(eos: &[f64], features: &Matrix, p: f64, tau: f64) -> (Vec<f64>, Vec<usize>, Vec<f64>) {
    let mut sims = Vec::new();
    for f in features {
        sims.push(cosine(eos, f));
    }
    let probs = softmax(&sims, tau);
    let selected = nucleus(&probs, p);
    let mut total = 0.0;
    for &i in &selected {
        total += probs[i];
    }
    let mut weights = Vec::new();
    for &i in &selected {
        weights.push(probs[i] / total);
    }
    (probs, selected, weights)
}

// ---------------------------------------------------------------- matching

/// `(s_coarse, s_w2f, s_f2w, s_final)` for one query against one
/// candidate sequence. `query` is `(L+1) x D` with EOS last.
pub fn pair_score(
    query: &Matrix,
    features: &Matrix,
    word_weight: &[f64],
    word_bias: f64,
    p: f64,
    tau: f64,
) -> (f64, f64, f64, f64) {
    let l = query.len() - 1;
    let eos = &query[l];
    let (_, selected, weights) = filter(eos, features, p, tau);
    let d = eos.len();

    let mut pooled = vec![0.0; d];
    for (w, &k) in weights.iter().zip(&selected) {
        for c in 0..d {
            pooled[c] += w * features[k][c];
        }
    }
    let coarse = cosine(eos, &pooled);

    let mut w2f = 0.0;
    for (w, &k) in weights.iter().zip(&selected) {
        let mut best = f64::NEG_INFINITY;
        for word in query.iter().take(l) {
            let c = cosine(&features[k], word);
            if c > best {
                best = c;
            }
        }
        w2f += w * best;
    }

    let mut logits = Vec::new();
    for word in query.iter().take(l) {
        let mut s = word_bias;
        for c in 0..d {
            s += word_weight[c] * word[c];
        }
        logits.push(s);
    }
    let a = softmax(&logits, tau);
    let mut f2w = 0.0;
    for (li, word) in query.iter().take(l).enumerate() {
        let mut best = f64::NEG_INFINITY;
        for &k in &selected {
            let c = cosine(&features[k], word);
            if c > best {
                best = c;
            }
        }
        f2w += a[li] * best;
    }
    (coarse, w2f, f2w, (coarse + w2f + f2w) / 2.0)
}

// ---------------------------------------------------------------- objective

/// Per-row hard sets for one matrix: `j != i` with `S[i][i] - S[i][j] < lambda * std(row i)`.
pub fn hard_rows(s: &Matrix, lambda: f64) -> Vec<BTreeSet<usize>> {
    let b = s.len();
    let mut out = Vec::new();
    for i in 0..b {
        let sigma = std_pop(&s[i]);
        let mut set = BTreeSet::new();
        for j in 0..b {
            if j != i && s[i][i] - s[i][j] < lambda * sigma {
                set.insert(j);
            }
        }
        out.push(set);
    }
    out
}

pub fn transpose(s: &Matrix) -> Matrix {
    let mut t = vec![vec![0.0; s.len()]; s[0].len()];
    for i in 0..s.len() {
        for j in 0..s[0].len() {
            t[j][i] = s[i][j];
        }
    }
    t
}

/// Unified row sets and unified column sets for a pair of matrices.
pub fn hard_sets(s_qv: &Matrix, s_qn: &Matrix, lambda: f64) -> (Vec<BTreeSet<usize>>, Vec<BTreeSet<usize>>) {
    let a = hard_rows(s_qv, lambda);
    let b = hard_rows(s_qn, lambda);
    let at = hard_rows(&transpose(s_qv), lambda);
    let bt = hard_rows(&transpose(s_qn), lambda);
    let mut rows = Vec::new();
    let mut cols = Vec::new();
    for i in 0..s_qv.len() {
        rows.push(a[i].union(&b[i]).copied().collect());
        cols.push(at[i].union(&bt[i]).copied().collect());
    }
    (rows, cols)
}

pub fn info_nce(s: &Matrix, tau: f64) -> f64 {
    let b = s.len();
    let mut total = 0.0;
    for i in 0..b {
        let mut row = 0.0;
        let mut col = 0.0;
        for j in 0..b {
            row += (s[i][j] / tau).exp();
            col += (s[j][i] / tau).exp();
        }
        let pos = (s[i][i] / tau).exp();
        total += (pos / row).ln() + (pos / col).ln();
    }
    -total / (2.0 * b as f64)
}

/// Hinge loss for one matrix with unified row/column sets.
pub fn hard_rank_loss(s: &Matrix, rows: &[BTreeSet<usize>], cols: &[BTreeSet<usize>], lambda: f64, eta: f64) -> f64 {
    let b = s.len();
    let t = transpose(s);
    let mut total = 0.0;
    for i in 0..b {
        let sr = std_pop(&s[i]);
        let sc = std_pop(&t[i]);
        for &j in &rows[i] {
            let d = s[i][j] - s[i][i] + eta * lambda * sr;
            if d > 0.0 {
                total += d;
            }
        }
        for &j in &cols[i] {
            let d = s[j][i] - s[i][i] + eta * lambda * sc;
            if d > 0.0 {
                total += d;
            }
        }
    }
    total / (2.0 * b as f64)
}

/// Restricted-denominator InfoNCE for one matrix; the positive is always
/// part of the denominator.
pub fn hard_info_nce(s: &Matrix, rows: &[BTreeSet<usize>], cols: &[BTreeSet<usize>], tau: f64) -> f64 {
    let b = s.len();
    let mut total = 0.0;
    for i in 0..b {
        let pos = (s[i][i] / tau).exp();
        let mut row = pos;
        for &j in &rows[i] {
            row += (s[i][j] / tau).exp();
        }
        let mut col = pos;
        for &j in &cols[i] {
            col += (s[j][i] / tau).exp();
        }
        total += (pos / row).ln() + (pos / col).ln();
    }
    -total / (2.0 * b as f64)
}

/// `L_NCE + alpha * L_CVH` for a pair of matrices.
pub fn total_loss(s_qv: &Matrix, s_qn: &Matrix, lambda: f64, eta: f64, alpha: f64, tau: f64) -> f64 {
    let nce = 0.5 * (info_nce(s_qv, tau) + info_nce(s_qn, tau));
    let (rows, cols) = hard_sets(s_qv, s_qn, lambda);
    let cvh = hard_rank_loss(s_qv, &rows, &cols, lambda, eta) + hard_rank_loss(s_qn, &rows, &cols, lambda, eta);
    nce + alpha * cvh
}

// ---------------------------------------------------------------- inference

/// Matrix-level z-scoring of both inputs, summed.
pub fn standardized_fusion(a: &Matrix, b: &Matrix) -> Matrix {
    let z = |m: &Matrix| {
        let mut all = Vec::new();
        for r in m {
            all.extend_from_slice(r);
        }
        let n = all.len() as f64;
        let mean = all.iter().sum::<f64>() / n;
        let sd = std_pop(&all);
        let sd = if sd < EPS { EPS } else { sd };
        let mut out = m.clone();
        for r in out.iter_mut() {
            for v in r.iter_mut() {
                *v = (*v - mean) / sd;
            }
        }
        out
    };
    add(&z(a), &z(b))
}

/// `(r1, r5, r10, median rank, mean rank)` with the diagonal as ground
/// truth and ties counted against the query.
pub fn metrics(s: &Matrix) -> (f64, f64, f64, f64, f64) {
    let n = s.len();
    let mut ranks = Vec::new();
    for i in 0..n {
        let mut rank = 1;
        for j in 0..s[i].len() {
            if j != i && s[i][j] >= s[i][i] {
                rank += 1;
            }
        }
        ranks.push(rank);
    }
    let within = |k: usize| {
        let mut c = 0;
        for &r in &ranks {
            if r <= k {
                c += 1;
            }
        }
        100.0 * c as f64 / n as f64
    };
    let mut sorted = ranks.clone();
    sorted.sort();
    let median = if n % 2 == 1 { sorted[n / 2] as f64 } else { (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0 };
    let mut sum = 0;
    for r in &ranks {
        sum += r;
    }
    (within(1), within(5), within(10), median, sum as f64 / n as f64)
}
