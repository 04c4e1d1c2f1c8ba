//! Naive loop-based reference implementations and fixtures shared by the
//! integration tests. Everything here works on `Vec<Vec<f64>>` and reads
//! parameters straight out of the store, without touching the graph.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safrlm::align::{BiGru, GruCell};
use safrlm::data::{generate_synthetic, DatasetSplit, SplitRole, SyntheticSpec};
use safrlm::heads::{Heads, Regressor, SelfAttnTransformer};
use safrlm::metrics::Binarize;
use safrlm::params::{ParamId, ParamStore};
use safrlm::xadjust::{AdjustStack, CrossmodalBlock, LayerNormParams, Linear, MultiHeadAttention, ScaleMode};
use safrlm::{Matrix, ModelConfig};

pub type Rows = Vec<Vec<f64>>;

pub fn rows(m: &Matrix<f64>) -> Rows {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

pub fn param(store: &ParamStore<f64>, id: ParamId) -> Rows {
    rows(store.value(id))
}

pub fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Matrix<f64> {
    Matrix::from_fn(r, c, |_, _| rng.gen_range(-scale..scale))
}

/// Adds uniform noise to every parameter so that layer-norm and fusion
/// weights are exercised away from their initial values.
pub fn perturb(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, scale: f64) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).as_mut_slice() {
            *v += rng.gen_range(-scale..scale);
        }
    }
}

pub fn max_diff(a: &Matrix<f64>, b: &Rows) -> f64 {
    assert_eq!(a.rows(), b.len(), "row count");
    let mut worst: f64 = 0.0;
    for (r, row) in b.iter().enumerate() {
        assert_eq!(a.cols(), row.len(), "column count");
        for (c, v) in row.iter().enumerate() {
            worst = worst.max((a[(r, c)] - v).abs());
        }
    }
    worst
}

pub fn matmul(a: &Rows, b: &Rows) -> Rows {
    let inner = b.len();
    let cols = b[0].len();
    a.iter()
        .map(|row| {
            assert_eq!(row.len(), inner);
            (0..cols).map(|j| (0..inner).map(|k| row[k] * b[k][j]).sum()).collect()
        })
        .collect()
}

pub fn transpose(a: &Rows) -> Rows {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let mut m = f64::NEG_INFINITY;
    for &v in row {
        if v > m {
            m = v;
        }
    }
    let mut total = 0.0;
    let mut out = Vec::with_capacity(row.len());
    for &v in row {
        let e = (v - m).exp();
        total += e;
        out.push(e);
    }
    for v in out.iter_mut() {
        *v /= total;
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softplus(x: f64) -> f64 {
    (1.0 + x.exp()).ln()
}

pub fn add(a: &Rows, b: &Rows) -> Rows {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn layer_norm(x: &Rows, gain: &[f64], offset: &[f64]) -> Rows {
    x.iter()
        .map(|row| {
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
            let sd = (var + 1e-5).sqrt();
            row.iter()
                .enumerate()
                .map(|(c, v)| gain[c] * (v - mean) / sd + offset[c])
                .collect()
        })
        .collect()
}

pub fn ln(x: &Rows, p: &LayerNormParams, store: &ParamStore<f64>) -> Rows {
    layer_norm(x, &param(store, p.gain)[0], &param(store, p.offset)[0])
}

pub fn affine(x: &Rows, w: &Rows, b: &[f64]) -> Rows {
    matmul(x, w)
        .into_iter()
        .map(|row| row.iter().zip(b).map(|(v, bb)| v + bb).collect())
        .collect()
}

pub fn linear(x: &Rows, lin: &Linear, store: &ParamStore<f64>) -> Rows {
    affine(x, &param(store, lin.weight), &param(store, lin.bias)[0])
}

pub fn positional_encoding(l: usize, d: usize) -> Rows {
    let mut pe = vec![vec![0.0; d]; l];
    for (pos, row) in pe.iter_mut().enumerate() {
        let mut i = 0;
        while i < d {
            let angle = pos as f64 / 10000f64.powf(i as f64 / d as f64);
            row[i] = angle.sin();
            if i + 1 < d {
                row[i + 1] = angle.cos();
            }
            i += 2;
        }
    }
    pe
}

pub fn embed(x: &Rows, p: &LayerNormParams, store: &ParamStore<f64>) -> Rows {
    let pe = positional_encoding(x.len(), x[0].len());
    ln(&add(&pe, x), p, store)
}

/// Returns `(X_T′, X_A′, S_TA, S_AT, M_TA)`.
pub fn collab_attention(xt: &Rows, xa: &Rows) -> (Rows, Rows, Rows, Rows, Rows) {
    let l = xt.len();
    let d = xt[0].len();
    let mut m_ta = vec![vec![0.0; l]; l];
    let mut m_at = vec![vec![0.0; l]; l];
    for i in 0..l {
        for j in 0..l {
            for k in 0..d {
                m_ta[i][j] += xt[i][k] * xa[j][k];
                m_at[i][j] += xa[i][k] * xt[j][k];
            }
        }
    }
    let s = |m: &Rows| -> Rows {
        m.iter()
            .map(|r| softmax(&r.iter().map(|v| v.tanh()).collect::<Vec<_>>()))
            .collect()
    };
    let s_ta = s(&m_ta);
    let s_at = s(&m_at);
    let mut xtp = vec![vec![0.0; d]; l];
    let mut xap = vec![vec![0.0; d]; l];
    for i in 0..l {
        for c in 0..d {
            let mut o_ta = 0.0;
            let mut o_at = 0.0;
            for j in 0..l {
                o_ta += s_ta[i][j] * xa[j][c];
                o_at += s_at[i][j] * xt[j][c];
            }
            xtp[i][c] = o_ta * xt[i][c];
            xap[i][c] = o_at * xa[i][c];
        }
    }
    (xtp, xap, s_ta, s_at, m_ta)
}

/// One direction, one step at a time, gates `[reset | update | candidate]`.
pub fn gru_direction(x: &Rows, cell: &GruCell, store: &ParamStore<f64>, reverse: bool) -> Rows {
    let h = cell.hidden;
    let w_i = param(store, cell.w_input);
    let w_h = param(store, cell.w_hidden);
    let b_i = &param(store, cell.b_input)[0];
    let b_h = &param(store, cell.b_hidden)[0];
    let l = x.len();
    let mut state = vec![0.0; h];
    let mut out = vec![Vec::new(); l];
    let order: Vec<usize> = if reverse {
        (0..l).rev().collect()
    } else {
        (0..l).collect()
    };
    for t in order {
        let gate = |block: usize, j: usize, s: &[f64]| -> (f64, f64) {
            let col = block * h + j;
            let mut xi = b_i[col];
            for (k, xv) in x[t].iter().enumerate() {
                xi += xv * w_i[k][col];
            }
            let mut hh = b_h[col];
            for (k, hv) in s.iter().enumerate() {
                hh += hv * w_h[k][col];
            }
            (xi, hh)
        };
        let mut next = vec![0.0; h];
        for j in 0..h {
            let (xr, hr) = gate(0, j, &state);
            let (xz, hz) = gate(1, j, &state);
            let (xn, hn) = gate(2, j, &state);
            let r = sigmoid(xr + hr);
            let z = sigmoid(xz + hz);
            let n = (xn + r * hn).tanh();
            next[j] = (1.0 - z) * n + z * state[j];
        }
        state = next;
        out[t] = state.clone();
    }
    out
}

pub fn bigru(x: &Rows, gru: &BiGru, store: &ParamStore<f64>) -> Rows {
    let f = gru_direction(x, &gru.forward, store, false);
    let b = gru_direction(x, &gru.backward, store, true);
    f.into_iter()
        .zip(b)
        .map(|(mut a, bb)| {
            a.extend(bb);
            a
        })
        .collect()
}

pub fn multi_head(q: &Rows, kv: &Rows, attn: &MultiHeadAttention, store: &ParamStore<f64>) -> Rows {
    let d = q[0].len();
    let dh = d / attn.heads;
    let denom = match attn.scale_mode {
        ScaleMode::PerHead => dh,
        ScaleMode::FullDim => d,
    } as f64;
    let qp = linear(q, &attn.query, store);
    let kp = linear(kv, &attn.key, store);
    let vp = linear(kv, &attn.value, store);
    let mut concat = vec![vec![0.0; d]; q.len()];
    for head in 0..attn.heads {
        let off = head * dh;
        for i in 0..q.len() {
            let scores: Vec<f64> = (0..kv.len())
                .map(|j| (0..dh).map(|c| qp[i][off + c] * kp[j][off + c]).sum::<f64>() / denom.sqrt())
                .collect();
            let w = softmax(&scores);
            for c in 0..dh {
                concat[i][off + c] = (0..kv.len()).map(|j| w[j] * vp[j][off + c]).sum();
            }
        }
    }
    linear(&concat, &attn.output, store)
}

pub fn crossmodal_block(target: &Rows, source: &Rows, block: &CrossmodalBlock, store: &ParamStore<f64>) -> Rows {
    let q = ln(target, &block.ln_attn, store);
    let kv = ln(source, &block.ln_attn, store);
    let mh = multi_head(&q, &kv, &block.attn, store);
    let m_hat = ln(&add(&mh, target), &block.ln_residual, store);
    let f_in = ln(&m_hat, &block.ln_ff, store);
    let hidden: Rows = linear(&f_in, &block.ff.inner, store)
        .into_iter()
        .map(|r| r.into_iter().map(softplus).collect())
        .collect();
    add(&linear(&hidden, &block.ff.outer, store), &m_hat)
}

pub fn self_adjust(fusion: &Rows, first: &Rows, second: &Rows, stack: &AdjustStack, store: &ParamStore<f64>) -> Rows {
    let mut out = embed(fusion, &stack.embed_fusion, store);
    let e1 = embed(first, &stack.embed_first, store);
    let e2 = embed(second, &stack.embed_second, store);
    for b in &stack.first_stage {
        out = crossmodal_block(&out, &e1, b, store);
    }
    for b in &stack.second_stage {
        out = crossmodal_block(&out, &e2, b, store);
    }
    out
}

pub fn self_attn(x: &Rows, t: &SelfAttnTransformer, store: &ParamStore<f64>) -> Rows {
    let mut h = embed(x, &t.embed, store);
    for b in &t.blocks {
        h = crossmodal_block(&h, &h, b, store);
    }
    h
}

pub fn regressor(x: &[f64], r: &Regressor, store: &ParamStore<f64>) -> f64 {
    let hidden: Vec<f64> = linear(&vec![x.to_vec()], &r.hidden, store)[0]
        .iter()
        .map(|&v| softplus(v))
        .collect();
    linear(&vec![hidden], &r.out, store)[0][0]
}

/// `(y_TA′, y_T′A, y_TA)`
pub fn predict(adj_tap: &Rows, adj_tpa: &Rows, heads: &Heads, store: &ParamStore<f64>) -> (f64, f64, f64) {
    let mean = |x: &Rows| -> Vec<f64> {
        let mut m = vec![0.0; x[0].len()];
        for row in x {
            for (c, v) in row.iter().enumerate() {
                m[c] += v / x.len() as f64;
            }
        }
        m
    };
    let y_tap = regressor(&mean(adj_tap), &heads.local_tap, store);
    let y_tpa = regressor(&mean(adj_tpa), &heads.local_tpa, store);
    let s_tap = self_attn(adj_tap, &heads.self_tap, store);
    let s_tpa = self_attn(adj_tpa, &heads.self_tpa, store);
    let mut summary = s_tap.last().unwrap().clone();
    summary.extend(s_tpa.last().unwrap());
    (y_tap, y_tpa, regressor(&summary, &heads.global, store))
}

pub struct NaiveMetrics {
    pub acc7: f64,
    pub acc2: f64,
    pub f1: f64,
    pub mae: f64,
    pub corr: Option<f64>,
}

fn naive_class(v: f64) -> i64 {
    let r = if v >= 0.0 {
        (v + 0.5).floor()
    } else {
        -((-v + 0.5).floor())
    };
    (r as i64).clamp(-3, 3)
}

pub fn metrics(preds: &[f64], labels: &[f64], binarize: Binarize) -> NaiveMetrics {
    let n = preds.len();
    let mut same7 = 0;
    let mut abs_err = 0.0;
    for i in 0..n {
        if naive_class(preds[i]) == naive_class(labels[i]) {
            same7 += 1;
        }
        abs_err += (preds[i] - labels[i]).abs();
    }
    let (mut kept, mut correct, mut tp, mut fp, mut fneg) = (0, 0, 0, 0, 0);
    for i in 0..n {
        let (p, y) = match binarize {
            Binarize::GeqZero => (preds[i] >= 0.0, labels[i] >= 0.0),
            Binarize::ExcludeZero => {
                if labels[i] == 0.0 {
                    continue;
                }
                (preds[i] > 0.0, labels[i] > 0.0)
            }
        };
        kept += 1;
        if p == y {
            correct += 1;
        }
        if p && y {
            tp += 1;
        } else if p {
            fp += 1;
        } else if y {
            fneg += 1;
        }
    }
    let precision = if tp + fp == 0 {
        None
    } else {
        Some(tp as f64 / (tp + fp) as f64)
    };
    let recall = if tp + fneg == 0 {
        None
    } else {
        Some(tp as f64 / (tp + fneg) as f64)
    };
    let f1 = match (precision, recall) {
        (None, None) => 100.0,
        (Some(p), Some(r)) if p + r > 0.0 => 100.0 * 2.0 * p * r / (p + r),
        _ => 0.0,
    };
    let mp = preds.iter().sum::<f64>() / n as f64;
    let ml = labels.iter().sum::<f64>() / n as f64;
    let mut cov = 0.0;
    let mut vp = 0.0;
    let mut vl = 0.0;
    for i in 0..n {
        cov += (preds[i] - mp) * (labels[i] - ml);
        vp += (preds[i] - mp).powi(2);
        vl += (labels[i] - ml).powi(2);
    }
    let corr = if vp == 0.0 || vl == 0.0 {
        None
    } else {
        Some(cov / (vp * vl).sqrt())
    };
    NaiveMetrics {
        acc7: 100.0 * same7 as f64 / n as f64,
        acc2: 100.0 * correct as f64 / kept as f64,
        f1,
        mae: abs_err / n as f64,
        corr,
    }
}

/// Small model used by the training-level tests: width 8, one block per stage.
pub fn toy_model_config(dropout: f64) -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.input.d_text = 4;
    cfg.input.d_audio = 3;
    cfg.input.text_len = 6;
    cfg.input.audio_len = 12;
    cfg.conv.kernel_text = 1;
    cfg.conv.stride_text = 1;
    cfg.conv.kernel_audio = 2;
    cfg.conv.stride_audio = 2;
    cfg.conv.out_channels = 8;
    cfg.xadjust.blocks_per_stage = 1;
    cfg.xadjust.heads = 2;
    cfg.xadjust.ff_width = 32;
    cfg.xadjust.dropout = dropout;
    cfg.heads.self_blocks = 1;
    cfg.heads.hidden = 32;
    cfg.heads.dropout = dropout;
    cfg
}

pub fn toy_split(n: usize, seed: u64, noise: f64, role: SplitRole) -> DatasetSplit {
    generate_synthetic(&SyntheticSpec {
        n_records: n,
        text_len: (4, 6),
        audio_len: (10, 12),
        d_text: 4,
        d_audio: 3,
        seed,
        noise_sigma: noise,
        role,
        id_prefix: format!("{role}"),
    })
    .expect("valid synthetic spec")
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
