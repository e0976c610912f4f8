//! Scalar nested-loop references and small helpers shared by the
//! integration tests. Nothing here calls into the tape.

#![allow(dead_code)]

use hcsa::params::ParamStore;
use hcsa::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    rand::SeedableRng::seed_from_u64(seed)
}

pub fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    (0..rows).map(|_| (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

pub fn to_tensor(m: &Mat) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

pub fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

/// Overwrites every parameter (biases included) with uniform noise.
pub fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).data_mut() {
            *v = rng.gen_range(-scale..scale);
        }
    }
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len(), "row count");
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len(), "row width");
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

/// `x · W` for a row vector and a `[in × out]` weight, plus optional bias.
pub fn vec_mat(x: &[f64], w: &Tensor, bias: Option<&[f64]>) -> Vec<f64> {
    assert_eq!(x.len(), w.rows());
    (0..w.cols())
        .map(|j| {
            let mut s = bias.map_or(0.0, |b| b[j]);
            for (i, xi) in x.iter().enumerate() {
                s += xi * w.at(i, j);
            }
            s
        })
        .collect()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `w^T tanh(x·W¹ + c·W² + b)`.
pub fn additive_score(x: &[f64], c: &[f64], w1: &Tensor, w2: &Tensor, b: &[f64], w: &Tensor) -> f64 {
    let a = vec_mat(x, w1, Some(b));
    let q = vec_mat(c, w2, None);
    (0..a.len()).map(|k| (a[k] + q[k]).tanh() * w.at(k, 0)).sum()
}

/// Per position `i`: `Y = b + Σ_o h_{i+o-k/2} · W[o·d .. (o+1)·d]`, then
/// `A ⊗ σ(B) + h_i`, with zero rows outside the sequence.
pub fn conv_glu(h: &Mat, w: &Tensor, b: &[f64], k: usize) -> Mat {
    let (n, d) = (h.len(), h[0].len());
    let half = (k / 2) as isize;
    (0..n)
        .map(|i| {
            let mut y = b.to_vec();
            for o in 0..k {
                let src = i as isize + o as isize - half;
                if src < 0 || src >= n as isize {
                    continue;
                }
                for e in 0..d {
                    let x = h[src as usize][e];
                    for (c, yc) in y.iter_mut().enumerate() {
                        *yc += x * w.at(o * d + e, c);
                    }
                }
            }
            (0..d).map(|c| y[c] * sigmoid(y[d + c]) + h[i][c]).collect()
        })
        .collect()
}

/// Attention-weighted collapse of each run of `h` elements; returns the
/// outputs and the per-segment weight vectors.
pub struct ScorerParams<'a> {
    pub element: &'a Tensor,
    pub context: &'a Tensor,
    pub bias: &'a [f64],
    pub score: &'a Tensor,
}

pub fn segmentation(o: &Mat, global: &[f64], p: &ScorerParams, h: usize) -> (Mat, Vec<Vec<f64>>) {
    let mut out = Vec::new();
    let mut weights = Vec::new();
    let mut start = 0;
    while start < o.len() {
        let end = (start + h).min(o.len());
        let alpha: Vec<f64> = (start..end)
            .map(|j| additive_score(&o[j], global, p.element, p.context, p.bias, p.score))
            .collect();
        let a = softmax(&alpha);
        let d = o[0].len();
        let mut s = vec![0.0; d];
        for (t, j) in (start..end).enumerate() {
            for c in 0..d {
                s[c] += a[t] * o[j][c];
            }
        }
        out.push(s);
        weights.push(a);
        start = end;
    }
    (out, weights)
}

/// `M_ij = w^T tanh(W¹ s_i + W² q_j + b)`, `D = M Mᵀ`,
/// `out_i = s_i + Σ_j softmax_j(D_ij) s_j`. Returns outputs, `M`, `D` and
/// the softmaxed rows.
pub fn question_self_attention(s: &Mat, q: &Mat, p: &ScorerParams) -> (Mat, Mat, Mat, Mat) {
    let (n, m, d) = (s.len(), q.len(), s[0].len());
    let mm: Mat = (0..n)
        .map(|i| (0..m).map(|j| additive_score(&s[i], &q[j], p.element, p.context, p.bias, p.score)).collect())
        .collect();
    let dd: Mat = (0..n)
        .map(|i| (0..n).map(|j| (0..m).map(|k| mm[i][k] * mm[j][k]).sum()).collect())
        .collect();
    let att: Mat = dd.iter().map(|row| softmax(row)).collect();
    let out = (0..n)
        .map(|i| {
            (0..d)
                .map(|c| s[i][c] + (0..n).map(|j| att[i][j] * s[j][c]).sum::<f64>())
                .collect()
        })
        .collect();
    (out, mm, dd, att)
}

/// `β_i = w^T tanh(W¹ h_i + W² h^a + W³ h^Q + b)`, `v = Σ_i softmax(β)_i h_i`.
pub fn layer_attention(
    layer: &Mat,
    hidden: &[f64],
    global: &[f64],
    w1: &Tensor,
    w2: &Tensor,
    w3: &Tensor,
    b: &[f64],
    w: &Tensor,
) -> (Vec<f64>, Vec<f64>) {
    let hp = vec_mat(hidden, w2, None);
    let qp = vec_mat(global, w3, None);
    let beta: Vec<f64> = layer
        .iter()
        .map(|x| {
            let kp = vec_mat(x, w1, None);
            (0..kp.len()).map(|k| (kp[k] + hp[k] + qp[k] + b[k]).tanh() * w.at(k, 0)).sum()
        })
        .collect();
    let a = softmax(&beta);
    let d = layer[0].len();
    let v = (0..d).map(|c| (0..layer.len()).map(|i| a[i] * layer[i][c]).sum()).collect();
    (v, a)
}

/// One GRU step with gate order reset, update, candidate.
pub fn gru_step(x: &[f64], h: &[f64], wx: &Tensor, bx: &[f64], wh: &Tensor, bh: &[f64]) -> Vec<f64> {
    let xp = vec_mat(x, wx, Some(bx));
    let hp = vec_mat(h, wh, Some(bh));
    let n = h.len();
    (0..n)
        .map(|j| {
            let r = sigmoid(xp[j] + hp[j]);
            let z = sigmoid(xp[n + j] + hp[n + j]);
            let c = (xp[2 * n + j] + r * hp[2 * n + j]).tanh();
            (1.0 - z) * c + z * h[j]
        })
        .collect()
}

use hcsa::autodiff::Tape;
use hcsa::config::HcsaConfig;
use hcsa::decoder::LayerAttention;
use hcsa::encoder::{AdditiveScorer, AttentiveSegmentation, ConvGluUnit, QuestionAwareSelfAttention};

fn bias_of(store: &ParamStore, id: hcsa::params::ParamId) -> Vec<f64> {
    store.get(id).data().to_vec()
}

fn scorer_params<'a>(store: &'a ParamStore, sc: &AdditiveScorer, bias: &'a [f64]) -> ScorerParams<'a> {
    ScorerParams {
        element: store.get(sc.element),
        context: store.get(sc.context),
        bias,
        score: store.get(sc.score),
    }
}

/// Worst absolute deviation between the tape and the scalar references for
/// one random instance of each unit: conv, segmentation, question-aware
/// self-attention, decoder layer attention.
pub fn unit_oracle_errors(seed: u64) -> [f64; 4] {
    let mut r = rng(seed);
    let d = r.gen_range(2..7);
    let a = r.gen_range(2..6);
    let dq = r.gen_range(1..4);
    let k = [1, 3, 5][r.gen_range(0..3)];
    let h = r.gen_range(1..5);
    let n = r.gen_range(1..14);
    let m = r.gen_range(1..6);
    let mut store = ParamStore::new();
    let conv = ConvGluUnit::new(&mut store, &mut r, "conv", k, d);
    let seg = AttentiveSegmentation {
        scorer: Some(AdditiveScorer::new(&mut store, &mut r, "seg", d, 2 * dq, a)),
        factor: h,
    };
    let qsa = QuestionAwareSelfAttention {
        scorer: AdditiveScorer::new(&mut store, &mut r, "qsa", d, 2 * dq, a),
        plain: false,
    };
    let cfg = HcsaConfig {
        model_dim: d,
        attn_dim: a,
        question_dim: dq,
        ..HcsaConfig::micro()
    };
    let att = LayerAttention::new(&mut store, &mut r, "att", &cfg);
    randomize(&mut store, &mut r, 1.0);

    let x = random_mat(&mut r, n, d);
    let q = random_mat(&mut r, m, 2 * dq);
    let g = random_mat(&mut r, 1, 2 * dq);
    let hid = random_mat(&mut r, 1, d);

    let mut tape = Tape::new();
    let xv = tape.constant(to_tensor(&x));
    let qv = tape.constant(to_tensor(&q));
    let gv = tape.constant(to_tensor(&g));
    let hv = tape.constant(to_tensor(&hid));

    let c = conv.forward(&mut tape, &store, xv).unwrap();
    let cb = bias_of(&store, conv.conv.bias.unwrap());
    let want_c = conv_glu(&x, store.get(conv.conv.weight), &cb, k);
    let e_conv = max_abs_diff(&to_mat(tape.value(c)), &want_c);

    let s = seg.forward(&mut tape, &store, xv, gv).unwrap();
    let sc = seg.scorer.as_ref().unwrap();
    let sb = bias_of(&store, sc.bias);
    let (want_s, want_w) = segmentation(&x, &g[0], &scorer_params(&store, sc, &sb), h);
    let flat_w: Vec<f64> = want_w.concat();
    let e_seg = max_abs_diff(&to_mat(tape.value(s.output)), &want_s)
        .max(max_abs_diff(&vec![tape.value(s.weights).data().to_vec()], &vec![flat_w]));

    let o = qsa.forward(&mut tape, &store, xv, qv).unwrap();
    let qb = bias_of(&store, qsa.scorer.bias);
    let (want_o, _, _, want_att) = question_self_attention(&x, &q, &scorer_params(&store, &qsa.scorer, &qb));
    let e_qsa = max_abs_diff(&to_mat(tape.value(o.output)), &want_o)
        .max(max_abs_diff(&to_mat(tape.value(o.attention)), &want_att));

    let prep = att.prepare(&mut tape, &store, xv).unwrap();
    let (v, beta) = att.attend(&mut tape, &store, &prep, hv, gv).unwrap();
    let ab = bias_of(&store, att.bias);
    let (want_v, want_beta) = layer_attention(
        &x,
        &hid[0],
        &g[0],
        store.get(att.element),
        store.get(att.hidden),
        store.get(att.question),
        &ab,
        store.get(att.score),
    );
    let e_att = max_abs_diff(&to_mat(tape.value(v)), &vec![want_v])
        .max(max_abs_diff(&vec![tape.value(beta).data().to_vec()], &vec![want_beta]));

    [e_conv, e_seg, e_qsa, e_att]
}

/// Sinusoidal encoding written out directly: even columns `sin`, odd `cos`,
/// frequency `10000^{-2i/d}` for column pair `i`.
pub fn position_encoding(n: usize, d: usize) -> Mat {
    (0..n)
        .map(|p| {
            (0..d)
                .map(|j| {
                    let angle = p as f64 / 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
                    if j % 2 == 0 { angle.sin() } else { angle.cos() }
                })
                .collect()
        })
        .collect()
}
