//! The adversary: a single-head Transformer block over the concatenated
//! rationale/environment rows.
//!
//! Attention is `P = rowsoftmax(QKᵀ/√d)` with a residual (`PV + b_o + input`),
//! followed by a 3-layer FFN with its own residual. The attention matrix P is
//! the object of interest: its off-block mass is what the cut regularizer
//! meters and what the trainer's ascent step tries to grow. Query, key, and
//! value projections share the embedding width, and the parameter count is
//! exactly 6(d² + d) with layer normalization off: query bias, value bias,
//! and an output bias fill the attention half's three bias slots. The key
//! projection is deliberately bias-free: a key bias shifts every logit of an
//! attention row by the same amount, softmax cancels the shift exactly, and
//! the resulting forever-zero gradient would poison finite-difference
//! verification of the full loss.
//!
//! Layer normalization (applied at the entry of each sublayer) is available
//! but off by default; small-scale training is stable without it.

use rand_chacha::ChaCha8Rng;

use crate::error::{FigError, Result};
use crate::objective::{cut_regularizer, indicator_vector};
use crate::param::{linear, Binder, Param, ParamSet};
use crate::tensor::{Tape, TensorId};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Gain/bias pairs for the two normalization sites (attention entry, FFN
/// entry).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorms {
    pub g1: Param,
    pub c1: Param,
    pub g2: Param,
    pub c2: Param,
}

impl LayerNorms {
    fn new(d: usize) -> Self {
        LayerNorms {
            g1: Param::ones(&[d]),
            c1: Param::zeros(&[d]),
            g2: Param::ones(&[d]),
            c2: Param::zeros(&[d]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntervenerParams {
    pub w_q: Param,
    pub b_q: Param,
    pub w_k: Param,
    pub w_v: Param,
    pub b_v: Param,
    pub b_o: Param,
    pub f_w1: Param,
    pub f_b1: Param,
    pub f_w2: Param,
    pub f_b2: Param,
    pub f_w3: Param,
    pub f_b3: Param,
    pub ln: Option<LayerNorms>,
}

impl IntervenerParams {
    pub fn new(d: usize, layer_norm: bool, rng: &mut ChaCha8Rng) -> Self {
        IntervenerParams {
            w_q: Param::glorot(d, d, rng),
            b_q: Param::zeros(&[d]),
            w_k: Param::glorot(d, d, rng),
            w_v: Param::glorot(d, d, rng),
            b_v: Param::zeros(&[d]),
            b_o: Param::zeros(&[d]),
            f_w1: Param::glorot(d, d, rng),
            f_b1: Param::zeros(&[d]),
            f_w2: Param::glorot(d, d, rng),
            f_b2: Param::zeros(&[d]),
            f_w3: Param::glorot(d, d, rng),
            f_b3: Param::zeros(&[d]),
            ln: layer_norm.then(|| LayerNorms::new(d)),
        }
    }

    pub fn d(&self) -> usize {
        self.w_q.shape[0]
    }

    pub fn bind(&self, b: &mut Binder) -> IntervenerBound {
        IntervenerBound {
            w_q: b.bind(&self.w_q),
            b_q: b.bind(&self.b_q),
            w_k: b.bind(&self.w_k),
            w_v: b.bind(&self.w_v),
            b_v: b.bind(&self.b_v),
            b_o: b.bind(&self.b_o),
            f_w1: b.bind(&self.f_w1),
            f_b1: b.bind(&self.f_b1),
            f_w2: b.bind(&self.f_w2),
            f_b2: b.bind(&self.f_b2),
            f_w3: b.bind(&self.f_w3),
            f_b3: b.bind(&self.f_b3),
            ln: self.ln.as_ref().map(|ln| LayerNormsBound {
                g1: b.bind(&ln.g1),
                c1: b.bind(&ln.c1),
                g2: b.bind(&ln.g2),
                c2: b.bind(&ln.c2),
            }),
        }
    }
}

impl ParamSet for IntervenerParams {
    fn visit(&self, f: &mut dyn FnMut(String, &Param)) {
        f("intervener.w_q".into(), &self.w_q);
        f("intervener.b_q".into(), &self.b_q);
        f("intervener.w_k".into(), &self.w_k);
        f("intervener.w_v".into(), &self.w_v);
        f("intervener.b_v".into(), &self.b_v);
        f("intervener.b_o".into(), &self.b_o);
        f("intervener.ffn.w1".into(), &self.f_w1);
        f("intervener.ffn.b1".into(), &self.f_b1);
        f("intervener.ffn.w2".into(), &self.f_w2);
        f("intervener.ffn.b2".into(), &self.f_b2);
        f("intervener.ffn.w3".into(), &self.f_w3);
        f("intervener.ffn.b3".into(), &self.f_b3);
        if let Some(ln) = &self.ln {
            f("intervener.ln.g1".into(), &ln.g1);
            f("intervener.ln.c1".into(), &ln.c1);
            f("intervener.ln.g2".into(), &ln.g2);
            f("intervener.ln.c2".into(), &ln.c2);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Param)) {
        f("intervener.w_q".into(), &mut self.w_q);
        f("intervener.b_q".into(), &mut self.b_q);
        f("intervener.w_k".into(), &mut self.w_k);
        f("intervener.w_v".into(), &mut self.w_v);
        f("intervener.b_v".into(), &mut self.b_v);
        f("intervener.b_o".into(), &mut self.b_o);
        f("intervener.ffn.w1".into(), &mut self.f_w1);
        f("intervener.ffn.b1".into(), &mut self.f_b1);
        f("intervener.ffn.w2".into(), &mut self.f_w2);
        f("intervener.ffn.b2".into(), &mut self.f_b2);
        f("intervener.ffn.w3".into(), &mut self.f_w3);
        f("intervener.ffn.b3".into(), &mut self.f_b3);
        if let Some(ln) = &mut self.ln {
            f("intervener.ln.g1".into(), &mut ln.g1);
            f("intervener.ln.c1".into(), &mut ln.c1);
            f("intervener.ln.g2".into(), &mut ln.g2);
            f("intervener.ln.c2".into(), &mut ln.c2);
        }
    }
}

pub struct LayerNormsBound {
    pub g1: TensorId,
    pub c1: TensorId,
    pub g2: TensorId,
    pub c2: TensorId,
}

pub struct IntervenerBound {
    pub w_q: TensorId,
    pub b_q: TensorId,
    pub w_k: TensorId,
    pub w_v: TensorId,
    pub b_v: TensorId,
    pub b_o: TensorId,
    pub f_w1: TensorId,
    pub f_b1: TensorId,
    pub f_w2: TensorId,
    pub f_b2: TensorId,
    pub f_w3: TensorId,
    pub f_b3: TensorId,
    pub ln: Option<LayerNormsBound>,
}

/// The attention matrix and cut value of one intervention, alongside the live
/// tensors so the loss can keep differentiating through them.
#[derive(Debug)]
pub struct AttentionRecord {
    /// `t × t` attention matrix, on tape.
    pub p: TensorId,
    /// Snapshot of P's values at intervention time.
    pub p_values: Vec<f64>,
    pub t: usize,
    pub k: usize,
    /// 0/1 indicator: exactly `k` leading ones.
    pub s: Vec<f64>,
    /// Cut regularizer `sᵀP(1−s) + (1−s)ᵀPs`, on tape.
    pub cut: TensorId,
    pub cut_value: f64,
}

/// Per-row normalization: `(x − mean)/sqrt(var + ε) · gain + bias`. Row
/// statistics come from the transposed view, where the per-row reduction is a
/// column reduction the tape already has.
fn layer_norm(tape: &mut Tape, x: TensorId, gain: TensorId, bias: TensorId) -> Result<TensorId> {
    let t = tape.shape(x)[0];
    let d = tape.shape(x)[1];
    let xt = tape.transpose(x)?;
    let mu = tape.mean_rows(xt)?;
    let mu_row = tape.reshape(mu, vec![1, t])?;
    let cent = tape.sub(xt, mu_row)?;
    let sq = tape.mul(cent, cent)?;
    let var = tape.mean_rows(sq)?;
    let var_row = tape.reshape(var, vec![1, t])?;
    let shifted = tape.add_const(var_row, LAYER_NORM_EPS);
    let std = tape.sqrt(shifted);
    let normed_t = tape.div(cent, std)?;
    let normed = tape.transpose(normed_t)?;
    let gain_row = tape.reshape(gain, vec![1, d])?;
    let bias_row = tape.reshape(bias, vec![1, d])?;
    let scaled = tape.mul(normed, gain_row)?;
    tape.add(scaled, bias_row)
}

/// Single-head self-attention with residual: `P = rowsoftmax(QKᵀ/√d)`,
/// output `PV + b_o + Hcat`. Returns the output and P. The keys carry no
/// bias (see the module notes).
pub fn attention(tape: &mut Tape, hcat: TensorId, params: &IntervenerBound) -> Result<(TensorId, TensorId)> {
    let d = tape.shape(hcat)[1];
    if tape.shape(params.w_q)[0] != d {
        return Err(FigError::Shape {
            op: "attention",
            detail: format!("input width {d} vs projection width {}", tape.shape(params.w_q)[0]),
        });
    }
    let src = match &params.ln {
        Some(ln) => layer_norm(tape, hcat, ln.g1, ln.c1)?,
        None => hcat,
    };
    let q = linear(tape, src, params.w_q, params.b_q)?;
    let k = tape.matmul(src, params.w_k)?;
    let v = linear(tape, src, params.w_v, params.b_v)?;
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let scaled = tape.scale(logits, 1.0 / (d as f64).sqrt());
    let p = tape.softmax_rows(scaled)?;
    let pv = tape.matmul(p, v)?;
    let b_o_row = tape.reshape(params.b_o, vec![1, d])?;
    let shifted = tape.add(pv, b_o_row)?;
    let hout = tape.add(shifted, hcat)?;
    Ok((hout, p))
}

/// 3-layer FFN with residual: `relu∘linear` twice, a final linear, plus the
/// input.
pub fn ffn_block(tape: &mut Tape, h: TensorId, params: &IntervenerBound) -> Result<TensorId> {
    let src = match &params.ln {
        Some(ln) => layer_norm(tape, h, ln.g2, ln.c2)?,
        None => h,
    };
    let z1 = linear(tape, src, params.f_w1, params.f_b1)?;
    let a1 = tape.relu(z1);
    let z2 = linear(tape, a1, params.f_w2, params.f_b2)?;
    let a2 = tape.relu(z2);
    let z3 = linear(tape, a2, params.f_w3, params.f_b3)?;
    tape.add(z3, h)
}

/// Runs the block on `H_ra ‖ H_env` and reports the attention interaction.
///
/// `h_env` may have zero rows (the rationale is the whole graph); the cut is
/// then zero by construction.
pub fn intervene(
    tape: &mut Tape,
    h_ra: TensorId,
    h_env: TensorId,
    params: &IntervenerBound,
) -> Result<(TensorId, AttentionRecord)> {
    let k = tape.shape(h_ra)[0];
    if k < 1 {
        return Err(FigError::Argument("intervene needs at least one rationale row".into()));
    }
    let env_rows = tape.shape(h_env)[0];
    if tape.shape(h_ra)[1] != tape.shape(h_env)[1] {
        return Err(FigError::Shape {
            op: "intervene",
            detail: format!(
                "rationale width {} vs environment width {}",
                tape.shape(h_ra)[1],
                tape.shape(h_env)[1]
            ),
        });
    }
    let t = k + env_rows;
    let hcat = if env_rows == 0 {
        h_ra
    } else {
        tape.concat_rows(h_ra, h_env)?
    };
    let (h1, p) = attention(tape, hcat, params)?;
    let h_inter = ffn_block(tape, h1, params)?;
    let s = indicator_vector(k, t);
    let cut = cut_regularizer(tape, p, &s)?;
    let record = AttentionRecord {
        p,
        p_values: tape.data(p).to_vec(),
        t,
        k,
        s,
        cut,
        cut_value: tape.data(cut)[0],
    };
    Ok((h_inter, record))
}

/// Additive intervention baseline: the coarsest interaction model, one vector
/// sum.
pub fn intervene_graph_add(tape: &mut Tape, h_ra: TensorId, h_env: TensorId) -> Result<TensorId> {
    if tape.shape(h_ra) != tape.shape(h_env) {
        return Err(FigError::Shape {
            op: "intervene_graph_add",
            detail: format!("{:?} vs {:?}", tape.shape(h_ra), tape.shape(h_env)),
        });
    }
    tape.add(h_ra, h_env)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn zeroed(d: usize, layer_norm: bool) -> IntervenerParams {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = IntervenerParams::new(d, layer_norm, &mut rng);
        p.visit_mut(&mut |name, param| {
            if !name.contains("ln.g") {
                param.data.iter_mut().for_each(|v| *v = 0.0);
            }
        });
        p
    }

    /// Plain-loop recomputation of attention, sharing no code with the tape.
    fn attention_oracle(h: &[f64], t: usize, d: usize, params: &IntervenerParams) -> (Vec<f64>, Vec<f64>) {
        let proj = |w: &Param, b: Option<&Param>| -> Vec<f64> {
            let mut out = vec![0.0; t * d];
            for i in 0..t {
                for j in 0..d {
                    let mut acc = b.map_or(0.0, |b| b.data[j]);
                    for l in 0..d {
                        acc += h[i * d + l] * w.data[l * d + j];
                    }
                    out[i * d + j] = acc;
                }
            }
            out
        };
        let q = proj(&params.w_q, Some(&params.b_q));
        let k = proj(&params.w_k, None);
        let v = proj(&params.w_v, Some(&params.b_v));
        let mut p = vec![0.0; t * t];
        for i in 0..t {
            let mut row = vec![0.0; t];
            for j in 0..t {
                let mut acc = 0.0;
                for l in 0..d {
                    acc += q[i * d + l] * k[j * d + l];
                }
                row[j] = acc / (d as f64).sqrt();
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for j in 0..t {
                p[i * t + j] = exps[j] / sum;
            }
        }
        let mut hout = vec![0.0; t * d];
        for i in 0..t {
            for j in 0..d {
                let mut acc = 0.0;
                for l in 0..t {
                    acc += p[i * t + l] * v[l * d + j];
                }
                hout[i * d + j] = acc + params.b_o.data[j] + h[i * d + j];
            }
        }
        (hout, p)
    }

    #[test]
    fn parameter_count_is_six_d_squared_plus_d() {
        for d in [1usize, 2, 5, 8, 64] {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let p = IntervenerParams::new(d, false, &mut rng);
            assert_eq!(p.param_count(), 6 * (d * d + d));
            let with_ln = IntervenerParams::new(d, true, &mut rng);
            assert_eq!(with_ln.param_count(), 6 * (d * d + d) + 4 * d);
        }
    }

    #[test]
    fn single_token_attention_is_all_mass_on_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = IntervenerParams::new(3, false, &mut rng);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape);
        let bound = params.bind(&mut binder);
        let h = tape.constant(vec![0.3, -0.8, 1.2], vec![1, 3]).unwrap();
        let (hout, p) = attention(&mut tape, h, &bound).unwrap();
        assert_eq!(tape.data(p), &[1.0]);
        let (oracle_out, _) = attention_oracle(&[0.3, -0.8, 1.2], 1, 3, &params);
        for (a, b) in tape.data(hout).iter().zip(&oracle_out) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_query_key_weights_give_uniform_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = IntervenerParams::new(4, false, &mut rng);
        params.w_q.data.iter_mut().for_each(|v| *v = 0.0);
        params.w_k.data.iter_mut().for_each(|v| *v = 0.0);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape);
        let bound = params.bind(&mut binder);
        let h_data: Vec<f64> = (0..5 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h = tape.constant(h_data, vec![5, 4]).unwrap();
        let (_, p) = attention(&mut tape, h, &bound).unwrap();
        assert!(tape.data(p).iter().all(|&x| x == 1.0 / 5.0), "zero logits, uniform rows");
    }

    #[test]
    fn attention_matches_dense_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let d = rng.gen_range(1..6);
            let t = rng.gen_range(1..7);
            let params = IntervenerParams::new(d, false, &mut rng);
            let h_data: Vec<f64> = (0..t * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mut tape = Tape::new();
            let mut binder = Binder::new(&mut tape);
            let bound = params.bind(&mut binder);
            let h = tape.constant(h_data.clone(), vec![t, d]).unwrap();
            let (hout, p) = attention(&mut tape, h, &bound).unwrap();
            let (oracle_out, oracle_p) = attention_oracle(&h_data, t, d, &params);
            for (a, b) in tape.data(p).iter().zip(&oracle_p) {
                assert!((a - b).abs() < 1e-12, "P entry {a} vs oracle {b}");
            }
            for (a, b) in tape.data(hout).iter().zip(&oracle_out) {
                assert!((a - b).abs() < 1e-12, "output entry {a} vs oracle {b}");
            }
            for i in 0..t {
                let row_sum: f64 = tape.data(p)[i * t..(i + 1) * t].iter().sum();
                assert!((row_sum - 1.0).abs() < 1e-9, "row {i} sums to {row_sum}");
            }
        }
    }

    #[test]
    fn zero_ffn_is_the_identity() {
        let params = zeroed(3, false);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape);
        let bound = params.bind(&mut binder);
        for t in [1usize, 2, 7] {
            let h_data: Vec<f64> = (0..t * 3).map(|i| i as f64 * 0.37 - 1.0).collect();
            let h = tape.constant(h_data.clone(), vec![t, 3]).unwrap();
            let out = ffn_block(&mut tape, h, &bound).unwrap();
            assert_eq!(tape.data(out), h_data.as_slice());
            assert_eq!(tape.shape(out), &[t, 3]);
        }
    }

    #[test]
    fn ffn_gradients_match_finite_differences() {
        for layer_norm in [false, true] {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let params = IntervenerParams::new(3, layer_norm, &mut rng);
            let h_data: Vec<f64> = (0..4 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let p2 = params.clone();
            let h2 = h_data.clone();
            let err = crate::tensor::grad_check(
                move |tape, flat| {
                    let mut binder = Binder::from_flat(tape, flat)?;
                    let bound = p2.bind(&mut binder);
                    let h = binder.tape.constant(h2.clone(), vec![4, 3])?;
                    let out = ffn_block(binder.tape, h, &bound)?;
                    binder.tape.sum_all(out)
                },
                &params.flat_data(),
                &[params.param_count()],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "ffn rel err {err} (layer_norm = {layer_norm})");
        }
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        for layer_norm in [false, true] {
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let params = IntervenerParams::new(3, layer_norm, &mut rng);
            let h_data: Vec<f64> = (0..4 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let p2 = params.clone();
            let h2 = h_data.clone();
            let err = crate::tensor::grad_check(
                move |tape, flat| {
                    let mut binder = Binder::from_flat(tape, flat)?;
                    let bound = p2.bind(&mut binder);
                    let h = binder.tape.constant(h2.clone(), vec![4, 3])?;
                    let (out, _) = attention(binder.tape, h, &bound)?;
                    let sq = binder.tape.mul(out, out)?;
                    binder.tape.sum_all(sq)
                },
                &params.flat_data(),
                &[params.param_count()],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "attention rel err {err} (layer_norm = {layer_norm})");
        }
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut tape = Tape::new();
        let h_data: Vec<f64> = (0..6 * 5).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let h = tape.constant(h_data, vec![6, 5]).unwrap();
        let gain = tape.constant(vec![1.0; 5], vec![5]).unwrap();
        let bias = tape.constant(vec![0.0; 5], vec![5]).unwrap();
        let out = layer_norm(&mut tape, h, gain, bias).unwrap();
        for i in 0..6 {
            let row = &tape.data(out)[i * 5..(i + 1) * 5];
            let mean: f64 = row.iter().sum::<f64>() / 5.0;
            let var: f64 = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / 5.0;
            assert!(mean.abs() < 1e-12, "row {i} mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "row {i} variance {var}");
        }
    }

    #[test]
    fn empty_environment_gives_zero_cut() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = IntervenerParams::new(3, false, &mut rng);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape);
        let bound = params.bind(&mut binder);
        let h_ra = tape
            .constant((0..3 * 3).map(|i| i as f64 * 0.1).collect(), vec![3, 3])
            .unwrap();
        let h_env = tape.constant(vec![], vec![0, 3]).unwrap();
        let (h_inter, record) = intervene(&mut tape, h_ra, h_env, &bound).unwrap();
        assert_eq!(record.t, 3);
        assert_eq!(record.k, 3);
        assert_eq!(record.s, vec![1.0, 1.0, 1.0]);
        assert_eq!(record.cut_value, 0.0, "no cross pairs");
        assert_eq!(tape.shape(h_inter), &[3, 3]);
        assert_eq!(tape.shape(record.p), &[3, 3]);
    }

    #[test]
    fn swapping_environment_rows_permutes_attention_consistently() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = IntervenerParams::new(4, false, &mut rng);
        let k = 2usize;
        let ra: Vec<f64> = (0..k * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let env: Vec<f64> = (0..3 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut swapped = env.clone();
        swapped[0..4].copy_from_slice(&env[4..8]);
        swapped[4..8].copy_from_slice(&env[0..4]);

        let run = |env_data: &[f64]| -> (Vec<f64>, Vec<f64>) {
            let mut tape = Tape::new();
            let mut binder = Binder::new(&mut tape);
            let bound = params.bind(&mut binder);
            let h_ra = tape.constant(ra.clone(), vec![k, 4]).unwrap();
            let h_env = tape.constant(env_data.to_vec(), vec![3, 4]).unwrap();
            let (h_inter, record) = intervene(&mut tape, h_ra, h_env, &bound).unwrap();
            (record.p_values.clone(), tape.data(h_inter).to_vec())
        };
        let (p_base, out_base) = run(&env);
        let (p_swap, out_swap) = run(&swapped);

        // env rows 0 and 1 are concatenated rows 2 and 3
        let perm = [0usize, 1, 3, 2, 4];
        let t = 5;
        for i in 0..t {
            for j in 0..t {
                let a = p_swap[i * t + j];
                let b = p_base[perm[i] * t + perm[j]];
                assert!((a - b).abs() < 1e-12, "P[{i},{j}] {a} vs permuted {b}");
            }
            for c in 0..4 {
                let a = out_swap[i * 4 + c];
                let b = out_base[perm[i] * 4 + c];
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn virtual_node_sized_input_keeps_its_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let params = IntervenerParams::new(4, false, &mut rng);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape);
        let bound = params.bind(&mut binder);
        let h_ra = tape.constant(vec![0.1; 6 * 4], vec![6, 4]).unwrap();
        let h_env = tape.constant(vec![0.2; 2 * 4], vec![2, 4]).unwrap();
        let (_, record) = intervene(&mut tape, h_ra, h_env, &bound).unwrap();
        assert_eq!(record.t, 8);
        assert_eq!(tape.shape(record.p), &[8, 8]);
        assert_eq!(record.s.iter().filter(|&&x| x == 1.0).count(), 6);
        assert!(record.s[..6].iter().all(|&x| x == 1.0), "ones lead");
    }

    #[test]
    fn graph_add_is_elementwise_and_commutative() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![1.0, 2.0], vec![2]).unwrap();
        let b = tape.constant(vec![3.0, 4.0], vec![2]).unwrap();
        let ab = intervene_graph_add(&mut tape, a, b).unwrap();
        let ba = intervene_graph_add(&mut tape, b, a).unwrap();
        assert_eq!(tape.data(ab), &[4.0, 6.0]);
        assert_eq!(tape.data(ab), tape.data(ba));
        let zero = tape.constant(vec![0.0, 0.0], vec![2]).unwrap();
        let same = intervene_graph_add(&mut tape, a, zero).unwrap();
        assert_eq!(tape.data(same), &[1.0, 2.0]);
        let short = tape.constant(vec![1.0], vec![1]).unwrap();
        assert!(intervene_graph_add(&mut tape, a, short).is_err());
    }
}
