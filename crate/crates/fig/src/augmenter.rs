//! Rationale/environment partitioning of encoded node matrices.
//!
//! Node-level variant: a per-node score `m = sigmoid(MLP(H))`, then a
//! differentiable top-K. Each of the K selection rounds softmaxes the working
//! scores, takes a hard one-hot at the argmax (ties to the lowest index),
//! straight-throughs it as `hard − detach(soft) + soft`, and masks the winner
//! out by subtracting 1e6 before the next round. The K straight-through rows
//! stack into a selection matrix S so that `H_ra = S·H`; forward values of
//! `H_ra` equal hard row selection exactly, while gradients reach the scores
//! through the soft path. Scores live in [0, 1], far below the mask constant,
//! so a masked winner can never win again.
//!
//! Virtual-node variant: a learned `r × n_max` assignment table, column-masked
//! to the graph's actual size and row-softmaxed, pools the n nodes into r
//! virtual nodes; the first K virtual rows form the rationale.

use rand_chacha::ChaCha8Rng;

use crate::error::{FigError, Result};
use crate::param::{linear, Binder, Param, ParamSet};
use crate::tensor::{Tape, TensorId};

// ─── parameters ───

/// 3-layer score MLP `d → d → d → 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmenterNParams {
    pub w1: Param,
    pub b1: Param,
    pub w2: Param,
    pub b2: Param,
    pub w3: Param,
    pub b3: Param,
}

impl AugmenterNParams {
    pub fn new(d: usize, rng: &mut ChaCha8Rng) -> Self {
        AugmenterNParams {
            w1: Param::glorot(d, d, rng),
            b1: Param::zeros(&[d]),
            w2: Param::glorot(d, d, rng),
            b2: Param::zeros(&[d]),
            w3: Param::glorot(d, 1, rng),
            b3: Param::zeros(&[1]),
        }
    }

    pub fn bind(&self, b: &mut Binder) -> AugmenterNBound {
        AugmenterNBound {
            w1: b.bind(&self.w1),
            b1: b.bind(&self.b1),
            w2: b.bind(&self.w2),
            b2: b.bind(&self.b2),
            w3: b.bind(&self.w3),
            b3: b.bind(&self.b3),
        }
    }
}

impl ParamSet for AugmenterNParams {
    fn visit(&self, f: &mut dyn FnMut(String, &Param)) {
        f("augmenter.w1".into(), &self.w1);
        f("augmenter.b1".into(), &self.b1);
        f("augmenter.w2".into(), &self.w2);
        f("augmenter.b2".into(), &self.b2);
        f("augmenter.w3".into(), &self.w3);
        f("augmenter.b3".into(), &self.b3);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Param)) {
        f("augmenter.w1".into(), &mut self.w1);
        f("augmenter.b1".into(), &mut self.b1);
        f("augmenter.w2".into(), &mut self.w2);
        f("augmenter.b2".into(), &mut self.b2);
        f("augmenter.w3".into(), &mut self.w3);
        f("augmenter.b3".into(), &mut self.b3);
    }
}

pub struct AugmenterNBound {
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
    pub w3: TensorId,
    pub b3: TensorId,
}

/// Node-to-virtual-node assignment table over a capacity of `n_max` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmenterVnParams {
    pub w: Param,
    pub r: usize,
    pub n_max: usize,
}

impl AugmenterVnParams {
    pub fn new(r: usize, n_max: usize, rng: &mut ChaCha8Rng) -> Self {
        AugmenterVnParams {
            w: Param::glorot(r, n_max, rng),
            r,
            n_max,
        }
    }

    pub fn bind(&self, b: &mut Binder) -> AugmenterVnBound {
        AugmenterVnBound {
            w: b.bind(&self.w),
            r: self.r,
            n_max: self.n_max,
        }
    }
}

impl ParamSet for AugmenterVnParams {
    fn visit(&self, f: &mut dyn FnMut(String, &Param)) {
        f("augmenter.vn_w".into(), &self.w);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Param)) {
        f("augmenter.vn_w".into(), &mut self.w);
    }
}

pub struct AugmenterVnBound {
    pub w: TensorId,
    pub r: usize,
    pub n_max: usize,
}

// ─── node-level partition ───

/// Per-node rationale scores `sigmoid(MLP(H))` in `[0, 1]`, shape `[n]`.
pub fn partition_scores(tape: &mut Tape, h: TensorId, params: &AugmenterNBound) -> Result<TensorId> {
    let n = tape.shape(h)[0];
    let z1 = linear(tape, h, params.w1, params.b1)?;
    let a1 = tape.relu(z1);
    let z2 = linear(tape, a1, params.w2, params.b2)?;
    let a2 = tape.relu(z2);
    let logits = linear(tape, a2, params.w3, params.b3)?;
    let flat = tape.reshape(logits, vec![n])?;
    Ok(tape.sigmoid(flat))
}

const MASK: f64 = 1e6;

/// One selection round's discrete outcome: the argmax index and the softmax
/// values that the straight-through detached at that point.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionRound {
    pub index: usize,
    pub soft: Vec<f64>,
}

/// The K rounds of a top-K selection, recorded during a live pass.
///
/// Finite differences cannot observe the straight-through path: the forward
/// value is bit-exactly the hard selection, so perturbing the scores moves
/// nothing. The gradient the tape computes is instead the exact derivative of
/// the surrogate in which each round's hard one-hot and detached softmax are
/// constants. Replaying a trace builds that surrogate, with live softmaxes
/// and the recorded values as the constants, which makes the whole loss a
/// smooth function that a finite-difference check can probe.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SelectionTrace {
    pub rounds: Vec<SelectionRound>,
}

/// Differentiable top-K row selection.
///
/// Returns `H_ra = S·H` (K rows, rank order of descending score, ties to the
/// lowest index) and the selected indices. Forward rows equal the hard
/// selection exactly; the gradient reaches `m` through the softmax path of
/// every round.
pub fn soft_arg_top_k(tape: &mut Tape, k: usize, h: TensorId, m: TensorId) -> Result<(TensorId, Vec<usize>)> {
    let (h_ra, idx_ra, _) = soft_arg_top_k_traced(tape, k, h, m, None)?;
    Ok((h_ra, idx_ra))
}

/// [`soft_arg_top_k`] that also records its rounds, or replays a recorded
/// trace (`frozen`) to build the smooth surrogate described on
/// [`SelectionTrace`]. At the recording point the replayed forward is
/// bit-identical to the live one.
pub fn soft_arg_top_k_traced(
    tape: &mut Tape,
    k: usize,
    h: TensorId,
    m: TensorId,
    frozen: Option<&SelectionTrace>,
) -> Result<(TensorId, Vec<usize>, SelectionTrace)> {
    let n = tape.shape(m).iter().product::<usize>();
    if tape.shape(h)[0] != n {
        return Err(FigError::Shape {
            op: "soft_arg_top_k",
            detail: format!("{} scores for {} rows", n, tape.shape(h)[0]),
        });
    }
    if k < 1 || k > n {
        return Err(FigError::Argument(format!("K = {k} out of range 1..={n}")));
    }
    if let Some(trace) = frozen {
        if trace.rounds.len() != k || trace.rounds.iter().any(|r| r.index >= n || r.soft.len() != n) {
            return Err(FigError::Argument(format!(
                "selection trace does not match K = {k}, n = {n}"
            )));
        }
    }
    let mut work = tape.reshape(m, vec![1, n])?;
    let mut idx_ra = Vec::with_capacity(k);
    let mut rounds = Vec::with_capacity(k);
    let mut selection: Option<TensorId> = None;
    for round in 0..k {
        let soft = tape.softmax_rows(work)?;
        let (best, anchor) = match frozen {
            None => {
                let soft_data = tape.data(soft);
                let mut best = 0usize;
                for j in 1..n {
                    if soft_data[j] > soft_data[best] {
                        best = j;
                    }
                }
                rounds.push(SelectionRound {
                    index: best,
                    soft: soft_data.to_vec(),
                });
                (best, tape.detach(soft))
            }
            Some(trace) => {
                let rec = &trace.rounds[round];
                rounds.push(rec.clone());
                let anchor = tape.constant(rec.soft.clone(), vec![1, n])?;
                (rec.index, anchor)
            }
        };
        idx_ra.push(best);
        let mut hard = vec![0.0; n];
        hard[best] = 1.0;
        let hard_t = tape.constant(hard.clone(), vec![1, n])?;
        let diff = tape.sub(hard_t, anchor)?;
        let st = tape.add(diff, soft)?;
        selection = Some(match selection {
            None => st,
            Some(rows) => tape.concat_rows(rows, st)?,
        });
        let mask: Vec<f64> = hard.iter().map(|&x| x * MASK).collect();
        let mask_t = tape.constant(mask, vec![1, n])?;
        work = tape.sub(work, mask_t)?;
    }
    let sel = selection.expect("K >= 1 rounds ran");
    let h_ra = tape.matmul(sel, h)?;
    Ok((h_ra, idx_ra, SelectionTrace { rounds }))
}

/// Node-level rationale/environment split.
#[derive(Debug)]
pub struct Partition {
    /// Score vector values at the time of the split.
    pub m: Vec<f64>,
    /// Selected node indices, rank order.
    pub idx_ra: Vec<usize>,
    /// Complement, ascending.
    pub idx_env: Vec<usize>,
    /// `K × d`, straight-through selection of `H`.
    pub h_ra: TensorId,
    /// `(n−K) × d`, hard row gather of `H` (no straight-through).
    pub h_env: TensorId,
}

pub fn split_node_level(tape: &mut Tape, h: TensorId, m: TensorId, k: usize) -> Result<Partition> {
    let (part, _) = split_node_level_traced(tape, h, m, k, None)?;
    Ok(part)
}

/// [`split_node_level`] with the trace plumbing of [`soft_arg_top_k_traced`].
pub fn split_node_level_traced(
    tape: &mut Tape,
    h: TensorId,
    m: TensorId,
    k: usize,
    frozen: Option<&SelectionTrace>,
) -> Result<(Partition, SelectionTrace)> {
    let n = tape.shape(h)[0];
    let (h_ra, idx_ra, trace) = soft_arg_top_k_traced(tape, k, h, m, frozen)?;
    let chosen: std::collections::BTreeSet<usize> = idx_ra.iter().copied().collect();
    let idx_env: Vec<usize> = (0..n).filter(|v| !chosen.contains(v)).collect();
    let h_env = tape.gather_rows(h, &idx_env)?;
    let part = Partition {
        m: tape.data(m).to_vec(),
        idx_ra,
        idx_env,
        h_ra,
        h_env,
    };
    Ok((part, trace))
}

// ─── virtual-node partition ───

/// Pools `H` (`n × d`) into `r` virtual nodes: row-softmax of the first `n`
/// assignment columns times `H`. Columns beyond `n` are masked out of the
/// softmax entirely.
pub fn virtual_node_embed(tape: &mut Tape, h: TensorId, params: &AugmenterVnBound) -> Result<TensorId> {
    let n = tape.shape(h)[0];
    if n == 0 {
        return Err(FigError::Argument("virtual_node_embed needs at least one node".into()));
    }
    if n > params.n_max {
        return Err(FigError::Argument(format!(
            "graph has {n} nodes but the assignment table caps at {}; truncate first",
            params.n_max
        )));
    }
    let active = tape.slice_cols(params.w, 0, n)?;
    let assign = tape.softmax_rows(active)?;
    tape.matmul(assign, h)
}

/// First K virtual rows become the rationale, the rest the environment.
pub fn split_virtual(tape: &mut Tape, h_vn: TensorId, k: usize) -> Result<(TensorId, TensorId)> {
    let r = tape.shape(h_vn)[0];
    if k < 1 || k >= r {
        return Err(FigError::Argument(format!("K = {k} out of range 1..{r}")));
    }
    let h_ra = tape.slice_rows(h_vn, 0, k)?;
    let h_env = tape.slice_rows(h_vn, k, r)?;
    Ok((h_ra, h_env))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Independent oracle: stable sort descending by value, ties by lower
    /// index, take the first K.
    fn top_k_sort_oracle(m: &[f64], k: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..m.len()).collect();
        order.sort_by(|&a, &b| m[b].partial_cmp(&m[a]).unwrap().then(a.cmp(&b)));
        order.truncate(k);
        order
    }

    fn marker_h(tape: &mut Tape, n: usize, d: usize) -> TensorId {
        // row v = [v+1, (v+1)/10, ...] so any row is identifiable
        let data: Vec<f64> = (0..n)
            .flat_map(|v| (0..d).map(move |j| (v + 1) as f64 / (j + 1) as f64))
            .collect();
        tape.constant(data, vec![n, d]).unwrap()
    }

    #[test]
    fn zero_parameter_scores_are_all_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = AugmenterNParams::new(4, &mut rng);
        params.visit_mut(&mut |_, p| p.data.iter_mut().for_each(|v| *v = 0.0));
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape);
        let bound = params.bind(&mut binder);
        let h = marker_h(&mut tape, 5, 4);
        let m = partition_scores(&mut tape, h, &bound).unwrap();
        assert_eq!(tape.data(m), &[0.5; 5], "sigmoid(0) everywhere");
    }

    #[test]
    fn identical_rows_get_identical_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = AugmenterNParams::new(3, &mut rng);
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape);
        let bound = params.bind(&mut binder);
        let row = [0.4, -0.2, 0.9];
        let h = tape.constant(row.repeat(4), vec![4, 3]).unwrap();
        let m = partition_scores(&mut tape, h, &bound).unwrap();
        let vals = tape.data(m);
        assert!(vals.iter().all(|&v| v.to_bits() == vals[0].to_bits()));
        assert!(vals.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn top_k_selects_highest_then_next() {
        let mut tape = Tape::new();
        let h = marker_h(&mut tape, 3, 2);
        let m = tape.leaf(vec![0.9, 0.1, 0.5], vec![3]).unwrap();
        let (h_ra, idx) = soft_arg_top_k(&mut tape, 2, h, m).unwrap();
        assert_eq!(idx, vec![0, 2]);
        let expect = [tape.data(h)[0..2].to_vec(), tape.data(h)[4..6].to_vec()].concat();
        assert_eq!(tape.data(h_ra), expect.as_slice(), "rows 0 and 2 of H, exactly");
    }

    #[test]
    fn top_k_tie_goes_to_lowest_index() {
        let mut tape = Tape::new();
        let h = marker_h(&mut tape, 2, 2);
        let m = tape.leaf(vec![0.5, 0.5], vec![2]).unwrap();
        let (_, idx) = soft_arg_top_k(&mut tape, 1, h, m).unwrap();
        assert_eq!(idx, vec![0]);
    }

    #[test]
    fn top_k_with_k_equal_n_reorders_by_descending_score() {
        let mut tape = Tape::new();
        let h = marker_h(&mut tape, 4, 3);
        let m = tape.leaf(vec![0.2, 0.8, 0.5, 0.9], vec![4]).unwrap();
        let (h_ra, idx) = soft_arg_top_k(&mut tape, 4, h, m).unwrap();
        assert_eq!(idx, vec![3, 1, 2, 0]);
        let src = tape.data(h).to_vec();
        let expect: Vec<f64> = idx.iter().flat_map(|&v| src[v * 3..(v + 1) * 3].to_vec()).collect();
        assert_eq!(tape.data(h_ra), expect.as_slice());
    }

    #[test]
    fn top_k_out_of_range_k_errors() {
        let mut tape = Tape::new();
        let h = marker_h(&mut tape, 3, 2);
        let m = tape.leaf(vec![0.1, 0.2, 0.3], vec![3]).unwrap();
        assert!(soft_arg_top_k(&mut tape, 0, h, m).is_err());
        assert!(soft_arg_top_k(&mut tape, 4, h, m).is_err());
    }

    #[test]
    fn top_k_forward_equals_sort_oracle_including_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for trial in 0..1000 {
            let n = rng.gen_range(1..12);
            let k = rng.gen_range(1..=n);
            let mut m_vals: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            // constructed ties on a third of the trials
            if trial % 3 == 0 && n >= 2 {
                let a = rng.gen_range(0..n);
                let b = rng.gen_range(0..n);
                m_vals[a] = m_vals[b];
            }
            let d = rng.gen_range(1..4);
            let mut tape = Tape::new();
            let h_data: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let h = tape.constant(h_data.clone(), vec![n, d]).unwrap();
            let m = tape.leaf(m_vals.clone(), vec![n]).unwrap();
            let (h_ra, idx) = soft_arg_top_k(&mut tape, k, h, m).unwrap();
            let expect_idx = top_k_sort_oracle(&m_vals, k);
            assert_eq!(idx, expect_idx, "trial {trial}: m={m_vals:?} k={k}");
            let expect_rows: Vec<f64> = expect_idx
                .iter()
                .flat_map(|&v| h_data[v * d..(v + 1) * d].to_vec())
                .collect();
            assert_eq!(tape.data(h_ra), expect_rows.as_slice(), "trial {trial}: forward must be exact");
        }
    }

    #[test]
    fn top_k_gradient_reaches_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut nonzero = 0;
        let trials = 100;
        for _ in 0..trials {
            let n = rng.gen_range(2..10);
            let k = rng.gen_range(1..n);
            let mut tape = Tape::new();
            let h_data: Vec<f64> = (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let h = tape.constant(h_data, vec![n, 3]).unwrap();
            let m = tape.leaf((0..n).map(|_| rng.gen_range(0.0..1.0)).collect(), vec![n]).unwrap();
            let (h_ra, _) = soft_arg_top_k(&mut tape, k, h, m).unwrap();
            let sq = tape.mul(h_ra, h_ra).unwrap();
            let loss = tape.sum_all(sq).unwrap();
            tape.backward(loss).unwrap();
            if tape.grad(m).unwrap().iter().any(|&g| g != 0.0) {
                nonzero += 1;
            }
        }
        assert!(
            nonzero >= trials * 99 / 100,
            "gradient reached m on only {nonzero}/{trials} generic instances"
        );
    }

    #[test]
    fn split_partitions_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for trial in 0..1000 {
            let n = rng.gen_range(2..10);
            let k = rng.gen_range(1..n);
            let mut tape = Tape::new();
            let h = marker_h(&mut tape, n, 2);
            let m = tape.leaf((0..n).map(|_| rng.gen_range(0.0..1.0)).collect(), vec![n]).unwrap();
            let part = split_node_level(&mut tape, h, m, k).unwrap();
            let mut all: Vec<usize> = part.idx_ra.iter().chain(&part.idx_env).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..n).collect::<Vec<_>>(), "trial {trial}: indices partition 0..n");
            assert!(part.idx_env.windows(2).all(|w| w[0] < w[1]), "environment ascending");
            // environment rows are hard gathers of H
            let src = tape.data(h).to_vec();
            let env_expect: Vec<f64> = part.idx_env.iter().flat_map(|&v| src[v * 2..(v + 1) * 2].to_vec()).collect();
            assert_eq!(tape.data(part.h_env), env_expect.as_slice());
            assert_eq!(tape.shape(part.h_ra), &[k, 2]);
            assert_eq!(tape.shape(part.h_env), &[n - k, 2]);
        }
    }

    #[test]
    fn virtual_embed_with_zero_table_is_column_mean() {
        let mut tape = Tape::new();
        let h = tape
            .constant(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![3, 2])
            .unwrap();
        let w = tape.leaf(vec![0.0; 4 * 8], vec![4, 8]).unwrap();
        let bound = AugmenterVnBound { w, r: 4, n_max: 8 };
        let h_vn = virtual_node_embed(&mut tape, h, &bound).unwrap();
        assert_eq!(tape.shape(h_vn), &[4, 2]);
        for row in 0..4 {
            let got = &tape.data(h_vn)[row * 2..(row + 1) * 2];
            assert!(
                (got[0] - 3.0).abs() < 1e-12 && (got[1] - 4.0).abs() < 1e-12,
                "uniform assignment averages columns, got {got:?}"
            );
        }
    }

    #[test]
    fn virtual_embed_single_node_repeats_that_node() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut tape = Tape::new();
        let h = tape.constant(vec![0.7, -0.3], vec![1, 2]).unwrap();
        let params = AugmenterVnParams::new(3, 10, &mut rng);
        let mut binder = Binder::new(&mut tape);
        let bound = params.bind(&mut binder);
        let h_vn = virtual_node_embed(&mut tape, h, &bound).unwrap();
        for row in 0..3 {
            assert_eq!(
                &tape.data(h_vn)[row * 2..(row + 1) * 2],
                &[0.7, -0.3],
                "softmax over one column is 1, so every virtual node is the node"
            );
        }
    }

    #[test]
    fn virtual_rows_stay_in_the_convex_hull_of_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for _ in 0..500 {
            let n = rng.gen_range(1..9);
            let r = rng.gen_range(2..6);
            let d = rng.gen_range(1..4);
            let mut tape = Tape::new();
            let h_data: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let h = tape.constant(h_data.clone(), vec![n, d]).unwrap();
            let w_data: Vec<f64> = (0..r * 12).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let w = tape.leaf(w_data, vec![r, 12]).unwrap();
            let bound = AugmenterVnBound { w, r, n_max: 12 };
            let h_vn = virtual_node_embed(&mut tape, h, &bound).unwrap();
            for j in 0..d {
                let col: Vec<f64> = (0..n).map(|v| h_data[v * d + j]).collect();
                let (lo, hi) = col.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                    (lo.min(v), hi.max(v))
                });
                for row in 0..r {
                    let v = tape.data(h_vn)[row * d + j];
                    assert!(
                        v >= lo - 1e-9 && v <= hi + 1e-9,
                        "pooled value {v} outside [{lo}, {hi}]"
                    );
                }
            }
        }
    }

    #[test]
    fn oversized_graph_is_rejected_by_virtual_embed() {
        let mut tape = Tape::new();
        let h = tape.constant(vec![0.0; 12], vec![6, 2]).unwrap();
        let w = tape.leaf(vec![0.0; 8], vec![2, 4]).unwrap();
        let bound = AugmenterVnBound { w, r: 2, n_max: 4 };
        let err = virtual_node_embed(&mut tape, h, &bound).unwrap_err().to_string();
        assert!(err.contains("truncate"), "got: {err}");
    }

    #[test]
    fn split_virtual_shapes_and_round_trip() {
        let mut tape = Tape::new();
        let h_vn = tape
            .constant((0..8 * 3).map(|i| i as f64).collect(), vec![8, 3])
            .unwrap();
        let (ra, env) = split_virtual(&mut tape, h_vn, 6).unwrap();
        assert_eq!(tape.shape(ra), &[6, 3]);
        assert_eq!(tape.shape(env), &[2, 3]);
        let glued = tape.concat_rows(ra, env).unwrap();
        assert_eq!(tape.data(glued), tape.data(h_vn), "split then concat recovers H_VN");
        assert!(split_virtual(&mut tape, h_vn, 0).is_err());
        assert!(split_virtual(&mut tape, h_vn, 8).is_err());
    }

    #[test]
    fn frozen_replay_is_bit_identical_to_the_live_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        for _ in 0..50 {
            let n = rng.gen_range(2..9);
            let k = rng.gen_range(1..=n);
            let m_vals: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let h_data: Vec<f64> = (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();

            let mut live = Tape::new();
            let h = live.constant(h_data.clone(), vec![n, 3]).unwrap();
            let m = live.leaf(m_vals.clone(), vec![n]).unwrap();
            let (h_ra, idx, trace) = soft_arg_top_k_traced(&mut live, k, h, m, None).unwrap();
            let live_bits: Vec<u64> = live.data(h_ra).iter().map(|v| v.to_bits()).collect();

            let mut replay = Tape::new();
            let h2 = replay.constant(h_data.clone(), vec![n, 3]).unwrap();
            let m2 = replay.leaf(m_vals.clone(), vec![n]).unwrap();
            let (h_ra2, idx2, _) = soft_arg_top_k_traced(&mut replay, k, h2, m2, Some(&trace)).unwrap();
            let replay_bits: Vec<u64> = replay.data(h_ra2).iter().map(|v| v.to_bits()).collect();
            assert_eq!(idx, idx2);
            assert_eq!(live_bits, replay_bits);
        }
    }

    #[test]
    fn score_and_selection_gradients_match_finite_differences_under_frozen_replay() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let params = AugmenterNParams::new(3, &mut rng);
        let h_data: Vec<f64> = (0..5 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();

        // The hard selection makes the live forward piecewise constant in the
        // scores, so record a trace once and check the surrogate it defines.
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape);
        let bound = params.bind(&mut binder);
        let h = tape.constant(h_data.clone(), vec![5, 3]).unwrap();
        let m = partition_scores(&mut tape, h, &bound).unwrap();
        let (_, _, trace) = soft_arg_top_k_traced(&mut tape, 3, h, m, None).unwrap();

        let p2 = params.clone();
        let h2 = h_data.clone();
        let err = crate::tensor::grad_check(
            move |tape, flat| {
                let mut binder = Binder::from_flat(tape, flat)?;
                let bound = p2.bind(&mut binder);
                let h = binder.tape.constant(h2.clone(), vec![5, 3])?;
                let m = partition_scores(binder.tape, h, &bound)?;
                let (h_ra, _, _) = soft_arg_top_k_traced(binder.tape, 3, h, m, Some(&trace))?;
                let sq = binder.tape.mul(h_ra, h_ra)?;
                binder.tape.sum_all(sq)
            },
            &params.flat_data(),
            &[params.param_count()],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "augmenter gradient rel err {err}");
    }
}
