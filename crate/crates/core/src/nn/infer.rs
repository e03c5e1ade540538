//! Direct f32 inference: CNN forward, incrementally cached decoder steps and
//! the constraint-masked greedy decode loop. The batched tape forward in
//! `model` is the independent second route the tests compare against.

use super::graph::Graph;
use super::model;
use super::ops;
use super::tensor::TensorF32;
use super::{DecoderMemory, ModelWeights, NnError, BOS_TOKEN, TOKEN_VOCAB_OUT};
use crate::codec::{modes_to_tree, EdgeVector, ModeSequence, EDGE_COUNT, MEM_COLS, MEM_ROWS};
use crate::constraints::{allowed_modes, masked_argmax, ConstraintRules};
use crate::frame::LcuInput;
use crate::partition::{child_rects, CuRect, PartitionTree, SplitMode};

/// CNN encoder inference: 480 edge probabilities in (0,1).
pub fn cnn_encode(input: &LcuInput, w: &ModelWeights) -> EdgeVector {
    let cfg = &w.config;
    let x = model::input_tensor::<f32>(input);
    let stem = ops::conv2d(&x, w.get("cnn.stem.w"), w.get("cnn.stem.b"), 1, 0);
    let mut h = ops::relu(&stem);
    for i in 0..cfg.cnn_stage_channels.len() {
        let c1 = ops::conv2d(
            &h,
            w.get(&format!("cnn.stage{i}.conv1.w")),
            w.get(&format!("cnn.stage{i}.conv1.b")),
            2,
            1,
        );
        let c1 = ops::relu(&c1);
        let c2 = ops::conv2d(
            &c1,
            w.get(&format!("cnn.stage{i}.conv2.w")),
            w.get(&format!("cnn.stage{i}.conv2.b")),
            1,
            1,
        );
        let sc = ops::conv2d(
            &h,
            w.get(&format!("cnn.stage{i}.proj.w")),
            w.get(&format!("cnn.stage{i}.proj.b")),
            2,
            0,
        );
        let mut sum = c2;
        for (s, &p) in sum.data_mut().iter_mut().zip(sc.data()) {
            *s += p;
        }
        h = ops::relu(&sum);
    }
    // flatten, append normalized QP, fully connected, sigmoid
    let mut features = Vec::with_capacity(cfg.cnn_flat_len() + 1);
    features.extend_from_slice(h.data());
    features.push(input.qp.min(cfg.qp_max as u8) as f32 / cfg.qp_max as f32);
    let logits = linear_row(w.get("cnn.fc.w"), w.get("cnn.fc.b"), &features);
    let mut out = EdgeVector::zeros();
    debug_assert_eq!(logits.len(), EDGE_COUNT);
    for (o, &z) in out.0.iter_mut().zip(&logits) {
        *o = ops::sigmoid_scalar(z);
    }
    out
}

fn linear_row(w: &TensorF32, b: &TensorF32, x: &[f32]) -> Vec<f32> {
    let (dout, din) = w.dims2();
    assert_eq!(din, x.len(), "linear_row input length");
    let mut y = Vec::with_capacity(dout);
    for o in 0..dout {
        let row = &w.data()[o * din..(o + 1) * din];
        let mut acc = b.data()[o];
        for k in 0..din {
            acc += row[k] * x[k];
        }
        y.push(acc);
    }
    y
}

/// Incremental decoder with per-layer key/value caches. Feeding the input
/// token at each position reproduces the batched teacher-forced forward
/// pass position for position.
pub struct DecoderState<'w> {
    w: &'w ModelWeights,
    // per layer: flattened [pos][model_dim] caches for self-attention
    self_k: Vec<Vec<f32>>,
    self_v: Vec<Vec<f32>>,
    // per layer: fixed [MEM_ROWS][model_dim] projections of the memory
    mem_k: Vec<Vec<f32>>,
    mem_v: Vec<Vec<f32>>,
    pos: usize,
}

impl<'w> DecoderState<'w> {
    pub fn new(w: &'w ModelWeights, memory: &DecoderMemory) -> DecoderState<'w> {
        let layers = w.config.decoder_layers;
        // memory rows with positional encoding, then per-layer K/V projections
        let mut mem_rows = Vec::with_capacity(MEM_ROWS);
        for (j, row) in memory.iter().enumerate() {
            let pe = ops::pos_encoding::<f32>(j, MEM_COLS);
            let mut r = [0f32; MEM_COLS];
            for k in 0..MEM_COLS {
                r[k] = row[k] + pe[k];
            }
            mem_rows.push(r);
        }
        let mut mem_k = Vec::with_capacity(layers);
        let mut mem_v = Vec::with_capacity(layers);
        for l in 0..layers {
            let wk = w.get(&format!("dec.l{l}.cross.wk"));
            let bk = w.get(&format!("dec.l{l}.cross.bk"));
            let wv = w.get(&format!("dec.l{l}.cross.wv"));
            let bv = w.get(&format!("dec.l{l}.cross.bv"));
            let mut ks = Vec::with_capacity(MEM_ROWS * w.config.model_dim);
            let mut vs = Vec::with_capacity(MEM_ROWS * w.config.model_dim);
            for row in &mem_rows {
                ks.extend(linear_row(wk, bk, row));
                vs.extend(linear_row(wv, bv, row));
            }
            mem_k.push(ks);
            mem_v.push(vs);
        }
        DecoderState {
            w,
            self_k: vec![Vec::new(); layers],
            self_v: vec![Vec::new(); layers],
            mem_k,
            mem_v,
            pos: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.pos
    }

    pub fn is_empty(&self) -> bool {
        self.pos == 0
    }

    /// Consumes one input token (BOS first, then emitted modes) and returns
    /// the next-token probability distribution.
    pub fn step(&mut self, token_id: usize) -> [f32; TOKEN_VOCAB_OUT] {
        let cfg = &self.w.config;
        let d = cfg.model_dim;
        let heads = cfg.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();

        let embed = self.w.get("dec.embed");
        let pe = ops::pos_encoding::<f32>(self.pos, d);
        let mut h: Vec<f32> = embed.data()[token_id * d..(token_id + 1) * d]
            .iter()
            .zip(&pe)
            .map(|(&e, &p)| e + p)
            .collect();

        for l in 0..cfg.decoder_layers {
            let name = |part: &str| format!("dec.l{l}.{part}");
            // self attention over the cache including this position
            let q = linear_row(self.w.get(&name("self.wq")), self.w.get(&name("self.bq")), &h);
            let k = linear_row(self.w.get(&name("self.wk")), self.w.get(&name("self.bk")), &h);
            let v = linear_row(self.w.get(&name("self.wv")), self.w.get(&name("self.bv")), &h);
            self.self_k[l].extend_from_slice(&k);
            self.self_v[l].extend_from_slice(&v);
            let ctx = attend(&q, &self.self_k[l], &self.self_v[l], heads, dh, scale);
            let proj = linear_row(self.w.get(&name("self.wo")), self.w.get(&name("self.bo")), &ctx);
            h = residual_norm(
                &h,
                &proj,
                self.w.get(&name("ln1.g")),
                self.w.get(&name("ln1.b")),
            );
            // cross attention over the fixed memory projections
            let q = linear_row(self.w.get(&name("cross.wq")), self.w.get(&name("cross.bq")), &h);
            let ctx = attend(&q, &self.mem_k[l], &self.mem_v[l], heads, dh, scale);
            let proj = linear_row(
                self.w.get(&name("cross.wo")),
                self.w.get(&name("cross.bo")),
                &ctx,
            );
            h = residual_norm(
                &h,
                &proj,
                self.w.get(&name("ln2.g")),
                self.w.get(&name("ln2.b")),
            );
            // feed forward
            let mut h1 = linear_row(self.w.get(&name("ff.w1")), self.w.get(&name("ff.b1")), &h);
            for v in &mut h1 {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            let h2 = linear_row(self.w.get(&name("ff.w2")), self.w.get(&name("ff.b2")), &h1);
            h = residual_norm(
                &h,
                &h2,
                self.w.get(&name("ln3.g")),
                self.w.get(&name("ln3.b")),
            );
        }

        let logits = linear_row(self.w.get("dec.out.w"), self.w.get("dec.out.b"), &h);
        let mut probs = [0f32; TOKEN_VOCAB_OUT];
        probs.copy_from_slice(&logits);
        ops::softmax_in_place(&mut probs);
        self.pos += 1;
        probs
    }
}

/// Multi-head attention of one query row against `count` cached rows.
fn attend(q: &[f32], keys: &[f32], vals: &[f32], heads: usize, dh: usize, scale: f32) -> Vec<f32> {
    let d = heads * dh;
    let count = keys.len() / d;
    let mut ctx = vec![0f32; d];
    let mut scores = vec![0f32; count];
    for h in 0..heads {
        let off = h * dh;
        for (j, s) in scores.iter_mut().enumerate() {
            let krow = &keys[j * d + off..j * d + off + dh];
            let mut acc = 0f32;
            for k in 0..dh {
                acc += q[off + k] * krow[k];
            }
            *s = acc * scale;
        }
        ops::softmax_in_place(&mut scores);
        for (j, &a) in scores.iter().enumerate() {
            let vrow = &vals[j * d + off..j * d + off + dh];
            for k in 0..dh {
                ctx[off + k] += a * vrow[k];
            }
        }
    }
    ctx
}

fn residual_norm(x: &[f32], delta: &[f32], gamma: &TensorF32, beta: &TensorF32) -> Vec<f32> {
    let sum: Vec<f32> = x.iter().zip(delta).map(|(&a, &b)| a + b).collect();
    let mut out = vec![0f32; x.len()];
    ops::layer_norm_row(&sum, gamma.data(), beta.data(), &mut out);
    out
}

/// Stateless single-step decoder op: full replay of BOS plus `history`.
pub fn decoder_step(
    memory: &DecoderMemory,
    history: &[SplitMode],
    w: &ModelWeights,
) -> Result<[f32; TOKEN_VOCAB_OUT], NnError> {
    if history.len() >= w.config.max_seq {
        return Err(NnError::SequenceTooLong {
            len: history.len() + 1,
            max: w.config.max_seq,
        });
    }
    let mut state = DecoderState::new(w, memory);
    let mut probs = state.step(BOS_TOKEN);
    for m in history {
        probs = state.step(m.code() as usize);
    }
    Ok(probs)
}

/// Batched teacher-forced forward on the tape; [len,6] logits for the
/// BOS-prefixed input ids. Second route checked against `DecoderState`.
pub fn batched_decoder_logits(
    memory: &DecoderMemory,
    input_ids: &[usize],
    w: &ModelWeights,
) -> TensorF32 {
    let mut g: Graph<f32> = Graph::new();
    let params = model::bind_params(&mut g, w.tensors());
    let mem = model::memory_leaf(&mut g, memory);
    let logits = model::decoder_logits(&mut g, &params, &w.config, mem, input_ids);
    g.value(logits).clone()
}

/// Greedy constraint-masked decode: walks the pending-CU worklist in
/// traversal order, masking each step's distribution with the CU's allowed
/// modes. The returned tree is legal by construction.
pub fn constrained_decode(
    memory: &DecoderMemory,
    rules: &ConstraintRules,
    w: &ModelWeights,
) -> Result<(PartitionTree, ModeSequence), NnError> {
    let mut state = DecoderState::new(w, memory);
    let mut stack = vec![CuRect::lcu_root(rules.lcu_size)];
    let mut tokens: ModeSequence = Vec::new();
    let mut next_input = BOS_TOKEN;
    while let Some(cu) = stack.pop() {
        if tokens.len() >= w.config.max_seq {
            return Err(NnError::SequenceTooLong {
                len: tokens.len() + 1,
                max: w.config.max_seq,
            });
        }
        let probs = state.step(next_input);
        let mode = masked_argmax(&probs, allowed_modes(&cu, rules));
        tokens.push(mode);
        next_input = mode.code() as usize;
        if mode != SplitMode::Ns {
            let children = child_rects(&cu, mode).expect("masked mode must split");
            for c in children.into_iter().rev() {
                stack.push(c);
            }
        }
    }
    let tree = modes_to_tree(&tokens, rules).expect("greedy decode emits a parsable sequence");
    Ok((tree, tokens))
}
