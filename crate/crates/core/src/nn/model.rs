//! Architecture assembly on the autodiff tape: the ResNet-style encoder and
//! the Transformer decoder, shared by training, gradient checking and the
//! batched teacher-forced forward pass.

use std::collections::BTreeMap;

use super::graph::{Graph, NodeId};
use super::ops::pos_encoding_matrix;
use super::tensor::{Scalar, Tensor};
use super::ModelConfig;
use crate::codec::{MEM_COLS, MEM_ROWS};
use crate::frame::{LcuInput, LCU_INPUT_SIDE};

pub(crate) struct TapeParams {
    ids: BTreeMap<String, NodeId>,
}

impl TapeParams {
    pub fn id(&self, name: &str) -> NodeId {
        self.ids[name]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.ids.iter()
    }
}

/// Registers every weight tensor as a graph leaf.
pub(crate) fn bind_params<T: Scalar>(
    g: &mut Graph<T>,
    tensors: &BTreeMap<String, Tensor<T>>,
) -> TapeParams {
    let ids = tensors
        .iter()
        .map(|(name, t)| (name.clone(), g.leaf(t.clone())))
        .collect();
    TapeParams { ids }
}

/// Normalized [1,66,66] pixel tensor.
pub(crate) fn input_tensor<T: Scalar>(input: &LcuInput) -> Tensor<T> {
    let data = input
        .pixels
        .iter()
        .map(|&p| T::from_f64(p as f64 / 255.0))
        .collect();
    Tensor::from_vec(&[1, LCU_INPUT_SIDE, LCU_INPUT_SIDE], data)
}

/// CNN encoder forward: valid 3x3 stem (66 -> 64), four stride-2 residual
/// stages, QP concatenated ahead of the fully connected layer. Returns the
/// [1,480] edge logits (sigmoid is applied by the caller as needed).
pub(crate) fn cnn_logits<T: Scalar>(
    g: &mut Graph<T>,
    p: &TapeParams,
    cfg: &ModelConfig,
    input: &LcuInput,
) -> NodeId {
    let x = g.leaf(input_tensor(input));
    let stem = g.conv2d(x, p.id("cnn.stem.w"), p.id("cnn.stem.b"), 1, 0);
    let mut h = g.relu(stem);
    for i in 0..cfg.cnn_stage_channels.len() {
        let c1 = g.conv2d(
            h,
            p.id(&format!("cnn.stage{i}.conv1.w")),
            p.id(&format!("cnn.stage{i}.conv1.b")),
            2,
            1,
        );
        let c1 = g.relu(c1);
        let c2 = g.conv2d(
            c1,
            p.id(&format!("cnn.stage{i}.conv2.w")),
            p.id(&format!("cnn.stage{i}.conv2.b")),
            1,
            1,
        );
        let sc = g.conv2d(
            h,
            p.id(&format!("cnn.stage{i}.proj.w")),
            p.id(&format!("cnn.stage{i}.proj.b")),
            2,
            0,
        );
        let sum = g.add(c2, sc);
        h = g.relu(sum);
    }
    let flat = g.reshape(h, &[1, cfg.cnn_flat_len()]);
    let qp_norm = T::from_f64(input.qp.min(cfg.qp_max as u8) as f64 / cfg.qp_max as f64);
    let qp = g.leaf(Tensor::from_vec(&[1, 1], vec![qp_norm]));
    let with_qp = g.concat_cols(&[flat, qp]);
    g.linear(with_qp, p.id("cnn.fc.w"), p.id("cnn.fc.b"))
}

/// Multi-head scaled-dot-product attention context (before the output
/// projection). `causal` masks future positions; query and key/value
/// lengths may differ for cross attention.
fn attention<T: Scalar>(
    g: &mut Graph<T>,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    heads: usize,
    causal: bool,
) -> NodeId {
    let (ql, d) = g.value(q).dims2();
    let (kl, _) = g.value(k).dims2();
    let dh = d / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mask = causal.then(|| {
        let mut m = Tensor::zeros(&[ql, kl]);
        for i in 0..ql {
            for j in i + 1..kl {
                m.data_mut()[i * kl + j] = T::from_f64(-1e9);
            }
        }
        m
    });
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.narrow_cols(q, h * dh, dh);
        let kh = g.narrow_cols(k, h * dh, dh);
        let vh = g.narrow_cols(v, h * dh, dh);
        let kt = g.transpose(kh);
        let s = g.matmul(qh, kt);
        let mut s = g.scale(s, scale);
        if let Some(m) = &mask {
            s = g.add_const(s, m);
        }
        let a = g.softmax_rows(s);
        outs.push(g.matmul(a, vh));
    }
    g.concat_cols(&outs)
}

/// Transformer decoder forward over one teacher-forced input sequence of
/// token ids (BOS followed by history). Returns [len, 6] logits; row t is
/// the next-token distribution after consuming inputs[..=t].
pub(crate) fn decoder_logits<T: Scalar>(
    g: &mut Graph<T>,
    p: &TapeParams,
    cfg: &ModelConfig,
    memory: NodeId,
    input_ids: &[usize],
) -> NodeId {
    assert_eq!(g.value(memory).shape(), &[MEM_ROWS, MEM_COLS]);
    let mem_pe = pos_encoding_matrix::<T>(MEM_ROWS, MEM_COLS);
    let mem = g.add_const(memory, &mem_pe);

    let len = input_ids.len();
    let embedded = g.embed(p.id("dec.embed"), input_ids);
    let tok_pe = pos_encoding_matrix::<T>(len, cfg.model_dim);
    let mut x = g.add_const(embedded, &tok_pe);

    for l in 0..cfg.decoder_layers {
        let name = |part: &str| format!("dec.l{l}.{part}");
        // masked self-attention
        let q = g.linear(x, p.id(&name("self.wq")), p.id(&name("self.bq")));
        let k = g.linear(x, p.id(&name("self.wk")), p.id(&name("self.bk")));
        let v = g.linear(x, p.id(&name("self.wv")), p.id(&name("self.bv")));
        let ctx = attention(g, q, k, v, cfg.heads, true);
        let proj = g.linear(ctx, p.id(&name("self.wo")), p.id(&name("self.bo")));
        let sum = g.add(x, proj);
        x = g.layer_norm(sum, p.id(&name("ln1.g")), p.id(&name("ln1.b")));
        // encoder-decoder attention over the 30-row memory
        let q = g.linear(x, p.id(&name("cross.wq")), p.id(&name("cross.bq")));
        let k = g.linear(mem, p.id(&name("cross.wk")), p.id(&name("cross.bk")));
        let v = g.linear(mem, p.id(&name("cross.wv")), p.id(&name("cross.bv")));
        let ctx = attention(g, q, k, v, cfg.heads, false);
        let proj = g.linear(ctx, p.id(&name("cross.wo")), p.id(&name("cross.bo")));
        let sum = g.add(x, proj);
        x = g.layer_norm(sum, p.id(&name("ln2.g")), p.id(&name("ln2.b")));
        // position-wise feed forward
        let h1 = g.linear(x, p.id(&name("ff.w1")), p.id(&name("ff.b1")));
        let h1 = g.relu(h1);
        let h2 = g.linear(h1, p.id(&name("ff.w2")), p.id(&name("ff.b2")));
        let sum = g.add(x, h2);
        x = g.layer_norm(sum, p.id(&name("ln3.g")), p.id(&name("ln3.b")));
    }
    g.linear(x, p.id("dec.out.w"), p.id("dec.out.b"))
}

/// Memory leaf from a reshaped edge vector.
pub(crate) fn memory_leaf<T: Scalar>(
    g: &mut Graph<T>,
    memory: &[[f32; MEM_COLS]; MEM_ROWS],
) -> NodeId {
    let data = memory
        .iter()
        .flat_map(|row| row.iter().map(|&v| T::from_f32(v)))
        .collect();
    g.leaf(Tensor::from_vec(&[MEM_ROWS, MEM_COLS], data))
}

/// BOS-prefixed input ids for a teacher-forced pass over `tokens`.
pub(crate) fn teacher_inputs(tokens: &[crate::partition::SplitMode]) -> Vec<usize> {
    let mut ids = Vec::with_capacity(tokens.len());
    ids.push(super::BOS_TOKEN);
    ids.extend(tokens[..tokens.len() - 1].iter().map(|m| m.code() as usize));
    ids
}
