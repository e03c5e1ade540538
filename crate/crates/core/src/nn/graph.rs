//! Minimal eager reverse-mode tape over dense tensors. Forward values are
//! computed as ops are appended; `backward` replays the tape in reverse.

use super::ops;
use super::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op<T: Scalar> {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    Transpose {
        x: NodeId,
    },
    Relu {
        x: NodeId,
    },
    Sigmoid {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    AddConst {
        x: NodeId,
    },
    Scale {
        x: NodeId,
        c: T,
    },
    Reshape {
        x: NodeId,
    },
    NarrowCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    ConcatCols {
        xs: Vec<NodeId>,
    },
    SoftmaxRows {
        x: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    Embed {
        table: NodeId,
        ids: Vec<usize>,
    },
    BceWithLogits {
        z: NodeId,
        targets: Tensor<T>,
        scale: T,
    },
    TokenCe {
        logits: NodeId,
        targets: Vec<usize>,
        scale: T,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Graph<T> {
        Graph { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> NodeId {
        let v = ops::conv2d(self.value(x), self.value(w), self.value(b), stride, pad);
        self.push(v, Op::Conv2d { x, w, b, stride, pad })
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let v = ops::linear(self.value(x), self.value(w), self.value(b));
        self.push(v, Op::Linear { x, w, b })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = ops::matmul(self.value(a), self.value(b));
        self.push(v, Op::MatMul { a, b })
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let v = ops::transpose(self.value(x));
        self.push(v, Op::Transpose { x })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = ops::relu(self.value(x));
        self.push(v, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = ops::sigmoid(self.value(x));
        self.push(v, Op::Sigmoid { x })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let mut v = self.value(a).clone();
        for (o, &x) in v.data_mut().iter_mut().zip(self.value(b).data()) {
            *o = *o + x;
        }
        self.push(v, Op::Add { a, b })
    }

    /// Adds a tensor that does not participate in gradients (positional
    /// encodings, attention masks).
    pub fn add_const(&mut self, x: NodeId, c: &Tensor<T>) -> NodeId {
        assert_eq!(self.value(x).shape(), c.shape());
        let mut v = self.value(x).clone();
        for (o, &k) in v.data_mut().iter_mut().zip(c.data()) {
            *o = *o + k;
        }
        self.push(v, Op::AddConst { x })
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        let mut v = self.value(x).clone();
        for o in v.data_mut() {
            *o = *o * c;
        }
        self.push(v, Op::Scale { x, c })
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let v = self.value(x).reshaped(shape);
        self.push(v, Op::Reshape { x })
    }

    pub fn narrow_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let (n, d) = self.value(x).dims2();
        assert!(start + len <= d);
        let mut v = Tensor::zeros(&[n, len]);
        for i in 0..n {
            for j in 0..len {
                v.data_mut()[i * len + j] = self.value(x).data()[i * d + start + j];
            }
        }
        self.push(v, Op::NarrowCols { x, start, len })
    }

    pub fn concat_cols(&mut self, xs: &[NodeId]) -> NodeId {
        let n = self.value(xs[0]).dims2().0;
        let total: usize = xs.iter().map(|&x| self.value(x).dims2().1).sum();
        let mut v = Tensor::zeros(&[n, total]);
        let mut offset = 0;
        for &x in xs {
            let (xn, xd) = self.value(x).dims2();
            assert_eq!(xn, n);
            for i in 0..n {
                for j in 0..xd {
                    v.data_mut()[i * total + offset + j] = self.value(x).data()[i * xd + j];
                }
            }
            offset += xd;
        }
        self.push(v, Op::ConcatCols { xs: xs.to_vec() })
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let v = ops::softmax_rows(self.value(x));
        self.push(v, Op::SoftmaxRows { x })
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let v = ops::layer_norm(self.value(x), self.value(gamma), self.value(beta));
        self.push(v, Op::LayerNorm { x, gamma, beta })
    }

    /// Gathers `ids` rows of `table` into an [ids.len(), dim] tensor.
    pub fn embed(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let (_, d) = self.value(table).dims2();
        let mut v = Tensor::zeros(&[ids.len(), d]);
        for (i, &id) in ids.iter().enumerate() {
            for k in 0..d {
                v.data_mut()[i * d + k] = self.value(table).data()[id * d + k];
            }
        }
        self.push(
            v,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn bce_with_logits(&mut self, z: NodeId, targets: Tensor<T>, scale: T) -> NodeId {
        let loss = ops::bce_with_logits(self.value(z).data(), targets.data(), scale);
        self.push(Tensor::scalar(loss), Op::BceWithLogits { z, targets, scale })
    }

    pub fn token_ce(&mut self, logits: NodeId, targets: Vec<usize>, scale: T) -> NodeId {
        let loss = ops::token_ce(self.value(logits), &targets, scale);
        self.push(
            Tensor::scalar(loss),
            Op::TokenCe {
                logits,
                targets,
                scale,
            },
        )
    }

    /// Reverse accumulation from a scalar `root`; returns one gradient slot
    /// per node (zeros where the node does not influence the root).
    pub fn backward(&self, root: NodeId) -> Grads<T> {
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        assert_eq!(self.nodes[root.0].value.numel(), 1, "root must be scalar");
        grads[root.0] = Some(Tensor::scalar(T::one()));
        for idx in (0..=root.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn accumulate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let mut add_to = |id: NodeId, delta: Tensor<T>, grads: &mut [Option<Tensor<T>>]| {
            match &mut grads[id.0] {
                Some(acc) => {
                    for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                        *a = *a + *d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let (dx, dw, db) =
                    ops::conv2d_backward(self.value(*x), self.value(*w), g, *stride, *pad);
                add_to(*x, dx, grads);
                add_to(*w, dw, grads);
                add_to(*b, db, grads);
            }
            Op::Linear { x, w, b } => {
                let (n, din) = self.value(*x).dims2();
                let (dout, _) = self.value(*w).dims2();
                let mut dx = Tensor::zeros(&[n, din]);
                let mut dw = Tensor::zeros(&[dout, din]);
                let mut db = Tensor::zeros(&[dout]);
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                for i in 0..n {
                    for o in 0..dout {
                        let go = g.data()[i * dout + o];
                        db.data_mut()[o] = db.data_mut()[o] + go;
                        for k in 0..din {
                            dx.data_mut()[i * din + k] =
                                dx.data_mut()[i * din + k] + go * wv[o * din + k];
                            dw.data_mut()[o * din + k] =
                                dw.data_mut()[o * din + k] + go * xv[i * din + k];
                        }
                    }
                }
                add_to(*x, dx, grads);
                add_to(*w, dw, grads);
                add_to(*b, db, grads);
            }
            Op::MatMul { a, b } => {
                let bt = ops::transpose(self.value(*b));
                let at = ops::transpose(self.value(*a));
                add_to(*a, ops::matmul(g, &bt), grads);
                add_to(*b, ops::matmul(&at, g), grads);
            }
            Op::Transpose { x } => {
                add_to(*x, ops::transpose(g), grads);
            }
            Op::Relu { x } => {
                let mut dx = g.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(self.value(*x).data()) {
                    if v <= T::zero() {
                        *d = T::zero();
                    }
                }
                add_to(*x, dx, grads);
            }
            Op::Sigmoid { x } => {
                let mut dx = g.clone();
                for (d, &s) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    *d = *d * s * (T::one() - s);
                }
                add_to(*x, dx, grads);
            }
            Op::Add { a, b } => {
                add_to(*a, g.clone(), grads);
                add_to(*b, g.clone(), grads);
            }
            Op::AddConst { x } => {
                add_to(*x, g.clone(), grads);
            }
            Op::Scale { x, c } => {
                let mut dx = g.clone();
                for d in dx.data_mut() {
                    *d = *d * *c;
                }
                add_to(*x, dx, grads);
            }
            Op::Reshape { x } => {
                add_to(*x, g.reshaped(self.value(*x).shape()), grads);
            }
            Op::NarrowCols { x, start, len } => {
                let (n, d) = self.value(*x).dims2();
                let mut dx = Tensor::zeros(&[n, d]);
                for i in 0..n {
                    for j in 0..*len {
                        dx.data_mut()[i * d + start + j] = g.data()[i * len + j];
                    }
                }
                add_to(*x, dx, grads);
            }
            Op::ConcatCols { xs } => {
                let total = node.value.dims2().1;
                let n = node.value.dims2().0;
                let mut offset = 0;
                for &xid in xs {
                    let (_, xd) = self.value(xid).dims2();
                    let mut dx = Tensor::zeros(&[n, xd]);
                    for i in 0..n {
                        for j in 0..xd {
                            dx.data_mut()[i * xd + j] = g.data()[i * total + offset + j];
                        }
                    }
                    add_to(xid, dx, grads);
                    offset += xd;
                }
            }
            Op::SoftmaxRows { x } => {
                // dx_i = p_i * (g_i - sum_j g_j p_j) per row
                let (n, m) = node.value.dims2();
                let mut dx = Tensor::zeros(&[n, m]);
                for i in 0..n {
                    let p = &node.value.data()[i * m..(i + 1) * m];
                    let gr = &g.data()[i * m..(i + 1) * m];
                    let dot: T = p.iter().zip(gr).map(|(&pv, &gv)| pv * gv).sum();
                    for j in 0..m {
                        dx.data_mut()[i * m + j] = p[j] * (gr[j] - dot);
                    }
                }
                add_to(*x, dx, grads);
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (n, d) = self.value(*x).dims2();
                let eps = T::from_f64(ops::LAYER_NORM_EPS);
                let dn = T::from_f64(d as f64);
                let mut dx = Tensor::zeros(&[n, d]);
                let mut dgamma = Tensor::zeros(&[d]);
                let mut dbeta = Tensor::zeros(&[d]);
                let gv = self.value(*gamma).data();
                for i in 0..n {
                    let row = &self.value(*x).data()[i * d..(i + 1) * d];
                    let gr = &g.data()[i * d..(i + 1) * d];
                    let mean = row.iter().copied().sum::<T>() / dn;
                    let mut var = T::zero();
                    for &v in row {
                        var = var + (v - mean) * (v - mean);
                    }
                    var = var / dn;
                    let inv = T::one() / (var + eps).sqrt();
                    // xhat and the two reduction terms
                    let mut sum_gy = T::zero();
                    let mut sum_gy_xhat = T::zero();
                    for k in 0..d {
                        let xhat = (row[k] - mean) * inv;
                        let gy = gr[k] * gv[k];
                        sum_gy = sum_gy + gy;
                        sum_gy_xhat = sum_gy_xhat + gy * xhat;
                        dgamma.data_mut()[k] = dgamma.data_mut()[k] + gr[k] * xhat;
                        dbeta.data_mut()[k] = dbeta.data_mut()[k] + gr[k];
                    }
                    for k in 0..d {
                        let xhat = (row[k] - mean) * inv;
                        let gy = gr[k] * gv[k];
                        dx.data_mut()[i * d + k] =
                            inv * (gy - sum_gy / dn - xhat * sum_gy_xhat / dn);
                    }
                }
                add_to(*x, dx, grads);
                add_to(*gamma, dgamma, grads);
                add_to(*beta, dbeta, grads);
            }
            Op::Embed { table, ids } => {
                let (rows, d) = self.value(*table).dims2();
                let mut dt = Tensor::zeros(&[rows, d]);
                for (i, &id) in ids.iter().enumerate() {
                    for k in 0..d {
                        dt.data_mut()[id * d + k] = dt.data_mut()[id * d + k] + g.data()[i * d + k];
                    }
                }
                add_to(*table, dt, grads);
            }
            Op::BceWithLogits { z, targets, scale } => {
                let gs = g.data()[0];
                let zv = self.value(*z);
                let mut dz = Tensor::zeros(zv.shape());
                for (i, (&zi, &yi)) in zv.data().iter().zip(targets.data()).enumerate() {
                    dz.data_mut()[i] = (ops::sigmoid_scalar(zi) - yi) * *scale * gs;
                }
                add_to(*z, dz, grads);
            }
            Op::TokenCe {
                logits,
                targets,
                scale,
            } => {
                let gs = g.data()[0];
                let probs = ops::softmax_rows(self.value(*logits));
                let (n, v) = probs.dims2();
                let mut dl = probs;
                for i in 0..n {
                    dl.data_mut()[i * v + targets[i]] =
                        dl.data_mut()[i * v + targets[i]] - T::one();
                }
                for d in dl.data_mut() {
                    *d = *d * *scale * gs;
                }
                add_to(*logits, dl, grads);
            }
        }
    }
}

/// Gradients indexed by node id.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }
}
