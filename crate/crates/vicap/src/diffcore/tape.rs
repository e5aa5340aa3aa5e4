//! The recording tape and its backward pass.

use super::{softmax_slice, ParamId, ParamStore, Tensor};
use crate::{Error, Result};

/// Handle to a value living on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// The three weight tensors of one LSTM cell, leased onto a tape.
/// Gate order along the 4H axis is input, forget, candidate, output.
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub wx: Var,
    pub wh: Var,
    pub b: Var,
}

struct LstmCache {
    i: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    o: Vec<f64>,
}

struct AttendCache {
    tanh_a: Vec<Vec<f64>>,
    alpha: Vec<f64>,
}

enum Node {
    Leaf,
    Affine {
        x: Var,
        w: Var,
        b: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
    Slice {
        src: Var,
        start: usize,
    },
    EmbedRow {
        table: Var,
        row: usize,
    },
    /// Output value is the concatenation [h; c], length 2H.
    LstmCell {
        x: Var,
        h_prev: Var,
        c_prev: Var,
        weights: LstmVars,
        cache: LstmCache,
    },
    /// Output value is the context vector; attention weights are cached.
    Attend {
        query: Var,
        memory: Vec<Var>,
        w_vc: Var,
        w_hc: Var,
        w_c: Var,
        cache: AttendCache,
    },
    Softmax {
        z: Var,
    },
    SoftmaxCe {
        logits: Var,
        target: usize,
        probs: Vec<f64>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        k: f64,
    },
    AddConst {
        x: Var,
    },
    SumScalars {
        xs: Vec<Var>,
    },
    Relu {
        x: Var,
    },
    Dot {
        a: Var,
        b: Var,
    },
    L2Norm {
        x: Var,
        norm: f64,
    },
}

/// Records one forward pass. Leased parameters remember their [`ParamId`]
/// so [`Tape::backward`] can accumulate into the owning [`ParamStore`].
pub struct Tape {
    vals: Vec<Tensor>,
    nodes: Vec<Node>,
    param_of: Vec<Option<ParamId>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            vals: Vec::new(),
            nodes: Vec::new(),
            param_of: Vec::new(),
        }
    }

    fn push(&mut self, val: Tensor, node: Node, param: Option<ParamId>) -> Var {
        self.vals.push(val);
        self.nodes.push(node);
        self.param_of.push(param);
        Var(self.vals.len() - 1)
    }

    /// A non-differentiable input (features, constants).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Node::Leaf, None)
    }

    /// Lease a parameter value onto the tape as a differentiable leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Node::Leaf, Some(id))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.vals[v.0]
    }

    /// y = W·x + b for W [h×k], x [k], b [h].
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (wt, xt, bt) = (&self.vals[w.0], &self.vals[x.0], &self.vals[b.0]);
        if wt.shape().len() != 2 || xt.shape().len() != 1 || bt.shape().len() != 1 {
            return Err(Error::Shape("affine expects W[h×k], x[k], b[h]".into()));
        }
        let (h, k) = (wt.shape()[0], wt.shape()[1]);
        if xt.len() != k || bt.len() != h {
            return Err(Error::Shape(format!(
                "affine shape mismatch: W {}×{}, x {}, b {}",
                h,
                k,
                xt.len(),
                bt.len()
            )));
        }
        let mut y = bt.data().to_vec();
        let (wd, xd) = (wt.data(), xt.data());
        for (i, yi) in y.iter_mut().enumerate() {
            let row = &wd[i * k..(i + 1) * k];
            *yi += row.iter().zip(xd).map(|(a, b)| a * b).sum::<f64>();
        }
        Ok(self.push(Tensor::vector(y), Node::Affine { x, w, b }, None))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.vals[p.0].data());
        }
        self.push(
            Tensor::vector(data),
            Node::Concat {
                parts: parts.to_vec(),
            },
            None,
        )
    }

    fn slice(&mut self, src: Var, start: usize, len: usize) -> Var {
        let data = self.vals[src.0].data()[start..start + len].to_vec();
        self.push(Tensor::vector(data), Node::Slice { src, start }, None)
    }

    /// Row lookup into an embedding table; gradient flows into that row only.
    pub fn embed_row(&mut self, table: Var, row: usize) -> Result<Var> {
        let t = &self.vals[table.0];
        if t.shape().len() != 2 || row >= t.shape()[0] {
            return Err(Error::Shape(format!(
                "embed_row: row {} out of table {:?}",
                row,
                t.shape()
            )));
        }
        let data = t.row(row).to_vec();
        Ok(self.push(Tensor::vector(data), Node::EmbedRow { table, row }, None))
    }

    /// One LSTM step. Input/forget/output gates use the logistic sigmoid,
    /// the candidate uses tanh: c = f⊙c_prev + i⊙g, h = o⊙tanh(c).
    pub fn lstm_cell(
        &mut self,
        x: Var,
        h_prev: Var,
        c_prev: Var,
        weights: LstmVars,
    ) -> Result<(Var, Var)> {
        let hidden = self.vals[h_prev.0].len();
        let in_dim = self.vals[x.0].len();
        let (wx, wh, b) = (
            &self.vals[weights.wx.0],
            &self.vals[weights.wh.0],
            &self.vals[weights.b.0],
        );
        if wx.shape() != [4 * hidden, in_dim]
            || wh.shape() != [4 * hidden, hidden]
            || b.shape() != [4 * hidden]
            || self.vals[c_prev.0].len() != hidden
        {
            return Err(Error::Shape(format!(
                "lstm_cell: wx {:?} wh {:?} b {:?} vs x {} h {}",
                wx.shape(),
                wh.shape(),
                b.shape(),
                in_dim,
                hidden
            )));
        }
        let mut z = b.data().to_vec();
        let (wxd, whd) = (wx.data(), wh.data());
        let xd = self.vals[x.0].data();
        let hd = self.vals[h_prev.0].data();
        for (r, zr) in z.iter_mut().enumerate() {
            let row_x = &wxd[r * in_dim..(r + 1) * in_dim];
            let row_h = &whd[r * hidden..(r + 1) * hidden];
            *zr += row_x.iter().zip(xd).map(|(a, b)| a * b).sum::<f64>()
                + row_h.iter().zip(hd).map(|(a, b)| a * b).sum::<f64>();
        }
        let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
        let i: Vec<f64> = z[..hidden].iter().map(|&v| sigmoid(v)).collect();
        let f: Vec<f64> = z[hidden..2 * hidden].iter().map(|&v| sigmoid(v)).collect();
        let g: Vec<f64> = z[2 * hidden..3 * hidden].iter().map(|&v| v.tanh()).collect();
        let o: Vec<f64> = z[3 * hidden..].iter().map(|&v| sigmoid(v)).collect();
        let cd = self.vals[c_prev.0].data();
        let mut out = vec![0.0; 2 * hidden];
        for j in 0..hidden {
            let c_new = f[j] * cd[j] + i[j] * g[j];
            out[hidden + j] = c_new;
            out[j] = o[j] * c_new.tanh();
        }
        let pair = self.push(
            Tensor::vector(out),
            Node::LstmCell {
                x,
                h_prev,
                c_prev,
                weights,
                cache: LstmCache { i, f, g, o },
            },
            None,
        );
        let h = self.slice(pair, 0, hidden);
        let c = self.slice(pair, hidden, hidden);
        Ok((h, c))
    }

    /// Additive attention: score_i = w_c·tanh(W_vc·v_i + W_hc·q), weights by
    /// softmax, context = Σ alpha_i v_i. Returns the context var and the
    /// attention weights as plain numbers.
    pub fn attend(
        &mut self,
        query: Var,
        memory: &[Var],
        w_vc: Var,
        w_hc: Var,
        w_c: Var,
    ) -> Result<(Var, Vec<f64>)> {
        if memory.is_empty() {
            return Err(Error::Shape("attend: empty memory".into()));
        }
        let h_dim = self.vals[memory[0].0].len();
        let a_dim = self.vals[w_c.0].len();
        let (wvc, whc) = (&self.vals[w_vc.0], &self.vals[w_hc.0]);
        if wvc.shape() != [a_dim, h_dim]
            || whc.shape() != [a_dim, self.vals[query.0].len()]
        {
            return Err(Error::Shape(format!(
                "attend: W_vc {:?} W_hc {:?} w_c {} query {} memory {}",
                wvc.shape(),
                whc.shape(),
                a_dim,
                self.vals[query.0].len(),
                h_dim
            )));
        }
        // whc·q is shared by all rows.
        let qd = self.vals[query.0].data();
        let q_dim = qd.len();
        let whcd = self.vals[w_hc.0].data();
        let mut hq = vec![0.0; a_dim];
        for (r, hr) in hq.iter_mut().enumerate() {
            *hr = whcd[r * q_dim..(r + 1) * q_dim]
                .iter()
                .zip(qd)
                .map(|(a, b)| a * b)
                .sum();
        }
        let wvcd = self.vals[w_vc.0].data();
        let wcd = self.vals[w_c.0].data();
        let mut tanh_a = Vec::with_capacity(memory.len());
        let mut scores = Vec::with_capacity(memory.len());
        for &m in memory {
            let vd = self.vals[m.0].data();
            let mut t = vec![0.0; a_dim];
            for (r, tr) in t.iter_mut().enumerate() {
                let a: f64 = wvcd[r * h_dim..(r + 1) * h_dim]
                    .iter()
                    .zip(vd)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    + hq[r];
                *tr = a.tanh();
            }
            scores.push(t.iter().zip(wcd).map(|(a, b)| a * b).sum());
            tanh_a.push(t);
        }
        let alpha = softmax_slice(&scores);
        let mut ctx = vec![0.0; h_dim];
        for (k, &m) in memory.iter().enumerate() {
            let vd = self.vals[m.0].data();
            for (c, v) in ctx.iter_mut().zip(vd) {
                *c += alpha[k] * v;
            }
        }
        let out = self.push(
            Tensor::vector(ctx),
            Node::Attend {
                query,
                memory: memory.to_vec(),
                w_vc,
                w_hc,
                w_c,
                cache: AttendCache {
                    tanh_a,
                    alpha: alpha.clone(),
                },
            },
            None,
        );
        Ok((out, alpha))
    }

    /// Max-subtracted softmax over a vector.
    pub fn softmax(&mut self, z: Var) -> Var {
        let p = softmax_slice(self.vals[z.0].data());
        self.push(Tensor::vector(p), Node::Softmax { z }, None)
    }

    /// −log softmax(logits)[target], as a scalar node.
    pub fn softmax_ce(&mut self, logits: Var, target: usize) -> Result<Var> {
        let zd = self.vals[logits.0].data();
        if target >= zd.len() {
            return Err(Error::Value(format!(
                "cross_entropy target {} out of range {}",
                target,
                zd.len()
            )));
        }
        let probs = softmax_slice(zd);
        let loss = -probs[target].max(f64::MIN_POSITIVE).ln();
        Ok(self.push(
            Tensor::scalar(loss),
            Node::SoftmaxCe {
                logits,
                target,
                probs,
            },
            None,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.vals[a.0].len(), self.vals[b.0].len());
        let data = self.vals[a.0]
            .data()
            .iter()
            .zip(self.vals[b.0].data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.vals[a.0].shape().to_vec();
        self.push(
            Tensor::from_vec(&shape, data).expect("same shape"),
            Node::Add { a, b },
            None,
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.vals[a.0].len(), self.vals[b.0].len());
        let data = self.vals[a.0]
            .data()
            .iter()
            .zip(self.vals[b.0].data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.vals[a.0].shape().to_vec();
        self.push(
            Tensor::from_vec(&shape, data).expect("same shape"),
            Node::Sub { a, b },
            None,
        )
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let shape = self.vals[x.0].shape().to_vec();
        let data = self.vals[x.0].data().iter().map(|v| v * k).collect();
        self.push(
            Tensor::from_vec(&shape, data).expect("same shape"),
            Node::Scale { x, k },
            None,
        )
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let shape = self.vals[x.0].shape().to_vec();
        let data = self.vals[x.0].data().iter().map(|v| v + c).collect();
        self.push(
            Tensor::from_vec(&shape, data).expect("same shape"),
            Node::AddConst { x },
            None,
        )
    }

    pub fn sum_scalars(&mut self, xs: &[Var]) -> Var {
        let total: f64 = xs.iter().map(|v| self.vals[v.0].item()).sum();
        self.push(
            Tensor::scalar(total),
            Node::SumScalars { xs: xs.to_vec() },
            None,
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let shape = self.vals[x.0].shape().to_vec();
        let data = self.vals[x.0].data().iter().map(|v| v.max(0.0)).collect();
        self.push(
            Tensor::from_vec(&shape, data).expect("same shape"),
            Node::Relu { x },
            None,
        )
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.vals[a.0].len() != self.vals[b.0].len() {
            return Err(Error::Shape("dot: length mismatch".into()));
        }
        let d = self.vals[a.0]
            .data()
            .iter()
            .zip(self.vals[b.0].data())
            .map(|(x, y)| x * y)
            .sum();
        Ok(self.push(Tensor::scalar(d), Node::Dot { a, b }, None))
    }

    /// x / ‖x‖₂. Errors on a (near-)zero vector.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let norm = self.vals[x.0]
            .data()
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if norm < 1e-12 {
            return Err(Error::Numeric("l2_normalize of zero vector".into()));
        }
        let data = self.vals[x.0].data().iter().map(|v| v / norm).collect();
        Ok(self.push(Tensor::vector(data), Node::L2Norm { x, norm }, None))
    }

    /// Reverse sweep from a scalar loss; parameter gradients are accumulated
    /// (`+=`) into the store. The tape is consumed.
    pub fn backward(self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.vals[loss.0].len() != 1 {
            return Err(Error::Shape(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.vals[loss.0].shape()
            )));
        }
        let mut grads: Vec<Vec<f64>> = self.vals.iter().map(|v| vec![0.0; v.len()]).collect();
        grads[loss.0][0] = 1.0;

        for idx in (0..self.nodes.len()).rev() {
            if grads[idx].iter().all(|&g| g == 0.0) {
                continue;
            }
            let gy = std::mem::take(&mut grads[idx]);
            match &self.nodes[idx] {
                Node::Leaf => {
                    grads[idx] = gy; // restored for the param sweep below
                }
                Node::Affine { x, w, b } => {
                    let k = self.vals[x.0].len();
                    let xd = self.vals[x.0].data();
                    let wd = self.vals[w.0].data();
                    for (i, &gi) in gy.iter().enumerate() {
                        grads[b.0][i] += gi;
                        for j in 0..k {
                            grads[w.0][i * k + j] += gi * xd[j];
                            grads[x.0][j] += gi * wd[i * k + j];
                        }
                    }
                }
                Node::Concat { parts } => {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.vals[p.0].len();
                        for j in 0..n {
                            grads[p.0][j] += gy[off + j];
                        }
                        off += n;
                    }
                }
                Node::Slice { src, start } => {
                    for (j, &g) in gy.iter().enumerate() {
                        grads[src.0][start + j] += g;
                    }
                }
                Node::EmbedRow { table, row } => {
                    let cols = gy.len();
                    for (j, &g) in gy.iter().enumerate() {
                        grads[table.0][row * cols + j] += g;
                    }
                }
                Node::LstmCell {
                    x,
                    h_prev,
                    c_prev,
                    weights,
                    cache,
                } => {
                    let hidden = cache.i.len();
                    let in_dim = self.vals[x.0].len();
                    let c_new = &self.vals[idx].data()[hidden..];
                    let cd = self.vals[c_prev.0].data();
                    let mut dz = vec![0.0; 4 * hidden];
                    for j in 0..hidden {
                        let (gh, gc_direct) = (gy[j], gy[hidden + j]);
                        let tc = c_new[j].tanh();
                        let d_o = gh * tc;
                        let dc = gc_direct + gh * cache.o[j] * (1.0 - tc * tc);
                        let d_f = dc * cd[j];
                        let d_i = dc * cache.g[j];
                        let d_g = dc * cache.i[j];
                        grads[c_prev.0][j] += dc * cache.f[j];
                        dz[j] = d_i * cache.i[j] * (1.0 - cache.i[j]);
                        dz[hidden + j] = d_f * cache.f[j] * (1.0 - cache.f[j]);
                        dz[2 * hidden + j] = d_g * (1.0 - cache.g[j] * cache.g[j]);
                        dz[3 * hidden + j] = d_o * cache.o[j] * (1.0 - cache.o[j]);
                    }
                    let xd = self.vals[x.0].data();
                    let hd = self.vals[h_prev.0].data();
                    let wxd = self.vals[weights.wx.0].data();
                    let whd = self.vals[weights.wh.0].data();
                    for (r, &dzr) in dz.iter().enumerate() {
                        grads[weights.b.0][r] += dzr;
                        for j in 0..in_dim {
                            grads[weights.wx.0][r * in_dim + j] += dzr * xd[j];
                            grads[x.0][j] += dzr * wxd[r * in_dim + j];
                        }
                        for j in 0..hidden {
                            grads[weights.wh.0][r * hidden + j] += dzr * hd[j];
                            grads[h_prev.0][j] += dzr * whd[r * hidden + j];
                        }
                    }
                }
                Node::Attend {
                    query,
                    memory,
                    w_vc,
                    w_hc,
                    w_c,
                    cache,
                } => {
                    let h_dim = gy.len();
                    let a_dim = self.vals[w_c.0].len();
                    let wcd = self.vals[w_c.0].data();
                    let wvcd = self.vals[w_vc.0].data();
                    let whcd = self.vals[w_hc.0].data();
                    let qd = self.vals[query.0].data();
                    let q_dim = qd.len();
                    // dL/dalpha_k = g·v_k, then through the softmax Jacobian.
                    let d_alpha: Vec<f64> = memory
                        .iter()
                        .map(|m| {
                            self.vals[m.0]
                                .data()
                                .iter()
                                .zip(&gy)
                                .map(|(v, g)| v * g)
                                .sum()
                        })
                        .collect();
                    let inner: f64 = cache
                        .alpha
                        .iter()
                        .zip(&d_alpha)
                        .map(|(a, d)| a * d)
                        .sum();
                    for (k, &m) in memory.iter().enumerate() {
                        let ds = cache.alpha[k] * (d_alpha[k] - inner);
                        let th = &cache.tanh_a[k];
                        let vd = self.vals[m.0].data();
                        // direct context path
                        for j in 0..h_dim {
                            grads[m.0][j] += cache.alpha[k] * gy[j];
                        }
                        for r in 0..a_dim {
                            grads[w_c.0][r] += ds * th[r];
                            let da = ds * wcd[r] * (1.0 - th[r] * th[r]);
                            for j in 0..h_dim {
                                grads[w_vc.0][r * h_dim + j] += da * vd[j];
                                grads[m.0][j] += da * wvcd[r * h_dim + j];
                            }
                            for j in 0..q_dim {
                                grads[w_hc.0][r * q_dim + j] += da * qd[j];
                                grads[query.0][j] += da * whcd[r * q_dim + j];
                            }
                        }
                    }
                }
                Node::Softmax { z } => {
                    let y = self.vals[idx].data();
                    let inner: f64 = gy.iter().zip(y).map(|(g, p)| g * p).sum();
                    for (j, (&g, &p)) in gy.iter().zip(y).enumerate() {
                        grads[z.0][j] += p * (g - inner);
                    }
                }
                Node::SoftmaxCe {
                    logits,
                    target,
                    probs,
                } => {
                    let g = gy[0];
                    for (j, &p) in probs.iter().enumerate() {
                        let onehot = if j == *target { 1.0 } else { 0.0 };
                        grads[logits.0][j] += g * (p - onehot);
                    }
                }
                Node::Add { a, b } => {
                    for (j, &g) in gy.iter().enumerate() {
                        grads[a.0][j] += g;
                        grads[b.0][j] += g;
                    }
                }
                Node::Sub { a, b } => {
                    for (j, &g) in gy.iter().enumerate() {
                        grads[a.0][j] += g;
                        grads[b.0][j] -= g;
                    }
                }
                Node::Scale { x, k } => {
                    for (j, &g) in gy.iter().enumerate() {
                        grads[x.0][j] += g * k;
                    }
                }
                Node::AddConst { x } => {
                    for (j, &g) in gy.iter().enumerate() {
                        grads[x.0][j] += g;
                    }
                }
                Node::SumScalars { xs } => {
                    for &x in xs {
                        grads[x.0][0] += gy[0];
                    }
                }
                Node::Relu { x } => {
                    let xd = self.vals[x.0].data();
                    for (j, &g) in gy.iter().enumerate() {
                        if xd[j] > 0.0 {
                            grads[x.0][j] += g;
                        }
                    }
                }
                Node::Dot { a, b } => {
                    let g = gy[0];
                    let (ad, bd) = (self.vals[a.0].data(), self.vals[b.0].data());
                    for j in 0..ad.len() {
                        grads[a.0][j] += g * bd[j];
                        grads[b.0][j] += g * ad[j];
                    }
                }
                Node::L2Norm { x, norm } => {
                    let y = self.vals[idx].data();
                    let inner: f64 = gy.iter().zip(y).map(|(g, u)| g * u).sum();
                    for (j, (&g, &u)) in gy.iter().zip(y).enumerate() {
                        grads[x.0][j] += (g - inner * u) / norm;
                    }
                }
            }
        }

        for (idx, pid) in self.param_of.iter().enumerate() {
            if let Some(pid) = pid {
                let dst = store.grad_mut(*pid).data_mut();
                for (d, g) in dst.iter_mut().zip(&grads[idx]) {
                    *d += g;
                }
            }
        }
        Ok(())
    }
}
