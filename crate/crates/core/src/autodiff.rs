//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding
//! its output buffer plus whatever the backward rule needs (im2col columns,
//! attention probabilities, softmax outputs). [`Tape::backward`] walks the
//! nodes in reverse, accumulating gradients, and finally adds the gradients
//! of parameter leaves into the owning [`ParamSet`].
//!
//! Tensors are row-major. Sequence tensors are channels-first (`[C × N]`,
//! one column per token or sample); batch tensors used by the classifier are
//! rows-first (`[B × C]`).
//!
//! The tape is rebuilt every step; parameters persist in a `ParamSet`
//! between steps. Dropout records nothing in eval mode, so eval forward
//! passes are bit-deterministic.

use crate::element::{gemm_into, Element};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Handle to a persistent parameter tensor in a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named parameter tensor with a persistent gradient accumulator.
#[derive(Clone, Debug)]
pub struct ParamTensor<E: Element> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<E>,
    pub grad: Vec<E>,
    pub grad_written: bool,
}

/// Registry of all trainable tensors of a model, in insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<E: Element> {
    params: Vec<ParamTensor<E>>,
}

impl<E: Element> ParamSet<E> {
    pub fn new() -> Self {
        ParamSet { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, value: Vec<E>) -> ParamId {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, value.len(), "parameter data must match its shape");
        let id = ParamId(self.params.len());
        self.params.push(ParamTensor {
            name: name.into(),
            shape,
            grad: vec![E::zero(); value.len()],
            value,
            grad_written: false,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor<E> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor<E> {
        &mut self.params[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamTensor<E>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = E::zero());
            p.grad_written = false;
        }
    }

    /// True if every gradient entry of every parameter is finite.
    pub fn grads_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.grad.iter().all(|g| g.is_finite()))
    }
}

enum Op<E: Element> {
    Leaf {
        param: Option<ParamId>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, E),
    AddScalar(Var, E),
    Matmul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    /// `x[C×N] + b[C]` broadcast across columns.
    AddColBias(Var, Var),
    /// `x[B×C] + b[C]` broadcast across rows.
    AddRowBias(Var, Var),
    Conv1d {
        x: Var,
        w: Var,
        stride: usize,
        padding: usize,
        groups: usize,
        /// im2col buffer, one `[cin_g*k × l_out]` block per group.
        cols: Vec<E>,
    },
    Gelu(Var),
    GroupNorm {
        x: Var,
        gain: Var,
        bias: Var,
        groups: usize,
        eps: f64,
    },
    /// Per-column layer norm over the channel dimension of `[C×N]`.
    LayerNormCols {
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    },
    SoftmaxRows(Var),
    Dropout {
        x: Var,
        keep: Vec<bool>,
        scale: E,
    },
    /// Fused multi-head self-attention over `[D×N]` q/k/v projections.
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        /// Row-stochastic `[heads × N × N]` attention probabilities.
        probs: Vec<E>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<E>,
    },
    CosineSim {
        a: Var,
        b: Var,
        eps: f64,
    },
    /// Copy of `x` with masked columns overwritten by fixed fill values.
    /// Gradient flows to `x` only at unmasked columns.
    MaskFill {
        x: Var,
        masked_cols: Vec<bool>,
    },
    /// `[C*S × N] -> [C × N*S]`: per-token blocks laid out on a contiguous
    /// timeline (token j contributes samples j*S..(j+1)*S per channel).
    TokensToSignal {
        x: Var,
        channels: usize,
        samples_per_token: usize,
    },
    /// `[C×N] -> [C]` mean over columns.
    MeanOverCols(Var),
    /// k vectors `[C]` stacked into `[k×C]`.
    StackRows(Vec<Var>),
    Sum(Var),
    Mean(Var),
}

struct Node<E: Element> {
    data: Vec<E>,
    shape: Vec<usize>,
    grad: Option<Vec<E>>,
    needs_grad: bool,
    op: Op<E>,
}

/// Records a forward pass and computes gradients on demand.
pub struct Tape<E: Element> {
    nodes: Vec<Node<E>>,
    train: bool,
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            train: false,
        }
    }

    /// Training-mode tape: dropout is active.
    pub fn train() -> Self {
        Tape {
            nodes: Vec::new(),
            train: true,
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    fn push(&mut self, data: Vec<E>, shape: Vec<usize>, needs_grad: bool, op: Op<E>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let id = Var(self.nodes.len());
        self.nodes.push(Node {
            data,
            shape,
            grad: None,
            needs_grad,
            op,
        });
        id
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn data(&self, v: Var) -> &[E] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].data.len()
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> E {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    /// Gradient buffer of a node after `backward` has run.
    pub fn grad(&self, v: Var) -> Option<&[E]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Constant leaf (no gradient).
    pub fn constant(&mut self, data: Vec<E>, shape: Vec<usize>) -> Var {
        self.push(data, shape, false, Op::Leaf { param: None })
    }

    /// Leaf that tracks gradient but is not a registered parameter.
    pub fn input(&mut self, data: Vec<E>, shape: Vec<usize>) -> Var {
        self.push(data, shape, true, Op::Leaf { param: None })
    }

    /// Leaf bound to a persistent parameter; its gradient is added into the
    /// owning `ParamSet` by `backward`.
    pub fn param(&mut self, params: &ParamSet<E>, id: ParamId) -> Var {
        let p = params.get(id);
        self.push(
            p.value.clone(),
            p.shape.clone(),
            true,
            Op::Leaf { param: Some(id) },
        )
    }

    // ── elementwise and scalar ops ──────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dim(format!(
                "add: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data: Vec<E> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(data, shape, ng, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dim(format!(
                "mul: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data: Vec<E> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(data, shape, ng, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, alpha: E) -> Var {
        let data: Vec<E> = self.data(a).iter().map(|&x| x * alpha).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push(data, shape, ng, Op::Scale(a, alpha))
    }

    pub fn add_scalar(&mut self, a: Var, c: E) -> Var {
        let data: Vec<E> = self.data(a).iter().map(|&x| x + c).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push(data, shape, ng, Op::AddScalar(a, c))
    }

    // ── linear algebra ──────────────────────────────────────────────────

    /// `op(a) · op(b)` where `ta`/`tb` transpose the stored operand.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::Dim(format!("matmul needs 2-d operands: {sa:?}, {sb:?}")));
        }
        let (m, ka) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if ka != kb {
            return Err(Error::Dim(format!(
                "matmul inner extents disagree: {:?} (transposed: {ta}) vs {:?} (transposed: {tb})",
                sa, sb
            )));
        }
        let mut data = vec![E::zero(); m * n];
        gemm_into(&mut data, self.data(a), ta, self.data(b), tb, m, ka, n, E::zero());
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(
            data,
            vec![m, n],
            ng,
            Op::Matmul { a, b, ta, tb, m, k: ka, n },
        ))
    }

    /// `x[C×N] + b[C]`, bias broadcast along columns.
    pub fn add_col_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (c, n) = self.dims2(x)?;
        if self.numel(b) != c {
            return Err(Error::Dim(format!(
                "column bias length {} vs {} channels",
                self.numel(b),
                c
            )));
        }
        let mut data = self.data(x).to_vec();
        let bias = self.data(b);
        for ch in 0..c {
            let bv = bias[ch];
            for t in 0..n {
                data[ch * n + t] = data[ch * n + t] + bv;
            }
        }
        let ng = self.needs(x) || self.needs(b);
        Ok(self.push(data, vec![c, n], ng, Op::AddColBias(x, b)))
    }

    /// `x[B×C] + b[C]`, bias broadcast along rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (rows, c) = self.dims2(x)?;
        if self.numel(b) != c {
            return Err(Error::Dim(format!(
                "row bias length {} vs {} columns",
                self.numel(b),
                c
            )));
        }
        let mut data = self.data(x).to_vec();
        let bias = self.data(b);
        for r in 0..rows {
            for ch in 0..c {
                data[r * c + ch] = data[r * c + ch] + bias[ch];
            }
        }
        let ng = self.needs(x) || self.needs(b);
        Ok(self.push(data, vec![rows, c], ng, Op::AddRowBias(x, b)))
    }

    // ── convolution ─────────────────────────────────────────────────────

    /// Grouped 1-d convolution. `x: [C_in × L]`, `w: [C_out × C_in/groups × K]`.
    /// Zero padding `padding` on both ends; output length
    /// `(L + 2*padding - K) / stride + 1`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let (c_in, l) = self.dims2(x)?;
        let ws = self.shape(w);
        if ws.len() != 3 {
            return Err(Error::Dim(format!("conv weight must be 3-d, got {ws:?}")));
        }
        let (c_out, cin_g, k) = (ws[0], ws[1], ws[2]);
        if c_in % groups != 0 || c_out % groups != 0 || cin_g != c_in / groups {
            return Err(Error::Dim(format!(
                "conv1d grouping mismatch: x has {c_in} channels, weight {ws:?}, groups {groups}"
            )));
        }
        if stride == 0 {
            return Err(Error::Config("conv1d stride must be positive".into()));
        }
        let l_pad = l + 2 * padding;
        if l_pad < k {
            return Err(Error::InputTooShort {
                required: k.saturating_sub(2 * padding),
                got: l,
            });
        }
        let l_out = (l_pad - k) / stride + 1;
        let cout_g = c_out / groups;

        // im2col: per group a [cin_g*k × l_out] matrix, then one gemm per group.
        let col_rows = cin_g * k;
        let mut cols = vec![E::zero(); groups * col_rows * l_out];
        {
            let xd = self.data(x);
            for g in 0..groups {
                let base = g * col_rows * l_out;
                for cg in 0..cin_g {
                    let ch = g * cin_g + cg;
                    let row_x = &xd[ch * l..(ch + 1) * l];
                    for kk in 0..k {
                        let row = base + (cg * k + kk) * l_out;
                        for t in 0..l_out {
                            let src = t * stride + kk;
                            cols[row + t] = if src < padding || src >= padding + l {
                                E::zero()
                            } else {
                                row_x[src - padding]
                            };
                        }
                    }
                }
            }
        }
        let mut data = vec![E::zero(); c_out * l_out];
        {
            let wd = self.data(w);
            for g in 0..groups {
                let wg = &wd[g * cout_g * col_rows..(g + 1) * cout_g * col_rows];
                let cg = &cols[g * col_rows * l_out..(g + 1) * col_rows * l_out];
                let out = &mut data[g * cout_g * l_out..(g + 1) * cout_g * l_out];
                gemm_into(out, wg, false, cg, false, cout_g, col_rows, l_out, E::zero());
            }
        }
        let ng = self.needs(x) || self.needs(w);
        Ok(self.push(
            data,
            vec![c_out, l_out],
            ng,
            Op::Conv1d {
                x,
                w,
                stride,
                padding,
                groups,
                cols,
            },
        ))
    }

    // ── activations / normalization ─────────────────────────────────────

    /// GELU, tanh approximation:
    /// `0.5·x·(1 + tanh(√(2/π)(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let data: Vec<E> = self
            .data(x)
            .iter()
            .map(|&v| E::from_f64(gelu_f64(v.to_f64())))
            .collect();
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x);
        self.push(data, shape, ng, Op::Gelu(x))
    }

    /// Group normalization over `[C×L]`: statistics per group of channels
    /// across all positions, then per-channel affine.
    pub fn group_norm(&mut self, x: Var, gain: Var, bias: Var, groups: usize, eps: f64) -> Result<Var> {
        let (c, l) = self.dims2(x)?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::Config(format!(
                "group_norm: {c} channels not divisible by {groups} groups"
            )));
        }
        if self.numel(gain) != c || self.numel(bias) != c {
            return Err(Error::Dim(format!(
                "group_norm affine must have {c} entries, got gain {} / bias {}",
                self.numel(gain),
                self.numel(bias)
            )));
        }
        let cg = c / groups;
        let mut data = vec![E::zero(); c * l];
        {
            let xd = self.data(x);
            let gd = self.data(gain);
            let bd = self.data(bias);
            for g in 0..groups {
                let lo = g * cg * l;
                let hi = (g + 1) * cg * l;
                let slice = &xd[lo..hi];
                let m = slice.len() as f64;
                let mean: f64 = slice.iter().map(|v| v.to_f64()).sum::<f64>() / m;
                let var: f64 = slice
                    .iter()
                    .map(|v| {
                        let d = v.to_f64() - mean;
                        d * d
                    })
                    .sum::<f64>()
                    / m;
                let inv_std = 1.0 / (var + eps).sqrt();
                for cc in 0..cg {
                    let ch = g * cg + cc;
                    let (gv, bv) = (gd[ch].to_f64(), bd[ch].to_f64());
                    for t in 0..l {
                        let idx = ch * l + t;
                        let xh = (xd[idx].to_f64() - mean) * inv_std;
                        data[idx] = E::from_f64(xh * gv + bv);
                    }
                }
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            data,
            vec![c, l],
            ng,
            Op::GroupNorm {
                x,
                gain,
                bias,
                groups,
                eps,
            },
        ))
    }

    /// Layer norm applied per column of `[C×N]` (each token's feature
    /// vector is normalized over the channel dimension).
    pub fn layer_norm_cols(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (c, n) = self.dims2(x)?;
        if self.numel(gain) != c || self.numel(bias) != c {
            return Err(Error::Dim(format!(
                "layer_norm affine must have {c} entries, got gain {} / bias {}",
                self.numel(gain),
                self.numel(bias)
            )));
        }
        let mut data = vec![E::zero(); c * n];
        {
            let xd = self.data(x);
            let gd = self.data(gain);
            let bd = self.data(bias);
            for t in 0..n {
                let mut sum = 0.0;
                for ch in 0..c {
                    sum += xd[ch * n + t].to_f64();
                }
                let mean = sum / c as f64;
                let mut var = 0.0;
                for ch in 0..c {
                    let d = xd[ch * n + t].to_f64() - mean;
                    var += d * d;
                }
                var /= c as f64;
                let inv_std = 1.0 / (var + eps).sqrt();
                for ch in 0..c {
                    let idx = ch * n + t;
                    let xh = (xd[idx].to_f64() - mean) * inv_std;
                    data[idx] = E::from_f64(xh * gd[ch].to_f64() + bd[ch].to_f64());
                }
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(data, vec![c, n], ng, Op::LayerNormCols { x, gain, bias, eps }))
    }

    /// Row-wise softmax of a `[R×C]` tensor.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        let mut data = vec![E::zero(); r * c];
        softmax_rows_into(&mut data, self.data(x), r, c);
        let ng = self.needs(x);
        Ok(self.push(data, vec![r, c], ng, Op::SoftmaxRows(x)))
    }

    /// Inverted dropout. Identity (records nothing) in eval mode or at p=0.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} not in [0, 1)")));
        }
        if !self.train || p == 0.0 {
            return Ok(x);
        }
        let n = self.numel(x);
        let keep: Vec<bool> = (0..n).map(|_| rng.uniform_f64() >= p).collect();
        let scale = E::from_f64(1.0 / (1.0 - p));
        let data: Vec<E> = self
            .data(x)
            .iter()
            .zip(&keep)
            .map(|(&v, &kp)| if kp { v * scale } else { E::zero() })
            .collect();
        let shape = self.shape(x).to_vec();
        let ng = self.needs(x);
        Ok(self.push(data, shape, ng, Op::Dropout { x, keep, scale }))
    }

    // ── attention ───────────────────────────────────────────────────────

    /// Fused multi-head self-attention. `q`, `k`, `v` are `[D×N]` with `D`
    /// divisible by `heads`; rows `h·dh..(h+1)·dh` form head `h`. Scores are
    /// scaled by `1/√dh` and soft-maxed over key positions.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (d, n) = self.dims2(q)?;
        if self.shape(k) != [d, n] || self.shape(v) != [d, n] {
            return Err(Error::Dim(format!(
                "attention q/k/v shapes disagree: {:?} {:?} {:?}",
                self.shape(q),
                self.shape(k),
                self.shape(v)
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "attention: dim {d} not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = E::from_f64(1.0 / (dh as f64).sqrt());
        let mut probs = vec![E::zero(); heads * n * n];
        let mut data = vec![E::zero(); d * n];
        {
            let qd = self.data(q);
            let kd = self.data(k);
            let vd = self.data(v);
            let mut scores = vec![E::zero(); n * n];
            for h in 0..heads {
                let qs = &qd[h * dh * n..(h + 1) * dh * n];
                let ks = &kd[h * dh * n..(h + 1) * dh * n];
                let vs = &vd[h * dh * n..(h + 1) * dh * n];
                // scores[i,j] = (q_col_i · k_col_j) / √dh  →  Qhᵀ·Kh
                gemm_into(&mut scores, qs, true, ks, false, n, dh, n, E::zero());
                for s in scores.iter_mut() {
                    *s = *s * scale;
                }
                let p = &mut probs[h * n * n..(h + 1) * n * n];
                softmax_rows_into(p, &scores, n, n);
                // out_col_i = Σ_j p[i,j]·v_col_j  →  Vh·Pᵀ
                let out = &mut data[h * dh * n..(h + 1) * dh * n];
                gemm_into(out, vs, false, p, true, dh, n, n, E::zero());
            }
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(data, vec![d, n], ng, Op::Attention { q, k, v, heads, probs }))
    }

    /// Attention probabilities `[heads × N × N]` recorded by an
    /// [`Tape::attention`] node.
    pub fn attention_probs(&self, att: Var) -> Result<(usize, usize, Vec<E>)> {
        match &self.nodes[att.0].op {
            Op::Attention { heads, probs, .. } => {
                let n = self.nodes[att.0].shape[1];
                Ok((*heads, n, probs.clone()))
            }
            _ => Err(Error::Contract(
                "attention_probs: node is not an attention output".into(),
            )),
        }
    }

    // ── losses ──────────────────────────────────────────────────────────

    /// Mean negative log softmax-probability of the true class.
    /// `logits: [B×C]`, one label per row.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.dims2(logits)?;
        if labels.len() != b {
            return Err(Error::Dim(format!(
                "cross_entropy: {} labels for {b} rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Data(format!(
                "cross_entropy: label {bad} out of range for {c} classes"
            )));
        }
        let mut probs = vec![E::zero(); b * c];
        softmax_rows_into(&mut probs, self.data(logits), b, c);
        let mut loss = 0.0;
        for (r, &lbl) in labels.iter().enumerate() {
            loss -= probs[r * c + lbl].to_f64().max(f64::MIN_POSITIVE).ln();
        }
        loss /= b as f64;
        let ng = self.needs(logits);
        Ok(self.push(
            vec![E::from_f64(loss)],
            vec![1],
            ng,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Cosine similarity of two flattened tensors, denominator guarded by
    /// `max(‖a‖·‖b‖, eps)`.
    pub fn cosine_sim(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        if self.numel(a) != self.numel(b) {
            return Err(Error::Dim(format!(
                "cosine_sim: lengths {} vs {}",
                self.numel(a),
                self.numel(b)
            )));
        }
        let (dot, na2, nb2) = dot_norms(self.data(a), self.data(b));
        let denom = (na2.sqrt() * nb2.sqrt()).max(eps);
        let cos = dot / denom;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![E::from_f64(cos)], vec![1], ng, Op::CosineSim { a, b, eps }))
    }

    // ── masking / reshaping ─────────────────────────────────────────────

    /// Replace the listed columns of `x: [C×N]` with the given fill values
    /// (`fill[i]` is the `[C]` column for the i-th masked index). Gradient
    /// does not flow to `x` at masked columns.
    pub fn mask_fill(&mut self, x: Var, masked: &[usize], fill: &[Vec<E>]) -> Result<Var> {
        let (c, n) = self.dims2(x)?;
        if masked.len() != fill.len() {
            return Err(Error::Contract(format!(
                "mask_fill: {} indices but {} fill columns",
                masked.len(),
                fill.len()
            )));
        }
        let mut data = self.data(x).to_vec();
        let mut masked_cols = vec![false; n];
        for (&t, col) in masked.iter().zip(fill) {
            if t >= n {
                return Err(Error::Contract(format!(
                    "mask_fill: index {t} out of range for {n} tokens"
                )));
            }
            if col.len() != c {
                return Err(Error::Dim(format!(
                    "mask_fill: fill column has {} entries, expected {c}",
                    col.len()
                )));
            }
            masked_cols[t] = true;
            for ch in 0..c {
                data[ch * n + t] = col[ch];
            }
        }
        let ng = self.needs(x);
        Ok(self.push(data, vec![c, n], ng, Op::MaskFill { x, masked_cols }))
    }

    /// `[C·S × N] -> [C × N·S]`: unfold each token's stacked block onto the
    /// signal timeline.
    pub fn tokens_to_signal(&mut self, x: Var, channels: usize, samples_per_token: usize) -> Result<Var> {
        let (rows, n) = self.dims2(x)?;
        if rows != channels * samples_per_token {
            return Err(Error::Dim(format!(
                "tokens_to_signal: {rows} rows != {channels}·{samples_per_token}"
            )));
        }
        let l = n * samples_per_token;
        let mut data = vec![E::zero(); channels * l];
        {
            let xd = self.data(x);
            for ch in 0..channels {
                for t in 0..n {
                    for s in 0..samples_per_token {
                        data[ch * l + t * samples_per_token + s] =
                            xd[(ch * samples_per_token + s) * n + t];
                    }
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(
            data,
            vec![channels, l],
            ng,
            Op::TokensToSignal {
                x,
                channels,
                samples_per_token,
            },
        ))
    }

    /// Mean over columns: `[C×N] -> [C]`.
    pub fn mean_over_cols(&mut self, x: Var) -> Result<Var> {
        let (c, n) = self.dims2(x)?;
        let xd = self.data(x);
        let mut data = vec![E::zero(); c];
        for ch in 0..c {
            let sum: f64 = xd[ch * n..(ch + 1) * n].iter().map(|v| v.to_f64()).sum();
            data[ch] = E::from_f64(sum / n as f64);
        }
        let ng = self.needs(x);
        Ok(self.push(data, vec![c], ng, Op::MeanOverCols(x)))
    }

    /// Stack `k` vectors of equal length into a `[k×C]` matrix.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("stack_rows: empty input".into()));
        }
        let c = self.numel(parts[0]);
        let mut data = Vec::with_capacity(parts.len() * c);
        let mut ng = false;
        for &p in parts {
            if self.numel(p) != c {
                return Err(Error::Dim(format!(
                    "stack_rows: lengths {} vs {c}",
                    self.numel(p)
                )));
            }
            data.extend_from_slice(self.data(p));
            ng |= self.needs(p);
        }
        Ok(self.push(data, vec![parts.len(), c], ng, Op::StackRows(parts.to_vec())))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).iter().map(|v| v.to_f64()).sum();
        let ng = self.needs(x);
        self.push(vec![E::from_f64(s)], vec![1], ng, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.numel(x) as f64;
        let s: f64 = self.data(x).iter().map(|v| v.to_f64()).sum();
        let ng = self.needs(x);
        self.push(vec![E::from_f64(s / n)], vec![1], ng, Op::Mean(x))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Node gradients are reset at the
    /// start of every call; parameter gradients in `params` accumulate
    /// across calls until `ParamSet::zero_grad`.
    pub fn backward(&mut self, loss: Var, params: &mut ParamSet<E>) -> Result<()> {
        if self.numel(loss) != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![E::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            self.apply_backward(i, &grad, params)?;
            self.nodes[i].grad = Some(grad);
        }
        Ok(())
    }

    fn ensure_grad(&mut self, v: Var) -> &mut Vec<E> {
        let n = self.nodes[v.0].data.len();
        self.nodes[v.0].grad.get_or_insert_with(|| vec![E::zero(); n])
    }

    fn accumulate(&mut self, v: Var, delta: &[E]) {
        if !self.needs(v) {
            return;
        }
        let g = self.ensure_grad(v);
        for (gi, &d) in g.iter_mut().zip(delta) {
            *gi = *gi + d;
        }
    }

    fn apply_backward(&mut self, i: usize, grad: &[E], params: &mut ParamSet<E>) -> Result<()> {
        // Ops are matched by value where cheap; buffers needed for the rule
        // are borrowed via split indices to appease the borrow checker.
        match &self.nodes[i].op {
            Op::Leaf { param } => {
                if let Some(id) = *param {
                    let p = params.get_mut(id);
                    for (pg, &g) in p.grad.iter_mut().zip(grad) {
                        *pg = *pg + g;
                    }
                    p.grad_written = true;
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(a, grad);
                self.accumulate(b, grad);
            }
            &Op::Mul(a, b) => {
                let da: Vec<E> = grad
                    .iter()
                    .zip(self.data(b))
                    .map(|(&g, &bv)| g * bv)
                    .collect();
                let db: Vec<E> = grad
                    .iter()
                    .zip(self.data(a))
                    .map(|(&g, &av)| g * av)
                    .collect();
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            &Op::Scale(a, alpha) => {
                let da: Vec<E> = grad.iter().map(|&g| g * alpha).collect();
                self.accumulate(a, &da);
            }
            &Op::AddScalar(a, _) => {
                self.accumulate(a, grad);
            }
            &Op::Matmul { a, b, ta, tb, m, k, n } => {
                // Effective C = A·B. dA = dC·Bᵀ, dB = Aᵀ·dC, mapped back
                // through the storage transposes.
                if self.needs(a) {
                    let mut da = vec![E::zero(); m * k];
                    if ta {
                        // stored a is k×m: da_stored = B_eff · dCᵀ
                        gemm_into(&mut da, self.data(b), tb, grad, true, k, n, m, E::zero());
                    } else {
                        gemm_into(&mut da, grad, false, self.data(b), !tb, m, n, k, E::zero());
                    }
                    self.accumulate(a, &da);
                }
                if self.needs(b) {
                    let mut db = vec![E::zero(); k * n];
                    if tb {
                        // stored b is n×k: db_stored = dCᵀ · A_eff
                        gemm_into(&mut db, grad, true, self.data(a), ta, n, m, k, E::zero());
                    } else {
                        gemm_into(&mut db, self.data(a), !ta, grad, false, k, m, n, E::zero());
                    }
                    self.accumulate(b, &db);
                }
            }
            &Op::AddColBias(x, b) => {
                let n = self.shape(x)[1];
                let c = self.shape(x)[0];
                self.accumulate(x, grad);
                if self.needs(b) {
                    let mut db = vec![E::zero(); c];
                    for ch in 0..c {
                        let mut s = 0.0;
                        for t in 0..n {
                            s += grad[ch * n + t].to_f64();
                        }
                        db[ch] = E::from_f64(s);
                    }
                    self.accumulate(b, &db);
                }
            }
            &Op::AddRowBias(x, b) => {
                let rows = self.shape(x)[0];
                let c = self.shape(x)[1];
                self.accumulate(x, grad);
                if self.needs(b) {
                    let mut db = vec![E::zero(); c];
                    for r in 0..rows {
                        for ch in 0..c {
                            db[ch] = db[ch] + grad[r * c + ch];
                        }
                    }
                    self.accumulate(b, &db);
                }
            }
            Op::Conv1d {
                x,
                w,
                stride,
                padding,
                groups,
                ..
            } => {
                let (x, w, stride, padding, groups) = (*x, *w, *stride, *padding, *groups);
                let (c_in, l) = (self.shape(x)[0], self.shape(x)[1]);
                let ws = self.shape(w).to_vec();
                let (c_out, cin_g, k) = (ws[0], ws[1], ws[2]);
                let cout_g = c_out / groups;
                let l_out = self.shape(Var(i))[1];
                let col_rows = cin_g * k;

                if self.needs(w) {
                    let Op::Conv1d { cols, .. } = &self.nodes[i].op else {
                        unreachable!()
                    };
                    let mut dw = vec![E::zero(); c_out * col_rows];
                    for g in 0..*groups {
                        let dout = &grad[g * cout_g * l_out..(g + 1) * cout_g * l_out];
                        let cg = &cols[g * col_rows * l_out..(g + 1) * col_rows * l_out];
                        let dwg = &mut dw[g * cout_g * col_rows..(g + 1) * cout_g * col_rows];
                        // dW_g = dOut_g · cols_gᵀ
                        gemm_into(dwg, dout, false, cg, true, cout_g, l_out, col_rows, E::zero());
                    }
                    self.accumulate(w, &dw);
                }
                if self.needs(x) {
                    let wd = self.data(w).to_vec();
                    let mut dx = vec![E::zero(); c_in * l];
                    let mut dcols = vec![E::zero(); col_rows * l_out];
                    for g in 0..groups {
                        let dout = &grad[g * cout_g * l_out..(g + 1) * cout_g * l_out];
                        let wg = &wd[g * cout_g * col_rows..(g + 1) * cout_g * col_rows];
                        // dcols_g = W_gᵀ · dOut_g
                        gemm_into(&mut dcols, wg, true, dout, false, col_rows, cout_g, l_out, E::zero());
                        // col2im scatter-add, skipping padding positions.
                        for cg in 0..cin_g {
                            let ch = g * cin_g + cg;
                            for kk in 0..k {
                                let row = (cg * k + kk) * l_out;
                                for t in 0..l_out {
                                    let src = t * stride + kk;
                                    if src >= padding && src < padding + l {
                                        let idx = ch * l + (src - padding);
                                        dx[idx] = dx[idx] + dcols[row + t];
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(x, &dx);
                }
            }
            &Op::Gelu(x) => {
                let dx: Vec<E> = grad
                    .iter()
                    .zip(self.data(x))
                    .map(|(&g, &v)| E::from_f64(g.to_f64() * gelu_grad_f64(v.to_f64())))
                    .collect();
                self.accumulate(x, &dx);
            }
            &Op::GroupNorm {
                x,
                gain,
                bias,
                groups,
                eps,
            } => {
                let (c, l) = (self.shape(x)[0], self.shape(x)[1]);
                let cg = c / groups;
                let xd = self.data(x).to_vec();
                let gd = self.data(gain).to_vec();
                let mut dx = vec![E::zero(); c * l];
                let mut dgain = vec![E::zero(); c];
                let mut dbias = vec![E::zero(); c];
                for g in 0..groups {
                    let lo = g * cg * l;
                    let hi = (g + 1) * cg * l;
                    let m = (hi - lo) as f64;
                    let mean: f64 = xd[lo..hi].iter().map(|v| v.to_f64()).sum::<f64>() / m;
                    let var: f64 = xd[lo..hi]
                        .iter()
                        .map(|v| {
                            let d = v.to_f64() - mean;
                            d * d
                        })
                        .sum::<f64>()
                        / m;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    // dxhat = g·gain; dx = inv_std/m · (m·dxhat − Σdxhat − xhat·Σ(dxhat·xhat))
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for cc in 0..cg {
                        let ch = g * cg + cc;
                        for t in 0..l {
                            let idx = ch * l + t;
                            let xh = (xd[idx].to_f64() - mean) * inv_std;
                            let dxh = grad[idx].to_f64() * gd[ch].to_f64();
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh;
                            dgain[ch] = dgain[ch] + E::from_f64(grad[idx].to_f64() * xh);
                            dbias[ch] = dbias[ch] + grad[idx];
                        }
                    }
                    for cc in 0..cg {
                        let ch = g * cg + cc;
                        for t in 0..l {
                            let idx = ch * l + t;
                            let xh = (xd[idx].to_f64() - mean) * inv_std;
                            let dxh = grad[idx].to_f64() * gd[ch].to_f64();
                            dx[idx] = E::from_f64(
                                inv_std / m * (m * dxh - sum_dxh - xh * sum_dxh_xh),
                            );
                        }
                    }
                }
                self.accumulate(x, &dx);
                self.accumulate(gain, &dgain);
                self.accumulate(bias, &dbias);
            }
            &Op::LayerNormCols { x, gain, bias, eps } => {
                let (c, n) = (self.shape(x)[0], self.shape(x)[1]);
                let xd = self.data(x).to_vec();
                let gd = self.data(gain).to_vec();
                let mut dx = vec![E::zero(); c * n];
                let mut dgain = vec![E::zero(); c];
                let mut dbias = vec![E::zero(); c];
                let m = c as f64;
                for t in 0..n {
                    let mut sum = 0.0;
                    for ch in 0..c {
                        sum += xd[ch * n + t].to_f64();
                    }
                    let mean = sum / m;
                    let mut var = 0.0;
                    for ch in 0..c {
                        let d = xd[ch * n + t].to_f64() - mean;
                        var += d * d;
                    }
                    var /= m;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for ch in 0..c {
                        let idx = ch * n + t;
                        let xh = (xd[idx].to_f64() - mean) * inv_std;
                        let dxh = grad[idx].to_f64() * gd[ch].to_f64();
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh;
                        dgain[ch] = dgain[ch] + E::from_f64(grad[idx].to_f64() * xh);
                        dbias[ch] = dbias[ch] + grad[idx];
                    }
                    for ch in 0..c {
                        let idx = ch * n + t;
                        let xh = (xd[idx].to_f64() - mean) * inv_std;
                        let dxh = grad[idx].to_f64() * gd[ch].to_f64();
                        dx[idx] =
                            E::from_f64(inv_std / m * (m * dxh - sum_dxh - xh * sum_dxh_xh));
                    }
                }
                self.accumulate(x, &dx);
                self.accumulate(gain, &dgain);
                self.accumulate(bias, &dbias);
            }
            &Op::SoftmaxRows(x) => {
                let (r, c) = (self.shape(Var(i))[0], self.shape(Var(i))[1]);
                let out = self.nodes[i].data.clone();
                let mut dx = vec![E::zero(); r * c];
                softmax_backward_rows(&mut dx, &out, grad, r, c);
                self.accumulate(x, &dx);
            }
            Op::Dropout { x, keep, scale } => {
                let (x, scale) = (*x, *scale);
                let dx: Vec<E> = grad
                    .iter()
                    .zip(keep)
                    .map(|(&g, &kp)| if kp { g * scale } else { E::zero() })
                    .collect();
                self.accumulate(x, &dx);
            }
            &Op::Attention { q, k, v, heads, .. } => {
                let (d, n) = (self.shape(q)[0], self.shape(q)[1]);
                let dh = d / heads;
                let scale = E::from_f64(1.0 / (dh as f64).sqrt());
                let Op::Attention { probs, .. } = &self.nodes[i].op else {
                    unreachable!()
                };
                let probs = probs.clone();
                let qd = self.data(q).to_vec();
                let kd = self.data(k).to_vec();
                let vd = self.data(v).to_vec();
                let mut dq = vec![E::zero(); d * n];
                let mut dk = vec![E::zero(); d * n];
                let mut dv = vec![E::zero(); d * n];
                let mut dprobs = vec![E::zero(); n * n];
                let mut dscores = vec![E::zero(); n * n];
                for h in 0..heads {
                    let rows = h * dh * n..(h + 1) * dh * n;
                    let dout = &grad[rows.clone()];
                    let p = &probs[h * n * n..(h + 1) * n * n];
                    // dP = dOutᵀ·Vh ; dVh = dOut·P
                    gemm_into(&mut dprobs, dout, true, &vd[rows.clone()], false, n, dh, n, E::zero());
                    // dprobs currently holds (dOutᵀ·Vh)ᵀ? No: rows of dprobs
                    // must be query index i: dP[i,j] = Σ_d dOut[d,i]·V[d,j].
                    gemm_into(&mut dv[rows.clone()], dout, false, p, false, dh, n, n, E::zero());
                    softmax_backward_rows(&mut dscores, p, &dprobs, n, n);
                    for s in dscores.iter_mut() {
                        *s = *s * scale;
                    }
                    // dQh = Kh·dSᵀ ; dKh = Qh·dS
                    gemm_into(&mut dq[rows.clone()], &kd[rows.clone()], false, &dscores, true, dh, n, n, E::zero());
                    gemm_into(&mut dk[rows.clone()], &qd[rows.clone()], false, &dscores, false, dh, n, n, E::zero());
                }
                self.accumulate(q, &dq);
                self.accumulate(k, &dk);
                self.accumulate(v, &dv);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let logits = *logits;
                let (b, c) = (self.shape(logits)[0], self.shape(logits)[1]);
                let g = grad[0].to_f64() / b as f64;
                let mut dl = vec![E::zero(); b * c];
                for (r, &lbl) in labels.iter().enumerate() {
                    for cc in 0..c {
                        let p = probs[r * c + cc].to_f64();
                        let target = if cc == lbl { 1.0 } else { 0.0 };
                        dl[r * c + cc] = E::from_f64(g * (p - target));
                    }
                }
                self.accumulate(logits, &dl);
            }
            &Op::CosineSim { a, b, eps } => {
                let (dot, na2, nb2) = dot_norms(self.data(a), self.data(b));
                let (na, nb) = (na2.sqrt(), nb2.sqrt());
                let g = grad[0].to_f64();
                let denom = (na * nb).max(eps);
                let clamped = na * nb < eps;
                let ad = self.data(a).to_vec();
                let bd = self.data(b).to_vec();
                // d/da [a·b/denom]; when the guard clamps, denom is constant.
                let mut da = vec![E::zero(); ad.len()];
                let mut db = vec![E::zero(); bd.len()];
                for idx in 0..ad.len() {
                    let (av, bv) = (ad[idx].to_f64(), bd[idx].to_f64());
                    if clamped {
                        da[idx] = E::from_f64(g * bv / denom);
                        db[idx] = E::from_f64(g * av / denom);
                    } else {
                        da[idx] = E::from_f64(g * (bv / denom - dot * av / (na2 * denom)));
                        db[idx] = E::from_f64(g * (av / denom - dot * bv / (nb2 * denom)));
                    }
                }
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::MaskFill { x, masked_cols } => {
                let x = *x;
                let (c, n) = (self.shape(x)[0], self.shape(x)[1]);
                let Op::MaskFill { masked_cols, .. } = &self.nodes[i].op else {
                    unreachable!()
                };
                let mut dx = grad.to_vec();
                for t in 0..n {
                    if masked_cols[t] {
                        for ch in 0..c {
                            dx[ch * n + t] = E::zero();
                        }
                    }
                }
                let _ = masked_cols;
                self.accumulate(x, &dx);
            }
            &Op::TokensToSignal {
                x,
                channels,
                samples_per_token,
            } => {
                let n = self.shape(x)[1];
                let l = n * samples_per_token;
                let mut dx = vec![E::zero(); channels * samples_per_token * n];
                for ch in 0..channels {
                    for t in 0..n {
                        for s in 0..samples_per_token {
                            dx[(ch * samples_per_token + s) * n + t] =
                                grad[ch * l + t * samples_per_token + s];
                        }
                    }
                }
                self.accumulate(x, &dx);
            }
            &Op::MeanOverCols(x) => {
                let (c, n) = (self.shape(x)[0], self.shape(x)[1]);
                let inv = E::from_f64(1.0 / n as f64);
                let mut dx = vec![E::zero(); c * n];
                for ch in 0..c {
                    let g = grad[ch] * inv;
                    for t in 0..n {
                        dx[ch * n + t] = g;
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::StackRows(parts) => {
                let parts = parts.clone();
                let c = self.numel(parts[0]);
                for (r, &p) in parts.iter().enumerate() {
                    self.accumulate(p, &grad[r * c..(r + 1) * c]);
                }
            }
            &Op::Sum(x) => {
                let g = grad[0];
                let dx = vec![g; self.numel(x)];
                self.accumulate(x, &dx);
            }
            &Op::Mean(x) => {
                let g = grad[0] * E::from_f64(1.0 / self.numel(x) as f64);
                let dx = vec![g; self.numel(x)];
                self.accumulate(x, &dx);
            }
        }
        Ok(())
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() == 2 {
            Ok((s[0], s[1]))
        } else {
            Err(Error::Dim(format!("expected 2-d tensor, got shape {s:?}")))
        }
    }
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Tape::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // √(2/π)
const GELU_A: f64 = 0.044715;

fn gelu_f64(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_f64(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    let d_inner = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner
}

/// Row-wise softmax with f64 accumulation and max-subtraction.
fn softmax_rows_into<E: Element>(out: &mut [E], x: &[E], rows: usize, cols: usize) {
    debug_assert_eq!(out.len(), rows * cols);
    debug_assert_eq!(x.len(), rows * cols);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mx = row
            .iter()
            .map(|v| v.to_f64())
            .fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            let e = (v.to_f64() - mx).exp();
            denom += e;
            *o = E::from_f64(e);
        }
        for o in out[r * cols..(r + 1) * cols].iter_mut() {
            *o = E::from_f64(o.to_f64() / denom);
        }
    }
}

/// Row-wise softmax Jacobian-vector product:
/// `ds_j = p_j (dp_j − Σ_l dp_l p_l)` per row.
fn softmax_backward_rows<E: Element>(
    dscores: &mut [E],
    probs: &[E],
    dprobs: &[E],
    rows: usize,
    cols: usize,
) {
    for r in 0..rows {
        let p = &probs[r * cols..(r + 1) * cols];
        let dp = &dprobs[r * cols..(r + 1) * cols];
        let dot: f64 = p
            .iter()
            .zip(dp)
            .map(|(&pv, &dv)| pv.to_f64() * dv.to_f64())
            .sum();
        for c in 0..cols {
            dscores[r * cols + c] =
                E::from_f64(p[c].to_f64() * (dp[c].to_f64() - dot));
        }
    }
}

/// Dot product and squared norms with f64 accumulation.
fn dot_norms<E: Element>(a: &[E], b: &[E]) -> (f64, f64, f64) {
    let mut dot = 0.0;
    let mut na2 = 0.0;
    let mut nb2 = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let (xf, yf) = (x.to_f64(), y.to_f64());
        dot += xf * yf;
        na2 += xf * xf;
        nb2 += yf * yf;
    }
    (dot, na2, nb2)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    #[test]
    fn matmul_identity() {
        let mut t: Tape<f64> = Tape::new();
        let i2 = t.constant(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]);
        let j2 = t.constant(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]);
        let c = t.matmul(i2, j2, false, false).unwrap();
        assert_eq!(t.data(c), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn matmul_hand_example() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.constant(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]);
        let b = t.constant(vec![0.0, 1.0], vec![2, 1]);
        let c = t.matmul(a, b, false, false).unwrap();
        assert_eq!(t.data(c), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.constant(vec![0.0; 6], vec![2, 3]);
        let b = t.constant(vec![0.0; 8], vec![4, 2]);
        let err = t.matmul(a, b, false, false).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn conv1d_hand_example() {
        // x = [1,1,1,1] (1 ch), w = [1,1] (1→1 ch), stride 2 → [2,2]
        let mut t: Tape<f64> = Tape::new();
        let x = t.constant(vec![1.0, 1.0, 1.0, 1.0], vec![1, 4]);
        let w = t.constant(vec![1.0, 1.0], vec![1, 1, 2]);
        let y = t.conv1d(x, w, 2, 0, 1).unwrap();
        assert_eq!(t.shape(y), &[1, 2]);
        assert_eq!(t.data(y), &[2.0, 2.0]);
    }

    #[test]
    fn conv1d_length_arithmetic() {
        let mut t: Tape<f32> = Tape::new();
        let x = t.constant(vec![0.0; 3000], vec![1, 3000]);
        let w = t.constant(vec![0.0; 3], vec![1, 1, 3]);
        let y = t.conv1d(x, w, 3, 0, 1).unwrap();
        assert_eq!(t.shape(y), &[1, 1000]);
    }

    #[test]
    fn conv1d_input_too_short() {
        let mut t: Tape<f32> = Tape::new();
        let x = t.constant(vec![0.0; 2], vec![1, 2]);
        let w = t.constant(vec![0.0; 3], vec![1, 1, 3]);
        assert!(matches!(
            t.conv1d(x, w, 1, 0, 1),
            Err(Error::InputTooShort { .. })
        ));
    }

    #[test]
    fn gelu_anchor_values() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.constant(vec![0.0, 3.0], vec![2]);
        let y = t.gelu(x);
        assert_eq!(t.data(y)[0], 0.0);
        // x·Φ(x) at 3 ≈ 2.9964 up to the tanh approximation's error.
        assert!((t.data(y)[1] - 2.9964).abs() < 1e-3, "{}", t.data(y)[1]);
    }

    #[test]
    fn softmax_uniform_row() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.constant(vec![0.0, 0.0, 0.0], vec![1, 3]);
        let y = t.softmax_rows(x).unwrap();
        for &v in t.data(y) {
            assert!(close(v, 1.0 / 3.0, 1e-12));
        }
    }

    #[test]
    fn dropout_p_zero_is_identity() {
        let mut t: Tape<f32> = Tape::train();
        let mut rng = Rng::from_seed(0);
        let x = t.constant(vec![1.0, 2.0, 3.0], vec![3]);
        let y = t.dropout(x, 0.0, &mut rng).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_rejects_bad_probability() {
        let mut t: Tape<f32> = Tape::train();
        let mut rng = Rng::from_seed(0);
        let x = t.constant(vec![1.0], vec![1]);
        assert!(matches!(t.dropout(x, 1.0, &mut rng), Err(Error::Config(_))));
        assert!(matches!(t.dropout(x, -0.1, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn dropout_eval_mode_is_identity() {
        let mut t: Tape<f32> = Tape::new();
        let mut rng = Rng::from_seed(0);
        let x = t.constant(vec![1.0, 2.0], vec![2]);
        let y = t.dropout(x, 0.5, &mut rng).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn cosine_anchor_cases() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.constant(vec![1.0, 2.0, -3.0], vec![3]);
        let nx = t.scale(x, -1.0);
        let cs_self = t.cosine_sim(x, x, 1e-8).unwrap();
        let cs_anti = t.cosine_sim(x, nx, 1e-8).unwrap();
        assert!(close(t.scalar(cs_self), 1.0, 1e-12));
        assert!(close(t.scalar(cs_anti), -1.0, 1e-12));
        let e1 = t.constant(vec![1.0, 0.0], vec![2]);
        let e2 = t.constant(vec![0.0, 1.0], vec![2]);
        let cs_orth = t.cosine_sim(e1, e2, 1e-8).unwrap();
        assert_eq!(t.scalar(cs_orth), 0.0);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut t: Tape<f64> = Tape::new();
        let logits = t.constant(vec![0.0; 10], vec![2, 5]);
        let loss = t.cross_entropy(logits, &[0, 4]).unwrap();
        assert!(close(t.scalar(loss), 5.0f64.ln(), 1e-12));
    }

    #[test]
    fn cross_entropy_one_hot_limit() {
        let mut t: Tape<f64> = Tape::new();
        let mut row = vec![0.0; 5];
        row[2] = 50.0;
        let logits = t.constant(row, vec![1, 5]);
        let loss = t.cross_entropy(logits, &[2]).unwrap();
        assert!(t.scalar(loss) < 1e-12, "{}", t.scalar(loss));
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut t: Tape<f64> = Tape::new();
        let logits = t.constant(vec![0.0; 5], vec![1, 5]);
        assert!(matches!(
            t.cross_entropy(logits, &[5]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.input(vec![1.0, -2.0, 0.5], vec![3]);
        let s = t.sum(x);
        let mut params = ParamSet::new();
        t.backward(s, &mut params).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_square_hand_derivative() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.input(vec![3.0], vec![1]);
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        let mut params = ParamSet::new();
        t.backward(s, &mut params).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.input(vec![1.0, 2.0], vec![2]);
        let mut params = ParamSet::new();
        assert!(matches!(
            t.backward(x, &mut params),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn repeated_backward_accumulates_param_grads() {
        let mut params: ParamSet<f64> = ParamSet::new();
        let w = params.add("w", vec![1], vec![2.0]);
        let mut t: Tape<f64> = Tape::new();
        let wv = t.param(&params, w);
        let sq = t.mul(wv, wv).unwrap();
        let loss = t.sum(sq);
        t.backward(loss, &mut params).unwrap();
        t.backward(loss, &mut params).unwrap();
        assert_eq!(params.get(w).grad, vec![8.0]); // 2 × (2w)
    }

    #[test]
    fn attention_single_token_is_one() {
        let mut t: Tape<f64> = Tape::new();
        let q = t.constant(vec![0.3, -0.1], vec![2, 1]);
        let k = t.constant(vec![0.2, 0.4], vec![2, 1]);
        let v = t.constant(vec![1.0, 2.0], vec![2, 1]);
        let a = t.attention(q, k, v, 1).unwrap();
        let (_, n, probs) = t.attention_probs(a).unwrap();
        assert_eq!(n, 1);
        assert_eq!(probs, vec![1.0]);
        assert_eq!(t.data(a), &[1.0, 2.0]);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut t: Tape<f32> = Tape::new();
        let mut rng = Rng::from_seed(5);
        let n = 7;
        let d = 8;
        let mk = |rng: &mut Rng| -> Vec<f32> {
            (0..d * n).map(|_| rng.normal_f64() as f32).collect()
        };
        let q = t.constant(mk(&mut rng), vec![d, n]);
        let k = t.constant(mk(&mut rng), vec![d, n]);
        let v = t.constant(mk(&mut rng), vec![d, n]);
        let a = t.attention(q, k, v, 2).unwrap();
        let (heads, nn, probs) = t.attention_probs(a).unwrap();
        assert_eq!((heads, nn), (2, n));
        for h in 0..heads {
            for r in 0..n {
                let row = &probs[h * n * n + r * n..h * n * n + (r + 1) * n];
                let sum: f32 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|&p| p >= 0.0));
            }
        }
    }

    #[test]
    fn mask_fill_identity_when_empty() {
        let mut t: Tape<f32> = Tape::new();
        let x = t.constant(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]);
        let y = t.mask_fill(x, &[], &[]).unwrap();
        assert_eq!(t.data(x), t.data(y));
    }

    #[test]
    fn tokens_to_signal_layout() {
        // 1 channel, 2 samples per token, 2 tokens.
        let mut t: Tape<f64> = Tape::new();
        // rows: (c0,s0), (c0,s1); columns: tokens
        let x = t.constant(vec![1.0, 3.0, 2.0, 4.0], vec![2, 2]);
        let y = t.tokens_to_signal(x, 1, 2).unwrap();
        assert_eq!(t.shape(y), &[1, 4]);
        assert_eq!(t.data(y), &[1.0, 2.0, 3.0, 4.0]);
    }
}
