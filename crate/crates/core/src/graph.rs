//! Reverse-mode autodiff on a dynamic tape.
//!
//! Ops execute eagerly: building a node computes its value and retains it
//! for the backward pass. `backward` walks the tape in reverse, visiting
//! each node once; gradients across fan-out accumulate additively. The
//! whole graph is single-threaded and deterministic; independent graphs may
//! live on independent threads.

use std::rc::Rc;

use crate::error::{Result, VfmError};
use crate::tensor::{broadcast_shapes, strides_of, Scalar, TensorData};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, F),
    AddScalar(Var, F),
    Exp(Var),
    Gelu(Var, Rc<Vec<F>>),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Permute { a: Var, perm: Vec<usize> },
    Reshape(Var),
    Gather { a: Var, axis: usize, idx: Rc<[usize]> },
    /// Gather along axis 1 with per-batch indices: a [B, n, rest...],
    /// idx flattened [B*m] -> out [B, m, rest...].
    GatherBatched { a: Var, idx: Rc<[usize]>, m: usize },
    Concat { parts: Vec<Var>, axis: usize },
    BroadcastTo(Var),
    SoftmaxLast(Var),
    LayerNormLast { a: Var, eps: F },
    L2NormalizeLast { a: Var, eps: F },
    SumAll(Var),
    MeanAll(Var),
    SumLast(Var),
    CrossEntropyRows { logits: Var, targets: Rc<[usize]> },
}

struct Node<F> {
    op: Op<F>,
    value: TensorData<F>,
    requires_grad: bool,
}

/// Dynamic compute tape. Nodes are appended in topological order by
/// construction, so reverse iteration is a valid backward schedule.
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
    ran_backward: bool,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), ran_backward: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<F>, value: TensorData<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &TensorData<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` loss w.r.t. `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads[v.0].as_deref()
    }

    // ---- leaves ----

    pub fn leaf(&mut self, value: TensorData<F>, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn constant(&mut self, value: TensorData<F>) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn scalar(&mut self, v: F) -> Var {
        self.constant(TensorData::scalar(v))
    }

    // ---- elementwise with broadcasting ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binop("add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binop("sub", a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binop("mul", a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binop("div", a, b)
    }

    fn binop(&mut self, name: &'static str, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shapes(&sa, &sb)
            .ok_or_else(|| VfmError::shape(name, format!("{sa:?} vs {sb:?}")))?;
        let f: fn(F, F) -> F = match name {
            "add" => |x, y| x + y,
            "sub" => |x, y| x - y,
            "mul" => |x, y| x * y,
            _ => |x, y| x / y,
        };
        let value = broadcast_apply(&out_shape, self.value(a), self.value(b), f);
        let rg = self.rg(a) || self.rg(b);
        let op = match name {
            "add" => Op::Add(a, b),
            "sub" => Op::Sub(a, b),
            "mul" => Op::Mul(a, b),
            _ => Op::Div(a, b),
        };
        Ok(self.push(op, value, rg))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = TensorData::new(
            self.shape(a).to_vec(),
            self.value(a).data().iter().map(|&x| -x).collect(),
        )
        .expect("same numel");
        let rg = self.rg(a);
        self.push(Op::Neg(a), value, rg)
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let value = TensorData::new(
            self.shape(a).to_vec(),
            self.value(a).data().iter().map(|&x| x * c).collect(),
        )
        .expect("same numel");
        let rg = self.rg(a);
        self.push(Op::Scale(a, c), value, rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: F) -> Var {
        let value = TensorData::new(
            self.shape(a).to_vec(),
            self.value(a).data().iter().map(|&x| x + c).collect(),
        )
        .expect("same numel");
        let rg = self.rg(a);
        self.push(Op::AddScalar(a, c), value, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = TensorData::new(
            self.shape(a).to_vec(),
            self.value(a).data().iter().map(|&x| x.exp()).collect(),
        )
        .expect("same numel");
        let rg = self.rg(a);
        self.push(Op::Exp(a), value, rg)
    }

    /// tanh-approximated GELU. The forward tanh values are retained for
    /// the backward pass.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c = F::cast(GELU_C);
        let k = F::cast(GELU_A);
        let half = F::cast(0.5);
        let xv = self.value(a).data();
        let mut tanh_u = Vec::with_capacity(xv.len());
        let mut out = Vec::with_capacity(xv.len());
        for &x in xv {
            let u = c * (x + k * x * x * x);
            let t = u.tanh();
            tanh_u.push(t);
            out.push(half * x * (F::one() + t));
        }
        let value = TensorData::new(self.shape(a).to_vec(), out).expect("same numel");
        let rg = self.rg(a);
        self.push(Op::Gelu(a, Rc::from(tanh_u)), value, rg)
    }

    // ---- linear algebra ----

    /// Batched matmul. `a` is [..., m, k] (or [m, k]); `b` is either [k, n]
    /// (shared across batches) or has identical leading dims [..., k, n].
    /// `ta`/`tb` transpose the trailing two axes logically (no copy).
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(VfmError::shape("matmul", format!("need >=2-d, got {sa:?} x {sb:?}")));
        }
        let (m, ka) = mat_dims(&sa, ta);
        let (kb, n) = mat_dims(&sb, tb);
        if ka != kb {
            return Err(VfmError::shape(
                "matmul",
                format!("inner dims differ: {sa:?} (ta={ta}) x {sb:?} (tb={tb})"),
            ));
        }
        let batch_a: usize = sa[..sa.len() - 2].iter().product();
        let batch_b: usize = sb[..sb.len() - 2].iter().product();
        let b_shared = sb.len() == 2;
        if !b_shared && sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(VfmError::shape(
                "matmul",
                format!("batch dims differ: {sa:?} x {sb:?}"),
            ));
        }
        let _ = batch_b;
        let mut out_shape: Vec<usize> = sa[..sa.len() - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);
        let mut out = TensorData::zeros(out_shape);
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            let (rsa, csa) = stride_2d(&sa, ta);
            let (rsb, csb) = stride_2d(&sb, tb);
            let a_step = sa[sa.len() - 2] * sa[sa.len() - 1];
            let b_step = if b_shared { 0 } else { sb[sb.len() - 2] * sb[sb.len() - 1] };
            let out_data: &mut [F] = out.data_mut();
            // Shared untransposed weight: the whole batch is one gemm.
            let (batch_a, m) = if b_shared && !ta { (1, batch_a * m) } else { (batch_a, m) };
            let tiny = m * ka * n <= SMALL_MATMUL_FLOPS;
            for i in 0..batch_a {
                unsafe {
                    if tiny {
                        // Output pre-zeroed; accumulate into it.
                        small_matmul(
                            m,
                            ka,
                            n,
                            av.as_ptr().add(i * a_step),
                            rsa,
                            csa,
                            bv.as_ptr().add(i * b_step),
                            rsb,
                            csb,
                            out_data.as_mut_ptr().add(i * m * n),
                            n as isize,
                            1,
                        );
                    } else {
                        F::gemm(
                            m,
                            ka,
                            n,
                            F::one(),
                            av.as_ptr().add(i * a_step),
                            rsa,
                            csa,
                            bv.as_ptr().add(i * b_step),
                            rsb,
                            csb,
                            F::zero(),
                            out_data.as_mut_ptr().add(i * m * n),
                            n as isize,
                            1,
                        );
                    }
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul { a, b, ta, tb }, out, rg))
    }

    /// Materializing axis permutation.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if perm.len() != sa.len() {
            return Err(VfmError::shape(
                "permute",
                format!("perm {perm:?} vs shape {sa:?}"),
            ));
        }
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= sa.len() || seen[p] {
                return Err(VfmError::shape("permute", format!("invalid perm {perm:?}")));
            }
            seen[p] = true;
        }
        let value = permute_data(self.value(a), perm);
        let rg = self.rg(a);
        Ok(self.push(Op::Permute { a, perm: perm.to_vec() }, value, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(Op::Reshape(a), value, rg))
    }

    /// Index-select along `axis`.
    pub fn gather(&mut self, a: Var, axis: usize, idx: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(VfmError::shape("gather", format!("axis {axis} of {sa:?}")));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= sa[axis]) {
            return Err(VfmError::shape(
                "gather",
                format!("index {bad} out of bounds for axis {axis} of {sa:?}"),
            ));
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let mut out_shape = sa.clone();
        out_shape[axis] = idx.len();
        let mut out = TensorData::zeros(out_shape);
        {
            let src = self.value(a).data();
            let dst = out.data_mut();
            for o in 0..outer {
                for (j, &i) in idx.iter().enumerate() {
                    let s = (o * sa[axis] + i) * inner;
                    let d = (o * idx.len() + j) * inner;
                    dst[d..d + inner].copy_from_slice(&src[s..s + inner]);
                }
            }
        }
        let rg = self.rg(a);
        let idx: Rc<[usize]> = idx.into();
        Ok(self.push(Op::Gather { a, axis, idx }, out, rg))
    }

    /// Per-batch index-select along axis 1: a [B, n, rest...], idx [B, m]
    /// flattened row-major -> [B, m, rest...].
    pub fn gather_batched(&mut self, a: Var, idx: &[usize], m: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() < 2 {
            return Err(VfmError::shape("gather_batched", format!("need >=2-d, got {sa:?}")));
        }
        let bsz = sa[0];
        let n = sa[1];
        if idx.len() != bsz * m {
            return Err(VfmError::shape(
                "gather_batched",
                format!("idx len {} != batch {} * m {}", idx.len(), bsz, m),
            ));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(VfmError::shape(
                "gather_batched",
                format!("index {bad} out of bounds for axis 1 of {sa:?}"),
            ));
        }
        let inner: usize = sa[2..].iter().product();
        let mut out_shape = sa.clone();
        out_shape[1] = m;
        let mut out = TensorData::zeros(out_shape);
        {
            let src = self.value(a).data();
            let dst = out.data_mut();
            for b in 0..bsz {
                for j in 0..m {
                    let i = idx[b * m + j];
                    let s = (b * n + i) * inner;
                    let d = (b * m + j) * inner;
                    dst[d..d + inner].copy_from_slice(&src[s..s + inner]);
                }
            }
        }
        let rg = self.rg(a);
        let idx: Rc<[usize]> = idx.into();
        Ok(self.push(Op::GatherBatched { a, idx, m }, out, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(VfmError::shape("concat", "no inputs".to_string()));
        }
        let s0 = self.shape(parts[0]).to_vec();
        if axis >= s0.len() {
            return Err(VfmError::shape("concat", format!("axis {axis} of {s0:?}")));
        }
        let mut axis_total = 0usize;
        for &p in parts {
            let sp = self.shape(p);
            if sp.len() != s0.len()
                || sp.iter().enumerate().any(|(i, &d)| i != axis && d != s0[i])
            {
                return Err(VfmError::shape(
                    "concat",
                    format!("incompatible shapes {:?} vs {:?} on axis {axis}", s0, sp),
                ));
            }
            axis_total += sp[axis];
        }
        let outer: usize = s0[..axis].iter().product();
        let inner: usize = s0[axis + 1..].iter().product();
        let mut out_shape = s0.clone();
        out_shape[axis] = axis_total;
        let mut out = TensorData::zeros(out_shape);
        {
            let dst = out.data_mut();
            let mut offset = 0usize;
            for &p in parts {
                let sp_axis = self.nodes[p.0].value.shape()[axis];
                let src = self.nodes[p.0].value.data();
                for o in 0..outer {
                    let s = o * sp_axis * inner;
                    let d = (o * axis_total + offset) * inner;
                    dst[d..d + sp_axis * inner].copy_from_slice(&src[s..s + sp_axis * inner]);
                }
                offset += sp_axis;
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Op::Concat { parts: parts.to_vec(), axis }, out, rg))
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let bc = broadcast_shapes(&sa, shape)
            .filter(|s| s == shape)
            .ok_or_else(|| VfmError::shape("broadcast_to", format!("{sa:?} -> {shape:?}")))?;
        let value = broadcast_apply(&bc, self.value(a), self.value(a), |x, _| x);
        let rg = self.rg(a);
        Ok(self.push(Op::BroadcastTo(a), value, rg))
    }

    // ---- nonlinear layers ----

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let d = *sa.last().ok_or_else(|| VfmError::shape("softmax", "0-d input".to_string()))?;
        let rows = self.value(a).numel() / d;
        let mut out = TensorData::zeros(sa);
        {
            let src = self.value(a).data();
            let dst = out.data_mut();
            for r in 0..rows {
                let row = &src[r * d..(r + 1) * d];
                let mx = row.iter().cloned().fold(F::neg_infinity(), F::max);
                let mut sum = F::zero();
                for (j, &x) in row.iter().enumerate() {
                    let e = (x - mx).exp();
                    dst[r * d + j] = e;
                    sum = sum + e;
                }
                for j in 0..d {
                    dst[r * d + j] = dst[r * d + j] / sum;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Op::SoftmaxLast(a), out, rg))
    }

    /// (x - mean) / sqrt(var + eps) over the last axis, no affine. A
    /// constant row maps to zeros rather than NaN.
    pub fn layer_norm_last(&mut self, a: Var, eps: F) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let d = *sa.last().ok_or_else(|| VfmError::shape("layer_norm", "0-d input".to_string()))?;
        let rows = self.value(a).numel() / d;
        let dn = F::cast(d as f64);
        let mut out = TensorData::zeros(sa);
        {
            let src = self.value(a).data();
            let dst = out.data_mut();
            for r in 0..rows {
                let row = &src[r * d..(r + 1) * d];
                let mean = row.iter().cloned().sum::<F>() / dn;
                let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<F>() / dn;
                let inv = (var + eps).sqrt().recip();
                for j in 0..d {
                    dst[r * d + j] = (row[j] - mean) * inv;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Op::LayerNormLast { a, eps }, out, rg))
    }

    /// x / sqrt(|x|^2 + eps) over the last axis; eps guards zero rows.
    pub fn l2_normalize_last(&mut self, a: Var, eps: F) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let d = *sa.last().ok_or_else(|| VfmError::shape("l2_normalize", "0-d input".to_string()))?;
        let rows = self.value(a).numel() / d;
        let mut out = TensorData::zeros(sa);
        {
            let src = self.value(a).data();
            let dst = out.data_mut();
            for r in 0..rows {
                let row = &src[r * d..(r + 1) * d];
                let nrm = (row.iter().map(|&x| x * x).sum::<F>() + eps).sqrt();
                for j in 0..d {
                    dst[r * d + j] = row[j] / nrm;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Op::L2NormalizeLast { a, eps }, out, rg))
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().cloned().sum::<F>();
        let rg = self.rg(a);
        self.push(Op::SumAll(a), TensorData::scalar(s), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = F::cast(self.value(a).numel() as f64);
        let s = self.value(a).data().iter().cloned().sum::<F>() / n;
        let rg = self.rg(a);
        self.push(Op::MeanAll(a), TensorData::scalar(s), rg)
    }

    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let d = *sa.last().ok_or_else(|| VfmError::shape("sum_last", "0-d input".to_string()))?;
        let rows = self.value(a).numel() / d;
        let mut out = TensorData::zeros(sa[..sa.len() - 1].to_vec());
        {
            let src = self.value(a).data();
            let dst = out.data_mut();
            for r in 0..rows {
                dst[r] = src[r * d..(r + 1) * d].iter().cloned().sum::<F>();
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Op::SumLast(a), out, rg))
    }

    /// Per-row softmax cross-entropy against integer targets:
    /// out[r] = logsumexp(logits[r]) - logits[r][targets[r]].
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let sa = self.shape(logits).to_vec();
        if sa.len() != 2 {
            return Err(VfmError::shape("cross_entropy", format!("want [rows, classes], got {sa:?}")));
        }
        let (rows, classes) = (sa[0], sa[1]);
        if targets.len() != rows {
            return Err(VfmError::shape(
                "cross_entropy",
                format!("{} targets for {} rows", targets.len(), rows),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(VfmError::shape(
                "cross_entropy",
                format!("target {bad} out of range for {classes} classes"),
            ));
        }
        let mut out = TensorData::zeros(vec![rows]);
        {
            let src = self.value(logits).data();
            let dst = out.data_mut();
            for r in 0..rows {
                let row = &src[r * classes..(r + 1) * classes];
                let mx = row.iter().cloned().fold(F::neg_infinity(), F::max);
                let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<F>().ln();
                dst[r] = lse - row[targets[r]];
            }
        }
        let rg = self.rg(logits);
        let targets: Rc<[usize]> = targets.into();
        Ok(self.push(Op::CrossEntropyRows { logits, targets }, out, rg))
    }

    // ---- backward ----

    /// Reverse pass from a scalar loss. Fills gradients for every
    /// requires_grad node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(VfmError::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if self.ran_backward {
            return Err(VfmError::invalid(
                "backward already ran on this graph; build a fresh graph per step".to_string(),
            ));
        }
        self.ran_backward = true;

        // Mark nodes that need gradients: reachable from loss and carrying
        // requires_grad.
        let mut needed = vec![false; self.nodes.len()];
        let mut stack = vec![loss.0];
        while let Some(id) = stack.pop() {
            if needed[id] || !self.nodes[id].requires_grad {
                continue;
            }
            needed[id] = true;
            for p in op_parents(&self.nodes[id].op) {
                stack.push(p.0);
            }
        }
        if !needed[loss.0] {
            // Loss does not depend on any requires_grad leaf; nothing to do.
            return Ok(());
        }

        self.grads[loss.0] = Some(vec![F::one()]);
        for id in (0..=loss.0).rev() {
            if !needed[id] || self.grads[id].is_none() {
                continue;
            }
            let gout = self.grads[id].take().expect("checked");
            self.dispatch_backward(id, &gout, &needed);
            self.grads[id] = Some(gout);
        }
        Ok(())
    }

    fn accumulate_owned(&mut self, v: Var, contrib: Vec<F>) {
        match &mut self.grads[v.0] {
            Some(g) => {
                for (g, c) in g.iter_mut().zip(contrib) {
                    *g = *g + c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn dispatch_backward(&mut self, id: usize, gout: &[F], needed: &[bool]) {
        // Local copies of op metadata to appease the borrow checker.
        enum Plan<F> {
            None,
            One(Var, Vec<F>),
            Many(Vec<(Var, Vec<F>)>),
        }
        let plan: Plan<F> = match &self.nodes[id].op {
            Op::Leaf => Plan::None,
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                let mut plan = Vec::new();
                if needed[a.0] {
                    plan.push((a, reduce_to_shape(gout, self.shape_at(id), self.shape(a))));
                }
                if needed[b.0] {
                    plan.push((b, reduce_to_shape(gout, self.shape_at(id), self.shape(b))));
                }
                Plan::Many(plan)
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                let mut plan = Vec::new();
                if needed[a.0] {
                    plan.push((a, reduce_to_shape(gout, self.shape_at(id), self.shape(a))));
                }
                if needed[b.0] {
                    let neg: Vec<F> = gout.iter().map(|&g| -g).collect();
                    plan.push((b, reduce_to_shape(&neg, self.shape_at(id), self.shape(b))));
                }
                Plan::Many(plan)
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                let is_div = matches!(self.nodes[id].op, Op::Div(..));
                let out_shape = self.shape_at(id).to_vec();
                let av = self.nodes[a.0].value.clone();
                let bv = self.nodes[b.0].value.clone();
                let mut ga = vec![F::zero(); av.numel()];
                let mut gb = vec![F::zero(); bv.numel()];
                broadcast_backward(&out_shape, &av, &bv, gout, |g, x, y| {
                    if is_div {
                        (g / y, -g * x / (y * y))
                    } else {
                        (g * y, g * x)
                    }
                }, &mut ga, &mut gb);
                let mut plan = Vec::new();
                if needed[a.0] {
                    plan.push((a, ga));
                }
                if needed[b.0] {
                    plan.push((b, gb));
                }
                Plan::Many(plan)
            }
            Op::Neg(a) => Plan::One(*a, gout.iter().map(|&g| -g).collect()),
            Op::Scale(a, c) => {
                let c = *c;
                Plan::One(*a, gout.iter().map(|&g| g * c).collect())
            }
            Op::AddScalar(a, _) => Plan::One(*a, gout.to_vec()),
            Op::Exp(a) => {
                let out = self.nodes[id].value.data();
                Plan::One(*a, gout.iter().zip(out).map(|(&g, &y)| g * y).collect())
            }
            Op::Gelu(a, tanh_u) => {
                let a = *a;
                let tanh_u = tanh_u.clone();
                let xv = self.nodes[a.0].value.data();
                let c = F::cast(GELU_C);
                let k = F::cast(GELU_A);
                let half = F::cast(0.5);
                let three = F::cast(3.0);
                let contrib = gout
                    .iter()
                    .zip(xv)
                    .zip(tanh_u.iter())
                    .map(|((&g, &x), &t)| {
                        let sech2 = F::one() - t * t;
                        let du = c * (F::one() + three * k * x * x);
                        g * (half * (F::one() + t) + half * x * sech2 * du)
                    })
                    .collect();
                Plan::One(a, contrib)
            }
            Op::MatMul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                let plan = self.matmul_backward(id, a, b, ta, tb, gout, needed);
                Plan::Many(plan)
            }
            Op::Permute { a, perm } => {
                let a = *a;
                let inv = invert_perm(perm);
                let gt = TensorData::new(self.shape_at(id).to_vec(), gout.to_vec()).expect("shape");
                Plan::One(a, permute_data(&gt, &inv).into_data())
            }
            Op::Reshape(a) | Op::BroadcastTo(a) => {
                let a = *a;
                if matches!(self.nodes[id].op, Op::Reshape(_)) {
                    Plan::One(a, gout.to_vec())
                } else {
                    Plan::One(a, reduce_to_shape(gout, self.shape_at(id), self.shape(a)))
                }
            }
            Op::Gather { a, axis, idx } => {
                let a = *a;
                let axis = *axis;
                let idx = idx.clone();
                let sa = self.shape(a).to_vec();
                let outer: usize = sa[..axis].iter().product();
                let inner: usize = sa[axis + 1..].iter().product();
                let mut ga = vec![F::zero(); self.nodes[a.0].value.numel()];
                for o in 0..outer {
                    for (j, &i) in idx.iter().enumerate() {
                        let s = (o * idx.len() + j) * inner;
                        let d = (o * sa[axis] + i) * inner;
                        for t in 0..inner {
                            ga[d + t] = ga[d + t] + gout[s + t];
                        }
                    }
                }
                Plan::One(a, ga)
            }
            Op::GatherBatched { a, idx, m } => {
                let a = *a;
                let m = *m;
                let idx = idx.clone();
                let sa = self.shape(a).to_vec();
                let bsz = sa[0];
                let n = sa[1];
                let inner: usize = sa[2..].iter().product();
                let mut ga = vec![F::zero(); self.nodes[a.0].value.numel()];
                for bi in 0..bsz {
                    for j in 0..m {
                        let i = idx[bi * m + j];
                        let s = (bi * m + j) * inner;
                        let d = (bi * n + i) * inner;
                        for t in 0..inner {
                            ga[d + t] = ga[d + t] + gout[s + t];
                        }
                    }
                }
                Plan::One(a, ga)
            }
            Op::Concat { parts, axis } => {
                let parts = parts.clone();
                let axis = *axis;
                let out_shape = self.shape_at(id).to_vec();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let axis_total = out_shape[axis];
                let mut plan = Vec::new();
                let mut offset = 0usize;
                for &p in &parts {
                    let ap = self.nodes[p.0].value.shape()[axis];
                    if needed[p.0] {
                        let mut gp = vec![F::zero(); self.nodes[p.0].value.numel()];
                        for o in 0..outer {
                            let s = (o * axis_total + offset) * inner;
                            let d = o * ap * inner;
                            gp[d..d + ap * inner].copy_from_slice(&gout[s..s + ap * inner]);
                        }
                        plan.push((p, gp));
                    }
                    offset += ap;
                }
                Plan::Many(plan)
            }
            Op::SoftmaxLast(a) => {
                let a = *a;
                let y = self.nodes[id].value.data();
                let d = *self.shape_at(id).last().expect("non-scalar");
                let rows = y.len() / d;
                let mut ga = vec![F::zero(); y.len()];
                for r in 0..rows {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &gout[r * d..(r + 1) * d];
                    let dot = yr.iter().zip(gr).map(|(&yy, &gg)| yy * gg).sum::<F>();
                    for j in 0..d {
                        ga[r * d + j] = yr[j] * (gr[j] - dot);
                    }
                }
                Plan::One(a, ga)
            }
            Op::LayerNormLast { a, eps } => {
                let a = *a;
                let eps = *eps;
                let y = self.nodes[id].value.data();
                let x = self.nodes[a.0].value.data();
                let d = *self.shape_at(id).last().expect("non-scalar");
                let dn = F::cast(d as f64);
                let rows = y.len() / d;
                let mut ga = vec![F::zero(); y.len()];
                for r in 0..rows {
                    let xr = &x[r * d..(r + 1) * d];
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &gout[r * d..(r + 1) * d];
                    let mean = xr.iter().cloned().sum::<F>() / dn;
                    let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / dn;
                    let inv = (var + eps).sqrt().recip();
                    let gmean = gr.iter().cloned().sum::<F>() / dn;
                    let gydot = gr.iter().zip(yr).map(|(&g, &yy)| g * yy).sum::<F>() / dn;
                    for j in 0..d {
                        ga[r * d + j] = inv * (gr[j] - gmean - yr[j] * gydot);
                    }
                }
                Plan::One(a, ga)
            }
            Op::L2NormalizeLast { a, eps } => {
                let a = *a;
                let eps = *eps;
                let x = self.nodes[a.0].value.data();
                let d = *self.shape_at(id).last().expect("non-scalar");
                let rows = x.len() / d;
                let mut ga = vec![F::zero(); x.len()];
                for r in 0..rows {
                    let xr = &x[r * d..(r + 1) * d];
                    let gr = &gout[r * d..(r + 1) * d];
                    let n2 = xr.iter().map(|&v| v * v).sum::<F>() + eps;
                    let n = n2.sqrt();
                    let dot = xr.iter().zip(gr).map(|(&xx, &gg)| xx * gg).sum::<F>();
                    for j in 0..d {
                        ga[r * d + j] = gr[j] / n - xr[j] * dot / (n2 * n);
                    }
                }
                Plan::One(a, ga)
            }
            Op::SumAll(a) => {
                let a = *a;
                let g = gout[0];
                Plan::One(a, vec![g; self.nodes[a.0].value.numel()])
            }
            Op::MeanAll(a) => {
                let a = *a;
                let n = F::cast(self.nodes[a.0].value.numel() as f64);
                let g = gout[0] / n;
                Plan::One(a, vec![g; self.nodes[a.0].value.numel()])
            }
            Op::SumLast(a) => {
                let a = *a;
                let sa = self.shape(a).to_vec();
                let d = *sa.last().expect("non-scalar");
                let rows: usize = sa[..sa.len() - 1].iter().product();
                let mut ga = vec![F::zero(); rows * d];
                for r in 0..rows {
                    for j in 0..d {
                        ga[r * d + j] = gout[r];
                    }
                }
                Plan::One(a, ga)
            }
            Op::CrossEntropyRows { logits, targets } => {
                let logits = *logits;
                let targets = targets.clone();
                let src = self.nodes[logits.0].value.data();
                let sa = self.shape(logits).to_vec();
                let (rows, classes) = (sa[0], sa[1]);
                let mut ga = vec![F::zero(); rows * classes];
                for r in 0..rows {
                    let row = &src[r * classes..(r + 1) * classes];
                    let mx = row.iter().cloned().fold(F::neg_infinity(), F::max);
                    let sum = row.iter().map(|&v| (v - mx).exp()).sum::<F>();
                    for j in 0..classes {
                        let p = (row[j] - mx).exp() / sum;
                        let delta = if j == targets[r] { F::one() } else { F::zero() };
                        ga[r * classes + j] = gout[r] * (p - delta);
                    }
                }
                Plan::One(logits, ga)
            }
        };

        match plan {
            Plan::None => {}
            Plan::One(v, contrib) => {
                if needed[v.0] {
                    self.accumulate_owned(v, contrib);
                }
            }
            Plan::Many(items) => {
                for (v, c) in items {
                    self.accumulate_owned(v, c);
                }
            }
        }
    }

    fn shape_at(&self, id: usize) -> &[usize] {
        self.nodes[id].value.shape()
    }

    fn matmul_backward(
        &self,
        id: usize,
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        gout: &[F],
        needed: &[bool],
    ) -> Vec<(Var, Vec<F>)> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (m, k) = mat_dims(&sa, ta);
        let (_, n) = mat_dims(&sb, tb);
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let b_shared = sb.len() == 2;
        let (batch, m) = if b_shared && !ta { (1, batch * m) } else { (batch, m) };
        let a_step = sa[sa.len() - 2] * sa[sa.len() - 1];
        let b_step = if b_shared { 0 } else { sb[sb.len() - 2] * sb[sb.len() - 1] };
        let _ = id;
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let (rsa, csa) = stride_2d(&sa, ta);
        let (rsb, csb) = stride_2d(&sb, tb);
        let mut plan = Vec::new();

        if needed[a.0] {
            // dA_eff = dC . B_effᵀ, written through A_eff's strides.
            let mut ga = vec![F::zero(); av.len()];
            let tiny = m * n * k <= SMALL_MATMUL_FLOPS;
            for i in 0..batch {
                let (w_rs, w_cs) = (rsa, csa);
                unsafe {
                    if tiny {
                        small_matmul(
                            m,
                            n,
                            k,
                            gout.as_ptr().add(i * m * n),
                            n as isize,
                            1,
                            bv.as_ptr().add(i * b_step),
                            csb,
                            rsb,
                            ga.as_mut_ptr().add(i * a_step),
                            w_rs,
                            w_cs,
                        );
                    } else {
                        F::gemm(
                            m,
                            n,
                            k,
                            F::one(),
                            gout.as_ptr().add(i * m * n),
                            n as isize,
                            1,
                            bv.as_ptr().add(i * b_step),
                            csb,
                            rsb, // B_effᵀ via swapped strides
                            F::one(),
                            ga.as_mut_ptr().add(i * a_step),
                            w_rs,
                            w_cs,
                        );
                    }
                }
            }
            plan.push((a, ga));
        }
        if needed[b.0] {
            // dB_eff = A_effᵀ . dC, accumulated over batches when B is shared.
            let mut gb = vec![F::zero(); bv.len()];
            let tiny = k * m * n <= SMALL_MATMUL_FLOPS;
            for i in 0..batch {
                let (w_rs, w_cs) = (rsb, csb);
                unsafe {
                    if tiny {
                        small_matmul(
                            k,
                            m,
                            n,
                            av.as_ptr().add(i * a_step),
                            csa,
                            rsa,
                            gout.as_ptr().add(i * m * n),
                            n as isize,
                            1,
                            gb.as_mut_ptr().add(i * b_step),
                            w_rs,
                            w_cs,
                        );
                    } else {
                        F::gemm(
                            k,
                            m,
                            n,
                            F::one(),
                            av.as_ptr().add(i * a_step),
                            csa,
                            rsa, // A_effᵀ via swapped strides
                            gout.as_ptr().add(i * m * n),
                            n as isize,
                            1,
                            F::one(),
                            gb.as_mut_ptr().add(i * b_step),
                            w_rs,
                            w_cs,
                        );
                    }
                }
            }
            plan.push((b, gb));
        }
        plan
    }
}


/// Naive kernel for tiny matrices where gemm packing overhead dominates.
/// C += A_eff . B_eff with logical strides; beta is always 1 here because
/// callers pre-zero or accumulate. Contiguous layouts take vectorizable
/// dot/axpy paths.
#[allow(clippy::too_many_arguments)]
unsafe fn small_matmul<F: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: *const F,
    rsa: isize,
    csa: isize,
    b: *const F,
    rsb: isize,
    csb: isize,
    c: *mut F,
    rsc: isize,
    csc: isize,
) {
    if csa == 1 && rsb == 1 && csc == 1 {
        // Rows of A and columns of B_eff are contiguous: dot products.
        for i in 0..m {
            let ar = std::slice::from_raw_parts(a.offset(i as isize * rsa), k);
            let cr = std::slice::from_raw_parts_mut(c.offset(i as isize * rsc), n);
            for (j, cv) in cr.iter_mut().enumerate() {
                let br = std::slice::from_raw_parts(b.offset(j as isize * csb), k);
                let mut acc = F::zero();
                for t in 0..k {
                    acc = acc + ar[t] * br[t];
                }
                *cv = *cv + acc;
            }
        }
    } else if csb == 1 && csc == 1 {
        // Rows of B_eff and C are contiguous: axpy accumulation.
        for i in 0..m {
            let cr = std::slice::from_raw_parts_mut(c.offset(i as isize * rsc), n);
            for t in 0..k {
                let av = *a.offset(i as isize * rsa + t as isize * csa);
                let br = std::slice::from_raw_parts(b.offset(t as isize * rsb), n);
                for j in 0..n {
                    cr[j] = cr[j] + av * br[j];
                }
            }
        }
    } else {
        for i in 0..m {
            for j in 0..n {
                let mut acc = F::zero();
                for t in 0..k {
                    let av = *a.offset(i as isize * rsa + t as isize * csa);
                    let bv = *b.offset(t as isize * rsb + j as isize * csb);
                    acc = acc + av * bv;
                }
                let cp = c.offset(i as isize * rsc + j as isize * csc);
                *cp = *cp + acc;
            }
        }
    }
}

const SMALL_MATMUL_FLOPS: usize = 8192;

fn mat_dims(shape: &[usize], transposed: bool) -> (usize, usize) {
    let r = shape[shape.len() - 2];
    let c = shape[shape.len() - 1];
    if transposed {
        (c, r)
    } else {
        (r, c)
    }
}

/// Row/col strides of the logical (possibly transposed) trailing matrix.
fn stride_2d(shape: &[usize], transposed: bool) -> (isize, isize) {
    let c = shape[shape.len() - 1] as isize;
    if transposed {
        (1, c)
    } else {
        (c, 1)
    }
}

fn op_parents<F>(op: &Op<F>) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
        Op::Neg(a)
        | Op::Scale(a, _)
        | Op::AddScalar(a, _)
        | Op::Exp(a)
        | Op::Reshape(a)
        | Op::BroadcastTo(a)
        | Op::SoftmaxLast(a)
        | Op::SumAll(a)
        | Op::MeanAll(a)
        | Op::SumLast(a) => vec![*a],
        Op::Gelu(a, _)
        | Op::LayerNormLast { a, .. }
        | Op::L2NormalizeLast { a, .. }
        | Op::Permute { a, .. }
        | Op::Gather { a, .. }
        | Op::GatherBatched { a, .. } => vec![*a],
        Op::MatMul { a, b, .. } => vec![*a, *b],
        Op::Concat { parts, .. } => parts.clone(),
        Op::CrossEntropyRows { logits, .. } => vec![*logits],
    }
}

fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn permute_data<F: Scalar>(t: &TensorData<F>, perm: &[usize]) -> TensorData<F> {
    let src_shape = t.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| src_shape[p]).collect();
    let src_strides = strides_of(src_shape);
    let mut out = TensorData::zeros(out_shape.clone());
    let nd = perm.len();
    let numel = t.numel();
    if numel == 0 {
        return out;
    }
    let src = t.data();
    // Source stride per output axis; odometer walk over output coords.
    let mapped: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    // Head split/merge pattern: [a, b, c, d] -> [a, c, b, d].
    if nd == 4 && perm == [0, 2, 1, 3] {
        let (d0, d1, d2, d3) = (src_shape[0], src_shape[1], src_shape[2], src_shape[3]);
        let dst = out.data_mut();
        let sp = src.as_ptr();
        let dp = dst.as_mut_ptr();
        for i0 in 0..d0 {
            for i2 in 0..d2 {
                let mut s = (i0 * d1 * d2 + i2) * d3;
                let mut d = ((i0 * d2 + i2) * d1) * d3;
                for _ in 0..d1 {
                    unsafe {
                        std::ptr::copy_nonoverlapping(sp.add(s), dp.add(d), d3);
                    }
                    s += d2 * d3;
                    d += d3;
                }
            }
        }
        return out;
    }
    // When the innermost output axis is the innermost source axis, copy
    // whole contiguous rows.
    if perm[nd - 1] == nd - 1 {
        let dst = out.data_mut();
        let row = out_shape[nd - 1];
        let rows = numel / row;
        let mut coords = vec![0usize; nd - 1];
        let mut si = 0usize;
        for r in 0..rows {
            dst[r * row..(r + 1) * row].copy_from_slice(&src[si..si + row]);
            // Advance the odometer over the outer axes.
            for ax in (0..nd - 1).rev() {
                coords[ax] += 1;
                si += mapped[ax];
                if coords[ax] < out_shape[ax] {
                    break;
                }
                si -= coords[ax] * mapped[ax];
                coords[ax] = 0;
            }
        }
    } else {
        let dst = out.data_mut();
        let mut coords = vec![0usize; nd];
        let mut si = 0usize;
        for d in dst.iter_mut().take(numel) {
            *d = src[si];
            for ax in (0..nd).rev() {
                coords[ax] += 1;
                si += mapped[ax];
                if coords[ax] < out_shape[ax] {
                    break;
                }
                si -= coords[ax] * mapped[ax];
                coords[ax] = 0;
            }
        }
    }
    out
}

/// Elementwise op with numpy broadcasting.
fn broadcast_apply<F: Scalar>(
    out_shape: &[usize],
    a: &TensorData<F>,
    b: &TensorData<F>,
    f: impl Fn(F, F) -> F,
) -> TensorData<F> {
    let numel: usize = out_shape.iter().product();
    let mut out = TensorData::zeros(out_shape.to_vec());
    let ad = a.data();
    let bd = b.data();
    // Fast path: identical shapes.
    if a.shape() == out_shape && b.shape() == out_shape {
        let dst = out.data_mut();
        for i in 0..numel {
            dst[i] = f(ad[i], bd[i]);
        }
        return out;
    }
    // Fast path: b broadcasts as a repeating suffix block (bias add; any
    // trailing-axes operand, e.g. [d] against [..., d]).
    if a.shape() == out_shape && is_suffix_shape(b.shape(), out_shape) && !bd.is_empty() {
        let bl = bd.len();
        let dst = out.data_mut();
        for (dchunk, achunk) in dst.chunks_mut(bl).zip(ad.chunks(bl)) {
            for j in 0..dchunk.len() {
                dchunk[j] = f(achunk[j], bd[j]);
            }
        }
        return out;
    }
    let astr = broadcast_strides(a.shape(), out_shape);
    let bstr = broadcast_strides(b.shape(), out_shape);
    let nd = out_shape.len();
    let dst = out.data_mut();
    let mut coords = vec![0usize; nd];
    let (mut ai, mut bi) = (0usize, 0usize);
    for d in dst.iter_mut().take(numel) {
        *d = f(ad[ai], bd[bi]);
        for ax in (0..nd).rev() {
            coords[ax] += 1;
            ai += astr[ax];
            bi += bstr[ax];
            if coords[ax] < out_shape[ax] {
                break;
            }
            ai -= coords[ax] * astr[ax];
            bi -= coords[ax] * bstr[ax];
            coords[ax] = 0;
        }
    }
    out
}

/// Backward for broadcast mul/div: scatter per-element grads into both inputs.
fn broadcast_backward<F: Scalar>(
    out_shape: &[usize],
    a: &TensorData<F>,
    b: &TensorData<F>,
    gout: &[F],
    f: impl Fn(F, F, F) -> (F, F),
    ga: &mut [F],
    gb: &mut [F],
) {
    let numel: usize = out_shape.iter().product();
    let ad = a.data();
    let bd = b.data();
    if a.shape() == out_shape && b.shape() == out_shape {
        for i in 0..numel {
            let (da, db) = f(gout[i], ad[i], bd[i]);
            ga[i] = ga[i] + da;
            gb[i] = gb[i] + db;
        }
        return;
    }
    // Suffix fast path (e.g. LN affine: [.., d] vs [d]).
    if a.shape() == out_shape && is_suffix_shape(b.shape(), out_shape) && !bd.is_empty() {
        let bl = bd.len();
        let mut base = 0usize;
        while base < numel {
            for j in 0..bl.min(numel - base) {
                let i = base + j;
                let (da, db) = f(gout[i], ad[i], bd[j]);
                ga[i] = ga[i] + da;
                gb[j] = gb[j] + db;
            }
            base += bl;
        }
        return;
    }
    let astr = broadcast_strides(a.shape(), out_shape);
    let bstr = broadcast_strides(b.shape(), out_shape);
    let nd = out_shape.len();
    let mut coords = vec![0usize; nd];
    let (mut ai, mut bi) = (0usize, 0usize);
    for &g in gout.iter().take(numel) {
        let (da, db) = f(g, ad[ai], bd[bi]);
        ga[ai] = ga[ai] + da;
        gb[bi] = gb[bi] + db;
        for ax in (0..nd).rev() {
            coords[ax] += 1;
            ai += astr[ax];
            bi += bstr[ax];
            if coords[ax] < out_shape[ax] {
                break;
            }
            ai -= coords[ax] * astr[ax];
            bi -= coords[ax] * bstr[ax];
            coords[ax] = 0;
        }
    }
}

/// True when `small` equals the trailing axes of `big` (with leading 1s allowed).
fn is_suffix_shape(small: &[usize], big: &[usize]) -> bool {
    if small.len() > big.len() {
        return false;
    }
    let off = big.len() - small.len();
    small.iter().enumerate().all(|(i, &d)| d == big[off + i] || (d == 1 && false))
        && small.iter().enumerate().all(|(i, &d)| d == big[off + i])
}

/// Strides for reading `shape` as broadcast to `out_shape` (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let nd = out_shape.len();
    let own = strides_of(shape);
    let mut s = vec![0usize; nd];
    let off = nd - shape.len();
    for i in 0..shape.len() {
        s[off + i] = if shape[i] == 1 { 0 } else { own[i] };
    }
    s
}

/// Sum `grad` (shaped like `from`) down to `to` (a broadcast-compatible shape).
fn reduce_to_shape<F: Scalar>(grad: &[F], from: &[usize], to: &[usize]) -> Vec<F> {
    if from == to {
        return grad.to_vec();
    }
    let tnumel: usize = to.iter().product();
    let mut out = vec![F::zero(); tnumel.max(1)];
    // Suffix fast path (bias gradients).
    if is_suffix_shape(to, from) && tnumel > 0 {
        for chunk in grad.chunks(tnumel) {
            for (o, &g) in out.iter_mut().zip(chunk) {
                *o = *o + g;
            }
        }
        return out;
    }
    let tstr = broadcast_strides(to, from);
    let nd = from.len();
    let mut coords = vec![0usize; nd];
    let mut ti = 0usize;
    for &g in grad {
        out[ti] = out[ti] + g;
        for ax in (0..nd).rev() {
            coords[ax] += 1;
            ti += tstr[ax];
            if coords[ax] < from[ax] {
                break;
            }
            ti -= coords[ax] * tstr[ax];
            coords[ax] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn td(shape: &[usize], data: &[f64]) -> TensorData<f64> {
        TensorData::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(td(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = g.constant(TensorData::filled(vec![3, 4], 1.0));
        let c = g.matmul(a, b, false, false).unwrap();
        assert_eq!(g.shape(c), &[2, 4]);
        assert_eq!(g.value(c).data()[0], 6.0);
        assert_eq!(g.value(c).data()[4], 15.0);
        // Mismatched inner dim errors with shapes in the message.
        let bad = g.matmul(a, a, false, false);
        assert!(bad.is_err());
    }

    #[test]
    fn matmul_transpose_flags() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(td(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        // aᵀ·a = [3x3]
        let c = g.matmul(a, a, true, false).unwrap();
        assert_eq!(g.shape(c), &[3, 3]);
        assert_eq!(g.value(c).data()[0], 17.0); // 1*1 + 4*4
        // a·aᵀ = [2x2]
        let d = g.matmul(a, a, false, true).unwrap();
        assert_eq!(g.shape(d), &[2, 2]);
        assert_eq!(g.value(d).data()[0], 14.0); // 1+4+9
    }

    #[test]
    fn softmax_uniform_on_zero() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(td(&[3], &[0.0, 0.0, 0.0]));
        let s = g.softmax_last(a).unwrap();
        for &v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(td(&[4], &[5.0, 5.0, 5.0, 5.0]));
        let y = g.layer_norm_last(a, 1e-6).unwrap();
        for &v in g.value(y).data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(td(&[3], &[1.0, 2.0, 3.0]), true);
        let s = g.sum_all(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_square_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(td(&[1], &[3.0]), true);
        let y = g.mul(x, x).unwrap();
        let s = g.sum_all(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn fanout_gradients_sum() {
        // d/dx (x + x) == 2
        let mut g = Graph::<f64>::new();
        let x = g.leaf(td(&[2], &[1.0, -2.0]), true);
        let y = g.add(x, x).unwrap();
        let s = g.sum_all(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(td(&[2], &[1.0, 2.0]), true);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn backward_runs_once() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(td(&[1], &[2.0]), true);
        let s = g.sum_all(x);
        g.backward(s).unwrap();
        assert!(g.backward(s).is_err());
    }

    #[test]
    fn gather_scatter_roundtrip() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(td(&[4, 2], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]), true);
        let picked = g.gather(x, 0, &[2, 0]).unwrap();
        assert_eq!(g.value(picked).data(), &[4.0, 5.0, 0.0, 1.0]);
        let s = g.sum_all(picked);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn concat_and_split_grads() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(td(&[1, 2], &[1.0, 2.0]), true);
        let b = g.leaf(td(&[1, 2], &[3.0, 4.0]), true);
        let c = g.concat(&[a, b], 0).unwrap();
        assert_eq!(g.shape(c), &[2, 2]);
        let w = g.constant(td(&[2, 2], &[1.0, 0.0, 0.0, 2.0]));
        let prod = g.mul(c, w).unwrap();
        let s = g.sum_all(prod);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0, 0.0]);
        assert_eq!(g.grad(b).unwrap(), &[0.0, 2.0]);
    }

    #[test]
    fn broadcast_add_bias() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(td(&[2, 3], &[0.0; 6].to_vec().as_slice()), true);
        let b = g.leaf(td(&[3], &[1.0, 2.0, 3.0]), true);
        let y = g.add(x, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let s = g.sum_all(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(b).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn cross_entropy_matches_manual() {
        let mut g = Graph::<f64>::new();
        let logits = g.leaf(td(&[1, 2], &[2.0, 0.0]), true);
        let ce = g.cross_entropy_rows(logits, &[0]).unwrap();
        let expect = (1.0f64 + (-2.0f64).exp()).ln();
        assert!((g.value(ce).data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn gather_batched_and_grad() {
        let mut g = Graph::<f64>::new();
        // [2, 3, 1]
        let x = g.leaf(td(&[2, 3, 1], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]), true);
        let y = g.gather_batched(x, &[2, 0, 1, 1], 2).unwrap();
        assert_eq!(g.shape(y), &[2, 2, 1]);
        assert_eq!(g.value(y).data(), &[2.0, 0.0, 4.0, 4.0]);
        let s = g.sum_all(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 1.0, 0.0, 2.0, 0.0]);
    }
}

