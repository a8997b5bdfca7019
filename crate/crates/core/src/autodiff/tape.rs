use std::borrow::Cow;
use std::collections::HashMap;

use rand::Rng;

use super::tensor::{matmul_into, Scalar, Tensor};
use crate::error::{Error, Result};

pub type ParamId = usize;

/// Named learnable tensors in declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            entries: Vec::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.entries.push((name.into(), tensor));
        self.entries.len() - 1
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id].0
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn element_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }
}

/// Dense gradients, one tensor per parameter of the store they were computed for.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    grads: Vec<Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(params: &ParamStore<T>) -> Self {
        Self {
            grads: params
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.grads[id]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.grads.iter()
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        for (dst, src) in self.grads.iter_mut().zip(&other.grads) {
            for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d += scale * *s;
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for g in &mut self.grads {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.data().iter())
            .map(|v| {
                let v = v.to_f64().unwrap_or(f64::NAN);
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Constant,
    Param(ParamId),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Embedding {
        table: ParamId,
        ids: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Transpose(Var),
    Reshape(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    SegmentMean {
        x: Var,
        segment_of_row: Vec<Option<usize>>,
        counts: Vec<usize>,
    },
    RowSums(Var),
    Sum(Var),
    Bce {
        probs: Var,
        labels: Vec<T>,
        eps: T,
    },
}

struct Node<'p, T: Scalar> {
    value: Cow<'p, Tensor<T>>,
    op: Op<T>,
}

/// Records primitive applications in topological order for reverse-mode
/// differentiation. Parameter values are borrowed from a [`ParamStore`].
pub struct Tape<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<'p, T>>,
    param_vars: HashMap<ParamId, Var>,
}

fn check_same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Cow<'p, Tensor<T>>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Cow::Owned(value), Op::Constant)
    }

    pub fn constant_ref(&mut self, value: &'p Tensor<T>) -> Var {
        self.push(Cow::Borrowed(value), Op::Constant)
    }

    /// Leaf for a learnable parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let params = self.params;
        let v = self.push(Cow::Borrowed(params.get(id)), Op::Param(id));
        self.param_vars.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        check_same_shape(va, vb, "add")?;
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| *x + *y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(Cow::Owned(out), Op::Add(a, b)))
    }

    /// Adds a length-`cols` vector to every row of a matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vb.len() != vx.cols() {
            return Err(Error::shape(format!(
                "add_bias: bias of {} for {} columns",
                vb.len(),
                vx.cols()
            )));
        }
        let cols = vx.cols();
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| *v + vb.data()[i % cols])
            .collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(Cow::Owned(out), Op::AddBias(x, bias)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        check_same_shape(va, vb, "mul")?;
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| *x * *y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(Cow::Owned(out), Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| *v * factor).collect();
        let out = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        self.push(Cow::Owned(out), Op::Scale(x, factor))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) * op(b)` where `op` optionally transposes its argument.
    pub fn matmul_t(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 {
            return Err(Error::shape("matmul needs rank-2 operands"));
        }
        let (m, k) = if trans_a {
            (va.cols(), va.rows())
        } else {
            (va.rows(), va.cols())
        };
        let (k2, n) = if trans_b {
            (vb.cols(), vb.rows())
        } else {
            (vb.rows(), vb.cols())
        };
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul: {:?}{} x {:?}{}",
                va.shape(),
                if trans_a { "^T" } else { "" },
                vb.shape(),
                if trans_b { "^T" } else { "" }
            )));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(
            va.data(),
            va.rows(),
            va.cols(),
            trans_a,
            vb.data(),
            vb.rows(),
            vb.cols(),
            trans_b,
            &mut out,
            false,
        );
        let out = Tensor::matrix(m, n, out)?;
        Ok(self.push(
            Cow::Owned(out),
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            },
        ))
    }

    /// `x * w + b` for a row-major batch `x`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let data = vx
            .data()
            .iter()
            .map(|v| if *v > T::zero() { *v } else { T::zero() })
            .collect();
        let out = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        self.push(Cow::Owned(out), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| sigmoid(*v)).collect();
        let out = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        self.push(Cow::Owned(out), Op::Sigmoid(x))
    }

    /// Gathers rows of the embedding table `table` for the given ids.
    pub fn embedding(&mut self, table: ParamId, ids: &[usize]) -> Result<Var> {
        let t = self.params.get(table);
        let d = t.cols();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= t.rows() {
                return Err(Error::shape(format!(
                    "embedding id {id} outside table of {}",
                    t.rows()
                )));
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::matrix(ids.len(), d, data)?;
        Ok(self.push(
            Cow::Owned(out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Inverted dropout. Identity (same node) when `train` is false or `rate` is zero.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
        let vx = self.value(x);
        let mask: Vec<T> = (0..vx.len())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = vx.data().iter().zip(&mask).map(|(v, m)| *v * *m).collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(Cow::Owned(out), Op::Dropout { x, mask }))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat of zero tensors"));
        }
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let v = self.value(*p);
            if v.cols() != cols {
                return Err(Error::shape(format!(
                    "concat_rows: {} vs {} columns",
                    v.cols(),
                    cols
                )));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(Cow::Owned(out), Op::ConcatRows(parts.to_vec())))
    }

    /// Places matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat of zero tensors"));
        }
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for p in parts {
            let v = self.value(*p);
            if v.rows() != rows {
                return Err(Error::shape(format!(
                    "concat_cols: {} vs {} rows",
                    v.rows(),
                    rows
                )));
            }
            total += v.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let out = Tensor::matrix(rows, total, data)?;
        Ok(self.push(Cow::Owned(out), Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let vx = self.value(x);
        if start + width > vx.cols() {
            return Err(Error::shape(format!(
                "slice {start}..{} of {} columns",
                start + width,
                vx.cols()
            )));
        }
        let mut data = Vec::with_capacity(vx.rows() * width);
        for r in 0..vx.rows() {
            data.extend_from_slice(&vx.row(r)[start..start + width]);
        }
        let out = Tensor::matrix(vx.rows(), width, data)?;
        Ok(self.push(Cow::Owned(out), Op::SliceCols { x, start }))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (r, c) = (vx.rows(), vx.cols());
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = vx.data()[i * c + j];
            }
        }
        let out = Tensor::matrix(c, r, data).expect("same size");
        self.push(Cow::Owned(out), Op::Transpose(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(Cow::Owned(out), Op::Reshape(x)))
    }

    /// Row-wise softmax. `mask` is either one flag per element or one flag per
    /// column shared by all rows; `false` entries get weight exactly zero.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let vx = self.value(x);
        let out = softmax_rows_value(vx, mask)?;
        Ok(self.push(Cow::Owned(out), Op::SoftmaxRows(x)))
    }

    /// Normalizes each row to zero mean and unit variance, then applies `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let d = vx.cols();
        if vg.len() != d || vb.len() != d {
            return Err(Error::shape(format!(
                "layer_norm: gain/bias length vs {d} features"
            )));
        }
        let eps = T::from_f64_lossy(eps);
        let n = T::from_usize(d).expect("usize");
        let rows = vx.rows();
        let mut xhat = Vec::with_capacity(vx.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(vx.len());
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / n;
            let s = T::one() / (var + eps).sqrt();
            rstd.push(s);
            for (j, v) in row.iter().enumerate() {
                let h = (*v - mean) * s;
                xhat.push(h);
                data.push(h * vg.data()[j] + vb.data()[j]);
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(
            Cow::Owned(out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Averages rows that share a segment id. Rows tagged `None` are masked out.
    /// Output has one row per segment in `0..n_segments`.
    pub fn segment_mean(
        &mut self,
        x: Var,
        segment_of_row: &[Option<usize>],
        n_segments: usize,
    ) -> Result<Var> {
        let vx = self.value(x);
        if segment_of_row.len() != vx.rows() {
            return Err(Error::shape(format!(
                "segment_mean: {} segment tags for {} rows",
                segment_of_row.len(),
                vx.rows()
            )));
        }
        let d = vx.cols();
        let mut counts = vec![0usize; n_segments];
        for s in segment_of_row.iter().flatten() {
            if *s >= n_segments {
                return Err(Error::shape(format!("segment {s} outside 0..{n_segments}")));
            }
            counts[*s] += 1;
        }
        if let Some(empty) = counts.iter().position(|c| *c == 0) {
            return Err(Error::Mask(format!("segment {empty} has no unmasked rows")));
        }
        let mut data = vec![T::zero(); n_segments * d];
        for (r, seg) in segment_of_row.iter().enumerate() {
            if let Some(s) = seg {
                for (o, v) in data[s * d..(s + 1) * d].iter_mut().zip(vx.row(r)) {
                    *o += *v;
                }
            }
        }
        for (s, c) in counts.iter().enumerate() {
            let c = T::from_usize(*c).expect("usize");
            for o in &mut data[s * d..(s + 1) * d] {
                *o = *o / c;
            }
        }
        let out = Tensor::matrix(n_segments, d, data)?;
        Ok(self.push(
            Cow::Owned(out),
            Op::SegmentMean {
                x,
                segment_of_row: segment_of_row.to_vec(),
                counts,
            },
        ))
    }

    /// Mean over the rows whose mask flag is true; returns a `1 x cols` matrix.
    pub fn masked_mean_pool(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let segments: Vec<Option<usize>> = mask.iter().map(|m| m.then_some(0)).collect();
        self.segment_mean(x, &segments, 1)
    }

    /// Sum of each row, as an `rows x 1` matrix.
    pub fn row_sums(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let data = (0..vx.rows())
            .map(|r| vx.row(r).iter().copied().sum())
            .collect();
        let out = Tensor::matrix(vx.rows(), 1, data).expect("size");
        self.push(Cow::Owned(out), Op::RowSums(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum();
        self.push(Cow::Owned(Tensor::scalar(total)), Op::Sum(x))
    }

    /// Binary cross-entropy summed over elements, with probabilities clamped to
    /// `[eps, 1 - eps]` before taking logs.
    pub fn bce(&mut self, probs: Var, labels: &[T], eps: f64) -> Result<Var> {
        let vp = self.value(probs);
        if vp.len() != labels.len() {
            return Err(Error::shape(format!(
                "bce: {} probabilities for {} labels",
                vp.len(),
                labels.len()
            )));
        }
        let eps = T::from_f64_lossy(eps);
        let loss = bce_value(vp.data(), labels, eps);
        Ok(self.push(
            Cow::Owned(Tensor::scalar(loss)),
            Op::Bce {
                probs,
                labels: labels.to_vec(),
                eps,
            },
        ))
    }

    /// Reverse pass from a scalar node. Parameters not reachable from `loss`
    /// receive zero gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let out = self.value(loss);
        if out.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                out.shape()
            )));
        }
        let mut param_grads = Gradients::zeros_like(self.params);
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    for (d, s) in param_grads.get_mut(*id).data_mut().iter_mut().zip(&g) {
                        *d += *s;
                    }
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, |ga| add_into(ga, &g));
                    self.accumulate(&mut grads, *b, |gb| add_into(gb, &g));
                }
                Op::AddBias(x, b) => {
                    self.accumulate(&mut grads, *x, |gx| add_into(gx, &g));
                    let cols = self.value(*b).len();
                    self.accumulate(&mut grads, *b, |gb| {
                        for (i, v) in g.iter().enumerate() {
                            gb[i % cols] += *v;
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    self.accumulate(&mut grads, *a, |ga| {
                        for ((d, gv), bv) in ga.iter_mut().zip(&g).zip(vb) {
                            *d += *gv * *bv;
                        }
                    });
                    self.accumulate(&mut grads, *b, |gb| {
                        for ((d, gv), av) in gb.iter_mut().zip(&g).zip(va) {
                            *d += *gv * *av;
                        }
                    });
                }
                Op::Scale(x, c) => {
                    self.accumulate(&mut grads, *x, |gx| {
                        for (d, gv) in gx.iter_mut().zip(&g) {
                            *d += *gv * *c;
                        }
                    });
                }
                Op::MatMul {
                    a,
                    b,
                    trans_a,
                    trans_b,
                } => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let m = node.value.rows();
                    let n = node.value.cols();
                    let (ta, tb) = (*trans_a, *trans_b);
                    self.accumulate(&mut grads, *a, |ga| {
                        if ta {
                            // dA = op(B) * G^T
                            matmul_into(
                                vb.data(),
                                vb.rows(),
                                vb.cols(),
                                tb,
                                &g,
                                m,
                                n,
                                true,
                                ga,
                                true,
                            );
                        } else {
                            // dA = G * op(B)^T
                            matmul_into(
                                &g,
                                m,
                                n,
                                false,
                                vb.data(),
                                vb.rows(),
                                vb.cols(),
                                !tb,
                                ga,
                                true,
                            );
                        }
                    });
                    self.accumulate(&mut grads, *b, |gb| {
                        if tb {
                            // dB = G^T * op(A)
                            matmul_into(
                                &g,
                                m,
                                n,
                                true,
                                va.data(),
                                va.rows(),
                                va.cols(),
                                ta,
                                gb,
                                true,
                            );
                        } else {
                            // dB = op(A)^T * G
                            matmul_into(
                                va.data(),
                                va.rows(),
                                va.cols(),
                                !ta,
                                &g,
                                m,
                                n,
                                false,
                                gb,
                                true,
                            );
                        }
                    });
                }
                Op::Relu(x) => {
                    let vx = self.value(*x).data();
                    self.accumulate(&mut grads, *x, |gx| {
                        for ((d, gv), xv) in gx.iter_mut().zip(&g).zip(vx) {
                            if *xv > T::zero() {
                                *d += *gv;
                            }
                        }
                    });
                }
                Op::Sigmoid(x) => {
                    let y = node.value.data();
                    self.accumulate(&mut grads, *x, |gx| {
                        for ((d, gv), yv) in gx.iter_mut().zip(&g).zip(y) {
                            *d += *gv * *yv * (T::one() - *yv);
                        }
                    });
                }
                Op::Embedding { table, ids } => {
                    let dst = param_grads.get_mut(*table);
                    let d = dst.cols();
                    let data = dst.data_mut();
                    for (r, id) in ids.iter().enumerate() {
                        for (o, v) in data[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                        {
                            *o += *v;
                        }
                    }
                }
                Op::Dropout { x, mask } => {
                    self.accumulate(&mut grads, *x, |gx| {
                        for ((d, gv), m) in gx.iter_mut().zip(&g).zip(mask) {
                            *d += *gv * *m;
                        }
                    });
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.value(*p).len();
                        self.accumulate(&mut grads, *p, |gp| {
                            add_into(gp, &g[offset..offset + len])
                        });
                        offset += len;
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.cols();
                    let rows = node.value.rows();
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        self.accumulate(&mut grads, *p, |gp| {
                            for r in 0..rows {
                                add_into(
                                    &mut gp[r * w..(r + 1) * w],
                                    &g[r * total + offset..r * total + offset + w],
                                );
                            }
                        });
                        offset += w;
                    }
                }
                Op::SliceCols { x, start } => {
                    let full = self.value(*x).cols();
                    let w = node.value.cols();
                    let rows = node.value.rows();
                    let start = *start;
                    self.accumulate(&mut grads, *x, |gx| {
                        for r in 0..rows {
                            add_into(
                                &mut gx[r * full + start..r * full + start + w],
                                &g[r * w..(r + 1) * w],
                            );
                        }
                    });
                }
                Op::Transpose(x) => {
                    let (r, c) = (node.value.rows(), node.value.cols());
                    self.accumulate(&mut grads, *x, |gx| {
                        // gx is c x r
                        for i in 0..r {
                            for j in 0..c {
                                gx[j * r + i] += g[i * c + j];
                            }
                        }
                    });
                }
                Op::Reshape(x) => {
                    self.accumulate(&mut grads, *x, |gx| add_into(gx, &g));
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let c = y.cols();
                    self.accumulate(&mut grads, *x, |gx| {
                        for r in 0..y.rows() {
                            let yr = y.row(r);
                            let gr = &g[r * c..(r + 1) * c];
                            let dot: T = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
                            for j in 0..c {
                                gx[r * c + j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let d = node.value.cols();
                    let rows = node.value.rows();
                    let vg = self.value(*gain).data();
                    let n = T::from_usize(d).expect("usize");
                    self.accumulate(&mut grads, *gain, |gg| {
                        for (i, gv) in g.iter().enumerate() {
                            gg[i % d] += *gv * xhat[i];
                        }
                    });
                    self.accumulate(&mut grads, *bias, |gb| {
                        for (i, gv) in g.iter().enumerate() {
                            gb[i % d] += *gv;
                        }
                    });
                    self.accumulate(&mut grads, *x, |gx| {
                        let mut dxhat = vec![T::zero(); d];
                        for r in 0..rows {
                            let base = r * d;
                            for j in 0..d {
                                dxhat[j] = g[base + j] * vg[j];
                            }
                            let mean_d = dxhat.iter().copied().sum::<T>() / n;
                            let mean_dx = dxhat
                                .iter()
                                .zip(&xhat[base..base + d])
                                .map(|(a, b)| *a * *b)
                                .sum::<T>()
                                / n;
                            for j in 0..d {
                                gx[base + j] +=
                                    rstd[r] * (dxhat[j] - mean_d - xhat[base + j] * mean_dx);
                            }
                        }
                    });
                }
                Op::SegmentMean {
                    x,
                    segment_of_row,
                    counts,
                } => {
                    let d = node.value.cols();
                    self.accumulate(&mut grads, *x, |gx| {
                        for (r, seg) in segment_of_row.iter().enumerate() {
                            if let Some(s) = seg {
                                let c = T::from_usize(counts[*s]).expect("usize");
                                for j in 0..d {
                                    gx[r * d + j] += g[s * d + j] / c;
                                }
                            }
                        }
                    });
                }
                Op::RowSums(x) => {
                    let c = self.value(*x).cols();
                    self.accumulate(&mut grads, *x, |gx| {
                        for (i, v) in gx.iter_mut().enumerate() {
                            *v += g[i / c];
                        }
                    });
                }
                Op::Sum(x) => {
                    self.accumulate(&mut grads, *x, |gx| {
                        for v in gx.iter_mut() {
                            *v += g[0];
                        }
                    });
                }
                Op::Bce { probs, labels, eps } => {
                    let p = self.value(*probs).data();
                    let eps = *eps;
                    self.accumulate(&mut grads, *probs, |gp| {
                        for ((d, pv), y) in gp.iter_mut().zip(p).zip(labels) {
                            // The clamp is flat outside [eps, 1 - eps].
                            if *pv > eps && *pv < T::one() - eps {
                                *d += g[0] * (-*y / *pv + (T::one() - *y) / (T::one() - *pv));
                            }
                        }
                    });
                }
            }
        }
        Ok(param_grads)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        let slot = &mut grads[v.0];
        let buf = slot.get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
        f(buf);
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn bce_value<T: Scalar>(probs: &[T], labels: &[T], eps: T) -> T {
    let hi = T::one() - eps;
    probs
        .iter()
        .zip(labels)
        .map(|(p, y)| {
            let p = p.max(eps).min(hi);
            -(*y * p.ln() + (T::one() - *y) * (T::one() - p).ln())
        })
        .sum()
}

pub(crate) fn softmax_rows_value<T: Scalar>(
    x: &Tensor<T>,
    mask: Option<&[bool]>,
) -> Result<Tensor<T>> {
    let (rows, cols) = (x.rows(), x.cols());
    let keep = |r: usize, c: usize| -> Result<bool> {
        match mask {
            None => Ok(true),
            Some(m) if m.len() == rows * cols => Ok(m[r * cols + c]),
            Some(m) if m.len() == cols => Ok(m[c]),
            Some(m) => Err(Error::shape(format!(
                "softmax mask of {} for {}x{} scores",
                m.len(),
                rows,
                cols
            ))),
        }
    };
    let mut data = vec![T::zero(); rows * cols];
    for r in 0..rows {
        let row = x.row(r);
        let mut max = T::neg_infinity();
        for (c, v) in row.iter().enumerate() {
            if keep(r, c)? && *v > max {
                max = *v;
            }
        }
        if max == T::neg_infinity() {
            return Err(Error::Mask(format!("softmax row {r} is fully masked")));
        }
        let mut total = T::zero();
        for (c, v) in row.iter().enumerate() {
            if keep(r, c)? {
                let e = (*v - max).exp();
                data[r * cols + c] = e;
                total += e;
            }
        }
        for v in &mut data[r * cols..(r + 1) * cols] {
            *v = *v / total;
        }
    }
    Tensor::new(x.shape().to_vec(), data)
}
