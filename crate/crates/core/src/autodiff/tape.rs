//! Reverse-mode differentiation over a flat op tape.
//!
//! The tape is rebuilt for every forward pass: ops append nodes in execution
//! order, so node ids are already a topological order and one reverse sweep
//! visits each node exactly once. Matrix products go through the gemm kernel
//! of [`Real`]; everything else is plain loops.
//!
//! Selection-style ops (nearest-neighbor matching inside [`Tape::chamfer_asym`],
//! the argmax of max-pooling, `gather_rows`) are piecewise constant in their
//! inputs, so their backward treats the selection as fixed. `gather_rows`
//! additionally blocks all gradient flow: its output is a fresh constant.

use super::real::Real;
use super::tensor::{Shape, Tensor};
use super::AutodiffError;
use crate::pointcloud::KdTree;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Clone, Debug)]
pub(crate) struct AffineSeg {
    pub start: usize,
    pub len: usize,
    pub scale: NodeId,
    pub bias: NodeId,
}

/// Row subset a chamfer term reads from its source node.
#[derive(Clone, Debug)]
pub enum SourceRows {
    All,
    Range { start: usize, len: usize },
    Explicit(Vec<u32>),
}

enum Op<T> {
    Leaf,
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    /// Per-point linear layer fused with column-wise max over rows. Backward
    /// touches only the argmax rows, which is what makes the PointNet tail
    /// cheap to differentiate.
    LinearMaxPool {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        argmax: Vec<u32>,
    },
    MaxPoolPoints {
        x: NodeId,
        argmax: Vec<u32>,
    },
    Relu {
        x: NodeId,
    },
    Tanh {
        x: NodeId,
    },
    HadamardAffine {
        x: NodeId,
        s: NodeId,
        b: NodeId,
    },
    SegmentedAffine {
        x: NodeId,
        segs: Vec<AffineSeg>,
    },
    Concat {
        a: NodeId,
        b: NodeId,
    },
    Slice {
        x: NodeId,
        start: usize,
    },
    SliceRows {
        x: NodeId,
        start_row: usize,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    AddN {
        xs: Vec<NodeId>,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        c: T,
    },
    Mean {
        x: NodeId,
    },
    SumSqNorm {
        x: NodeId,
    },
    EuclidNormRows {
        x: NodeId,
    },
    GatherRows,
    /// Mean over fixed target points of the distance to the nearest source
    /// row. `matches[j]` indexes into the selected source rows.
    ChamferAsym {
        src: NodeId,
        rows: Vec<u32>,
        target: Vec<T>,
        matches: Vec<u32>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss w.r.t. the node, if any flowed there.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads[id.0].take()
    }

    /// Gradient or a zero tensor of the node's shape.
    pub fn get_or_zeros(&self, id: NodeId, shape: Shape) -> Tensor<T> {
        match self.grads[id.0].as_ref() {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            check_finite: true,
        }
    }

    /// Disables the per-op finiteness scan. The training loop uses this and
    /// checks the loss scalars instead; correctness tests keep checks on.
    pub fn without_finite_checks() -> Self {
        Tape {
            nodes: Vec::new(),
            check_finite: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Constant input; no gradient is tracked through it.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<NodeId, AutodiffError> {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable input (parameters, probes under test).
    pub fn var(&mut self, value: Tensor<T>) -> Result<NodeId, AutodiffError> {
        self.push(value, Op::Leaf, true)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<NodeId, AutodiffError> {
        if self.check_finite && !value.all_finite() {
            return Err(AutodiffError::NonFiniteValue {
                context: op_name(&op),
            });
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(id)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// `y = x @ w^T + b`, rows of `x` treated as independent inputs.
    /// `w` is `Matrix(d_out, d_in)`; `b`, when present, is `Vector(d_out)`.
    /// A `Vector(d_in)` input is treated as a single row and yields a vector.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId, AutodiffError> {
        let (n, d_in, vec_in) = match self.value(x).shape() {
            Shape::Matrix(n, d) => (n, d, false),
            Shape::Vector(d) => (1, d, true),
            s => {
                return Err(AutodiffError::ShapeMismatch {
                    context: "linear input",
                    expected: Shape::Matrix(0, 0),
                    got: s,
                })
            }
        };
        let (d_out, w_in) = match self.value(w).shape() {
            Shape::Matrix(o, i) => (o, i),
            s => {
                return Err(AutodiffError::ShapeMismatch {
                    context: "linear weight",
                    expected: Shape::Matrix(0, d_in),
                    got: s,
                })
            }
        };
        if w_in != d_in {
            return Err(AutodiffError::ShapeMismatch {
                context: "linear weight",
                expected: Shape::Matrix(d_out, d_in),
                got: Shape::Matrix(d_out, w_in),
            });
        }
        if let Some(b) = b {
            let bs = self.value(b).shape();
            if bs != Shape::Vector(d_out) {
                return Err(AutodiffError::ShapeMismatch {
                    context: "linear bias",
                    expected: Shape::Vector(d_out),
                    got: bs,
                });
            }
        }

        let out_shape = if vec_in {
            Shape::Vector(d_out)
        } else {
            Shape::Matrix(n, d_out)
        };
        let mut out = match b {
            Some(b) => {
                // Seed each row with the bias, then accumulate the product.
                let bias = self.value(b).data().to_vec();
                let mut t = Tensor::uninit_for_gemm(out_shape);
                for r in 0..n {
                    t.data_mut()[r * d_out..(r + 1) * d_out].copy_from_slice(&bias);
                }
                t
            }
            None => Tensor::uninit_for_gemm(out_shape),
        };
        let beta = if b.is_some() { T::ONE } else { T::ZERO };
        unsafe {
            T::gemm(
                n,
                d_in,
                d_out,
                T::ONE,
                self.value(x).data().as_ptr(),
                d_in as isize,
                1,
                // w^T view of the row-major (d_out, d_in) weight matrix
                self.value(w).data().as_ptr(),
                1,
                d_in as isize,
                beta,
                out.data_mut().as_mut_ptr(),
                d_out as isize,
                1,
            );
        }
        let rg = self.needs(&[x, w]) || b.map_or(false, |b| self.requires_grad(b));
        self.push(out, Op::Linear { x, w, b }, rg)
    }

    /// Linear layer fused with column-wise max over rows: the per-point MLP
    /// tail of a PointNet encoder. Output is `Vector(d_out)`; column `c`
    /// remembers its argmax row (first row on ties).
    pub fn linear_max_pool(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    ) -> Result<NodeId, AutodiffError> {
        let full = self.linear(x, w, b)?;
        let (n, d_out) = match self.value(full).shape() {
            Shape::Matrix(n, d) => (n, d),
            Shape::Vector(d) => (1, d),
            _ => unreachable!(),
        };
        let data = self.value(full).data();
        let mut pooled = data[..d_out].to_vec();
        let mut argmax = vec![0u32; d_out];
        for r in 1..n {
            let row = &data[r * d_out..(r + 1) * d_out];
            for c in 0..d_out {
                if row[c] > pooled[c] {
                    pooled[c] = row[c];
                    argmax[c] = r as u32;
                }
            }
        }
        // Drop the full activation matrix: replace the linear node's tensor
        // with an empty placeholder is not possible on a flat tape, so we
        // simply accept it as scratch; it is not revisited by backward because
        // the fused node references x/w/b directly.
        let rg = self.nodes[full.0].requires_grad;
        self.nodes.pop();
        self.push(
            Tensor::vector(pooled),
            Op::LinearMaxPool { x, w, b, argmax },
            rg,
        )
    }

    /// Column-wise max over rows of a matrix; gradient routes to each
    /// column's argmax row only (first row on ties).
    pub fn max_pool_points(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let (n, d) = match self.value(x).shape() {
            Shape::Matrix(n, d) => (n, d),
            s => {
                return Err(AutodiffError::ShapeMismatch {
                    context: "max_pool_points input",
                    expected: Shape::Matrix(0, 0),
                    got: s,
                })
            }
        };
        let data = self.value(x).data();
        let mut pooled = data[..d].to_vec();
        let mut argmax = vec![0u32; d];
        for r in 1..n {
            let row = &data[r * d..(r + 1) * d];
            for c in 0..d {
                if row[c] > pooled[c] {
                    pooled[c] = row[c];
                    argmax[c] = r as u32;
                }
            }
        }
        let rg = self.requires_grad(x);
        self.push(Tensor::vector(pooled), Op::MaxPoolPoints { x, argmax }, rg)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let out: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| v.maximum(T::ZERO))
            .collect();
        let shape = self.value(x).shape();
        let rg = self.requires_grad(x);
        self.push(Tensor::from_vec(shape, out)?, Op::Relu { x }, rg)
    }

    pub fn tanh_act(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let out: Vec<T> = self.value(x).data().iter().map(|&v| v.tanh()).collect();
        let shape = self.value(x).shape();
        let rg = self.requires_grad(x);
        self.push(Tensor::from_vec(shape, out)?, Op::Tanh { x }, rg)
    }

    /// Rows `x_i -> s ⊙ x_i + b` with `s`, `b` of length `cols(x)`.
    pub fn hadamard_affine(&mut self, x: NodeId, s: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let d = self.value(x).shape().cols();
        for (node, context) in [(s, "hadamard scale"), (b, "hadamard bias")] {
            let got = self.value(node).shape();
            if got != Shape::Vector(d) {
                return Err(AutodiffError::ShapeMismatch {
                    context,
                    expected: Shape::Vector(d),
                    got,
                });
            }
        }
        let shape = self.value(x).shape();
        let rows = shape.rows();
        let seg = AffineSeg {
            start: 0,
            len: rows,
            scale: s,
            bias: b,
        };
        let out = self.apply_affine_segs(x, &[seg.clone()])?;
        let rg = self.needs(&[x, s, b]);
        self.push(Tensor::from_vec(shape, out)?, Op::HadamardAffine { x, s, b }, rg)
    }

    /// Row-range-wise scale/bias: segment `i` applies its own `s`,`b` pair to
    /// its row range. Ranges must tile `[0, rows)` in order.
    pub fn segmented_affine(&mut self, x: NodeId, segs: Vec<(usize, usize, NodeId, NodeId)>) -> Result<NodeId, AutodiffError> {
        let shape = self.value(x).shape();
        let (rows, d) = match shape {
            Shape::Matrix(r, c) => (r, c),
            s => {
                return Err(AutodiffError::ShapeMismatch {
                    context: "segmented_affine input",
                    expected: Shape::Matrix(0, 0),
                    got: s,
                })
            }
        };
        let mut cursor = 0usize;
        let mut parsed = Vec::with_capacity(segs.len());
        for (start, len, s, b) in segs {
            if start != cursor || start + len > rows {
                return Err(AutodiffError::IndexOutOfRange {
                    context: "segmented_affine segment",
                    index: start + len,
                    len: rows,
                });
            }
            cursor = start + len;
            for (node, context) in [(s, "segment scale"), (b, "segment bias")] {
                let got = self.value(node).shape();
                if got != Shape::Vector(d) {
                    return Err(AutodiffError::ShapeMismatch {
                        context,
                        expected: Shape::Vector(d),
                        got,
                    });
                }
            }
            parsed.push(AffineSeg {
                start,
                len,
                scale: s,
                bias: b,
            });
        }
        if cursor != rows {
            return Err(AutodiffError::IndexOutOfRange {
                context: "segmented_affine coverage",
                index: cursor,
                len: rows,
            });
        }
        let out = self.apply_affine_segs(x, &parsed)?;
        let mut rg = self.requires_grad(x);
        for seg in &parsed {
            rg = rg || self.needs(&[seg.scale, seg.bias]);
        }
        self.push(Tensor::from_vec(shape, out)?, Op::SegmentedAffine { x, segs: parsed }, rg)
    }

    fn apply_affine_segs(&self, x: NodeId, segs: &[AffineSeg]) -> Result<Vec<T>, AutodiffError> {
        let xv = self.value(x);
        let d = xv.shape().cols();
        let mut out = vec![T::ZERO; xv.len()];
        for seg in segs {
            let s = self.value(seg.scale).data();
            let b = self.value(seg.bias).data();
            for r in seg.start..seg.start + seg.len {
                let xin = &xv.data()[r * d..(r + 1) * d];
                let o = &mut out[r * d..(r + 1) * d];
                for c in 0..d {
                    o[c] = s[c] * xin[c] + b[c];
                }
            }
        }
        Ok(out)
    }

    /// Concatenation of two vectors.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        let (la, lb) = match (va.shape(), vb.shape()) {
            (Shape::Vector(la), Shape::Vector(lb)) => (la, lb),
            (sa, _) => {
                return Err(AutodiffError::ShapeMismatch {
                    context: "concat",
                    expected: Shape::Vector(0),
                    got: sa,
                })
            }
        };
        let mut data = Vec::with_capacity(la + lb);
        data.extend_from_slice(va.data());
        data.extend_from_slice(vb.data());
        let rg = self.needs(&[a, b]);
        self.push(Tensor::vector(data), Op::Concat { a, b }, rg)
    }

    /// Contiguous slice of a vector.
    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, AutodiffError> {
        let total = match self.value(x).shape() {
            Shape::Vector(n) => n,
            s => {
                return Err(AutodiffError::ShapeMismatch {
                    context: "slice",
                    expected: Shape::Vector(0),
                    got: s,
                })
            }
        };
        if start + len > total {
            return Err(AutodiffError::IndexOutOfRange {
                context: "slice",
                index: start + len,
                len: total,
            });
        }
        let data = self.value(x).data()[start..start + len].to_vec();
        let rg = self.requires_grad(x);
        self.push(Tensor::vector(data), Op::Slice { x, start }, rg)
    }

    /// Contiguous row range of a matrix.
    pub fn slice_rows(&mut self, x: NodeId, start_row: usize, n_rows: usize) -> Result<NodeId, AutodiffError> {
        let (rows, d) = match self.value(x).shape() {
            Shape::Matrix(r, c) => (r, c),
            s => {
                return Err(AutodiffError::ShapeMismatch {
                    context: "slice_rows",
                    expected: Shape::Matrix(0, 0),
                    got: s,
                })
            }
        };
        if start_row + n_rows > rows {
            return Err(AutodiffError::IndexOutOfRange {
                context: "slice_rows",
                index: start_row + n_rows,
                len: rows,
            });
        }
        let data = self.value(x).data()[start_row * d..(start_row + n_rows) * d].to_vec();
        let rg = self.requires_grad(x);
        self.push(
            Tensor::from_vec(Shape::Matrix(n_rows, d), data)?,
            Op::SliceRows { x, start_row },
            rg,
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch {
                context: "add",
                expected: sa,
                got: sb,
            });
        }
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.needs(&[a, b]);
        self.push(Tensor::from_vec(sa, data)?, Op::Add { a, b }, rg)
    }

    /// Sum of same-shape nodes.
    pub fn add_n(&mut self, xs: &[NodeId]) -> Result<NodeId, AutodiffError> {
        let first = xs.first().ok_or(AutodiffError::IndexOutOfRange {
            context: "add_n",
            index: 0,
            len: 0,
        })?;
        let shape = self.value(*first).shape();
        let mut data = self.value(*first).data().to_vec();
        for x in &xs[1..] {
            let got = self.value(*x).shape();
            if got != shape {
                return Err(AutodiffError::ShapeMismatch {
                    context: "add_n",
                    expected: shape,
                    got,
                });
            }
            for (acc, v) in data.iter_mut().zip(self.value(*x).data()) {
                *acc += *v;
            }
        }
        let rg = self.needs(xs);
        self.push(Tensor::from_vec(shape, data)?, Op::AddN { xs: xs.to_vec() }, rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch {
                context: "sub",
                expected: sa,
                got: sb,
            });
        }
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let rg = self.needs(&[a, b]);
        self.push(Tensor::from_vec(sa, data)?, Op::Sub { a, b }, rg)
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> Result<NodeId, AutodiffError> {
        let shape = self.value(x).shape();
        let data: Vec<T> = self.value(x).data().iter().map(|&v| v * c).collect();
        let rg = self.requires_grad(x);
        self.push(Tensor::from_vec(shape, data)?, Op::Scale { x, c }, rg)
    }

    /// Mean over all elements.
    pub fn mean(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let len = self.value(x).len();
        let mut acc = T::ZERO;
        for &v in self.value(x).data() {
            acc += v;
        }
        let m = acc / T::from_f64(len as f64);
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(m), Op::Mean { x }, rg)
    }

    /// Sum of squared elements.
    pub fn sum_sq_norm(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let mut acc = T::ZERO;
        for &v in self.value(x).data() {
            acc += v * v;
        }
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(acc), Op::SumSqNorm { x }, rg)
    }

    /// Per-row Euclidean norm of a matrix; rows of exactly zero norm get a
    /// zero subgradient.
    pub fn euclid_norm_rows(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let (n, d) = match self.value(x).shape() {
            Shape::Matrix(r, c) => (r, c),
            s => {
                return Err(AutodiffError::ShapeMismatch {
                    context: "euclid_norm_rows",
                    expected: Shape::Matrix(0, 0),
                    got: s,
                })
            }
        };
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(n);
        for r in 0..n {
            let mut acc = T::ZERO;
            for c in 0..d {
                let v = data[r * d + c];
                acc += v * v;
            }
            out.push(acc.sqrt());
        }
        let rg = self.requires_grad(x);
        self.push(Tensor::vector(out), Op::EuclidNormRows { x }, rg)
    }

    /// Row selection with blocked gradient: the result is a fresh constant,
    /// so neither the indices nor the source receive any gradient.
    pub fn gather_rows(&mut self, x: NodeId, indices: &[u32]) -> Result<NodeId, AutodiffError> {
        let (rows, d) = match self.value(x).shape() {
            Shape::Matrix(r, c) => (r, c),
            s => {
                return Err(AutodiffError::ShapeMismatch {
                    context: "gather_rows",
                    expected: Shape::Matrix(0, 0),
                    got: s,
                })
            }
        };
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            let i = i as usize;
            if i >= rows {
                return Err(AutodiffError::IndexOutOfRange {
                    context: "gather_rows",
                    index: i,
                    len: rows,
                });
            }
            data.extend_from_slice(self.value(x).row(i));
        }
        self.push(
            Tensor::from_vec(Shape::Matrix(indices.len(), d), data)?,
            Op::GatherRows,
            false,
        )
    }

    /// Asymmetric Chamfer of selected source rows against a fixed target
    /// point set: mean over target points of the distance to the nearest
    /// selected row. The nearest-neighbor selection is held fixed under
    /// differentiation.
    pub fn chamfer_asym(
        &mut self,
        src: NodeId,
        rows: SourceRows,
        target: &[[f64; 3]],
    ) -> Result<NodeId, AutodiffError> {
        let (n, d) = match self.value(src).shape() {
            Shape::Matrix(r, c) => (r, c),
            s => {
                return Err(AutodiffError::ShapeMismatch {
                    context: "chamfer_asym source",
                    expected: Shape::Matrix(0, 3),
                    got: s,
                })
            }
        };
        if d != 3 {
            return Err(AutodiffError::ShapeMismatch {
                context: "chamfer_asym source",
                expected: Shape::Matrix(n, 3),
                got: Shape::Matrix(n, d),
            });
        }
        if target.is_empty() {
            return Err(AutodiffError::IndexOutOfRange {
                context: "chamfer_asym target",
                index: 0,
                len: 0,
            });
        }
        let row_ids: Vec<u32> = match rows {
            SourceRows::All => (0..n as u32).collect(),
            SourceRows::Range { start, len } => {
                if start + len > n || len == 0 {
                    return Err(AutodiffError::IndexOutOfRange {
                        context: "chamfer_asym rows",
                        index: start + len,
                        len: n,
                    });
                }
                (start as u32..(start + len) as u32).collect()
            }
            SourceRows::Explicit(ids) => {
                if ids.is_empty() || ids.iter().any(|&i| i as usize >= n) {
                    return Err(AutodiffError::IndexOutOfRange {
                        context: "chamfer_asym rows",
                        index: ids.iter().map(|&i| i as usize).max().unwrap_or(0),
                        len: n,
                    });
                }
                ids
            }
        };

        // Match in f64 via a kd-tree over the selected rows, then evaluate
        // the differentiable distances in working precision.
        let src_data = self.value(src).data();
        let pts: Vec<[f64; 3]> = row_ids
            .iter()
            .map(|&i| {
                let r = &src_data[i as usize * 3..i as usize * 3 + 3];
                [r[0].to_f64(), r[1].to_f64(), r[2].to_f64()]
            })
            .collect();
        let tree = KdTree::from_coords(&pts);
        let mut matches = Vec::with_capacity(target.len());
        let mut flat_target = Vec::with_capacity(target.len() * 3);
        let mut acc = T::ZERO;
        for q in target {
            let (idx, _) = tree.nearest_coord(*q);
            matches.push(idx as u32);
            let qt = [T::from_f64(q[0]), T::from_f64(q[1]), T::from_f64(q[2])];
            flat_target.extend_from_slice(&qt);
            let srow = &src_data[row_ids[idx] as usize * 3..row_ids[idx] as usize * 3 + 3];
            let mut d2 = T::ZERO;
            for c in 0..3 {
                let diff = srow[c] - qt[c];
                d2 += diff * diff;
            }
            acc += d2.sqrt();
        }
        let value = acc / T::from_f64(target.len() as f64);
        let rg = self.requires_grad(src);
        self.push(
            Tensor::scalar(value),
            Op::ChamferAsym {
                src,
                rows: row_ids,
                target: flat_target,
                matches,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar loss node. Returns per-node gradients for
    /// every node that requires gradient and was reached.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>, AutodiffError> {
        if self.value(loss).shape() != Shape::Scalar {
            return Err(AutodiffError::ShapeMismatch {
                context: "backward seed",
                expected: Shape::Scalar,
                got: self.value(loss).shape(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::ONE));

        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let dy = grads[i].take().unwrap();
            self.backprop_node(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, update: impl FnOnce(&mut Tensor<T>)) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[id.0].value.shape()));
        }
        update(slot.as_mut().unwrap());
    }

    fn backprop_node(&self, i: usize, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &self.nodes[i].op {
            Op::Leaf | Op::GatherRows => {}
            Op::Linear { x, w, b } => self.backprop_linear(*x, *w, *b, dy, grads),
            Op::LinearMaxPool { x, w, b, argmax } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let d_in = xv.shape().cols();
                let g = dy.data();
                self.accumulate(grads, *w, |dw| {
                    for (c, &r) in argmax.iter().enumerate() {
                        let xr = &xv.data()[r as usize * d_in..(r as usize + 1) * d_in];
                        let dwr = &mut dw.data_mut()[c * d_in..(c + 1) * d_in];
                        for k in 0..d_in {
                            dwr[k] += g[c] * xr[k];
                        }
                    }
                });
                self.accumulate(grads, *x, |dx| {
                    for (c, &r) in argmax.iter().enumerate() {
                        let wr = &wv.data()[c * d_in..(c + 1) * d_in];
                        let dxr = &mut dx.data_mut()[r as usize * d_in..(r as usize + 1) * d_in];
                        for k in 0..d_in {
                            dxr[k] += g[c] * wr[k];
                        }
                    }
                });
                if let Some(b) = b {
                    self.accumulate(grads, *b, |db| {
                        for (c, gv) in g.iter().enumerate() {
                            db.data_mut()[c] += *gv;
                        }
                    });
                }
            }
            Op::MaxPoolPoints { x, argmax } => {
                let d = self.value(*x).shape().cols();
                self.accumulate(grads, *x, |dx| {
                    for (c, &r) in argmax.iter().enumerate() {
                        dx.data_mut()[r as usize * d + c] += dy.data()[c];
                    }
                });
            }
            Op::Relu { x } => {
                let y = self.nodes[i].value.data();
                self.accumulate(grads, *x, |dx| {
                    for (k, g) in dx.data_mut().iter_mut().enumerate() {
                        if y[k] > T::ZERO {
                            *g += dy.data()[k];
                        }
                    }
                });
            }
            Op::Tanh { x } => {
                let y = self.nodes[i].value.data();
                self.accumulate(grads, *x, |dx| {
                    for (k, g) in dx.data_mut().iter_mut().enumerate() {
                        let t = y[k];
                        *g += dy.data()[k] * (T::ONE - t * t);
                    }
                });
            }
            Op::HadamardAffine { x, s, b } => {
                let seg = AffineSeg {
                    start: 0,
                    len: self.value(*x).shape().rows(),
                    scale: *s,
                    bias: *b,
                };
                self.backprop_affine_segs(*x, std::slice::from_ref(&seg), dy, grads);
            }
            Op::SegmentedAffine { x, segs } => {
                self.backprop_affine_segs(*x, segs, dy, grads);
            }
            Op::Concat { a, b } => {
                let la = self.value(*a).len();
                self.accumulate(grads, *a, |da| {
                    for (g, v) in da.data_mut().iter_mut().zip(&dy.data()[..la]) {
                        *g += *v;
                    }
                });
                self.accumulate(grads, *b, |db| {
                    for (g, v) in db.data_mut().iter_mut().zip(&dy.data()[la..]) {
                        *g += *v;
                    }
                });
            }
            Op::Slice { x, start } => {
                self.accumulate(grads, *x, |dx| {
                    for (k, v) in dy.data().iter().enumerate() {
                        dx.data_mut()[start + k] += *v;
                    }
                });
            }
            Op::SliceRows { x, start_row } => {
                let d = self.value(*x).shape().cols();
                self.accumulate(grads, *x, |dx| {
                    let off = start_row * d;
                    for (k, v) in dy.data().iter().enumerate() {
                        dx.data_mut()[off + k] += *v;
                    }
                });
            }
            Op::Add { a, b } => {
                for id in [a, b] {
                    self.accumulate(grads, *id, |dt| {
                        for (g, v) in dt.data_mut().iter_mut().zip(dy.data()) {
                            *g += *v;
                        }
                    });
                }
            }
            Op::AddN { xs } => {
                for id in xs {
                    self.accumulate(grads, *id, |dt| {
                        for (g, v) in dt.data_mut().iter_mut().zip(dy.data()) {
                            *g += *v;
                        }
                    });
                }
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, |da| {
                    for (g, v) in da.data_mut().iter_mut().zip(dy.data()) {
                        *g += *v;
                    }
                });
                self.accumulate(grads, *b, |db| {
                    for (g, v) in db.data_mut().iter_mut().zip(dy.data()) {
                        *g -= *v;
                    }
                });
            }
            Op::Scale { x, c } => {
                let c = *c;
                self.accumulate(grads, *x, |dx| {
                    for (g, v) in dx.data_mut().iter_mut().zip(dy.data()) {
                        *g += *v * c;
                    }
                });
            }
            Op::Mean { x } => {
                let len = self.value(*x).len();
                let g = dy.item() / T::from_f64(len as f64);
                self.accumulate(grads, *x, |dx| {
                    for v in dx.data_mut() {
                        *v += g;
                    }
                });
            }
            Op::SumSqNorm { x } => {
                let g = dy.item();
                let xv = self.value(*x);
                self.accumulate(grads, *x, |dx| {
                    for (gv, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                        *gv += g * (v + v);
                    }
                });
            }
            Op::EuclidNormRows { x } => {
                let xv = self.value(*x);
                let norms = self.nodes[i].value.data();
                let d = xv.shape().cols();
                self.accumulate(grads, *x, |dx| {
                    for (r, &norm) in norms.iter().enumerate() {
                        if norm > T::ZERO {
                            let g = dy.data()[r] / norm;
                            let xr = &xv.data()[r * d..(r + 1) * d];
                            let dxr = &mut dx.data_mut()[r * d..(r + 1) * d];
                            for c in 0..d {
                                dxr[c] += g * xr[c];
                            }
                        }
                    }
                });
            }
            Op::ChamferAsym {
                src,
                rows,
                target,
                matches,
            } => {
                let g = dy.item() / T::from_f64(matches.len() as f64);
                let sv = self.value(*src);
                self.accumulate(grads, *src, |dsrc| {
                    for (j, &m) in matches.iter().enumerate() {
                        let row = rows[m as usize] as usize;
                        let srow = &sv.data()[row * 3..row * 3 + 3];
                        let q = &target[j * 3..j * 3 + 3];
                        let mut d2 = T::ZERO;
                        for c in 0..3 {
                            let diff = srow[c] - q[c];
                            d2 += diff * diff;
                        }
                        let dist = d2.sqrt();
                        if dist > T::ZERO {
                            let dst_row = &mut dsrc.data_mut()[row * 3..row * 3 + 3];
                            for c in 0..3 {
                                dst_row[c] += g * (srow[c] - q[c]) / dist;
                            }
                        }
                    }
                });
            }
        }
    }

    fn backprop_affine_segs(&self, x: NodeId, segs: &[AffineSeg], dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let xv = self.value(x);
        let d = xv.shape().cols();
        for seg in segs {
            let sv = self.value(seg.scale);
            self.accumulate(grads, x, |dx| {
                for r in seg.start..seg.start + seg.len {
                    let dyr = &dy.data()[r * d..(r + 1) * d];
                    let dxr = &mut dx.data_mut()[r * d..(r + 1) * d];
                    for c in 0..d {
                        dxr[c] += dyr[c] * sv.data()[c];
                    }
                }
            });
            self.accumulate(grads, seg.scale, |ds| {
                for r in seg.start..seg.start + seg.len {
                    let dyr = &dy.data()[r * d..(r + 1) * d];
                    let xr = &xv.data()[r * d..(r + 1) * d];
                    for c in 0..d {
                        ds.data_mut()[c] += dyr[c] * xr[c];
                    }
                }
            });
            self.accumulate(grads, seg.bias, |db| {
                for r in seg.start..seg.start + seg.len {
                    let dyr = &dy.data()[r * d..(r + 1) * d];
                    for c in 0..d {
                        db.data_mut()[c] += dyr[c];
                    }
                }
            });
        }
    }

    fn backprop_linear(&self, x: NodeId, w: NodeId, b: Option<NodeId>, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, d_in) = (xv.shape().rows(), xv.shape().cols());
        let d_out = wv.shape().rows();

        // dW += dY^T @ X
        self.accumulate(grads, w, |dw| unsafe {
            T::gemm(
                d_out,
                n,
                d_in,
                T::ONE,
                dy.data().as_ptr(),
                1,
                d_out as isize,
                xv.data().as_ptr(),
                d_in as isize,
                1,
                T::ONE,
                dw.data_mut().as_mut_ptr(),
                d_in as isize,
                1,
            );
        });
        // dX += dY @ W
        self.accumulate(grads, x, |dx| unsafe {
            T::gemm(
                n,
                d_out,
                d_in,
                T::ONE,
                dy.data().as_ptr(),
                d_out as isize,
                1,
                wv.data().as_ptr(),
                d_in as isize,
                1,
                T::ONE,
                dx.data_mut().as_mut_ptr(),
                d_in as isize,
                1,
            );
        });
        if let Some(b) = b {
            self.accumulate(grads, b, |db| {
                for r in 0..n {
                    let row = &dy.data()[r * d_out..(r + 1) * d_out];
                    for c in 0..d_out {
                        db.data_mut()[c] += row[c];
                    }
                }
            });
        }
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Linear { .. } => "linear",
        Op::LinearMaxPool { .. } => "linear_max_pool",
        Op::MaxPoolPoints { .. } => "max_pool_points",
        Op::Relu { .. } => "relu",
        Op::Tanh { .. } => "tanh",
        Op::HadamardAffine { .. } => "hadamard_affine",
        Op::SegmentedAffine { .. } => "segmented_affine",
        Op::Concat { .. } => "concat",
        Op::Slice { .. } => "slice",
        Op::SliceRows { .. } => "slice_rows",
        Op::Add { .. } => "add",
        Op::AddN { .. } => "add_n",
        Op::Sub { .. } => "sub",
        Op::Scale { .. } => "scale",
        Op::Mean { .. } => "mean",
        Op::SumSqNorm { .. } => "sum_sq_norm",
        Op::EuclidNormRows { .. } => "euclid_norm_rows",
        Op::GatherRows => "gather_rows",
        Op::ChamferAsym { .. } => "chamfer_asym",
    }
}
