//! Row gathers, segment reductions and constant sparse products.

use std::rc::Rc;

use super::Var;
use crate::tensor::Tensor;

/// Constant sparse matrix in compressed-row form.
#[derive(Clone, Debug, PartialEq)]
pub struct Csr {
    pub rows: usize,
    pub cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl Csr {
    /// Builds from `(row, col, value)` triplets; duplicates are summed in order.
    pub fn from_triplets(rows: usize, cols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by_key(|&(r, c, _)| (r, c));
        let mut indptr = vec![0; rows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            assert!(r < rows && c < cols, "triplet ({r}, {c}) out of {rows}x{cols}");
            if last == Some((r, c)) {
                *values.last_mut().expect("previous entry") += v;
                continue;
            }
            indices.push(c);
            values.push(v);
            indptr[r + 1] += 1;
            last = Some((r, c));
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        Self {
            rows,
            cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn to_dense(&self) -> Tensor {
        let mut out = vec![0.0; self.rows * self.cols];
        for r in 0..self.rows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                out[r * self.cols + self.indices[k]] += self.values[k];
            }
        }
        Tensor::new([self.rows, self.cols], out)
    }

    /// `self · x` for dense `x` of shape `[cols, d]`.
    pub fn matmul(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.dim(0), self.cols, "sparse matmul inner dims");
        let d = x.dim(1);
        let mut out = vec![0.0; self.rows * d];
        for r in 0..self.rows {
            let dst = &mut out[r * d..(r + 1) * d];
            for k in self.indptr[r]..self.indptr[r + 1] {
                let v = self.values[k];
                for (o, xv) in dst.iter_mut().zip(x.row(self.indices[k])) {
                    *o += v * xv;
                }
            }
        }
        Tensor::new([self.rows, d], out)
    }

    /// `selfᵀ · g` for dense `g` of shape `[rows, d]`.
    pub fn transpose_matmul(&self, g: &Tensor) -> Tensor {
        let d = g.dim(1);
        let mut out = vec![0.0; self.cols * d];
        for r in 0..self.rows {
            let src = g.row(r);
            for k in self.indptr[r]..self.indptr[r + 1] {
                let v = self.values[k];
                let c = self.indices[k];
                for (o, gv) in out[c * d..(c + 1) * d].iter_mut().zip(src) {
                    *o += v * gv;
                }
            }
        }
        Tensor::new([self.cols, d], out)
    }
}

impl<'t> Var<'t> {
    /// Rows `idx[i]` of an `[n, d]` matrix, stacked.
    pub fn gather_rows(self, idx: &[usize]) -> Var<'t> {
        let x = self.value();
        let (n, d) = (x.dim(0), x.dim(1));
        let idx: Rc<Vec<usize>> = Rc::new(idx.to_vec());
        let mut y = vec![0.0; idx.len() * d];
        for (i, &r) in idx.iter().enumerate() {
            assert!(r < n, "gather index {r} out of {n}");
            y[i * d..(i + 1) * d].copy_from_slice(x.row(r));
        }
        let m = idx.len();
        self.tape.op(Tensor::new([m, d], y), &[self], move |g, _| {
            let mut out = vec![0.0; n * d];
            for (i, &r) in idx.iter().enumerate() {
                for (o, gv) in out[r * d..(r + 1) * d].iter_mut().zip(g.row(i)) {
                    *o += gv;
                }
            }
            vec![Some(Tensor::new([n, d], out))]
        })
    }

    /// Sums rows of an `[e, d]` matrix into `n_segments` buckets by `segment[i]`.
    pub fn segment_sum(self, segment: &[usize], n_segments: usize) -> Var<'t> {
        let x = self.value();
        let (e, d) = (x.dim(0), x.dim(1));
        assert_eq!(segment.len(), e);
        let seg: Rc<Vec<usize>> = Rc::new(segment.to_vec());
        let mut y = vec![0.0; n_segments * d];
        for (i, &s) in seg.iter().enumerate() {
            for (o, v) in y[s * d..(s + 1) * d].iter_mut().zip(x.row(i)) {
                *o += v;
            }
        }
        self.tape.op(Tensor::new([n_segments, d], y), &[self], move |g, _| {
            let mut out = vec![0.0; e * d];
            for (i, &s) in seg.iter().enumerate() {
                out[i * d..(i + 1) * d].copy_from_slice(g.row(s));
            }
            vec![Some(Tensor::new([e, d], out))]
        })
    }

    /// Softmax of an `[e, 1]` score column within each segment.
    pub fn segment_softmax(self, segment: &[usize], n_segments: usize) -> Var<'t> {
        let x = self.value();
        let e = x.numel();
        assert_eq!(segment.len(), e);
        let seg: Rc<Vec<usize>> = Rc::new(segment.to_vec());
        let mut maxes = vec![f64::NEG_INFINITY; n_segments];
        for (i, &s) in seg.iter().enumerate() {
            maxes[s] = maxes[s].max(x.data()[i]);
        }
        let mut sums = vec![0.0; n_segments];
        let mut y: Vec<f64> = seg
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let v = (x.data()[i] - maxes[s]).exp();
                sums[s] += v;
                v
            })
            .collect();
        for (i, &s) in seg.iter().enumerate() {
            y[i] /= sums[s];
        }
        let ys = Rc::new(y.clone());
        let shape = x.shape().to_vec();
        self.tape.op(Tensor::new(shape.clone(), y), &[self], move |g, _| {
            let mut dots = vec![0.0; n_segments];
            for (i, &s) in seg.iter().enumerate() {
                dots[s] += g.data()[i] * ys[i];
            }
            let out = seg
                .iter()
                .enumerate()
                .map(|(i, &s)| ys[i] * (g.data()[i] - dots[s]))
                .collect();
            vec![Some(Tensor::new(shape.clone(), out))]
        })
    }

    /// Left-multiplies an `[k, d]` matrix by a constant sparse matrix.
    pub fn spmm(self, m: &Rc<Csr>) -> Var<'t> {
        let x = self.value();
        let y = m.matmul(&x);
        let m = Rc::clone(m);
        self.tape
            .op(y, &[self], move |g, _| vec![Some(m.transpose_matmul(g))])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::check;
    use crate::autograd::Tape;

    #[test]
    fn csr_matches_dense() {
        let m = Csr::from_triplets(3, 4, vec![(0, 1, 2.0), (2, 3, -1.0), (0, 1, 1.0), (1, 0, 0.5)]);
        let x = Tensor::new([4, 2], (0..8).map(f64::from).collect());
        assert_eq!(m.matmul(&x), m.to_dense().matmul(&x));
        let g = Tensor::new([3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(m.transpose_matmul(&g), m.to_dense().transpose2().matmul(&g));
    }

    #[test]
    fn graph_op_gradients() {
        let x = Tensor::new([4, 3], (0..12).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3).collect());
        let s = Tensor::new([6, 1], vec![0.3, -0.2, 1.1, 0.4, -0.7, 0.05]);
        let m = Rc::new(Csr::from_triplets(2, 4, vec![(0, 0, 0.5), (0, 3, 0.5), (1, 2, 1.0)]));
        let r = check(&[x, s], 1e-6, 1e-3, move |_, v| {
            let rows = v[0].gather_rows(&[0, 2, 2, 3, 1, 0]);
            let alpha = v[1].segment_softmax(&[0, 0, 1, 1, 1, 2], 3);
            let agg = rows.mul_col(alpha).segment_sum(&[0, 0, 1, 1, 1, 2], 3);
            agg.square().sum().add(v[0].spmm(&m).sigmoid().sum())
        });
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn segment_softmax_normalizes_each_segment() {
        let tape = Tape::new();
        let s = tape.constant(Tensor::new([5, 1], vec![3.0, 1.0, -2.0, 8.0, 0.0]));
        let a = s.segment_softmax(&[1, 0, 1, 1, 0], 2).value();
        let d = a.data();
        assert!((d[0] + d[2] + d[3] - 1.0).abs() < 1e-12);
        assert!((d[1] + d[4] - 1.0).abs() < 1e-12);
    }
}
