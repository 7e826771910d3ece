use std::rc::Rc;

use super::Var;
use crate::tensor::{gemm, MatLayout, Tensor};

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

impl<'t> Var<'t> {
    fn unary<F, D>(self, f: F, df: D) -> Var<'t>
    where
        F: Fn(f64) -> f64,
        D: Fn(f64, f64) -> f64 + 'static,
    {
        let x = self.value();
        let y = x.map(f);
        let y_saved = Rc::new(y.clone());
        self.tape.op(y, &[self], move |g, _| {
            let mut out = g.clone();
            for ((o, &xi), &yi) in out.data_mut().iter_mut().zip(x.data()).zip(y_saved.data()) {
                *o *= df(xi, yi);
            }
            vec![Some(out)]
        })
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let y = self.value().map(|x| x * c);
        self.tape.op(y, &[self], move |g, _| vec![Some(g.map(|v| v * c))])
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let y = self.value().map(|x| x + c);
        self.tape.op(y, &[self], |g, _| vec![Some(g.clone())])
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    /// `ln(sigmoid(x))`, computed without overflow.
    pub fn log_sigmoid(self) -> Var<'t> {
        self.unary(log_sigmoid, |x, _| 1.0 - sigmoid(x))
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        self.unary(
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }

    /// Smooth L1 with the transition at 1.
    pub fn smooth_l1(self) -> Var<'t> {
        self.unary(
            |x| {
                if x.abs() < 1.0 {
                    0.5 * x * x
                } else {
                    x.abs() - 0.5
                }
            },
            |x, _| if x.abs() < 1.0 { x } else { x.signum() },
        )
    }

    fn same_shape(&self, other: &Var<'t>, what: &str) {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "{what}: shape mismatch");
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        self.same_shape(&other, "add");
        let y = self.value().zip_map(&other.value(), |a, b| a + b);
        self.tape
            .op(y, &[self, other], |g, _| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        self.same_shape(&other, "sub");
        let y = self.value().zip_map(&other.value(), |a, b| a - b);
        self.tape.op(y, &[self, other], |g, _| {
            vec![Some(g.clone()), Some(g.map(|v| -v))]
        })
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        self.same_shape(&other, "mul");
        let (a, b) = (self.value(), other.value());
        let y = a.zip_map(&b, |x, y| x * y);
        self.tape.op(y, &[self, other], move |g, need| {
            vec![
                need[0].then(|| g.zip_map(&b, |gv, bv| gv * bv)),
                need[1].then(|| g.zip_map(&a, |gv, av| gv * av)),
            ]
        })
    }

    pub fn div(self, other: Var<'t>) -> Var<'t> {
        self.same_shape(&other, "div");
        let (a, b) = (self.value(), other.value());
        let y = a.zip_map(&b, |x, y| x / y);
        self.tape.op(y, &[self, other], move |g, need| {
            let ga = need[0].then(|| g.zip_map(&b, |gv, bv| gv / bv));
            let gb = need[1].then(|| {
                let mut out = g.clone();
                for ((o, &av), &bv) in out.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
                    *o *= -av / (bv * bv);
                }
                out
            });
            vec![ga, gb]
        })
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(self, c: &Tensor) -> Var<'t> {
        let c = self.tape.constant(c.clone());
        self.mul(c)
    }

    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let y = Tensor::scalar(x.sum());
        self.tape.op(y, &[self], move |g, _| {
            vec![Some(Tensor::full(shape.clone(), g.item()))]
        })
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let x = self.value();
        let old = x.shape().to_vec();
        let y = (*x).clone().reshape(shape.to_vec());
        self.tape.op(y, &[self], move |g, _| {
            vec![Some(g.clone().reshape(old.clone()))]
        })
    }

    /// Product of two matrices.
    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.ndim(), 2, "matmul lhs must be 2-D");
        assert_eq!(b.ndim(), 2, "matmul rhs must be 2-D");
        let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
        assert_eq!(k, b.dim(0), "matmul inner dims");
        let y = a.matmul(&b);
        self.tape.op(y, &[self, other], move |g, need| {
            let ga = need[0].then(|| {
                let mut out = vec![0.0; m * k];
                gemm(
                    m,
                    n,
                    k,
                    g.data(),
                    MatLayout::row_major(n),
                    b.data(),
                    MatLayout::transposed(n),
                    &mut out,
                    0.0,
                );
                Tensor::new([m, k], out)
            });
            let gb = need[1].then(|| {
                let mut out = vec![0.0; k * n];
                gemm(
                    k,
                    m,
                    n,
                    a.data(),
                    MatLayout::transposed(k),
                    g.data(),
                    MatLayout::row_major(n),
                    &mut out,
                    0.0,
                );
                Tensor::new([k, n], out)
            });
            vec![ga, gb]
        })
    }

    pub fn transpose(self) -> Var<'t> {
        let y = self.value().transpose2();
        self.tape
            .op(y, &[self], |g, _| vec![Some(g.transpose2())])
    }

    /// Adds a length-`d` vector (shape `[d]` or `[1, d]`) to every row.
    pub fn add_row(self, b: Var<'t>) -> Var<'t> {
        let x = self.value();
        let bv = b.value();
        let (n, d) = (x.dim(0), x.dim(1));
        assert_eq!(bv.numel(), d, "add_row width");
        let bshape = bv.shape().to_vec();
        let mut y = (*x).clone();
        for i in 0..n {
            for j in 0..d {
                y.data_mut()[i * d + j] += bv.data()[j];
            }
        }
        self.tape.op(y, &[self, b], move |g, need| {
            let gb = need[1].then(|| {
                let mut acc = vec![0.0; d];
                for i in 0..n {
                    for j in 0..d {
                        acc[j] += g.data()[i * d + j];
                    }
                }
                Tensor::new(bshape.clone(), acc)
            });
            vec![Some(g.clone()), gb]
        })
    }

    /// Scales row `i` of an `[n, d]` matrix by `p[i]` (`p` of shape `[n, 1]`).
    pub fn mul_col(self, p: Var<'t>) -> Var<'t> {
        let x = self.value();
        let pv = p.value();
        let (n, d) = (x.dim(0), x.dim(1));
        assert_eq!(pv.numel(), n, "mul_col height");
        let pshape = pv.shape().to_vec();
        let mut y = (*x).clone();
        for i in 0..n {
            for j in 0..d {
                y.data_mut()[i * d + j] *= pv.data()[i];
            }
        }
        self.tape.op(y, &[self, p], move |g, need| {
            let gx = need[0].then(|| {
                let mut out = g.clone();
                for i in 0..n {
                    for j in 0..d {
                        out.data_mut()[i * d + j] *= pv.data()[i];
                    }
                }
                out
            });
            let gp = need[1].then(|| {
                let mut acc = vec![0.0; n];
                for (i, a) in acc.iter_mut().enumerate() {
                    for j in 0..d {
                        *a += g.data()[i * d + j] * x.data()[i * d + j];
                    }
                }
                Tensor::new(pshape.clone(), acc)
            });
            vec![gx, gp]
        })
    }

    /// Row sums of an `[n, d]` matrix, as `[n, 1]`.
    pub fn sum_cols(self) -> Var<'t> {
        let x = self.value();
        let (n, d) = (x.dim(0), x.dim(1));
        let y = Tensor::new(
            [n, 1],
            (0..n).map(|i| x.row(i).iter().sum()).collect(),
        );
        self.tape.op(y, &[self], move |g, _| {
            let mut out = vec![0.0; n * d];
            for i in 0..n {
                out[i * d..(i + 1) * d].fill(g.data()[i]);
            }
            vec![Some(Tensor::new([n, d], out))]
        })
    }

    /// Column means of an `[n, d]` matrix, as `[1, d]`.
    pub fn mean_rows(self) -> Var<'t> {
        let x = self.value();
        let (n, d) = (x.dim(0), x.dim(1));
        assert!(n > 0, "mean_rows of empty matrix");
        let mut acc = vec![0.0; d];
        for i in 0..n {
            for (a, v) in acc.iter_mut().zip(x.row(i)) {
                *a += v;
            }
        }
        let inv = 1.0 / n as f64;
        let y = Tensor::new([1, d], acc.into_iter().map(|v| v * inv).collect());
        self.tape.op(y, &[self], move |g, _| {
            let mut out = vec![0.0; n * d];
            for i in 0..n {
                for j in 0..d {
                    out[i * d + j] = g.data()[j] * inv;
                }
            }
            vec![Some(Tensor::new([n, d], out))]
        })
    }

    /// Row-wise softmax of an `[n, k]` matrix.
    pub fn softmax_rows(self) -> Var<'t> {
        let x = self.value();
        let (n, k) = (x.dim(0), x.dim(1));
        let mut y = vec![0.0; n * k];
        for i in 0..n {
            let row = x.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for j in 0..k {
                let e = (row[j] - m).exp();
                y[i * k + j] = e;
                s += e;
            }
            for j in 0..k {
                y[i * k + j] /= s;
            }
        }
        let y = Tensor::new([n, k], y);
        let ys = Rc::new(y.clone());
        self.tape.op(y, &[self], move |g, _| {
            let mut out = vec![0.0; n * k];
            for i in 0..n {
                let yr = ys.row(i);
                let gr = g.row(i);
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..k {
                    out[i * k + j] = yr[j] * (gr[j] - dot);
                }
            }
            vec![Some(Tensor::new([n, k], out))]
        })
    }

    /// Row-wise log-softmax of an `[n, k]` matrix.
    pub fn log_softmax_rows(self) -> Var<'t> {
        let x = self.value();
        let (n, k) = (x.dim(0), x.dim(1));
        let mut y = vec![0.0; n * k];
        let mut soft = vec![0.0; n * k];
        for i in 0..n {
            let row = x.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for j in 0..k {
                y[i * k + j] = row[j] - lse;
                soft[i * k + j] = y[i * k + j].exp();
            }
        }
        self.tape.op(Tensor::new([n, k], y), &[self], move |g, _| {
            let mut out = vec![0.0; n * k];
            for i in 0..n {
                let gr = g.row(i);
                let gs: f64 = gr.iter().sum();
                for j in 0..k {
                    out[i * k + j] = gr[j] - soft[i * k + j] * gs;
                }
            }
            vec![Some(Tensor::new([n, k], out))]
        })
    }

    /// Horizontal concatenation of `[n, d_i]` matrices.
    pub fn concat_cols(parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "concat of nothing");
        let tape = parts[0].tape;
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let n = vals[0].dim(0);
        let widths: Vec<usize> = vals
            .iter()
            .map(|v| {
                assert_eq!(v.dim(0), n, "concat_cols row mismatch");
                v.dim(1)
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut y = vec![0.0; n * total];
        for i in 0..n {
            let mut off = 0;
            for (v, &w) in vals.iter().zip(&widths) {
                y[i * total + off..i * total + off + w].copy_from_slice(v.row(i));
                off += w;
            }
        }
        tape.op(Tensor::new([n, total], y), parts, move |g, need| {
            let mut off = 0;
            widths
                .iter()
                .zip(need)
                .map(|(&w, &nd)| {
                    let start = off;
                    off += w;
                    nd.then(|| {
                        let mut out = vec![0.0; n * w];
                        for i in 0..n {
                            out[i * w..(i + 1) * w]
                                .copy_from_slice(&g.row(i)[start..start + w]);
                        }
                        Tensor::new([n, w], out)
                    })
                })
                .collect()
        })
    }

    /// Columns `start..end` of an `[n, d]` matrix.
    pub fn slice_cols(self, start: usize, end: usize) -> Var<'t> {
        let x = self.value();
        let (n, d) = (x.dim(0), x.dim(1));
        assert!(start <= end && end <= d);
        let w = end - start;
        let mut y = vec![0.0; n * w];
        for i in 0..n {
            y[i * w..(i + 1) * w].copy_from_slice(&x.row(i)[start..end]);
        }
        self.tape.op(Tensor::new([n, w], y), &[self], move |g, _| {
            let mut out = vec![0.0; n * d];
            for i in 0..n {
                out[i * d + start..i * d + end].copy_from_slice(g.row(i));
            }
            vec![Some(Tensor::new([n, d], out))]
        })
    }
}

#[cfg(test)]
mod tests {
    use crate::autograd::gradcheck::check;
    use crate::autograd::Var;
    use crate::tensor::Tensor;

    fn t(shape: &[usize], seed: u64) -> Tensor {
        let n: usize = shape.iter().product();
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let data = (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Tensor::new(shape.to_vec(), data)
    }

    #[test]
    fn elementwise_gradients() {
        let r = check(&[t(&[3, 4], 1), t(&[3, 4], 2)], 1e-6, 1e-3, |_, v| {
            let a = v[0].sigmoid().mul(v[1].tanh());
            let b = v[0].exp().div(v[1].square().add_scalar(1.0));
            let c = v[0].scale(3.0).smooth_l1().add(v[1].log_sigmoid());
            a.add(b).sub(c).leaky_relu(0.2).sum()
        });
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn matrix_gradients() {
        let r = check(
            &[t(&[3, 4], 3), t(&[4, 2], 4), t(&[2], 5), t(&[3, 1], 6)],
            1e-6,
            1e-3,
            |_, v| {
                let m = v[0].matmul(v[1]).add_row(v[2]).mul_col(v[3]);
                let c = Var::concat_cols(&[m, v[0].slice_cols(1, 3)]);
                let s = c.log_softmax_rows().sum();
                let p = c.softmax_rows().square().sum_cols().sum();
                let q = v[0].transpose().mean_rows().sum();
                s.add(p).add(q)
            },
        );
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = crate::autograd::Tape::new();
        let x = tape.constant(t(&[5, 3], 9).map(|v| v * 30.0));
        let p = x.softmax_rows().value();
        for i in 0..5 {
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
