//! Differentiable operations on [`Var`].
//!
//! Shape violations are programming errors and panic.

use crate::linalg::{gemm, Layout};
use crate::{Element, Tensor, Var};

fn same_shape(a: &[usize], b: &[usize], op: &str) {
    assert_eq!(a, b, "{op}: shape mismatch {a:?} vs {b:?}");
}

fn t<T: Element>(v: f64) -> T {
    T::from_f64(v)
}

impl<'t, T: Element> Var<'t, T> {
    fn unary(self, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Self {
        let y = self.value().map(f);
        self.tape.record(y, &[self], move |c| {
            let data = c
                .grad
                .data()
                .iter()
                .zip(c.inputs[0].data())
                .zip(c.output.data())
                .map(|((&g, &x), &y)| g * df(x, y))
                .collect();
            vec![Some(Tensor::new(c.grad.shape().to_vec(), data))]
        })
    }

    pub fn neg(self) -> Self {
        self.unary(|x| -x, |_, _| -T::one())
    }

    pub fn add_scalar(self, s: f64) -> Self {
        let s = t::<T>(s);
        self.unary(move |x| x + s, |_, _| T::one())
    }

    pub fn mul_scalar(self, s: f64) -> Self {
        let s = t::<T>(s);
        self.unary(move |x| x * s, move |_, _| s)
    }

    pub fn leaky_relu(self, slope: f64) -> Self {
        let a = t::<T>(slope);
        self.unary(move |x| if x > T::zero() { x } else { x * a }, move |x, _| if x > T::zero() { T::one() } else { a })
    }

    pub fn relu(self) -> Self {
        self.leaky_relu(0.0)
    }

    pub fn tanh(self) -> Self {
        self.unary(|x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn sigmoid(self) -> Self {
        self.unary(|x| T::one() / (T::one() + (-x).exp()), |_, y| y * (T::one() - y))
    }

    pub fn abs(self) -> Self {
        self.unary(
            |x| x.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn sqr(self) -> Self {
        self.unary(|x| x * x, |x, _| x + x)
    }

    pub fn exp(self) -> Self {
        self.unary(|x| x.exp(), |_, y| y)
    }

    /// `ln(max(x, floor))`; zero gradient where the floor is active.
    pub fn log_clamped(self, floor: f64) -> Self {
        let lo = t::<T>(floor);
        self.unary(move |x| x.max(lo).ln(), move |x, _| if x > lo { T::one() / x } else { T::zero() })
    }

    fn binary(self, other: Self, f: impl Fn(T, T) -> T, da: impl Fn(T, T) -> T + 'static, db: impl Fn(T, T) -> T + 'static) -> Self {
        let (a, b) = (self.value(), other.value());
        same_shape(a.shape(), b.shape(), "binary");
        let y = a.zip_map(&b, f);
        self.tape.record(y, &[self, other], move |c| {
            let (a, b, g) = (c.inputs[0].data(), c.inputs[1].data(), c.grad.data());
            let shape = c.grad.shape().to_vec();
            let ga = c.needs[0].then(|| {
                Tensor::new(shape.clone(), g.iter().zip(a).zip(b).map(|((&g, &x), &y)| g * da(x, y)).collect())
            });
            let gb = c.needs[1]
                .then(|| Tensor::new(shape.clone(), g.iter().zip(a).zip(b).map(|((&g, &x), &y)| g * db(x, y)).collect()));
            vec![ga, gb]
        })
    }

    pub fn add(self, other: Self) -> Self {
        self.binary(other, |a, b| a + b, |_, _| T::one(), |_, _| T::one())
    }

    pub fn sub(self, other: Self) -> Self {
        self.binary(other, |a, b| a - b, |_, _| T::one(), |_, _| -T::one())
    }

    pub fn mul(self, other: Self) -> Self {
        self.binary(other, |a, b| a * b, |_, b| b, |a, _| a)
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(self, k: &Tensor<T>) -> Self {
        let x = self.value();
        same_shape(x.shape(), k.shape(), "mul_const");
        let y = x.zip_map(k, |a, b| a * b);
        let k = k.clone();
        self.tape.record(y, &[self], move |c| vec![Some(c.grad.zip_map(&k, |g, k| g * k))])
    }

    /// `x / s` for a single-element `s`.
    pub fn div_scalar(self, s: Self) -> Self {
        let (x, sv) = (self.value(), s.value());
        assert_eq!(sv.len(), 1, "div_scalar divisor must be a scalar");
        let d = sv.data()[0];
        let y = x.map(|v| v / d);
        self.tape.record(y, &[self, s], move |c| {
            let d = c.inputs[1].data()[0];
            let gx = c.needs[0].then(|| c.grad.map(|g| g / d));
            let gs = c.needs[1].then(|| {
                let dot: T = c.grad.data().iter().zip(c.inputs[0].data()).map(|(&g, &x)| g * x).sum();
                Tensor::scalar(-dot / (d * d))
            });
            vec![gx, gs]
        })
    }

    pub fn sum(self) -> Self {
        let x = self.value();
        let y = Tensor::scalar(x.sum());
        self.tape.record(y, &[self], |c| {
            let g = c.grad.data()[0];
            vec![Some(Tensor::full(c.inputs[0].shape().to_vec(), g))]
        })
    }

    pub fn mean(self) -> Self {
        let n = self.value().len();
        assert!(n > 0, "mean of empty tensor");
        self.sum().mul_scalar(1.0 / n as f64)
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let x = self.value();
        let from = x.shape().to_vec();
        let y = (*x).clone().reshaped(shape);
        self.tape.record(y, &[self], move |c| vec![Some(c.grad.clone().reshaped(from.clone()))])
    }

    /// Sum of several same-shape values.
    pub fn sum_all(parts: &[Self]) -> Self {
        let mut it = parts.iter().copied();
        let first = it.next().expect("sum_all of nothing");
        it.fold(first, |acc, v| acc.add(v))
    }

    // ---- matrix ops ----

    /// `(m, k) x (k, n)`.
    pub fn matmul(self, other: Self) -> Self {
        let (a, b) = (self.value(), other.value());
        let (m, k) = a.dims2();
        let (k2, n) = b.dims2();
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut y = vec![T::zero(); m * n];
        gemm(m, k, n, a.data(), Layout::Plain, b.data(), Layout::Plain, T::zero(), &mut y);
        self.tape.record(Tensor::new([m, n], y), &[self, other], move |c| {
            let (a, b, g) = (c.inputs[0].data(), c.inputs[1].data(), c.grad.data());
            let ga = c.needs[0].then(|| {
                let mut ga = vec![T::zero(); m * k];
                gemm(m, n, k, g, Layout::Plain, b, Layout::Transposed, T::zero(), &mut ga);
                Tensor::new([m, k], ga)
            });
            let gb = c.needs[1].then(|| {
                let mut gb = vec![T::zero(); k * n];
                gemm(k, m, n, a, Layout::Transposed, g, Layout::Plain, T::zero(), &mut gb);
                Tensor::new([k, n], gb)
            });
            vec![ga, gb]
        })
    }

    /// `x (n, in) * w^T + b` with `w` shaped `(out, in)`.
    pub fn linear(self, w: Self, b: Option<Self>) -> Self {
        let (x, wv) = (self.value(), w.value());
        let (n, fin) = x.dims2();
        let (fout, fin2) = wv.dims2();
        assert_eq!(fin, fin2, "linear: input has {fin} features, weight expects {fin2}");
        let mut y = vec![T::zero(); n * fout];
        gemm(n, fin, fout, x.data(), Layout::Plain, wv.data(), Layout::Transposed, T::zero(), &mut y);
        let mut parents = vec![self, w];
        if let Some(b) = b {
            let bv = b.value();
            assert_eq!(bv.shape(), [fout], "linear bias shape");
            for row in y.chunks_mut(fout) {
                for (v, &bb) in row.iter_mut().zip(bv.data()) {
                    *v += bb;
                }
            }
            parents.push(b);
        }
        self.tape.record(Tensor::new([n, fout], y), &parents, move |c| {
            let (x, w, g) = (c.inputs[0].data(), c.inputs[1].data(), c.grad.data());
            let gx = c.needs[0].then(|| {
                let mut gx = vec![T::zero(); n * fin];
                gemm(n, fout, fin, g, Layout::Plain, w, Layout::Plain, T::zero(), &mut gx);
                Tensor::new([n, fin], gx)
            });
            let gw = c.needs[1].then(|| {
                let mut gw = vec![T::zero(); fout * fin];
                gemm(fout, n, fin, g, Layout::Transposed, x, Layout::Plain, T::zero(), &mut gw);
                Tensor::new([fout, fin], gw)
            });
            let mut out = vec![gx, gw];
            if c.inputs.len() == 3 {
                out.push(c.needs[2].then(|| {
                    let mut gb = vec![T::zero(); fout];
                    for row in g.chunks(fout) {
                        for (a, &b) in gb.iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                    Tensor::new([fout], gb)
                }));
            }
            out
        })
    }

    /// Row-wise `x / (||x|| + eps)` for a `(n, d)` matrix.
    pub fn l2_normalize_rows(self, eps: f64) -> Self {
        let x = self.value();
        let (n, d) = x.dims2();
        let eps = t::<T>(eps);
        let norms: Vec<T> = x.data().chunks(d).map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt()).collect();
        let mut y = x.data().to_vec();
        for (row, &nr) in y.chunks_mut(d).zip(&norms) {
            for v in row {
                *v = *v / (nr + eps);
            }
        }
        self.tape.record(Tensor::new([n, d], y), &[self], move |c| {
            let (x, g) = (c.inputs[0].data(), c.grad.data());
            let mut gx = vec![T::zero(); n * d];
            for i in 0..n {
                let (xr, gr) = (&x[i * d..(i + 1) * d], &g[i * d..(i + 1) * d]);
                let nr = norms[i];
                let den = nr + eps;
                let dot: T = xr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                let k = if nr > T::zero() { dot / (den * den * nr) } else { T::zero() };
                for j in 0..d {
                    gx[i * d + j] = gr[j] / den - xr[j] * k;
                }
            }
            vec![Some(Tensor::new([n, d], gx))]
        })
    }

    /// Per-row `logsumexp(row) - row[target]` for logits `(n, k)`; returns `(n)`.
    pub fn cross_entropy(self, targets: &[usize]) -> Self {
        let x = self.value();
        let (n, k) = x.dims2();
        assert_eq!(targets.len(), n, "cross_entropy: {} targets for {} rows", targets.len(), n);
        let targets = targets.to_vec();
        let mut probs = vec![T::zero(); n * k];
        let mut loss = Vec::with_capacity(n);
        for i in 0..n {
            let row = &x.data()[i * k..(i + 1) * k];
            assert!(targets[i] < k, "cross_entropy target out of range");
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                probs[i * k + j] = e;
                s += e;
            }
            for p in &mut probs[i * k..(i + 1) * k] {
                *p = *p / s;
            }
            loss.push(mx + s.ln() - row[targets[i]]);
        }
        self.tape.record(Tensor::new([n], loss), &[self], move |c| {
            let g = c.grad.data();
            let mut gx = probs.clone();
            for i in 0..n {
                gx[i * k + targets[i]] -= T::one();
                for v in &mut gx[i * k..(i + 1) * k] {
                    *v *= g[i];
                }
            }
            vec![Some(Tensor::new([n, k], gx))]
        })
    }

    /// Concatenates `(n, d_i)` matrices along columns.
    pub fn concat_cols(parts: &[Self]) -> Self {
        let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let n = vals[0].dims2().0;
        let widths: Vec<usize> = vals
            .iter()
            .map(|v| {
                let (r, c) = v.dims2();
                assert_eq!(r, n, "concat_cols row mismatch");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut y = Vec::with_capacity(n * total);
        for i in 0..n {
            for (v, &w) in vals.iter().zip(&widths) {
                y.extend_from_slice(&v.data()[i * w..(i + 1) * w]);
            }
        }
        parts[0].tape.record(Tensor::new([n, total], y), parts, move |c| {
            let g = c.grad.data();
            let mut off = 0;
            let mut out = Vec::with_capacity(widths.len());
            for (p, &w) in widths.iter().enumerate() {
                out.push(c.needs[p].then(|| {
                    let mut gp = Vec::with_capacity(n * w);
                    for i in 0..n {
                        gp.extend_from_slice(&g[i * total + off..i * total + off + w]);
                    }
                    Tensor::new([n, w], gp)
                }));
                off += w;
            }
            out
        })
    }

    /// Sums each row of a `(n, d)` matrix into a `(n, 1)` column.
    pub fn row_sums(self) -> Self {
        let x = self.value();
        let (n, d) = x.dims2();
        let y = x.data().chunks(d).map(|r| r.iter().copied().sum()).collect();
        self.tape.record(Tensor::new([n, 1], y), &[self], move |c| {
            let mut g = Vec::with_capacity(n * d);
            for &gv in c.grad.data() {
                g.extend(std::iter::repeat_n(gv, d));
            }
            vec![Some(Tensor::new([n, d], g))]
        })
    }

    /// `(c)` -> `(n, c)` by repeating the row.
    pub fn repeat_rows(self, n: usize) -> Self {
        let x = self.value();
        let c = x.len();
        let mut y = Vec::with_capacity(n * c);
        for _ in 0..n {
            y.extend_from_slice(x.data());
        }
        let shape = x.shape().to_vec();
        self.tape.record(Tensor::new([n, c], y), &[self], move |cx| {
            let mut g = vec![T::zero(); c];
            for row in cx.grad.data().chunks(c) {
                for (a, &b) in g.iter_mut().zip(row) {
                    *a += b;
                }
            }
            vec![Some(Tensor::new(shape.clone(), g))]
        })
    }
}
