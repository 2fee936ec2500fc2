//! Forward operations and their backward rules.
//!
//! Conventions: rank-2 tensors are row-major `[rows × cols]`; axis ops
//! iterate "lines" along the chosen axis.  All dot products and reductions
//! accumulate in f64 before converting back to the element type.

use crate::scalar::Scalar;

use super::Tensor;

/// a · b with f64 accumulation; dims (m,k) x (k,n).
fn matmul_nn<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p].to_f64();
            if aip == 0.0 {
                continue;
            }
            let row = &b[p * n..(p + 1) * n];
            let dst = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                dst[j] += aip * row[j].to_f64();
            }
        }
    }
    out.into_iter().map(E::from_f64).collect()
}

/// a · b^T; a is (m,k), b is (n,k), result (m,n).
fn matmul_nt<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::ZERO; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f64;
            let ra = &a[i * k..(i + 1) * k];
            let rb = &b[j * k..(j + 1) * k];
            for p in 0..k {
                acc += ra[p].to_f64() * rb[p].to_f64();
            }
            out[i * n + j] = E::from_f64(acc);
        }
    }
    out
}

/// a^T · b; a is (k,m), b is (k,n), result (m,n).
fn matmul_tn<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![0.0f64; m * n];
    for p in 0..k {
        for i in 0..m {
            let api = a[p * m + i].to_f64();
            if api == 0.0 {
                continue;
            }
            let row = &b[p * n..(p + 1) * n];
            let dst = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                dst[j] += api * row[j].to_f64();
            }
        }
    }
    out.into_iter().map(E::from_f64).collect()
}

/// Visit every line along `axis`: calls f(base_offset, stride, len).
fn for_each_line(dims: &[usize], axis: usize, mut f: impl FnMut(usize, usize, usize)) {
    assert!(axis < dims.len(), "axis {} out of range for {:?}", axis, dims);
    let len = dims[axis];
    let inner: usize = dims[axis + 1..].iter().product();
    let outer: usize = dims[..axis].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            f(o * len * inner + i, inner, len);
        }
    }
}

impl<E: Scalar> Tensor<E> {
    fn assert_same_shape(&self, rhs: &Tensor<E>, op: &str) {
        assert_eq!(
            self.dims(),
            rhs.dims(),
            "{}: shape mismatch {:?} vs {:?}",
            op,
            self.dims(),
            rhs.dims()
        );
    }

    pub fn add(&self, rhs: &Tensor<E>) -> Tensor<E> {
        self.assert_same_shape(rhs, "add");
        let data = self
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(&a, &b)| a + b)
            .collect();
        let parents = vec![self.clone(), rhs.clone()];
        let need = (self.requires_grad(), rhs.requires_grad());
        Tensor::from_op(
            self.dims().to_vec(),
            data,
            parents,
            Box::new(move |g| {
                vec![
                    need.0.then(|| g.to_vec()),
                    need.1.then(|| g.to_vec()),
                ]
            }),
        )
    }

    pub fn sub(&self, rhs: &Tensor<E>) -> Tensor<E> {
        self.assert_same_shape(rhs, "sub");
        let data = self
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(&a, &b)| a - b)
            .collect();
        let need = (self.requires_grad(), rhs.requires_grad());
        Tensor::from_op(
            self.dims().to_vec(),
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                vec![
                    need.0.then(|| g.to_vec()),
                    need.1.then(|| g.iter().map(|&v| -v).collect()),
                ]
            }),
        )
    }

    /// Elementwise product.
    pub fn mul(&self, rhs: &Tensor<E>) -> Tensor<E> {
        self.assert_same_shape(rhs, "mul");
        let data = self
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(&a, &b)| a * b)
            .collect();
        let a = self.data().to_vec();
        let b = rhs.data().to_vec();
        let need = (self.requires_grad(), rhs.requires_grad());
        Tensor::from_op(
            self.dims().to_vec(),
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                vec![
                    need.0
                        .then(|| g.iter().zip(&b).map(|(&gv, &bv)| gv * bv).collect()),
                    need.1
                        .then(|| g.iter().zip(&a).map(|(&gv, &av)| gv * av).collect()),
                ]
            }),
        )
    }

    pub fn neg(&self) -> Tensor<E> {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> Tensor<E> {
        let k = E::from_f64(c);
        let data = self.data().iter().map(|&v| v * k).collect();
        let need = self.requires_grad();
        Tensor::from_op(
            self.dims().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g| vec![need.then(|| g.iter().map(|&v| v * k).collect())]),
        )
    }

    /// Broadcast-add a `[d]` row vector over the last axis of `[... × d]`.
    pub fn add_row(&self, bias: &Tensor<E>) -> Tensor<E> {
        let d = *self.dims().last().expect("add_row on empty shape");
        assert_eq!(bias.dims(), &[d], "add_row: bias must be [{}]", d);
        let data = self
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(bias.data()).map(|(&a, &b)| a + b))
            .collect();
        let rows = self.len() / d;
        let need = (self.requires_grad(), bias.requires_grad());
        Tensor::from_op(
            self.dims().to_vec(),
            data,
            vec![self.clone(), bias.clone()],
            Box::new(move |g| {
                let db = need.1.then(|| {
                    let mut acc = vec![0.0f64; d];
                    for r in 0..rows {
                        for j in 0..d {
                            acc[j] += g[r * d + j].to_f64();
                        }
                    }
                    acc.into_iter().map(E::from_f64).collect()
                });
                vec![need.0.then(|| g.to_vec()), db]
            }),
        )
    }

    /// Standard matrix product `[m×k] · [k×n] -> [m×n]`.
    pub fn matmul(&self, rhs: &Tensor<E>) -> Tensor<E> {
        let (m, k) = self.dims2();
        let (k2, n) = rhs.dims2();
        assert_eq!(k, k2, "matmul: inner dims {} vs {}", k, k2);
        let data = matmul_nn(self.data(), rhs.data(), m, k, n);
        let a = self.data().to_vec();
        let b = rhs.data().to_vec();
        let need = (self.requires_grad(), rhs.requires_grad());
        Tensor::from_op(
            vec![m, n],
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                vec![
                    need.0.then(|| matmul_nt(g, &b, m, n, k)),
                    need.1.then(|| matmul_tn(&a, g, k, m, n)),
                ]
            }),
        )
    }

    pub fn transpose(&self) -> Tensor<E> {
        let (m, n) = self.dims2();
        let src = self.data();
        let mut data = vec![E::ZERO; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let need = self.requires_grad();
        Tensor::from_op(
            vec![n, m],
            data,
            vec![self.clone()],
            Box::new(move |g| {
                vec![need.then(|| {
                    let mut out = vec![E::ZERO; m * n];
                    for j in 0..n {
                        for i in 0..m {
                            out[i * n + j] = g[j * m + i];
                        }
                    }
                    out
                })]
            }),
        )
    }

    /// Stack rank-2 tensors with equal column counts along axis 0.
    pub fn concat_rows(parts: &[Tensor<E>]) -> Tensor<E> {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = parts[0].dims2().1;
        let mut data = Vec::new();
        let mut row_counts = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = p.dims2();
            assert_eq!(c, cols, "concat_rows: column mismatch {} vs {}", c, cols);
            row_counts.push(r);
            data.extend_from_slice(p.data());
        }
        let total: usize = row_counts.iter().sum();
        let needs: Vec<bool> = parts.iter().map(|p| p.requires_grad()).collect();
        Tensor::from_op(
            vec![total, cols],
            data,
            parts.to_vec(),
            Box::new(move |g| {
                let mut out = Vec::with_capacity(needs.len());
                let mut offset = 0;
                for (&r, &need) in row_counts.iter().zip(&needs) {
                    let n = r * cols;
                    out.push(need.then(|| g[offset..offset + n].to_vec()));
                    offset += n;
                }
                out
            }),
        )
    }

    /// Rows `[r0, r1)` of a rank-2 tensor.
    pub fn slice_rows(&self, r0: usize, r1: usize) -> Tensor<E> {
        let (m, n) = self.dims2();
        assert!(r0 <= r1 && r1 <= m, "slice_rows {}..{} of {} rows", r0, r1, m);
        let data = self.data()[r0 * n..r1 * n].to_vec();
        let need = self.requires_grad();
        Tensor::from_op(
            vec![r1 - r0, n],
            data,
            vec![self.clone()],
            Box::new(move |g| {
                vec![need.then(|| {
                    let mut out = vec![E::ZERO; m * n];
                    out[r0 * n..r1 * n].copy_from_slice(g);
                    out
                })]
            }),
        )
    }

    /// Columns `[c0, c1)` of a rank-2 tensor.
    pub fn slice_cols(&self, c0: usize, c1: usize) -> Tensor<E> {
        let (m, n) = self.dims2();
        assert!(c0 <= c1 && c1 <= n, "slice_cols {}..{} of {} cols", c0, c1, n);
        let w = c1 - c0;
        let src = self.data();
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + c0..i * n + c1]);
        }
        let need = self.requires_grad();
        Tensor::from_op(
            vec![m, w],
            data,
            vec![self.clone()],
            Box::new(move |g| {
                vec![need.then(|| {
                    let mut out = vec![E::ZERO; m * n];
                    for i in 0..m {
                        out[i * n + c0..i * n + c1].copy_from_slice(&g[i * w..(i + 1) * w]);
                    }
                    out
                })]
            }),
        )
    }

    /// Stack rank-2 tensors with equal row counts along axis 1.
    pub fn concat_cols(parts: &[Tensor<E>]) -> Tensor<E> {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = parts[0].dims2().0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let (r, c) = p.dims2();
                assert_eq!(r, rows, "concat_cols: row mismatch {} vs {}", r, rows);
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![E::ZERO; rows * total];
        let mut col = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let src = p.data();
            for i in 0..rows {
                data[i * total + col..i * total + col + w]
                    .copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            col += w;
        }
        let needs: Vec<bool> = parts.iter().map(|p| p.requires_grad()).collect();
        Tensor::from_op(
            vec![rows, total],
            data,
            parts.to_vec(),
            Box::new(move |g| {
                let mut out = Vec::with_capacity(needs.len());
                let mut col = 0;
                for (&w, &need) in widths.iter().zip(&needs) {
                    out.push(need.then(|| {
                        let mut buf = vec![E::ZERO; rows * w];
                        for i in 0..rows {
                            buf[i * w..(i + 1) * w]
                                .copy_from_slice(&g[i * total + col..i * total + col + w]);
                        }
                        buf
                    }));
                    col += w;
                }
                out
            }),
        )
    }

    /// Numerically stable softmax along `axis` (max-subtraction).
    pub fn softmax(&self, axis: usize) -> Tensor<E> {
        let dims = self.dims().to_vec();
        let src = self.data();
        let mut data = vec![E::ZERO; src.len()];
        for_each_line(&dims, axis, |base, stride, len| {
            let mut mx = f64::NEG_INFINITY;
            for t in 0..len {
                mx = mx.max(src[base + t * stride].to_f64());
            }
            debug_assert!(mx > f64::NEG_INFINITY, "softmax over fully masked line");
            let mut sum = 0.0f64;
            for t in 0..len {
                sum += (src[base + t * stride].to_f64() - mx).exp();
            }
            for t in 0..len {
                let e = (src[base + t * stride].to_f64() - mx).exp();
                data[base + t * stride] = E::from_f64(e / sum);
            }
        });
        let y = data.clone();
        let need = self.requires_grad();
        Tensor::from_op(
            dims.clone(),
            data,
            vec![self.clone()],
            Box::new(move |g| {
                vec![need.then(|| {
                    // dx = y * (g - sum(g*y)) per line
                    let mut out = vec![E::ZERO; g.len()];
                    for_each_line(&dims, axis, |base, stride, len| {
                        let mut dot = 0.0f64;
                        for t in 0..len {
                            let i = base + t * stride;
                            dot += g[i].to_f64() * y[i].to_f64();
                        }
                        for t in 0..len {
                            let i = base + t * stride;
                            out[i] = E::from_f64(y[i].to_f64() * (g[i].to_f64() - dot));
                        }
                    });
                    out
                })]
            }),
        )
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&self) -> Tensor<E> {
        let dims = self.dims().to_vec();
        let axis = dims.len() - 1;
        let src = self.data();
        let mut data = vec![E::ZERO; src.len()];
        for_each_line(&dims, axis, |base, stride, len| {
            let mut mx = f64::NEG_INFINITY;
            for t in 0..len {
                mx = mx.max(src[base + t * stride].to_f64());
            }
            let mut sum = 0.0f64;
            for t in 0..len {
                sum += (src[base + t * stride].to_f64() - mx).exp();
            }
            let lse = mx + sum.ln();
            for t in 0..len {
                let i = base + t * stride;
                data[i] = E::from_f64(src[i].to_f64() - lse);
            }
        });
        let y = data.clone();
        let need = self.requires_grad();
        Tensor::from_op(
            dims.clone(),
            data,
            vec![self.clone()],
            Box::new(move |g| {
                vec![need.then(|| {
                    // dx_i = g_i - softmax_i * sum(g)
                    let mut out = vec![E::ZERO; g.len()];
                    for_each_line(&dims, axis, |base, stride, len| {
                        let mut gsum = 0.0f64;
                        for t in 0..len {
                            gsum += g[base + t * stride].to_f64();
                        }
                        for t in 0..len {
                            let i = base + t * stride;
                            out[i] =
                                E::from_f64(g[i].to_f64() - y[i].to_f64().exp() * gsum);
                        }
                    });
                    out
                })]
            }),
        )
    }

    /// Per-vector normalization over the last axis, then affine (gain, bias).
    ///
    /// Uses population variance with an eps floor, so constant vectors map
    /// to zero rather than dividing by zero.
    pub fn layer_norm(&self, gain: &Tensor<E>, bias: &Tensor<E>, eps: f64) -> Tensor<E> {
        assert!(eps > 0.0, "layer_norm: eps must be positive");
        let d = *self.dims().last().expect("layer_norm on empty shape");
        assert_eq!(gain.dims(), &[d], "layer_norm: gain must be [{}]", d);
        assert_eq!(bias.dims(), &[d], "layer_norm: bias must be [{}]", d);
        let rows = self.len() / d;
        let src = self.data();
        let gd = gain.data().to_vec();
        let mut data = vec![E::ZERO; src.len()];
        let mut xhat = vec![0.0f64; src.len()];
        let mut inv_std = vec![0.0f64; rows];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / d as f64;
            let var = row
                .iter()
                .map(|v| {
                    let c = v.to_f64() - mean;
                    c * c
                })
                .sum::<f64>()
                / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[r] = istd;
            for j in 0..d {
                let h = (row[j].to_f64() - mean) * istd;
                xhat[r * d + j] = h;
                data[r * d + j] =
                    E::from_f64(h * gd[j].to_f64() + bias.data()[j].to_f64());
            }
        }
        let need = (self.requires_grad(), gain.requires_grad(), bias.requires_grad());
        Tensor::from_op(
            self.dims().to_vec(),
            data,
            vec![self.clone(), gain.clone(), bias.clone()],
            Box::new(move |g| {
                let dx = need.0.then(|| {
                    let mut out = vec![E::ZERO; g.len()];
                    for r in 0..rows {
                        let mut m1 = 0.0f64; // mean of gain*g
                        let mut m2 = 0.0f64; // mean of gain*g*xhat
                        for j in 0..d {
                            let gg = gd[j].to_f64() * g[r * d + j].to_f64();
                            m1 += gg;
                            m2 += gg * xhat[r * d + j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let gg = gd[j].to_f64() * g[r * d + j].to_f64();
                            let v = (gg - m1 - xhat[r * d + j] * m2) * inv_std[r];
                            out[r * d + j] = E::from_f64(v);
                        }
                    }
                    out
                });
                let dgain = need.1.then(|| {
                    let mut acc = vec![0.0f64; d];
                    for r in 0..rows {
                        for j in 0..d {
                            acc[j] += g[r * d + j].to_f64() * xhat[r * d + j];
                        }
                    }
                    acc.into_iter().map(E::from_f64).collect()
                });
                let dbias = need.2.then(|| {
                    let mut acc = vec![0.0f64; d];
                    for r in 0..rows {
                        for j in 0..d {
                            acc[j] += g[r * d + j].to_f64();
                        }
                    }
                    acc.into_iter().map(E::from_f64).collect()
                });
                vec![dx, dgain, dbias]
            }),
        )
    }

    /// Per-channel 1-D convolution with zero padding, length preserved.
    ///
    /// `self` is `[T × d]`, `kernel` is `[k × d]` with odd `k`; channel `c`
    /// of the output convolves channel `c` of the input with kernel column
    /// `c` centered on each frame.
    pub fn depthwise_conv1d(&self, kernel: &Tensor<E>) -> crate::Result<Tensor<E>> {
        let (t_len, d) = self.dims2();
        let (k, kd) = kernel.dims2();
        if k % 2 == 0 {
            return Err(crate::Error::Config(format!(
                "depthwise_conv1d: kernel size {} must be odd",
                k
            )));
        }
        assert_eq!(kd, d, "depthwise_conv1d: kernel channels {} vs input {}", kd, d);
        let half = (k / 2) as isize;
        let x = self.data();
        let w = kernel.data();
        let mut data = vec![E::ZERO; t_len * d];
        for t in 0..t_len as isize {
            for c in 0..d {
                let mut acc = 0.0f64;
                for u in 0..k as isize {
                    let s = t + u - half;
                    if s < 0 || s >= t_len as isize {
                        continue;
                    }
                    acc += x[s as usize * d + c].to_f64() * w[u as usize * d + c].to_f64();
                }
                data[t as usize * d + c] = E::from_f64(acc);
            }
        }
        let xv = x.to_vec();
        let wv = w.to_vec();
        let need = (self.requires_grad(), kernel.requires_grad());
        Ok(Tensor::from_op(
            vec![t_len, d],
            data,
            vec![self.clone(), kernel.clone()],
            Box::new(move |g| {
                let dx = need.0.then(|| {
                    let mut out = vec![0.0f64; t_len * d];
                    for t in 0..t_len as isize {
                        for c in 0..d {
                            let gv = g[t as usize * d + c].to_f64();
                            for u in 0..k as isize {
                                let s = t + u - half;
                                if s < 0 || s >= t_len as isize {
                                    continue;
                                }
                                out[s as usize * d + c] += gv * wv[u as usize * d + c].to_f64();
                            }
                        }
                    }
                    out.into_iter().map(E::from_f64).collect()
                });
                let dw = need.1.then(|| {
                    let mut out = vec![0.0f64; k * d];
                    for t in 0..t_len as isize {
                        for c in 0..d {
                            let gv = g[t as usize * d + c].to_f64();
                            for u in 0..k as isize {
                                let s = t + u - half;
                                if s < 0 || s >= t_len as isize {
                                    continue;
                                }
                                out[u as usize * d + c] += gv * xv[s as usize * d + c].to_f64();
                            }
                        }
                    }
                    out.into_iter().map(E::from_f64).collect()
                });
                vec![dx, dw]
            }),
        ))
    }

    pub fn sigmoid(&self) -> Tensor<E> {
        let data: Vec<E> = self
            .data()
            .iter()
            .map(|v| E::from_f64(1.0 / (1.0 + (-v.to_f64()).exp())))
            .collect();
        let y = data.clone();
        let need = self.requires_grad();
        Tensor::from_op(
            self.dims().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g| {
                vec![need.then(|| {
                    g.iter()
                        .zip(&y)
                        .map(|(&gv, &yv)| {
                            let s = yv.to_f64();
                            E::from_f64(gv.to_f64() * s * (1.0 - s))
                        })
                        .collect()
                })]
            }),
        )
    }

    /// Swish / SiLU: x * sigmoid(x).
    pub fn swish(&self) -> Tensor<E> {
        let x = self.data().to_vec();
        let data: Vec<E> = x
            .iter()
            .map(|v| {
                let xf = v.to_f64();
                E::from_f64(xf / (1.0 + (-xf).exp()))
            })
            .collect();
        let need = self.requires_grad();
        Tensor::from_op(
            self.dims().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g| {
                vec![need.then(|| {
                    g.iter()
                        .zip(&x)
                        .map(|(&gv, &xv)| {
                            let xf = xv.to_f64();
                            let s = 1.0 / (1.0 + (-xf).exp());
                            E::from_f64(gv.to_f64() * (s + xf * s * (1.0 - s)))
                        })
                        .collect()
                })]
            }),
        )
    }

    /// Gated linear unit over the last axis: splits `[... × 2d]` in half and
    /// returns `a * sigmoid(b)`.
    pub fn glu(&self) -> Tensor<E> {
        let w = *self.dims().last().expect("glu on empty shape");
        assert!(w % 2 == 0, "glu: last axis {} must be even", w);
        let d = w / 2;
        let rows = self.len() / w;
        let src = self.data().to_vec();
        let mut data = vec![E::ZERO; rows * d];
        for r in 0..rows {
            for j in 0..d {
                let a = src[r * w + j].to_f64();
                let b = src[r * w + d + j].to_f64();
                data[r * d + j] = E::from_f64(a / (1.0 + (-b).exp()));
            }
        }
        let mut dims = self.dims().to_vec();
        *dims.last_mut().unwrap() = d;
        let need = self.requires_grad();
        Tensor::from_op(
            dims,
            data,
            vec![self.clone()],
            Box::new(move |g| {
                vec![need.then(|| {
                    let mut out = vec![E::ZERO; rows * w];
                    for r in 0..rows {
                        for j in 0..d {
                            let a = src[r * w + j].to_f64();
                            let b = src[r * w + d + j].to_f64();
                            let s = 1.0 / (1.0 + (-b).exp());
                            let gv = g[r * d + j].to_f64();
                            out[r * w + j] = E::from_f64(gv * s);
                            out[r * w + d + j] = E::from_f64(gv * a * s * (1.0 - s));
                        }
                    }
                    out
                })]
            }),
        )
    }

    /// Row lookup: `table[V×d]` gathered at `ids` -> `[len(ids) × d]`.
    /// Backward scatter-adds into the table.
    pub fn embedding(table: &Tensor<E>, ids: &[usize]) -> Tensor<E> {
        let (v, d) = table.dims2();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            assert!(i < v, "embedding: id {} out of vocabulary {}", i, v);
            data.extend_from_slice(&table.data()[i * d..(i + 1) * d]);
        }
        let ids = ids.to_vec();
        let need = table.requires_grad();
        Tensor::from_op(
            vec![ids.len(), d],
            data,
            vec![table.clone()],
            Box::new(move |g| {
                vec![need.then(|| {
                    let mut out = vec![E::ZERO; v * d];
                    for (r, &i) in ids.iter().enumerate() {
                        for j in 0..d {
                            out[i * d + j] += g[r * d + j];
                        }
                    }
                    out
                })]
            }),
        )
    }

    /// Per-row column pick: `[T×V]` with `cols[t]` -> `[T]`.
    pub fn select_positions(&self, cols: &[usize]) -> Tensor<E> {
        let (t_len, v) = self.dims2();
        assert_eq!(cols.len(), t_len, "select_positions: need one column per row");
        let data: Vec<E> = cols
            .iter()
            .enumerate()
            .map(|(t, &c)| {
                assert!(c < v, "select_positions: col {} out of {}", c, v);
                self.data()[t * v + c]
            })
            .collect();
        let cols = cols.to_vec();
        let need = self.requires_grad();
        Tensor::from_op(
            vec![t_len],
            data,
            vec![self.clone()],
            Box::new(move |g| {
                vec![need.then(|| {
                    let mut out = vec![E::ZERO; t_len * v];
                    for (t, &c) in cols.iter().enumerate() {
                        out[t * v + c] = g[t];
                    }
                    out
                })]
            }),
        )
    }

    /// Mean over a subset of positions of a rank-1 tensor.
    pub fn mean_subset(&self, idx: &[usize]) -> Tensor<E> {
        assert_eq!(self.dims().len(), 1, "mean_subset expects rank-1");
        assert!(!idx.is_empty(), "mean_subset over empty index set");
        let n = self.len();
        let mut acc = 0.0f64;
        for &i in idx {
            assert!(i < n, "mean_subset: index {} out of {}", i, n);
            acc += self.data()[i].to_f64();
        }
        let count = idx.len() as f64;
        let idx = idx.to_vec();
        let need = self.requires_grad();
        Tensor::from_op(
            vec![1],
            vec![E::from_f64(acc / count)],
            vec![self.clone()],
            Box::new(move |g| {
                vec![need.then(|| {
                    let gv = g[0].to_f64() / count;
                    let mut out = vec![E::ZERO; n];
                    for &i in &idx {
                        out[i] += E::from_f64(gv);
                    }
                    out
                })]
            }),
        )
    }

    pub fn sum_all(&self) -> Tensor<E> {
        let acc: f64 = self.data().iter().map(|v| v.to_f64()).sum();
        let n = self.len();
        let need = self.requires_grad();
        Tensor::from_op(
            vec![1],
            vec![E::from_f64(acc)],
            vec![self.clone()],
            Box::new(move |g| vec![need.then(|| vec![g[0]; n])]),
        )
    }

    pub fn mean_all(&self) -> Tensor<E> {
        let n = self.len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Seeded dropout; `p = 0` is the identity (no graph node).
    ///
    /// Kept positions are rescaled by 1/(1-p) so expectations match.
    pub fn dropout(&self, p: f64, seed: u64) -> Tensor<E> {
        assert!((0.0..1.0).contains(&p), "dropout: p {} outside [0,1)", p);
        if p == 0.0 {
            return self.clone();
        }
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..self.len())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data = self
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| E::from_f64(v.to_f64() * m))
            .collect();
        let need = self.requires_grad();
        Tensor::from_op(
            self.dims().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g| {
                vec![need.then(|| {
                    g.iter()
                        .zip(&mask)
                        .map(|(&gv, &m)| E::from_f64(gv.to_f64() * m))
                        .collect()
                })]
            }),
        )
    }

    /// Relative-offset gather used by attention position bias.
    ///
    /// Input `[L × (2L-1)]` holds per-query scores for every offset
    /// `delta = i - j` at column `delta + L - 1`; output `[L × L]` has
    /// `out[i][j] = input[i][(i - j) + L - 1]`.
    pub fn rel_shift_gather(&self, l: usize) -> Tensor<E> {
        let (rows, cols) = self.dims2();
        assert_eq!(rows, l, "rel_shift_gather: rows {} vs L {}", rows, l);
        assert_eq!(cols, 2 * l - 1, "rel_shift_gather: cols {} vs 2L-1", cols);
        let src = self.data();
        let mut data = vec![E::ZERO; l * l];
        for i in 0..l {
            for j in 0..l {
                data[i * l + j] = src[i * cols + (i + l - 1 - j)];
            }
        }
        let need = self.requires_grad();
        Tensor::from_op(
            vec![l, l],
            data,
            vec![self.clone()],
            Box::new(move |g| {
                vec![need.then(|| {
                    let mut out = vec![E::ZERO; l * cols];
                    for i in 0..l {
                        for j in 0..l {
                            out[i * cols + (i + l - 1 - j)] += g[i * l + j];
                        }
                    }
                    out
                })]
            }),
        )
    }

    /// Index of the maximum along the last axis, one per line.
    /// Not differentiable; used by greedy decoding.
    pub fn argmax_last(&self) -> Vec<usize> {
        let dims = self.dims();
        let axis = dims.len() - 1;
        let mut out = Vec::new();
        let src = self.data();
        for_each_line(dims, axis, |base, stride, len| {
            let mut best = 0;
            let mut bv = f64::NEG_INFINITY;
            for t in 0..len {
                let v = src[base + t * stride].to_f64();
                if v > bv {
                    bv = v;
                    best = t;
                }
            }
            out.push(best);
        });
        out
    }
}
