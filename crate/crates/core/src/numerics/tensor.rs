use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::numerics::Rng;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static RECORDING: Cell<bool> = const { Cell::new(true) };
}

/// Run `f` with gradient recording disabled on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = RECORDING.with(|r| r.replace(false));
    let out = f();
    RECORDING.with(|r| r.set(prev));
    out
}

fn recording() -> bool {
    RECORDING.with(|r| r.get())
}

/// Per-parent gradients produced by one backward step. `None` marks a
/// parent that does not need a gradient.
type BackFn = Box<dyn Fn(&[f32]) -> Vec<Option<Vec<f32>>>>;

struct Record {
    parents: Vec<Tensor>,
    backward: BackFn,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f32>>,
    grad: RefCell<Option<Vec<f32>>>,
    /// Leaf marked trainable, or derived node on a recorded path.
    needs_grad: bool,
    /// True only for user-marked trainable leaves.
    is_param: bool,
    record: Option<Record>,
}

/// Dense row-major `f32` tensor with an optional gradient record.
///
/// Cloning is cheap (shared handle). One computation record must not be
/// mutated from multiple threads; tensor *values* can be moved across
/// threads via [`Tensor::to_vec`] / [`Tensor::from_vec`].
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.is_param)
            .finish()
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(Error::Dim(format!("invalid shape {shape:?}")));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    fn leaf(shape: Vec<usize>, data: Vec<f32>, is_param: bool) -> Tensor {
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                needs_grad: is_param,
                is_param,
                record: None,
            }),
        }
    }

    fn derived(shape: Vec<usize>, data: Vec<f32>, parents: Vec<Tensor>, backward: BackFn) -> Tensor {
        let rec = recording() && parents.iter().any(|p| p.inner.needs_grad);
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                needs_grad: rec,
                is_param: false,
                record: if rec {
                    Some(Record { parents, backward })
                } else {
                    None
                },
            }),
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(Error::Dim(format!(
                "shape {shape:?} wants {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor::leaf(shape.to_vec(), data, false))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = check_shape(shape).expect("zeros: invalid shape");
        Tensor::leaf(shape.to_vec(), vec![0.0; n], false)
    }

    pub fn full(shape: &[usize], value: f32) -> Tensor {
        let n = check_shape(shape).expect("full: invalid shape");
        Tensor::leaf(shape.to_vec(), vec![value; n], false)
    }

    pub fn scalar(value: f32) -> Tensor {
        Tensor::leaf(vec![1], vec![value], false)
    }

    /// Standard-normal leaf drawn from `rng`.
    pub fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
        let n = check_shape(shape).expect("randn: invalid shape");
        Tensor::leaf(shape.to_vec(), rng.normal_vec(n), false)
    }

    /// Mark this leaf as a trainable parameter.
    pub fn trainable(self) -> Tensor {
        assert!(
            self.inner.record.is_none(),
            "trainable() applies to leaves only"
        );
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape: self.inner.shape.clone(),
                data: RefCell::new(self.inner.data.borrow().clone()),
                grad: RefCell::new(None),
                needs_grad: true,
                is_param: true,
                record: None,
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.is_param
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.inner.data.borrow().clone()
    }

    pub fn data(&self) -> std::cell::Ref<'_, Vec<f32>> {
        self.inner.data.borrow()
    }

    /// Mutable access to the raw buffer (optimizer updates, test probes).
    /// Must not be called while a graph referencing this tensor is still
    /// pending a backward pass.
    pub fn data_mut(&self) -> std::cell::RefMut<'_, Vec<f32>> {
        self.inner.data.borrow_mut()
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub fn item(&self) -> f32 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.inner.data.borrow()[0]
    }

    /// Copy of the values as a fresh non-recorded leaf.
    pub fn detach(&self) -> Tensor {
        Tensor::leaf(self.inner.shape.clone(), self.to_vec(), false)
    }

    pub fn assert_finite(&self, ctx: &str) -> Result<()> {
        if self.inner.data.borrow().iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite values in {ctx}")));
        }
        Ok(())
    }

    fn rows2d(&self, op: &str) -> Result<(usize, usize)> {
        if self.ndim() != 2 {
            return Err(Error::Dim(format!(
                "{op} expects a 2-d tensor, got shape {:?}",
                self.shape()
            )));
        }
        Ok((self.inner.shape[0], self.inner.shape[1]))
    }

    fn same_shape(&self, rhs: &Tensor, op: &str) -> Result<()> {
        if self.shape() != rhs.shape() {
            return Err(Error::Dim(format!(
                "{op}: shape mismatch {:?} vs {:?}",
                self.shape(),
                rhs.shape()
            )));
        }
        Ok(())
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.same_shape(rhs, "add")?;
        let data: Vec<f32> = {
            let a = self.data();
            let b = rhs.data();
            a.iter().zip(b.iter()).map(|(x, y)| x + y).collect()
        };
        let need = (self.inner.needs_grad, rhs.inner.needs_grad);
        Ok(Tensor::derived(
            self.inner.shape.clone(),
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                vec![
                    need.0.then(|| g.to_vec()),
                    need.1.then(|| g.to_vec()),
                ]
            }),
        ))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.same_shape(rhs, "sub")?;
        let data: Vec<f32> = {
            let a = self.data();
            let b = rhs.data();
            a.iter().zip(b.iter()).map(|(x, y)| x - y).collect()
        };
        let need = (self.inner.needs_grad, rhs.inner.needs_grad);
        Ok(Tensor::derived(
            self.inner.shape.clone(),
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                vec![
                    need.0.then(|| g.to_vec()),
                    need.1.then(|| g.iter().map(|v| -v).collect()),
                ]
            }),
        ))
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.same_shape(rhs, "mul")?;
        let data: Vec<f32> = {
            let a = self.data();
            let b = rhs.data();
            a.iter().zip(b.iter()).map(|(x, y)| x * y).collect()
        };
        let (lhs_t, rhs_t) = (self.clone(), rhs.clone());
        let need = (self.inner.needs_grad, rhs.inner.needs_grad);
        Ok(Tensor::derived(
            self.inner.shape.clone(),
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                let a = lhs_t.data();
                let b = rhs_t.data();
                vec![
                    need.0
                        .then(|| g.iter().zip(b.iter()).map(|(gi, bi)| gi * bi).collect()),
                    need.1
                        .then(|| g.iter().zip(a.iter()).map(|(gi, ai)| gi * ai).collect()),
                ]
            }),
        ))
    }

    pub fn scale(&self, c: f32) -> Tensor {
        let data: Vec<f32> = self.data().iter().map(|x| x * c).collect();
        let need = self.inner.needs_grad;
        Tensor::derived(
            self.inner.shape.clone(),
            data,
            vec![self.clone()],
            Box::new(move |g| vec![need.then(|| g.iter().map(|v| v * c).collect())]),
        )
    }

    pub fn add_scalar(&self, c: f32) -> Tensor {
        let data: Vec<f32> = self.data().iter().map(|x| x + c).collect();
        let need = self.inner.needs_grad;
        Tensor::derived(
            self.inner.shape.clone(),
            data,
            vec![self.clone()],
            Box::new(move |g| vec![need.then(|| g.to_vec())]),
        )
    }

    /// x * sigmoid(x).
    pub fn silu(&self) -> Tensor {
        let data: Vec<f32> = self
            .data()
            .iter()
            .map(|&x| {
                let s = 1.0 / (1.0 + (-x as f64).exp());
                (x as f64 * s) as f32
            })
            .collect();
        let src = self.clone();
        let need = self.inner.needs_grad;
        Tensor::derived(
            self.inner.shape.clone(),
            data,
            vec![self.clone()],
            Box::new(move |g| {
                vec![need.then(|| {
                    let x = src.data();
                    g.iter()
                        .zip(x.iter())
                        .map(|(&gi, &xi)| {
                            let s = 1.0 / (1.0 + (-xi as f64).exp());
                            (gi as f64 * (s * (1.0 + xi as f64 * (1.0 - s)))) as f32
                        })
                        .collect()
                })]
            }),
        )
    }

    // ---- linear algebra --------------------------------------------------

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = self.rows2d("matmul")?;
        let (k2, n) = rhs.rows2d("matmul")?;
        if k != k2 {
            return Err(Error::Dim(format!(
                "matmul: inner dimensions disagree, [{m}x{k}] x [{k2}x{n}]"
            )));
        }
        let data = {
            let a = self.data();
            let b = rhs.data();
            mm(&a, &b, m, k, n)
        };
        let (lhs_t, rhs_t) = (self.clone(), rhs.clone());
        let need = (self.inner.needs_grad, rhs.inner.needs_grad);
        Ok(Tensor::derived(
            vec![m, n],
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                let a = lhs_t.data();
                let b = rhs_t.data();
                vec![
                    need.0.then(|| mm_nt(g, &b, m, n, k)),
                    need.1.then(|| mm_tn(&a, g, m, k, n)),
                ]
            }),
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.rows2d("transpose")?;
        let src = self.data();
        let mut data = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        drop(src);
        let need = self.inner.needs_grad;
        Ok(Tensor::derived(
            vec![n, m],
            data,
            vec![self.clone()],
            Box::new(move |g| {
                vec![need.then(|| {
                    let mut dg = vec![0.0f32; m * n];
                    for j in 0..n {
                        for i in 0..m {
                            dg[i * n + j] = g[j * m + i];
                        }
                    }
                    dg
                })]
            }),
        ))
    }

    /// Numerically stabilized softmax along `axis` (0 or 1) of a 2-d tensor.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let (m, n) = self.rows2d("softmax")?;
        if axis > 1 {
            return Err(Error::Dim(format!("softmax: axis {axis} out of bounds")));
        }
        let (slices, len, stride, base_stride) = if axis == 1 {
            (m, n, 1usize, n)
        } else {
            (n, m, n, 1usize)
        };
        let mut data = vec![0.0f32; m * n];
        {
            let x = self.data();
            for s in 0..slices {
                let base = s * base_stride;
                let mut maxv = f32::NEG_INFINITY;
                for i in 0..len {
                    maxv = maxv.max(x[base + i * stride]);
                }
                let mut denom = 0.0f64;
                for i in 0..len {
                    denom += ((x[base + i * stride] - maxv) as f64).exp();
                }
                for i in 0..len {
                    data[base + i * stride] =
                        (((x[base + i * stride] - maxv) as f64).exp() / denom) as f32;
                }
            }
        }
        let y = data.clone();
        let need = self.inner.needs_grad;
        Ok(Tensor::derived(
            vec![m, n],
            data,
            vec![self.clone()],
            Box::new(move |g| {
                vec![need.then(|| {
                    let mut dx = vec![0.0f32; y.len()];
                    for s in 0..slices {
                        let base = s * base_stride;
                        let mut dot = 0.0f64;
                        for i in 0..len {
                            let idx = base + i * stride;
                            dot += g[idx] as f64 * y[idx] as f64;
                        }
                        for i in 0..len {
                            let idx = base + i * stride;
                            dx[idx] = (y[idx] as f64 * (g[idx] as f64 - dot)) as f32;
                        }
                    }
                    dx
                })]
            }),
        ))
    }

    /// Per-row normalization over columns: (x - mean) / sqrt(var + eps).
    pub fn layer_norm(&self, eps: f32) -> Result<Tensor> {
        let (m, n) = self.rows2d("layer_norm")?;
        let mut data = vec![0.0f32; m * n];
        let mut inv_std = vec![0.0f64; m];
        {
            let x = self.data();
            for i in 0..m {
                let row = &x[i * n..(i + 1) * n];
                let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
                let var = row
                    .iter()
                    .map(|&v| {
                        let d = v as f64 - mean;
                        d * d
                    })
                    .sum::<f64>()
                    / n as f64;
                let s = 1.0 / (var + eps as f64).sqrt();
                inv_std[i] = s;
                for j in 0..n {
                    data[i * n + j] = ((row[j] as f64 - mean) * s) as f32;
                }
            }
        }
        let y = data.clone();
        let need = self.inner.needs_grad;
        Ok(Tensor::derived(
            vec![m, n],
            data,
            vec![self.clone()],
            Box::new(move |g| {
                vec![need.then(|| {
                    let mut dx = vec![0.0f32; y.len()];
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        let yr = &y[i * n..(i + 1) * n];
                        let mean_g = gr.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
                        let mean_gy = gr
                            .iter()
                            .zip(yr.iter())
                            .map(|(&a, &b)| a as f64 * b as f64)
                            .sum::<f64>()
                            / n as f64;
                        for j in 0..n {
                            dx[i * n + j] = (inv_std[i]
                                * (gr[j] as f64 - mean_g - yr[j] as f64 * mean_gy))
                                as f32;
                        }
                    }
                    dx
                })]
            }),
        ))
    }

    // ---- shape / broadcast -----------------------------------------------

    /// Column-wise concatenation: [f, a] ++ [f, b] -> [f, a+b].
    pub fn concat_cols(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, a) = self.rows2d("concat_cols")?;
        let (m2, b) = rhs.rows2d("concat_cols")?;
        if m != m2 {
            return Err(Error::Dim(format!(
                "concat_cols: row counts differ, {m} vs {m2}"
            )));
        }
        let mut data = vec![0.0f32; m * (a + b)];
        {
            let x = self.data();
            let y = rhs.data();
            for i in 0..m {
                data[i * (a + b)..i * (a + b) + a].copy_from_slice(&x[i * a..(i + 1) * a]);
                data[i * (a + b) + a..(i + 1) * (a + b)].copy_from_slice(&y[i * b..(i + 1) * b]);
            }
        }
        let need = (self.inner.needs_grad, rhs.inner.needs_grad);
        Ok(Tensor::derived(
            vec![m, a + b],
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                let mut ga = vec![0.0f32; m * a];
                let mut gb = vec![0.0f32; m * b];
                for i in 0..m {
                    ga[i * a..(i + 1) * a].copy_from_slice(&g[i * (a + b)..i * (a + b) + a]);
                    gb[i * b..(i + 1) * b].copy_from_slice(&g[i * (a + b) + a..(i + 1) * (a + b)]);
                }
                vec![need.0.then_some(ga), need.1.then_some(gb)]
            }),
        ))
    }

    /// Linear time interpolation with fixed endpoints (align-corners):
    /// [src_len, c] -> [target_len, c]. Exact identity when lengths match.
    pub fn interp_time(&self, target_len: usize) -> Result<Tensor> {
        let (src_len, c) = self.rows2d("interp_time")?;
        if target_len == 0 {
            return Err(Error::Dim("interp_time: target length is zero".into()));
        }
        if target_len == src_len {
            // Bitwise identity.
            let data = self.to_vec();
            let need = self.inner.needs_grad;
            return Ok(Tensor::derived(
                vec![src_len, c],
                data,
                vec![self.clone()],
                Box::new(move |g| vec![need.then(|| g.to_vec())]),
            ));
        }
        // Row f samples the source at f*(src_len-1)/(target_len-1).
        let mut lo = vec![0usize; target_len];
        let mut w = vec![0.0f64; target_len];
        for (f, (l, wf)) in lo.iter_mut().zip(w.iter_mut()).enumerate() {
            let pos = if target_len == 1 {
                0.0
            } else {
                f as f64 * (src_len - 1) as f64 / (target_len - 1) as f64
            };
            let i0 = (pos.floor() as usize).min(src_len - 1);
            *l = i0;
            *wf = pos - i0 as f64;
        }
        let mut data = vec![0.0f32; target_len * c];
        {
            let x = self.data();
            for f in 0..target_len {
                let i0 = lo[f];
                let i1 = (i0 + 1).min(src_len - 1);
                let wf = w[f];
                for j in 0..c {
                    data[f * c + j] = ((1.0 - wf) * x[i0 * c + j] as f64
                        + wf * x[i1 * c + j] as f64) as f32;
                }
            }
        }
        let need = self.inner.needs_grad;
        Ok(Tensor::derived(
            vec![target_len, c],
            data,
            vec![self.clone()],
            Box::new(move |g| {
                vec![need.then(|| {
                    let mut acc = vec![0.0f64; src_len * c];
                    for f in 0..target_len {
                        let i0 = lo[f];
                        let i1 = (i0 + 1).min(src_len - 1);
                        let wf = w[f];
                        for j in 0..c {
                            acc[i0 * c + j] += (1.0 - wf) * g[f * c + j] as f64;
                            acc[i1 * c + j] += wf * g[f * c + j] as f64;
                        }
                    }
                    acc.into_iter().map(|v| v as f32).collect()
                })]
            }),
        ))
    }

    /// Broadcast-add a [1, c] row to every row of [f, c].
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        let (m, n) = self.rows2d("add_row")?;
        let (r, n2) = row.rows2d("add_row")?;
        if r != 1 || n != n2 {
            return Err(Error::Dim(format!(
                "add_row: expected [1,{n}] row, got {:?}",
                row.shape()
            )));
        }
        let data: Vec<f32> = {
            let x = self.data();
            let b = row.data();
            (0..m * n).map(|i| x[i] + b[i % n]).collect()
        };
        let need = (self.inner.needs_grad, row.inner.needs_grad);
        Ok(Tensor::derived(
            vec![m, n],
            data,
            vec![self.clone(), row.clone()],
            Box::new(move |g| {
                vec![
                    need.0.then(|| g.to_vec()),
                    need.1.then(|| {
                        let mut acc = vec![0.0f64; n];
                        for i in 0..m {
                            for j in 0..n {
                                acc[j] += g[i * n + j] as f64;
                            }
                        }
                        acc.into_iter().map(|v| v as f32).collect()
                    }),
                ]
            }),
        ))
    }

    /// Broadcast-multiply every row of [f, c] by a [1, c] gain row.
    pub fn mul_row(&self, row: &Tensor) -> Result<Tensor> {
        let (m, n) = self.rows2d("mul_row")?;
        let (r, n2) = row.rows2d("mul_row")?;
        if r != 1 || n != n2 {
            return Err(Error::Dim(format!(
                "mul_row: expected [1,{n}] row, got {:?}",
                row.shape()
            )));
        }
        let data: Vec<f32> = {
            let x = self.data();
            let b = row.data();
            (0..m * n).map(|i| x[i] * b[i % n]).collect()
        };
        let (lhs_t, row_t) = (self.clone(), row.clone());
        let need = (self.inner.needs_grad, row.inner.needs_grad);
        Ok(Tensor::derived(
            vec![m, n],
            data,
            vec![self.clone(), row.clone()],
            Box::new(move |g| {
                let x = lhs_t.data();
                let b = row_t.data();
                vec![
                    need.0
                        .then(|| (0..m * n).map(|i| g[i] * b[i % n]).collect()),
                    need.1.then(|| {
                        let mut acc = vec![0.0f64; n];
                        for i in 0..m {
                            for j in 0..n {
                                acc[j] += g[i * n + j] as f64 * x[i * n + j] as f64;
                            }
                        }
                        acc.into_iter().map(|v| v as f32).collect()
                    }),
                ]
            }),
        ))
    }

    /// Mean over rows: [f, c] -> [1, c].
    pub fn mean_rows(&self) -> Result<Tensor> {
        let (m, n) = self.rows2d("mean_rows")?;
        let mut acc = vec![0.0f64; n];
        {
            let x = self.data();
            for i in 0..m {
                for j in 0..n {
                    acc[j] += x[i * n + j] as f64;
                }
            }
        }
        let data: Vec<f32> = acc.iter().map(|&v| (v / m as f64) as f32).collect();
        let need = self.inner.needs_grad;
        Ok(Tensor::derived(
            vec![1, n],
            data,
            vec![self.clone()],
            Box::new(move |g| {
                vec![need.then(|| {
                    let mut dg = vec![0.0f32; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            dg[i * n + j] = g[j] / m as f32;
                        }
                    }
                    dg
                })]
            }),
        ))
    }

    /// Mean over all elements, as a scalar tensor.
    pub fn mean_all(&self) -> Tensor {
        let n = self.numel();
        let sum: f64 = self.data().iter().map(|&v| v as f64).sum();
        let need = self.inner.needs_grad;
        Tensor::derived(
            vec![1],
            vec![(sum / n as f64) as f32],
            vec![self.clone()],
            Box::new(move |g| vec![need.then(|| vec![g[0] / n as f32; n])]),
        )
    }

    /// Sum over all elements, as a scalar tensor.
    pub fn sum_all(&self) -> Tensor {
        let n = self.numel();
        let sum: f64 = self.data().iter().map(|&v| v as f64).sum();
        let need = self.inner.needs_grad;
        Tensor::derived(
            vec![1],
            vec![sum as f32],
            vec![self.clone()],
            Box::new(move |g| vec![need.then(|| vec![g[0]; n])]),
        )
    }

    /// Select one row of a [rows, c] tensor as [1, c] (embedding lookup).
    pub fn select_row(&self, index: usize) -> Result<Tensor> {
        let (m, n) = self.rows2d("select_row")?;
        if index >= m {
            return Err(Error::Dim(format!(
                "select_row: index {index} out of bounds for {m} rows"
            )));
        }
        let data = self.data()[index * n..(index + 1) * n].to_vec();
        let need = self.inner.needs_grad;
        Ok(Tensor::derived(
            vec![1, n],
            data,
            vec![self.clone()],
            Box::new(move |g| {
                vec![need.then(|| {
                    let mut dg = vec![0.0f32; m * n];
                    dg[index * n..(index + 1) * n].copy_from_slice(g);
                    dg
                })]
            }),
        ))
    }
}

// ---- raw matmul kernels (f64 accumulation, deterministic order) ----------

/// c[m,n] = a[m,k] * b[k,n]
fn mm(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    let mut row = vec![0.0f64; n];
    for i in 0..m {
        row.iter_mut().for_each(|v| *v = 0.0);
        for p in 0..k {
            let av = a[i * k + p] as f64;
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                row[j] += av * brow[j] as f64;
            }
        }
        for j in 0..n {
            out[i * n + j] = row[j] as f32;
        }
    }
    out
}

/// c[m,k] = a[m,n] * b[k,n]^T
fn mm_nt(a: &[f32], b: &[f32], m: usize, n: usize, k: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0f64;
            for j in 0..n {
                acc += arow[j] as f64 * brow[j] as f64;
            }
            out[i * k + p] = acc as f32;
        }
    }
    out
}

/// c[k,n] = a[m,k]^T * b[m,n]
fn mm_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut acc = vec![0.0f64; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p] as f64;
            let dst = &mut acc[p * n..(p + 1) * n];
            for j in 0..n {
                dst[j] += av * brow[j] as f64;
            }
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

// ---- backward pass --------------------------------------------------------

fn accumulate(t: &Tensor, g: Vec<f32>) {
    let mut slot = t.inner.grad.borrow_mut();
    match slot.as_mut() {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g.iter()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

/// Reverse-mode sweep from a scalar loss. Every trainable leaf on the
/// recorded path receives (accumulates) its gradient. Calling this twice on
/// the same graph double-counts; build a fresh graph per step.
pub fn backward(loss: &Tensor) -> Result<()> {
    if loss.numel() != 1 {
        return Err(Error::Contract(format!(
            "backward expects a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    if !loss.inner.needs_grad {
        // Loss is detached from every trainable leaf; nothing to propagate.
        return Ok(());
    }

    // Iterative post-order over the recorded DAG.
    let mut order: Vec<Tensor> = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Tensor, bool)> = vec![(loss.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !visited.insert(node.inner.id) {
            continue;
        }
        stack.push((node.clone(), true));
        if let Some(rec) = &node.inner.record {
            for p in &rec.parents {
                if p.inner.needs_grad && !visited.contains(&p.inner.id) {
                    stack.push((p.clone(), false));
                }
            }
        }
    }

    accumulate(loss, vec![1.0]);
    for node in order.iter().rev() {
        let Some(rec) = &node.inner.record else {
            continue;
        };
        let out_grad = match node.inner.grad.borrow().as_ref() {
            Some(g) => g.clone(),
            None => continue,
        };
        let parent_grads = (rec.backward)(&out_grad);
        debug_assert_eq!(parent_grads.len(), rec.parents.len());
        for (parent, grad) in rec.parents.iter().zip(parent_grads) {
            if let Some(g) = grad {
                if parent.inner.needs_grad {
                    debug_assert_eq!(g.len(), parent.numel());
                    accumulate(parent, g);
                }
            }
        }
    }
    Ok(())
}
