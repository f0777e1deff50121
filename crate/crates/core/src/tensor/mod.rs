//! Dense row-major f64 tensors and the pure numeric kernels the rest of the
//! crate builds on: stable softmax, masked attention, per-row cosine,
//! bilinear resize with half-pixel centers, and a central-difference oracle.
//!
//! Everything here is deterministic: identical inputs give bitwise-identical
//! outputs, and values are safe to share read-only across threads.

pub mod gradcheck;
pub mod tape;

use crate::error::{Error, Result};

pub use gradcheck::finite_diff_grad;

/// Dense tensor, row-major, 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Tensor { shape: vec![r, c], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Row count of a 2-D tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() needs a 2-D tensor");
        self.shape[0]
    }

    /// Column count of a 2-D tensor.
    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() needs a 2-D tensor");
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() needs a single-element tensor");
        self.data[0]
    }

    /// Same data under a new shape. The element count must match.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Boolean attention mask; `true` means the query may attend to the key.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "mask {}x{} needs {} entries, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        Ok(Mask { rows, cols, data })
    }

    pub fn allow_all(rows: usize, cols: usize) -> Self {
        Mask { rows, cols, data: vec![true; rows * cols] }
    }

    /// Lower-triangular causal mask over a square sequence.
    pub fn causal(len: usize) -> Self {
        let mut data = vec![false; len * len];
        for q in 0..len {
            for k in 0..=q {
                data[q * len + k] = true;
            }
        }
        Mask { rows: len, cols: len, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.data[q * self.cols + k]
    }

    pub fn set(&mut self, q: usize, k: usize, allowed: bool) {
        self.data[q * self.cols + k] = allowed;
    }
}

/// C = A @ B for 2-D operands.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor { shape: vec![m, n], data: out }
}

/// Numerically stable softmax along `axis`; slices each sum to one.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::invalid(format!(
            "softmax axis {} out of range for shape {:?}",
            axis, shape
        )));
    }
    let axis_len = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0; x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| o * axis_len * inner + a * inner + i;
            let mut max = f64::NEG_INFINITY;
            for a in 0..axis_len {
                max = max.max(x.data[idx(a)]);
            }
            let mut sum = 0.0;
            for a in 0..axis_len {
                let e = (x.data[idx(a)] - max).exp();
                out[idx(a)] = e;
                sum += e;
            }
            for a in 0..axis_len {
                out[idx(a)] /= sum;
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Scaled dot-product attention with a boolean mask.
///
/// Row i of the output is the softmax over the unmasked keys of
/// `Q_i . K_j / sqrt(d)`, applied to the value rows. A query row with every
/// key masked out is an error.
pub fn masked_attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: &Mask) -> Result<Tensor> {
    let (m, d) = (q.rows(), q.cols());
    let kn = k.rows();
    if k.cols() != d {
        return Err(Error::shape(format!("K width {} != Q width {}", k.cols(), d)));
    }
    if v.rows() != kn {
        return Err(Error::shape(format!("V rows {} != K rows {}", v.rows(), kn)));
    }
    if mask.rows() != m || mask.cols() != kn {
        return Err(Error::shape(format!(
            "mask {}x{} does not cover {}x{} attention",
            mask.rows(),
            mask.cols(),
            m,
            kn
        )));
    }
    let dv = v.cols();
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; m * dv];
    let mut logits = vec![0.0; kn];
    for i in 0..m {
        let mut max = f64::NEG_INFINITY;
        let mut any = false;
        for j in 0..kn {
            if mask.allowed(i, j) {
                let mut s = 0.0;
                for c in 0..d {
                    s += q.data[i * d + c] * k.data[j * d + c];
                }
                logits[j] = s * scale;
                max = max.max(logits[j]);
                any = true;
            }
        }
        if !any {
            return Err(Error::DegenerateMask(format!("query row {i} has no unmasked key")));
        }
        let mut sum = 0.0;
        for j in 0..kn {
            if mask.allowed(i, j) {
                logits[j] = (logits[j] - max).exp();
                sum += logits[j];
            } else {
                logits[j] = 0.0;
            }
        }
        for j in 0..kn {
            if logits[j] == 0.0 {
                continue;
            }
            let w = logits[j] / sum;
            let vrow = &v.data[j * dv..(j + 1) * dv];
            let orow = &mut out[i * dv..(i + 1) * dv];
            for c in 0..dv {
                orow[c] += w * vrow[c];
            }
        }
    }
    Tensor::new(vec![m, dv], out)
}

/// Cosine similarity per matching row pair; each entry lies in [-1, 1].
pub fn cosine_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "cosine_rows shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (t, d) = (a.rows(), a.cols());
    let mut out = vec![0.0; t];
    for i in 0..t {
        let (ar, br) = (a.row(i), b.row(i));
        let dot: f64 = ar.iter().zip(br).map(|(x, y)| x * y).sum();
        let na: f64 = ar.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = br.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return Err(Error::NumericDomain(format!("zero-norm row {i} in cosine_rows")));
        }
        out[i] = (dot / (na * nb)).clamp(-1.0, 1.0);
        let _ = d;
    }
    Tensor::new(vec![t], out)
}

/// Source coordinate for half-pixel-center resizing, clamped to the border.
fn resize_coord(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let src = (dst as f64 + 0.5) * (in_len as f64 / out_len as f64) - 0.5;
    let src = src.clamp(0.0, (in_len - 1) as f64);
    let lo = src.floor() as usize;
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, src - lo as f64)
}

/// Bilinear resize of an `[h, w, c]` grid with half-pixel-center mapping.
///
/// Exact identity when the output size equals the input size, and exactly
/// constancy-preserving: the interpolation is evaluated as two nested lerps,
/// so a constant grid resizes to the bitwise-same constant.
pub fn bilinear_resize(grid: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let shape = grid.shape();
    if shape.len() != 3 {
        return Err(Error::shape(format!("bilinear_resize needs [h,w,c], got {:?}", shape)));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::invalid("bilinear_resize extents must be positive"));
    }
    let mut out = vec![0.0; out_h * out_w * c];
    for oy in 0..out_h {
        let (y0, y1, fy) = resize_coord(oy, h, out_h);
        for ox in 0..out_w {
            let (x0, x1, fx) = resize_coord(ox, w, out_w);
            for ch in 0..c {
                let v00 = grid.data[(y0 * w + x0) * c + ch];
                let v01 = grid.data[(y0 * w + x1) * c + ch];
                let v10 = grid.data[(y1 * w + x0) * c + ch];
                let v11 = grid.data[(y1 * w + x1) * c + ch];
                let top = v00 + fx * (v01 - v00);
                let bottom = v10 + fx * (v11 - v10);
                out[(oy * out_w + ox) * c + ch] = top + fy * (bottom - top);
            }
        }
    }
    Tensor::new(vec![out_h, out_w, c], out)
}

/// Corner weights matching [`bilinear_resize`]; used by the backward pass.
pub(crate) fn bilinear_taps(
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    oy: usize,
    ox: usize,
) -> [(usize, usize, f64); 4] {
    let (y0, y1, fy) = resize_coord(oy, in_h, out_h);
    let (x0, x1, fx) = resize_coord(ox, in_w, out_w);
    [
        (y0, x0, (1.0 - fy) * (1.0 - fx)),
        (y0, x1, (1.0 - fy) * fx),
        (y1, x0, fy * (1.0 - fx)),
        (y1, x1, fy * fx),
    ]
}
