//! Pure array kernels shared by the tape's forward pass and the standalone
//! inference engine.
//!
//! All buffers are row-major. The [`Reduction`] mode controls how sums over
//! many terms are ordered: `Sequential` adds in index order (fast, used for
//! training), `Sorted` adds in ascending value order, which makes the result
//! invariant under any permutation of the terms. Sorted reductions are what
//! give the inference path its bit-exact behaviour under horizontal rolls of
//! the token grid.

/// Summation order for reductions over many terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    /// Index order. Fastest, result depends on operand order.
    Sequential,
    /// Ascending value order. Permutation-invariant down to the last bit.
    Sorted,
}

/// Sum of `terms`, destroying the buffer. Sorted mode sorts by value first;
/// equal values commute bitwise, so any permutation of the input yields the
/// identical float.
pub fn reduce<S: crate::tensor::Scalar>(terms: &mut [S], mode: Reduction) -> S {
    if let Reduction::Sorted = mode {
        terms.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    }
    let mut acc = S::zero();
    for &t in terms.iter() {
        acc = acc + t;
    }
    acc
}

/// C[m,n] = A[m,k] @ B[k,n].
pub fn matmul<S: crate::tensor::Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij = *c_ij + a_ip * b_pj;
            }
        }
    }
    c
}

/// C[m,n] = A[m,k] @ B[n,k]^T. Both operands are iterated along their rows,
/// so this is the cache-friendly form for Q·Kᵀ.
pub fn matmul_nt<S: crate::tensor::Scalar>(
    a: &[S],
    b: &[S],
    m: usize,
    k: usize,
    n: usize,
) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc = acc + x * y;
            }
            c[i * n + j] = acc;
        }
    }
    c
}

/// C[k,n] = A[m,k]^T @ B[m,n]. The transposed-left form needed by matmul
/// backward rules.
pub fn matmul_tn<S: crate::tensor::Scalar>(
    a: &[S],
    b: &[S],
    m: usize,
    k: usize,
    n: usize,
) -> Vec<S> {
    let mut c = vec![S::zero(); k * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let c_row = &mut c[p * n..(p + 1) * n];
            for (c_pj, &b_ij) in c_row.iter_mut().zip(b_row) {
                *c_pj = *c_pj + a_ip * b_ij;
            }
        }
    }
    c
}

/// Row-wise softmax with max subtraction. Returns an error marker (`None`)
/// only on NaN input; extreme finite logits are handled by the shift.
pub fn softmax_rows<S: crate::tensor::Scalar>(
    x: &[S],
    rows: usize,
    cols: usize,
    mode: Reduction,
) -> Option<Vec<S>> {
    let mut out = vec![S::zero(); rows * cols];
    let mut scratch = vec![S::zero(); cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mut max = S::neg_infinity();
        for &v in row {
            if v.is_nan() {
                return None;
            }
            max = max.max(v);
        }
        let out_row = &mut out[r * cols..(r + 1) * cols];
        for (o, &v) in out_row.iter_mut().zip(row) {
            *o = (v - max).exp();
        }
        scratch.copy_from_slice(out_row);
        let denom = reduce(&mut scratch, mode);
        for o in out_row.iter_mut() {
            *o = *o / denom;
        }
    }
    Some(out)
}

/// Tanh-form Gaussian error linear unit.
pub fn gelu<S: crate::tensor::Scalar>(x: S) -> S {
    let c = S::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    half * x * (S::one() + (c * (x + a * x * x * x)).tanh())
}

/// d gelu / dx for the tanh form.
pub fn gelu_grad<S: crate::tensor::Scalar>(x: S) -> S {
    let c = S::from_f64(0.797_884_560_802_865_4);
    let a = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (S::one() + three * a * x * x);
    half * (S::one() + t) + half * x * (S::one() - t * t) * du
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Normalizes each row of `x[rows, cols]` to zero mean / unit variance over
/// the last axis, then applies the per-channel affine.
pub fn layer_norm<S: crate::tensor::Scalar>(
    x: &[S],
    gain: &[S],
    bias: &[S],
    rows: usize,
    cols: usize,
) -> Vec<S> {
    let eps = S::from_f64(LAYER_NORM_EPS);
    let inv_n = S::one() / S::from_f64(cols as f64);
    let mut out = vec![S::zero(); rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mut mean = S::zero();
        for &v in row {
            mean = mean + v;
        }
        mean = mean * inv_n;
        let mut var = S::zero();
        for &v in row {
            let d = v - mean;
            var = var + d * d;
        }
        var = var * inv_n;
        let inv_std = S::one() / (var + eps).sqrt();
        let out_row = &mut out[r * cols..(r + 1) * cols];
        for c in 0..cols {
            out_row[c] = (row[c] - mean) * inv_std * gain[c] + bias[c];
        }
    }
    out
}

/// Bilinear upsampling of a `[in_h * in_w, ch]` token grid by an integer
/// `factor`, aligned so that output pixel `(y*factor, x*factor)` reproduces
/// token `(y, x)` exactly. The width axis interpolates across the wrap seam
/// when `wrap_x` is set; the height axis always clamps.
pub fn upsample_bilinear<S: crate::tensor::Scalar>(
    x: &[S],
    in_h: usize,
    in_w: usize,
    ch: usize,
    factor: usize,
    wrap_x: bool,
) -> Vec<S> {
    let out_h = in_h * factor;
    let out_w = in_w * factor;
    let mut out = vec![S::zero(); out_h * out_w * ch];
    for oy in 0..out_h {
        let (y0, y1, fy) = axis_sample(oy, factor, in_h, false);
        for ox in 0..out_w {
            let (x0, x1, fx) = axis_sample(ox, factor, in_w, wrap_x);
            let w00 = (S::one() - fy) * (S::one() - fx);
            let w01 = (S::one() - fy) * fx;
            let w10 = fy * (S::one() - fx);
            let w11 = fy * fx;
            let o = (oy * out_w + ox) * ch;
            let i00 = (y0 * in_w + x0) * ch;
            let i01 = (y0 * in_w + x1) * ch;
            let i10 = (y1 * in_w + x0) * ch;
            let i11 = (y1 * in_w + x1) * ch;
            for c in 0..ch {
                out[o + c] = w00 * x[i00 + c] + w01 * x[i01 + c] + w10 * x[i10 + c] + w11 * x[i11 + c];
            }
        }
    }
    out
}

/// Source token pair and interpolation weight for one output coordinate.
/// Exposed for the backward rule, which scatters with the same weights.
pub fn axis_sample<S: crate::tensor::Scalar>(
    o: usize,
    factor: usize,
    extent: usize,
    wrap: bool,
) -> (usize, usize, S) {
    let i0 = o / factor;
    let rem = o % factor;
    let frac = S::from_f64(rem as f64 / factor as f64);
    if rem == 0 {
        return (i0, i0, S::zero());
    }
    let i1 = if i0 + 1 < extent {
        i0 + 1
    } else if wrap {
        0
    } else {
        return (i0, i0, S::zero());
    };
    (i0, i1, frac)
}
