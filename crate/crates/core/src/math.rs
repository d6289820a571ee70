//! Thin wrappers over `libm` so the rest of the crate reads like ordinary
//! float code without `std`.

#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn tanh(x: f64) -> f64 {
    libm::tanh(x)
}

#[inline]
pub fn powf(x: f64, y: f64) -> f64 {
    libm::pow(x, y)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out = w · x` for a row-major `rows × x.len()` matrix.
#[inline]
pub fn matvec(w: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    let rows = out.len().min(if cols == 0 { out.len() } else { w.len() / cols });
    let blocks = rows / 4;
    // four rows at a time; each row keeps its own left-to-right sum
    for b in 0..blocks {
        let r = b * 4;
        let w4 = &w[r * cols..(r + 4) * cols];
        let (w0, rest) = w4.split_at(cols);
        let (w1, rest) = rest.split_at(cols);
        let (w2, w3) = rest.split_at(cols);
        let mut acc = [0.0f64; 4];
        for j in 0..cols {
            let xj = x[j];
            acc[0] += w0[j] * xj;
            acc[1] += w1[j] * xj;
            acc[2] += w2[j] * xj;
            acc[3] += w3[j] * xj;
        }
        out[r..r + 4].copy_from_slice(&acc);
    }
    for r in blocks * 4..rows {
        out[r] = dot(&w[r * cols..(r + 1) * cols], x);
    }
}

/// `out += wᵀ · v` for a row-major `v.len() × out.len()` matrix.
#[inline]
pub fn matvec_t_acc(w: &[f64], v: &[f64], out: &mut [f64]) {
    let cols = out.len();
    for (&vi, row) in v.iter().zip(w.chunks_exact(cols)) {
        if vi != 0.0 {
            for (o, &wij) in out.iter_mut().zip(row) {
                *o += vi * wij;
            }
        }
    }
}

/// `g += v ⊗ x`, the gradient of `w · x` with respect to `w`.
#[inline]
pub fn outer_acc(g: &mut [f64], v: &[f64], x: &[f64]) {
    let cols = x.len();
    for (&vi, row) in v.iter().zip(g.chunks_exact_mut(cols)) {
        if vi != 0.0 {
            for (gij, &xj) in row.iter_mut().zip(x) {
                *gij += vi * xj;
            }
        }
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    sqrt(dot(v, v))
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}
