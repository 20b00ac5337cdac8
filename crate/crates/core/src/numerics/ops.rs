//! Forward and backward rules for the closed set of differentiable ops.

use crate::error::{dim_err, Error, Result};
use crate::numerics::array::dot;
use crate::{NumericArray, Scalar};

/// Matrix product `[m×k] · [k×n]`.
pub fn matmul<F: Scalar>(a: &NumericArray<F>, b: &NumericArray<F>) -> Result<NumericArray<F>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(dim_err(format!("matmul inner dimensions {} and {} differ", k, k2)));
    }
    let mut out = vec![F::zero(); m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in ad[i * k..(i + 1) * k].iter().enumerate() {
            if aip == F::zero() {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    NumericArray::from_vec(vec![m, n], out)
}

/// `aᵀ · g` for `a: [m×k]`, `g: [m×n]`, giving `[k×n]`.
pub fn matmul_tn<F: Scalar>(a: &NumericArray<F>, g: &NumericArray<F>) -> Result<NumericArray<F>> {
    let (m, k) = a.dims2()?;
    let (m2, n) = g.dims2()?;
    if m != m2 {
        return Err(dim_err(format!("matmul_tn row counts {} and {} differ", m, m2)));
    }
    let mut out = vec![F::zero(); k * n];
    let (ad, gd) = (a.data(), g.data());
    for i in 0..m {
        let grow = &gd[i * n..(i + 1) * n];
        for (p, &aip) in ad[i * k..(i + 1) * k].iter().enumerate() {
            if aip == F::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
    NumericArray::from_vec(vec![k, n], out)
}

/// `g · bᵀ` for `g: [m×n]`, `b: [k×n]`, giving `[m×k]`.
pub fn matmul_nt<F: Scalar>(g: &NumericArray<F>, b: &NumericArray<F>) -> Result<NumericArray<F>> {
    let (m, n) = g.dims2()?;
    let (k, n2) = b.dims2()?;
    if n != n2 {
        return Err(dim_err(format!("matmul_nt column counts {} and {} differ", n, n2)));
    }
    let mut out = vec![F::zero(); m * k];
    let (gd, bd) = (g.data(), b.data());
    for i in 0..m {
        let grow = &gd[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] = dot(grow, &bd[p * n..(p + 1) * n]);
        }
    }
    NumericArray::from_vec(vec![m, k], out)
}

/// Gradients of `a · b` given the upstream gradient `g`: `(g·bᵀ, aᵀ·g)`.
pub fn matmul_backward<F: Scalar>(
    a: &NumericArray<F>,
    b: &NumericArray<F>,
    g: &NumericArray<F>,
) -> Result<(NumericArray<F>, NumericArray<F>)> {
    Ok((matmul_nt(g, b)?, matmul_tn(a, g)?))
}

/// Elementwise `max(0, x) + slope·min(0, x)`.
pub fn prelu<F: Scalar>(x: &NumericArray<F>, slope: F) -> NumericArray<F> {
    x.map(|v| if v > F::zero() { v } else { slope * v })
}

/// Returns `(∂L/∂x, ∂L/∂slope)`.
pub fn prelu_backward<F: Scalar>(
    x: &NumericArray<F>,
    slope: F,
    g: &NumericArray<F>,
) -> Result<(NumericArray<F>, F)> {
    if x.shape() != g.shape() {
        return Err(dim_err("prelu_backward: gradient shape differs from input"));
    }
    let mut gs = F::zero();
    let mut gx = g.clone();
    for (gxi, &xi) in gx.data_mut().iter_mut().zip(x.data()) {
        if xi <= F::zero() {
            gs += *gxi * xi;
            *gxi = *gxi * slope;
        }
    }
    Ok((gx, gs))
}

/// `u·v / (‖u‖‖v‖)`.
pub fn cosine_similarity<F: Scalar>(u: &[F], v: &[F]) -> Result<F> {
    if u.len() != v.len() {
        return Err(dim_err(format!("cosine: lengths {} and {} differ", u.len(), v.len())));
    }
    let nu = dot(u, u).sqrt();
    let nv = dot(v, v).sqrt();
    if nu <= F::zero() || nv <= F::zero() {
        return Err(Error::Degenerate("cosine similarity of a zero-norm vector".into()));
    }
    let c = dot(u, v) / (nu * nv);
    Ok(c.max(-F::one()).min(F::one()))
}

/// Gradient of `cos(u, v)` with respect to `u`, scaled by `g`.
pub fn cosine_grad_u<F: Scalar>(u: &[F], v: &[F], g: F, out: &mut [F]) -> Result<()> {
    let nu = dot(u, u).sqrt();
    let nv = dot(v, v).sqrt();
    if nu <= F::zero() || nv <= F::zero() {
        return Err(Error::Degenerate("cosine gradient of a zero-norm vector".into()));
    }
    let c = dot(u, v) / (nu * nv);
    for ((o, &ui), &vi) in out.iter_mut().zip(u).zip(v) {
        *o += g * (vi / (nu * nv) - c * ui / (nu * nu));
    }
    Ok(())
}

/// L2-normalizes every row of a matrix; returns the normalized rows and their norms.
pub fn normalize_rows<F: Scalar>(x: &NumericArray<F>) -> Result<(NumericArray<F>, Vec<F>)> {
    let (r, _) = x.dims2()?;
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(r);
    for i in 0..r {
        let row = out.row_mut(i);
        let n = dot(row, row).sqrt();
        if n <= F::zero() {
            return Err(Error::Degenerate(format!("row {} has zero norm", i)));
        }
        row.iter_mut().for_each(|v| *v = *v / n);
        norms.push(n);
    }
    Ok((out, norms))
}

/// Backward of [`normalize_rows`]: `∂x = (g − (g·y) y) / ‖x‖` per row.
pub fn normalize_rows_backward<F: Scalar>(
    y: &NumericArray<F>,
    norms: &[F],
    g: &NumericArray<F>,
) -> Result<NumericArray<F>> {
    if y.shape() != g.shape() {
        return Err(dim_err("normalize_rows_backward: shape mismatch"));
    }
    let mut gx = g.clone();
    for (i, &n) in norms.iter().enumerate() {
        let yr = y.row(i);
        let proj = dot(g.row(i), yr);
        for (o, &yv) in gx.row_mut(i).iter_mut().zip(yr) {
            *o = (*o - proj * yv) / n;
        }
    }
    Ok(gx)
}
