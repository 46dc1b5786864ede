//! Dense matrix kernels. Rows are distributed across threads for large
//! products; every output element is reduced in a fixed order, so results do
//! not depend on the thread count.

use rayon::prelude::*;

use crate::Real;

const PARALLEL_WORK: usize = 1 << 16;

/// `a[m,k] * b[k,p]`.
pub fn matmul(a: &[Real], b: &[Real], m: usize, k: usize, p: usize) -> Vec<Real> {
    let mut out = vec![0.0; m * p];
    let row = |(i, out_row): (usize, &mut [Real])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[kk * p..(kk + 1) * p];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };
    if p == 0 {
        return out;
    }
    if m * k * p >= PARALLEL_WORK {
        out.par_chunks_mut(p).enumerate().for_each(row);
    } else {
        out.chunks_mut(p).enumerate().for_each(row);
    }
    out
}

/// `g[m,p] * b[k,p]^T`, the gradient with respect to the left operand.
pub fn matmul_grad_lhs(g: &[Real], b: &[Real], m: usize, k: usize, p: usize) -> Vec<Real> {
    let mut out = vec![0.0; m * k];
    let row = |(i, out_row): (usize, &mut [Real])| {
        let g_row = &g[i * p..(i + 1) * p];
        for (kk, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[kk * p..(kk + 1) * p];
            *o = g_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    };
    if k == 0 {
        return out;
    }
    if m * k * p >= PARALLEL_WORK {
        out.par_chunks_mut(k).enumerate().for_each(row);
    } else {
        out.chunks_mut(k).enumerate().for_each(row);
    }
    out
}

/// `a[m,k]^T * g[m,p]`, the gradient with respect to the right operand.
pub fn matmul_grad_rhs(a: &[Real], g: &[Real], m: usize, k: usize, p: usize) -> Vec<Real> {
    let mut out = vec![0.0; k * p];
    let row = |(kk, out_row): (usize, &mut [Real])| {
        for i in 0..m {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let g_row = &g[i * p..(i + 1) * p];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += av * gv;
            }
        }
    };
    if p == 0 {
        return out;
    }
    if m * k * p >= PARALLEL_WORK {
        out.par_chunks_mut(p).enumerate().for_each(row);
    } else {
        out.chunks_mut(p).enumerate().for_each(row);
    }
    out
}
