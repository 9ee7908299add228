//! Slice-level numeric kernels. Fixed loop orders keep results bit-stable.

/// out[p×r] += a[p×q] · b[q×r]
pub fn matmul_nn(a: &[f32], b: &[f32], out: &mut [f32], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let orow = &mut out[i * r..(i + 1) * r];
        let arow = &a[i * q..(i + 1) * q];
        for (k, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b[k * r..(k + 1) * r];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

/// out[p×r] += a[p×q] · b[r×q]ᵀ
pub fn matmul_nt(a: &[f32], b: &[f32], out: &mut [f32], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let arow = &a[i * q..(i + 1) * q];
        for j in 0..r {
            out[i * r + j] += dot(arow, &b[j * q..(j + 1) * q]);
        }
    }
}

/// out[p×r] += a[q×p]ᵀ · b[q×r]
pub fn matmul_tn(a: &[f32], b: &[f32], out: &mut [f32], p: usize, q: usize, r: usize) {
    for k in 0..q {
        let arow = &a[k * p..(k + 1) * p];
        let brow = &b[k * r..(k + 1) * r];
        for (i, &aki) in arow.iter().enumerate() {
            if aki == 0.0 {
                continue;
            }
            let orow = &mut out[i * r..(i + 1) * r];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aki * bv;
            }
        }
    }
}

/// Eight-lane dot product; lane order is fixed so the result is deterministic.
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let xa = &a[c * 8..c * 8 + 8];
        let xb = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for i in chunks * 8..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn transpose(a: &[f32], out: &mut [f32], rows: usize, cols: usize) {
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
}

/// Row-wise softmax over contiguous rows of width `w`, with max subtraction.
pub fn softmax_rows(x: &[f32], out: &mut [f32], w: usize) {
    for (xr, orow) in x.chunks_exact(w).zip(out.chunks_exact_mut(w)) {
        let m = xr.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        let mut s = 0.0f32;
        for (o, &v) in orow.iter_mut().zip(xr) {
            *o = (v - m).exp();
            s += *o;
        }
        let inv = 1.0 / s;
        for o in orow.iter_mut() {
            *o *= inv;
        }
    }
}
