//! Raw loops shared by forward and backward rules. All buffers are row-major.

/// `c[m,n] += a[m,k] · b[k,n]`
pub(crate) fn mm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`
pub(crate) fn mm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            c[i * n + j] += acc;
        }
    }
}

/// `c[m,n] += a[k,m]ᵀ · b[k,n]`
pub(crate) fn mm_tn(a: &[f64], b: &[f64], c: &mut [f64], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &api) in arow.iter().enumerate() {
            if api == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += api * bv;
            }
        }
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Output shape and data of `x` with axes reordered so that output axis `i`
/// is input axis `perm[i]`.
pub(crate) fn permute(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let rank = shape.len();
    if rank == 0 {
        return (out_shape, data.to_vec());
    }
    // Iterate the output in order; the innermost axis is a strided run.
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let outer: usize = out_shape[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    for _ in 0..outer {
        let base: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        for j in 0..inner {
            out.push(data[base + j * inner_stride]);
        }
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Extents of a `[.., H, W, C]` layout as (batch, h, w, c).
pub(crate) fn hwc(shape: &[usize]) -> (usize, usize, usize, usize) {
    let r = shape.len();
    let b = shape[..r - 3].iter().product();
    (b, shape[r - 3], shape[r - 2], shape[r - 1])
}

/// Gather k×k zero-padded neighborhoods: `[.., H, W, C] -> [.., H, W, k², C]`.
pub(crate) fn unfold(x: &[f64], b: usize, h: usize, w: usize, c: usize, k: usize) -> Vec<f64> {
    let r = (k / 2) as isize;
    let kk = k * k;
    let mut out = vec![0.0; b * h * w * kk * c];
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let obase = (((bi * h + i) * w + j) * kk) * c;
                for dy in -r..=r {
                    let y = i as isize + dy;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for dx in -r..=r {
                        let xx = j as isize + dx;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        let slot = ((dy + r) as usize) * k + (dx + r) as usize;
                        let src = ((bi * h + y as usize) * w + xx as usize) * c;
                        let dst = obase + slot * c;
                        out[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`unfold`]: scatter-add window gradients back onto pixels.
pub(crate) fn fold(g: &[f64], b: usize, h: usize, w: usize, c: usize, k: usize) -> Vec<f64> {
    let r = (k / 2) as isize;
    let kk = k * k;
    let mut out = vec![0.0; b * h * w * c];
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let gbase = (((bi * h + i) * w + j) * kk) * c;
                for dy in -r..=r {
                    let y = i as isize + dy;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for dx in -r..=r {
                        let xx = j as isize + dx;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        let slot = ((dy + r) as usize) * k + (dx + r) as usize;
                        let dst = ((bi * h + y as usize) * w + xx as usize) * c;
                        let src = gbase + slot * c;
                        for ch in 0..c {
                            out[dst + ch] += g[src + ch];
                        }
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_matches_index_formula() {
        let shape = [2, 3, 4];
        let data: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let (s, out) = permute(&data, &shape, &[2, 0, 1]);
        assert_eq!(s, vec![4, 2, 3]);
        for a in 0..4 {
            for b in 0..2 {
                for c in 0..3 {
                    assert_eq!(out[(a * 2 + b) * 3 + c], data[(b * 3 + c) * 4 + a]);
                }
            }
        }
        let (s2, back) = permute(&out, &s, &inverse_perm(&[2, 0, 1]));
        assert_eq!(s2, shape.to_vec());
        assert_eq!(back, data);
    }

    #[test]
    fn small_matmuls() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        mm_nn(&a, &b, &mut c, 2, 2, 2);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        let mut c = [0.0; 4];
        mm_nt(&a, &b, &mut c, 2, 2, 2);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
        let mut c = [0.0; 4];
        mm_tn(&a, &b, &mut c, 2, 2, 2);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
    }
}
