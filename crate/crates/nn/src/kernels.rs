//! Numeric kernels behind the graph ops. All loops are sequential with a
//! fixed accumulation order; reductions that feed loss values accumulate in
//! f64 regardless of the working precision.

use crate::real::{c, Real};

// ── Convolution ──────────────────────────────────────────────────────────

/// x: [n, cin, l], w: [cout, cin, k], b: [cout], out: [n, cout, lout]
/// lout = (l + 2*pad - k) / stride + 1 (caller guarantees divisibility).
#[allow(clippy::too_many_arguments)]
pub fn conv1d_fwd<T: Real>(
    x: &[T],
    w: &[T],
    b: &[T],
    n: usize,
    cin: usize,
    l: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out: &mut [T],
) {
    let lout = (l + 2 * pad - k) / stride + 1;
    debug_assert_eq!(out.len(), n * cout * lout);
    for ni in 0..n {
        for co in 0..cout {
            let orow = &mut out[(ni * cout + co) * lout..(ni * cout + co + 1) * lout];
            let bias = b[co];
            for v in orow.iter_mut() {
                *v = bias;
            }
            for ci in 0..cin {
                let xrow = &x[(ni * cin + ci) * l..(ni * cin + ci + 1) * l];
                let wrow = &w[(co * cin + ci) * k..(co * cin + ci + 1) * k];
                if stride == 1 {
                    for (ki, &wv) in wrow.iter().enumerate() {
                        // out[j] += wv * x[j + ki - pad] over the valid j range
                        let (j0, j1) = valid_range(ki, pad, l, lout, 1);
                        let xoff = j0 + ki - pad;
                        let orow_s = &mut orow[j0..j1];
                        let xrow_s = &xrow[xoff..xoff + (j1 - j0)];
                        for (o, &xv) in orow_s.iter_mut().zip(xrow_s.iter()) {
                            *o += wv * xv;
                        }
                    }
                } else {
                    for (ki, &wv) in wrow.iter().enumerate() {
                        let (j0, j1) = valid_range(ki, pad, l, lout, stride);
                        for j in j0..j1 {
                            let xi = j * stride + ki - pad;
                            orow[j] += wv * xrow[xi];
                        }
                    }
                }
            }
        }
    }
}

/// Range of output positions j where j*stride + ki - pad lands inside [0, l).
#[inline]
fn valid_range(ki: usize, pad: usize, l: usize, lout: usize, stride: usize) -> (usize, usize) {
    let j0 = if ki >= pad {
        0
    } else {
        (pad - ki + stride - 1) / stride
    };
    // need j*stride + ki - pad <= l-1  =>  j <= (l-1+pad-ki)/stride
    let j1 = if l + pad > ki {
        ((l - 1 + pad - ki) / stride + 1).min(lout)
    } else {
        0
    };
    (j0.min(j1), j1)
}

#[allow(clippy::too_many_arguments)]
pub fn conv1d_bwd_x<T: Real>(
    g: &[T],
    w: &[T],
    n: usize,
    cin: usize,
    l: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    gx: &mut [T],
) {
    let lout = (l + 2 * pad - k) / stride + 1;
    for ni in 0..n {
        for co in 0..cout {
            let grow = &g[(ni * cout + co) * lout..(ni * cout + co + 1) * lout];
            for ci in 0..cin {
                let gxrow = &mut gx[(ni * cin + ci) * l..(ni * cin + ci + 1) * l];
                let wrow = &w[(co * cin + ci) * k..(co * cin + ci + 1) * k];
                for (ki, &wv) in wrow.iter().enumerate() {
                    let (j0, j1) = valid_range(ki, pad, l, lout, stride);
                    if stride == 1 {
                        let xoff = j0 + ki - pad;
                        let gx_s = &mut gxrow[xoff..xoff + (j1 - j0)];
                        let g_s = &grow[j0..j1];
                        for (dx, &gv) in gx_s.iter_mut().zip(g_s.iter()) {
                            *dx += wv * gv;
                        }
                    } else {
                        for j in j0..j1 {
                            gxrow[j * stride + ki - pad] += wv * grow[j];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv1d_bwd_w<T: Real>(
    g: &[T],
    x: &[T],
    n: usize,
    cin: usize,
    l: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    gw: &mut [T],
) {
    let lout = (l + 2 * pad - k) / stride + 1;
    for ni in 0..n {
        for co in 0..cout {
            let grow = &g[(ni * cout + co) * lout..(ni * cout + co + 1) * lout];
            for ci in 0..cin {
                let xrow = &x[(ni * cin + ci) * l..(ni * cin + ci + 1) * l];
                for ki in 0..k {
                    let (j0, j1) = valid_range(ki, pad, l, lout, stride);
                    let mut acc = 0.0f64;
                    if stride == 1 {
                        let xoff = j0 + ki - pad;
                        for (gv, xv) in grow[j0..j1].iter().zip(xrow[xoff..].iter()) {
                            acc += gv.to_f64() * xv.to_f64();
                        }
                    } else {
                        for j in j0..j1 {
                            acc += grow[j].to_f64() * xrow[j * stride + ki - pad].to_f64();
                        }
                    }
                    gw[(co * cin + ci) * k + ki] += c(acc);
                }
            }
        }
    }
}

pub fn conv1d_bwd_b<T: Real>(g: &[T], n: usize, cout: usize, lout: usize, gb: &mut [T]) {
    for co in 0..cout {
        let mut acc = 0.0f64;
        for ni in 0..n {
            for &gv in &g[(ni * cout + co) * lout..(ni * cout + co + 1) * lout] {
                acc += gv.to_f64();
            }
        }
        gb[co] += c(acc);
    }
}

// ── Dense layers ─────────────────────────────────────────────────────────

/// x: [n, din], w: [dout, din], b: [dout], out: [n, dout]
pub fn linear_fwd<T: Real>(x: &[T], w: &[T], b: &[T], n: usize, din: usize, dout: usize, out: &mut [T]) {
    for ni in 0..n {
        let xrow = &x[ni * din..(ni + 1) * din];
        let orow = &mut out[ni * dout..(ni + 1) * dout];
        for (d, o) in orow.iter_mut().enumerate() {
            let wrow = &w[d * din..(d + 1) * din];
            let mut acc = T::ZERO;
            for (&wv, &xv) in wrow.iter().zip(xrow.iter()) {
                acc += wv * xv;
            }
            *o = acc + b[d];
        }
    }
}

pub fn linear_bwd<T: Real>(
    g: &[T],
    x: &[T],
    w: &[T],
    n: usize,
    din: usize,
    dout: usize,
    gx: Option<&mut [T]>,
    gw: Option<&mut [T]>,
    gb: Option<&mut [T]>,
) {
    if let Some(gx) = gx {
        for ni in 0..n {
            let grow = &g[ni * dout..(ni + 1) * dout];
            let gxrow = &mut gx[ni * din..(ni + 1) * din];
            for (d, &gv) in grow.iter().enumerate() {
                let wrow = &w[d * din..(d + 1) * din];
                for (dx, &wv) in gxrow.iter_mut().zip(wrow.iter()) {
                    *dx += gv * wv;
                }
            }
        }
    }
    if let Some(gw) = gw {
        for ni in 0..n {
            let grow = &g[ni * dout..(ni + 1) * dout];
            let xrow = &x[ni * din..(ni + 1) * din];
            for (d, &gv) in grow.iter().enumerate() {
                let gwrow = &mut gw[d * din..(d + 1) * din];
                for (dw, &xv) in gwrow.iter_mut().zip(xrow.iter()) {
                    *dw += gv * xv;
                }
            }
        }
    }
    if let Some(gb) = gb {
        for d in 0..dout {
            let mut acc = 0.0f64;
            for ni in 0..n {
                acc += g[ni * dout + d].to_f64();
            }
            gb[d] += c(acc);
        }
    }
}

// ── Batched matrix products (attention) ──────────────────────────────────

/// a: [n, r, k], b: [n, s, k] -> out[n, r, s] = a · bᵀ per batch item.
pub fn matmul_nt_fwd<T: Real>(a: &[T], b: &[T], n: usize, r: usize, s: usize, k: usize, out: &mut [T]) {
    for ni in 0..n {
        for ri in 0..r {
            let arow = &a[(ni * r + ri) * k..(ni * r + ri + 1) * k];
            let orow = &mut out[(ni * r + ri) * s..(ni * r + ri + 1) * s];
            for (si, o) in orow.iter_mut().enumerate() {
                let brow = &b[(ni * s + si) * k..(ni * s + si + 1) * k];
                let mut acc = T::ZERO;
                for (&av, &bv) in arow.iter().zip(brow.iter()) {
                    acc += av * bv;
                }
                *o = acc;
            }
        }
    }
}

/// a: [n, r, s], b: [n, s, k] -> out[n, r, k] = a · b per batch item.
pub fn matmul_nn_fwd<T: Real>(a: &[T], b: &[T], n: usize, r: usize, s: usize, k: usize, out: &mut [T]) {
    for ni in 0..n {
        for ri in 0..r {
            let arow = &a[(ni * r + ri) * s..(ni * r + ri + 1) * s];
            let orow = &mut out[(ni * r + ri) * k..(ni * r + ri + 1) * k];
            for o in orow.iter_mut() {
                *o = T::ZERO;
            }
            for (si, &av) in arow.iter().enumerate() {
                let brow = &b[(ni * s + si) * k..(ni * s + si + 1) * k];
                for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                    *o += av * bv;
                }
            }
        }
    }
}

// ── Softmax over the last axis ────────────────────────────────────────────

pub fn softmax_last_fwd<T: Real>(x: &[T], rows: usize, t: usize, out: &mut [T]) {
    for ri in 0..rows {
        let xr = &x[ri * t..(ri + 1) * t];
        let or = &mut out[ri * t..(ri + 1) * t];
        let mut mx = xr[0];
        for &v in xr.iter() {
            mx = mx.maxv(v);
        }
        let mut sum = 0.0f64;
        for (o, &v) in or.iter_mut().zip(xr.iter()) {
            let e = (v - mx).exp();
            sum += e.to_f64();
            *o = e;
        }
        let inv: T = c(1.0 / sum);
        for o in or.iter_mut() {
            *o *= inv;
        }
    }
}

/// gx_i = y_i * (g_i - Σ_j g_j y_j) per row.
pub fn softmax_last_bwd<T: Real>(g: &[T], y: &[T], rows: usize, t: usize, gx: &mut [T]) {
    for ri in 0..rows {
        let yr = &y[ri * t..(ri + 1) * t];
        let gr = &g[ri * t..(ri + 1) * t];
        let mut dot = 0.0f64;
        for (&gv, &yv) in gr.iter().zip(yr.iter()) {
            dot += gv.to_f64() * yv.to_f64();
        }
        let dot: T = c(dot);
        let gxr = &mut gx[ri * t..(ri + 1) * t];
        for ((dx, &gv), &yv) in gxr.iter_mut().zip(gr.iter()).zip(yr.iter()) {
            *dx += yv * (gv - dot);
        }
    }
}

// ── Instance normalization ────────────────────────────────────────────────

/// Per (n, c) row of length l: y = (x - mean) / (std + eps), population std.
/// Returns (mean, std) per row for the backward pass.
pub fn instnorm_fwd<T: Real>(
    x: &[T],
    rows: usize,
    l: usize,
    eps: f64,
    out: &mut [T],
    mu: &mut Vec<T>,
    sd: &mut Vec<T>,
) {
    mu.clear();
    sd.clear();
    for ri in 0..rows {
        let xr = &x[ri * l..(ri + 1) * l];
        let mut s = 0.0f64;
        for &v in xr.iter() {
            s += v.to_f64();
        }
        let m = s / l as f64;
        let mut var = 0.0f64;
        for &v in xr.iter() {
            let d = v.to_f64() - m;
            var += d * d;
        }
        let std = (var / l as f64).sqrt();
        let inv: T = c(1.0 / (std + eps));
        let mt: T = c(m);
        let or = &mut out[ri * l..(ri + 1) * l];
        for (o, &v) in or.iter_mut().zip(xr.iter()) {
            *o = (v - mt) * inv;
        }
        mu.push(mt);
        sd.push(c(std));
    }
}

/// dx_k = (g_k - mean(g)) / (std + eps) - y_k * mean(g*y) / std
/// with the second term dropped when std == 0 (y is identically 0 there).
pub fn instnorm_bwd<T: Real>(
    g: &[T],
    y: &[T],
    sd: &[T],
    rows: usize,
    l: usize,
    eps: f64,
    gx: &mut [T],
) {
    for ri in 0..rows {
        let gr = &g[ri * l..(ri + 1) * l];
        let yr = &y[ri * l..(ri + 1) * l];
        let std = sd[ri].to_f64();
        let mut gbar = 0.0f64;
        let mut gy = 0.0f64;
        for (&gv, &yv) in gr.iter().zip(yr.iter()) {
            gbar += gv.to_f64();
            gy += gv.to_f64() * yv.to_f64();
        }
        gbar /= l as f64;
        gy /= l as f64;
        let inv: T = c(1.0 / (std + eps));
        let gbar: T = c(gbar);
        let coef: T = if std > 0.0 { c(gy / std) } else { T::ZERO };
        let gxr = &mut gx[ri * l..(ri + 1) * l];
        for ((dx, &gv), &yv) in gxr.iter_mut().zip(gr.iter()).zip(yr.iter()) {
            *dx += (gv - gbar) * inv - yv * coef;
        }
    }
}

// ── Resampling blocks ─────────────────────────────────────────────────────

pub fn upsample2_fwd<T: Real>(x: &[T], rows: usize, l: usize, out: &mut [T]) {
    for ri in 0..rows {
        let xr = &x[ri * l..(ri + 1) * l];
        let or = &mut out[ri * 2 * l..(ri + 1) * 2 * l];
        for (i, &v) in xr.iter().enumerate() {
            or[2 * i] = v;
            or[2 * i + 1] = v;
        }
    }
}

pub fn upsample2_bwd<T: Real>(g: &[T], rows: usize, l: usize, gx: &mut [T]) {
    for ri in 0..rows {
        let gr = &g[ri * 2 * l..(ri + 1) * 2 * l];
        let gxr = &mut gx[ri * l..(ri + 1) * l];
        for (i, dx) in gxr.iter_mut().enumerate() {
            *dx += gr[2 * i] + gr[2 * i + 1];
        }
    }
}

/// Kernel (0.5, 0.5), stride 2.
pub fn avgpool2_fwd<T: Real>(x: &[T], rows: usize, l: usize, out: &mut [T]) {
    let half: T = c(0.5);
    for ri in 0..rows {
        let xr = &x[ri * l..(ri + 1) * l];
        let or = &mut out[ri * (l / 2)..(ri + 1) * (l / 2)];
        for (i, o) in or.iter_mut().enumerate() {
            *o = (xr[2 * i] + xr[2 * i + 1]) * half;
        }
    }
}

pub fn avgpool2_bwd<T: Real>(g: &[T], rows: usize, l: usize, gx: &mut [T]) {
    let half: T = c(0.5);
    for ri in 0..rows {
        let gr = &g[ri * (l / 2)..(ri + 1) * (l / 2)];
        let gxr = &mut gx[ri * l..(ri + 1) * l];
        for (i, &gv) in gr.iter().enumerate() {
            gxr[2 * i] += gv * half;
            gxr[2 * i + 1] += gv * half;
        }
    }
}

// ── Minibatch standard deviation ──────────────────────────────────────────

/// Appends one channel holding the scalar mean over (c, l) of the per-position
/// std across the batch. Returns (mu[c*l], sd[c*l]) for the backward pass.
pub fn minibatch_stddev_fwd<T: Real>(
    x: &[T],
    n: usize,
    cch: usize,
    l: usize,
    out: &mut [T],
    mu: &mut Vec<T>,
    sd: &mut Vec<T>,
) -> T {
    mu.clear();
    sd.clear();
    let cl = cch * l;
    let mut total = 0.0f64;
    for p in 0..cl {
        let mut s = 0.0f64;
        for ni in 0..n {
            s += x[ni * cl + p].to_f64();
        }
        let m = s / n as f64;
        let mut var = 0.0f64;
        for ni in 0..n {
            let d = x[ni * cl + p].to_f64() - m;
            var += d * d;
        }
        let std = (var / n as f64).sqrt();
        total += std;
        mu.push(c(m));
        sd.push(c(std));
    }
    let v: T = c(total / cl as f64);
    let ocl = (cch + 1) * l;
    for ni in 0..n {
        out[ni * ocl..ni * ocl + cl].copy_from_slice(&x[ni * cl..(ni + 1) * cl]);
        for o in &mut out[ni * ocl + cl..(ni + 1) * ocl] {
            *o = v;
        }
    }
    v
}

pub fn minibatch_stddev_bwd<T: Real>(
    g: &[T],
    x: &[T],
    mu: &[T],
    sd: &[T],
    n: usize,
    cch: usize,
    l: usize,
    gx: &mut [T],
) {
    let cl = cch * l;
    let ocl = (cch + 1) * l;
    // Identity part.
    for ni in 0..n {
        let gr = &g[ni * ocl..ni * ocl + cl];
        let gxr = &mut gx[ni * cl..(ni + 1) * cl];
        for (dx, &gv) in gxr.iter_mut().zip(gr.iter()) {
            *dx += gv;
        }
    }
    // Appended-channel part: dv = Σ over all broadcast copies of its grad;
    // dv/dx[n,p] = (x[n,p] - mu[p]) / (N * std[p] * C * L), 0 where std = 0.
    let mut dv = 0.0f64;
    for ni in 0..n {
        for &gv in &g[ni * ocl + cl..(ni + 1) * ocl] {
            dv += gv.to_f64();
        }
    }
    if dv != 0.0 {
        let scale = dv / (n as f64 * cl as f64);
        for p in 0..cl {
            let std = sd[p].to_f64();
            if std > 0.0 {
                let m = mu[p].to_f64();
                for ni in 0..n {
                    let d = (x[ni * cl + p].to_f64() - m) / std * scale;
                    gx[ni * cl + p] += c(d);
                }
            }
        }
    }
}

// ── Cosine similarity over row pairs ──────────────────────────────────────

/// a, b: [n, d]; cos[n], with zero-norm rows defined as similarity 0.
/// Returns (na, nb) row norms for the backward pass.
pub fn cosine_rows_fwd<T: Real>(
    a: &[T],
    b: &[T],
    n: usize,
    d: usize,
    out: &mut [T],
    na: &mut Vec<T>,
    nb: &mut Vec<T>,
) {
    na.clear();
    nb.clear();
    for ni in 0..n {
        let ar = &a[ni * d..(ni + 1) * d];
        let br = &b[ni * d..(ni + 1) * d];
        let mut dot = 0.0f64;
        let mut qa = 0.0f64;
        let mut qb = 0.0f64;
        for (&av, &bv) in ar.iter().zip(br.iter()) {
            dot += av.to_f64() * bv.to_f64();
            qa += av.to_f64() * av.to_f64();
            qb += bv.to_f64() * bv.to_f64();
        }
        let (qa, qb) = (qa.sqrt(), qb.sqrt());
        out[ni] = if qa > 0.0 && qb > 0.0 {
            c(dot / (qa * qb))
        } else {
            T::ZERO
        };
        na.push(c(qa));
        nb.push(c(qb));
    }
}

/// d cos / d a = b/(na*nb) - cos * a / na²  (and symmetrically for b);
/// zero where either norm vanishes (subgradient choice at the non-smooth point).
#[allow(clippy::too_many_arguments)]
pub fn cosine_rows_bwd<T: Real>(
    g: &[T],
    a: &[T],
    b: &[T],
    cosv: &[T],
    na: &[T],
    nb: &[T],
    n: usize,
    d: usize,
    ga: &mut [T],
    gb: &mut [T],
) {
    for ni in 0..n {
        let (qa, qb) = (na[ni].to_f64(), nb[ni].to_f64());
        if qa <= 0.0 || qb <= 0.0 {
            continue;
        }
        let gv = g[ni].to_f64();
        if gv == 0.0 {
            continue;
        }
        let cv = cosv[ni].to_f64();
        let ar = &a[ni * d..(ni + 1) * d];
        let br = &b[ni * d..(ni + 1) * d];
        let gar = &mut ga[ni * d..(ni + 1) * d];
        let gbr = &mut gb[ni * d..(ni + 1) * d];
        let inv_ab = 1.0 / (qa * qb);
        let ca = cv / (qa * qa);
        let cb = cv / (qb * qb);
        for idx in 0..d {
            let av = ar[idx].to_f64();
            let bv = br[idx].to_f64();
            gar[idx] += c(gv * (bv * inv_ab - av * ca));
            gbr[idx] += c(gv * (av * inv_ab - bv * cb));
        }
    }
}

// ── Quantization ──────────────────────────────────────────────────────────

/// Per row of e (length le), pick the codebook row minimizing squared
/// Euclidean distance; ties resolve to the lowest index.
pub fn nearest_codebook_rows<T: Real>(
    e: &[T],
    cb: &[T],
    rows: usize,
    le: usize,
    kk: usize,
    out: &mut [T],
    indices: &mut Vec<usize>,
) {
    indices.clear();
    for ri in 0..rows {
        let er = &e[ri * le..(ri + 1) * le];
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for ki in 0..kk {
            let vr = &cb[ki * le..(ki + 1) * le];
            let mut dist = 0.0f64;
            for (&ev, &vv) in er.iter().zip(vr.iter()) {
                let d = ev.to_f64() - vv.to_f64();
                dist += d * d;
            }
            if dist < best_d {
                best_d = dist;
                best = ki;
            }
        }
        out[ri * le..(ri + 1) * le].copy_from_slice(&cb[best * le..(best + 1) * le]);
        indices.push(best);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_kernel() {
        // k=1 kernel with weight 1 reproduces the input.
        let x = vec![1.0f64, 2.0, 3.0, 4.0];
        let w = vec![1.0f64];
        let b = vec![0.0f64];
        let mut out = vec![0.0f64; 4];
        conv1d_fwd(&x, &w, &b, 1, 1, 4, 1, 1, 1, 0, &mut out);
        assert_eq!(out, x);
    }

    #[test]
    fn conv_known_values() {
        // x = [1,2,3], w = [1,0,-1], pad 1: out[j] = x[j-1] - x[j+1] (zeros outside)
        let x = vec![1.0f64, 2.0, 3.0];
        let w = vec![1.0f64, 0.0, -1.0];
        let b = vec![0.5f64];
        let mut out = vec![0.0f64; 3];
        conv1d_fwd(&x, &w, &b, 1, 1, 3, 1, 3, 1, 1, &mut out);
        assert_eq!(out, vec![0.5 - 2.0, 0.5 + 1.0 - 3.0, 0.5 + 2.0]);
    }

    #[test]
    fn conv_stride2_shapes() {
        let x = vec![0.0f64; 2 * 3 * 8];
        let w = vec![0.1f64; 5 * 3 * 3];
        let b = vec![0.0f64; 5];
        let mut out = vec![0.0f64; 2 * 5 * 4];
        conv1d_fwd(&x, &w, &b, 2, 3, 8, 5, 3, 2, 1, &mut out);
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = vec![0.1f64, -2.0, 3.0, 0.0, 0.0, 0.0];
        let mut y = vec![0.0f64; 6];
        softmax_last_fwd(&x, 2, 3, &mut y);
        for r in 0..2 {
            let s: f64 = y[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn instnorm_stats() {
        let x = vec![1.0f64, 2.0, 3.0, 4.0];
        let mut y = vec![0.0f64; 4];
        let (mut mu, mut sd) = (Vec::new(), Vec::new());
        instnorm_fwd(&x, 1, 4, 0.0, &mut y, &mut mu, &mut sd);
        let m: f64 = y.iter().sum::<f64>() / 4.0;
        let v: f64 = y.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 4.0;
        assert!(m.abs() < 1e-12);
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn minibatch_stddev_hand_case() {
        // N=2, C=1, L=1, values {0, 2}: population std = 1.
        let x = vec![0.0f64, 2.0];
        let mut out = vec![0.0f64; 4];
        let (mut mu, mut sd) = (Vec::new(), Vec::new());
        let v = minibatch_stddev_fwd(&x, 2, 1, 1, &mut out, &mut mu, &mut sd);
        assert_eq!(v, 1.0);
        assert_eq!(out, vec![0.0, 1.0, 2.0, 1.0]);
    }

    #[test]
    fn nearest_rows_tie_goes_low() {
        let e = vec![0.5f64];
        let cb = vec![0.0f64, 1.0]; // both at distance 0.25
        let mut out = vec![0.0f64; 1];
        let mut idx = Vec::new();
        nearest_codebook_rows(&e, &cb, 1, 1, 2, &mut out, &mut idx);
        assert_eq!(idx, vec![0]);
        assert_eq!(out, vec![0.0]);
    }

    #[test]
    fn cosine_zero_norm_is_zero() {
        let a = vec![0.0f64, 0.0];
        let b = vec![1.0f64, 1.0];
        let mut out = vec![9.0f64; 1];
        let (mut na, mut nb) = (Vec::new(), Vec::new());
        cosine_rows_fwd(&a, &b, 1, 2, &mut out, &mut na, &mut nb);
        assert_eq!(out[0], 0.0);
    }
}
