//! Raw slice kernels behind the graph ops. Layouts are row-major `(C, H, W)`.

/// `c = a · b + beta · c` for row-major `a: m×k`, `b: k×n`, `c: m×n`,
/// with explicit strides so transposed operands cost nothing.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = (i as isize * rsc + j as isize * csc) as usize;
                c[idx] *= beta;
            }
        }
        return;
    }
    let span = |r: usize, c: usize, rs: isize, cs: isize| {
        ((r as isize - 1) * rs + (c as isize - 1) * cs) as usize + 1
    };
    assert!(a.len() >= span(m, k, rsa, csa));
    assert!(b.len() >= span(k, n, rsb, csb));
    assert!(c.len() >= span(m, n, rsc, csc));
    // SAFETY: the asserts above bound every strided access within the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0 && self.groups == 1
    }

    fn is_depthwise(&self) -> bool {
        self.groups == self.cin && self.cin == self.cout && self.groups > 1
    }
}

// Bounded im2col buffer (values, not bytes).
const COLS_BUDGET: usize = 1 << 22;

fn rows_per_chunk(g: &ConvGeom) -> usize {
    let k = g.cin_g() * g.kh * g.kw;
    (COLS_BUDGET / (k * g.ow).max(1)).clamp(1, g.oh)
}

/// Unfolds output rows `[r0, r1)` of group `grp` into a `(cin_g·kh·kw) × ((r1−r0)·ow)` matrix.
fn im2col(x: &[f64], g: &ConvGeom, grp: usize, r0: usize, r1: usize, cols: &mut [f64]) {
    let n = (r1 - r0) * g.ow;
    let cin_g = g.cin_g();
    for ci in 0..cin_g {
        let plane = &x[(grp * cin_g + ci) * g.h * g.w..][..g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                let mut idx = 0;
                for oy in r0..r1 {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[idx] = if iy >= 0 && iy < g.h as isize && ix >= 0 && ix < g.w as isize
                        {
                            plane[iy as usize * g.w + ix as usize]
                        } else {
                            0.0
                        };
                        idx += 1;
                    }
                }
            }
        }
    }
}

fn col2im(dcols: &[f64], g: &ConvGeom, grp: usize, r0: usize, r1: usize, dx: &mut [f64]) {
    let n = (r1 - r0) * g.ow;
    let cin_g = g.cin_g();
    for ci in 0..cin_g {
        let plane = &mut dx[(grp * cin_g + ci) * g.h * g.w..][..g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &dcols[row * n..(row + 1) * n];
                let mut idx = 0;
                for oy in r0..r1 {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if iy >= 0 && iy < g.h as isize && ix >= 0 && ix < g.w as isize {
                            plane[iy as usize * g.w + ix as usize] += src[idx];
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let npix = g.oh * g.ow;
    let mut y = vec![0.0; g.cout * npix];
    if let Some(b) = bias {
        for (co, &bv) in b.iter().enumerate() {
            y[co * npix..(co + 1) * npix].fill(bv);
        }
    }
    if g.is_pointwise() {
        gemm(
            g.cout, g.cin, npix, w, g.cin as isize, 1, x, npix as isize, 1, 1.0, &mut y,
            npix as isize, 1,
        );
        return y;
    }
    if g.is_depthwise() {
        depthwise_forward(x, w, g, &mut y);
        return y;
    }
    let k = g.cin_g() * g.kh * g.kw;
    let cout_g = g.cout_g();
    let chunk = rows_per_chunk(g);
    let mut cols = vec![0.0; k * chunk * g.ow];
    for grp in 0..g.groups {
        let wg = &w[grp * cout_g * k..(grp + 1) * cout_g * k];
        let mut r0 = 0;
        while r0 < g.oh {
            let r1 = (r0 + chunk).min(g.oh);
            let n = (r1 - r0) * g.ow;
            im2col(x, g, grp, r0, r1, &mut cols);
            let yg = &mut y[grp * cout_g * npix + r0 * g.ow..];
            gemm(
                cout_g, k, n, wg, k as isize, 1, &cols, n as isize, 1, 1.0, yg, npix as isize, 1,
            );
            r0 = r1;
        }
    }
    y
}

/// Returns `(dx, dw, db)`; `db` is only meaningful when the op had a bias.
pub(crate) fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    need_dx: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let npix = g.oh * g.ow;
    let db: Vec<f64> = (0..g.cout)
        .map(|co| dy[co * npix..(co + 1) * npix].iter().sum())
        .collect();
    let mut dx = vec![0.0; if need_dx { x.len() } else { 0 }];
    let mut dw = vec![0.0; w.len()];
    if g.is_pointwise() {
        // dw = dy · xᵀ ; dx = wᵀ · dy
        gemm(
            g.cout, npix, g.cin, dy, npix as isize, 1, x, 1, npix as isize, 0.0, &mut dw,
            g.cin as isize, 1,
        );
        if need_dx {
            gemm(
                g.cin, g.cout, npix, w, 1, g.cin as isize, dy, npix as isize, 1, 0.0, &mut dx,
                npix as isize, 1,
            );
        }
        return (dx, dw, db);
    }
    if g.is_depthwise() {
        depthwise_backward(x, w, dy, g, need_dx.then_some(&mut dx[..]), &mut dw);
        return (dx, dw, db);
    }
    let k = g.cin_g() * g.kh * g.kw;
    let cout_g = g.cout_g();
    let chunk = rows_per_chunk(g);
    let mut cols = vec![0.0; k * chunk * g.ow];
    let mut dcols = vec![0.0; if need_dx { k * chunk * g.ow } else { 0 }];
    for grp in 0..g.groups {
        let wg = &w[grp * cout_g * k..(grp + 1) * cout_g * k];
        let mut r0 = 0;
        while r0 < g.oh {
            let r1 = (r0 + chunk).min(g.oh);
            let n = (r1 - r0) * g.ow;
            im2col(x, g, grp, r0, r1, &mut cols);
            let dyg = &dy[grp * cout_g * npix + r0 * g.ow..];
            let dwg = &mut dw[grp * cout_g * k..(grp + 1) * cout_g * k];
            gemm(
                cout_g, n, k, dyg, npix as isize, 1, &cols, 1, n as isize, 1.0, dwg, k as isize, 1,
            );
            if need_dx {
                gemm(
                    k, cout_g, n, wg, 1, k as isize, dyg, npix as isize, 1, 0.0, &mut dcols,
                    n as isize, 1,
                );
                col2im(&dcols, g, grp, r0, r1, &mut dx);
            }
            r0 = r1;
        }
    }
    (dx, dw, db)
}

fn depthwise_forward(x: &[f64], w: &[f64], g: &ConvGeom, y: &mut [f64]) {
    let (h, wd, oh, ow) = (g.h as isize, g.w as isize, g.oh, g.ow);
    let ksz = g.kh * g.kw;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        let kern = &w[c * ksz..(c + 1) * ksz];
        let out = &mut y[c * oh * ow..(c + 1) * oh * ow];
        for oy in 0..oh {
            let iy0 = (oy * g.stride) as isize - g.pad as isize;
            for ox in 0..ow {
                let ix0 = (ox * g.stride) as isize - g.pad as isize;
                let mut acc = 0.0;
                for ky in 0..g.kh {
                    let iy = iy0 + ky as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let row = &plane[(iy * wd) as usize..((iy + 1) * wd) as usize];
                    let krow = &kern[ky * g.kw..(ky + 1) * g.kw];
                    for (kx, &kv) in krow.iter().enumerate() {
                        let ix = ix0 + kx as isize;
                        if ix >= 0 && ix < wd {
                            acc += kv * row[ix as usize];
                        }
                    }
                }
                out[oy * ow + ox] += acc;
            }
        }
    }
}

fn depthwise_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    mut dx: Option<&mut [f64]>,
    dw: &mut [f64],
) {
    let (h, wd, oh, ow) = (g.h as isize, g.w as isize, g.oh, g.ow);
    let ksz = g.kh * g.kw;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        let kern = &w[c * ksz..(c + 1) * ksz];
        let dkern = &mut dw[c * ksz..(c + 1) * ksz];
        let dout = &dy[c * oh * ow..(c + 1) * oh * ow];
        let mut dplane = dx
            .as_deref_mut()
            .map(|d| &mut d[c * g.h * g.w..(c + 1) * g.h * g.w]);
        for oy in 0..oh {
            let iy0 = (oy * g.stride) as isize - g.pad as isize;
            for ox in 0..ow {
                let gv = dout[oy * ow + ox];
                if gv == 0.0 {
                    continue;
                }
                let ix0 = (ox * g.stride) as isize - g.pad as isize;
                for ky in 0..g.kh {
                    let iy = iy0 + ky as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = ix0 + kx as isize;
                        if ix < 0 || ix >= wd {
                            continue;
                        }
                        let xi = (iy * wd + ix) as usize;
                        dkern[ky * g.kw + kx] += gv * plane[xi];
                        if let Some(d) = dplane.as_deref_mut() {
                            d[xi] += gv * kern[ky * g.kw + kx];
                        }
                    }
                }
            }
        }
    }
}

/// Adaptive bin `[start, end)` for output index `i` of `out` bins over `len` inputs.
/// Bins partition the input exactly; sizes differ by at most one.
pub(crate) fn adaptive_bin(i: usize, out: usize, len: usize) -> (usize, usize) {
    (i * len / out, (i + 1) * len / out)
}

pub(crate) fn avg_pool_forward(x: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut y = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1) = adaptive_bin(oy, oh, h);
            for ox in 0..ow {
                let (x0, x1) = adaptive_bin(ox, ow, w);
                let mut s = 0.0;
                for iy in y0..y1 {
                    s += plane[iy * w + x0..iy * w + x1].iter().sum::<f64>();
                }
                y[(ch * oh + oy) * ow + ox] = s / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
    y
}

pub(crate) fn avg_pool_backward(dy: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        for oy in 0..oh {
            let (y0, y1) = adaptive_bin(oy, oh, h);
            for ox in 0..ow {
                let (x0, x1) = adaptive_bin(ox, ow, w);
                let gv = dy[(ch * oh + oy) * ow + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                for iy in y0..y1 {
                    for v in &mut dx[ch * h * w + iy * w + x0..ch * h * w + iy * w + x1] {
                        *v += gv;
                    }
                }
            }
        }
    }
    dx
}

/// Bilinear tap for one axis under border clamping: `(i0, i1, frac, inside)`.
/// `inside` is false when the coordinate was clamped (zero coordinate gradient).
#[inline]
pub(crate) fn bilinear_tap(coord: f64, len: usize) -> (usize, usize, f64, bool) {
    if len == 1 {
        return (0, 0, 0.0, false);
    }
    let max = (len - 1) as f64;
    let inside = (0.0..=max).contains(&coord);
    let c = coord.clamp(0.0, max);
    let i0 = (c.floor() as usize).min(len - 2);
    (i0, i0 + 1, c - i0 as f64, inside)
}

pub(crate) fn grid_sample_forward(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    coords: &[f64],
    npix: usize,
) -> Vec<f64> {
    let mut y = vec![0.0; c * npix];
    for p in 0..npix {
        let (x0, x1, fx, _) = bilinear_tap(coords[p], w);
        let (y0, y1, fy, _) = bilinear_tap(coords[npix + p], h);
        let w00 = (1.0 - fx) * (1.0 - fy);
        let w01 = fx * (1.0 - fy);
        let w10 = (1.0 - fx) * fy;
        let w11 = fx * fy;
        for ch in 0..c {
            let pl = &x[ch * h * w..];
            y[ch * npix + p] = w00 * pl[y0 * w + x0]
                + w01 * pl[y0 * w + x1]
                + w10 * pl[y1 * w + x0]
                + w11 * pl[y1 * w + x1];
        }
    }
    y
}

/// Returns `(dx, dcoords)`.
pub(crate) fn grid_sample_backward(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    coords: &[f64],
    npix: usize,
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; x.len()];
    let mut dc = vec![0.0; 2 * npix];
    for p in 0..npix {
        let (x0, x1, fx, in_x) = bilinear_tap(coords[p], w);
        let (y0, y1, fy, in_y) = bilinear_tap(coords[npix + p], h);
        let mut gx = 0.0;
        let mut gy = 0.0;
        for ch in 0..c {
            let g = dy[ch * npix + p];
            let base = ch * h * w;
            let (v00, v01, v10, v11) = (
                x[base + y0 * w + x0],
                x[base + y0 * w + x1],
                x[base + y1 * w + x0],
                x[base + y1 * w + x1],
            );
            dx[base + y0 * w + x0] += g * (1.0 - fx) * (1.0 - fy);
            dx[base + y0 * w + x1] += g * fx * (1.0 - fy);
            dx[base + y1 * w + x0] += g * (1.0 - fx) * fy;
            dx[base + y1 * w + x1] += g * fx * fy;
            gx += g * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
            gy += g * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
        }
        if in_x {
            dc[p] = gx;
        }
        if in_y {
            dc[npix + p] = gy;
        }
    }
    (dx, dc)
}
