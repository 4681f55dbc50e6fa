use crate::error::{shape_err, Result};

/// Validated shapes of one conv2d application.
#[derive(Debug, Clone)]
pub(crate) struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out: [usize; 4],
}

impl Geometry {
    pub(crate) fn new(
        input: &[usize],
        kernel: &[usize],
        bias: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if input.len() != 4 {
            return shape_err("conv2d", format!("input must be NCHW, got {input:?}"));
        }
        if kernel.len() != 4 {
            return shape_err("conv2d", format!("kernel must be OIKhKw, got {kernel:?}"));
        }
        let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
        let (o, i, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if stride == 0 {
            return shape_err("conv2d", "stride must be positive");
        }
        if c != i {
            return shape_err(
                "conv2d",
                format!("input channels (dim 1) = {c} but kernel expects {i} (dim 1)"),
            );
        }
        if bias != [o] {
            return shape_err("conv2d", format!("bias shape {bias:?} but kernel has {o} outputs"));
        }
        if h + 2 * pad < kh {
            return shape_err(
                "conv2d",
                format!("height {h} + 2*padding {pad} smaller than kernel height {kh}"),
            );
        }
        if w + 2 * pad < kw {
            return shape_err(
                "conv2d",
                format!("width {w} + 2*padding {pad} smaller than kernel width {kw}"),
            );
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Ok(Self {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            stride,
            pad,
            out: [n, o, oh, ow],
        })
    }

    pub(crate) fn output_shape(&self) -> &[usize; 4] {
        &self.out
    }

    /// Output positions `[lo, hi)` along one axis whose input coordinate
    /// `pos * stride + k - pad` falls inside `[0, extent)`.
    fn valid_range(&self, k: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let shift = k as isize - self.pad as isize;
        let lo = if shift >= 0 { 0 } else { ((-shift) + s - 1) / s };
        let last = extent as isize - 1 - shift;
        if last < 0 {
            return (0, 0);
        }
        let hi = ((last / s) + 1).min(out_extent as isize);
        (lo as usize, hi.max(lo) as usize)
    }
}

/// Input offset of every `(tap, output column)` pair, `None` for padding.
/// Taps run over `(c, ky, kx)`; columns over `(n, oy, ox)`.
fn im2col_index(g: &Geometry) -> Vec<Option<usize>> {
    let [_, _, oh, ow] = g.out;
    let cols = g.n * oh * ow;
    let mut idx = vec![None; g.c * g.kh * g.kw * cols];
    for c in 0..g.c {
        for ky in 0..g.kh {
            let (y0, y1) = g.valid_range(ky, g.h, oh);
            for kx in 0..g.kw {
                let (x0, x1) = g.valid_range(kx, g.w, ow);
                let tap = (c * g.kh + ky) * g.kw + kx;
                let row = &mut idx[tap * cols..][..cols];
                for n in 0..g.n {
                    let base = (n * g.c + c) * g.h * g.w;
                    for y in y0..y1 {
                        let iy = y * g.stride + ky - g.pad;
                        for x in x0..x1 {
                            row[(n * oh + y) * ow + x] = Some(base + iy * g.w + x * g.stride + kx - g.pad);
                        }
                    }
                }
            }
        }
    }
    idx
}

fn gather_cols(idx: &[Option<usize>], input: &[f64]) -> Vec<f64> {
    idx.iter().map(|i| i.map_or(0.0, |i| input[i])).collect()
}

fn axpy(dst: &mut [f64], a: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn forward(g: &Geometry, input: &[f64], kernel: &[f64], bias: &[f64]) -> Vec<f64> {
    let [_, _, oh, ow] = g.out;
    let plane = oh * ow;
    let cols = g.n * plane;
    let taps = g.c * g.kh * g.kw;
    let patches = gather_cols(&im2col_index(g), input);
    // [O, N*P] product, then scattered into NCHW
    let mut prod = vec![0.0; g.o * cols];
    for o in 0..g.o {
        let dst = &mut prod[o * cols..][..cols];
        for t in 0..taps {
            let wv = kernel[o * taps + t];
            if wv != 0.0 {
                axpy(dst, wv, &patches[t * cols..][..cols]);
            }
        }
    }
    let mut out = vec![0.0; g.n * g.o * plane];
    for n in 0..g.n {
        for o in 0..g.o {
            let src = &prod[o * cols + n * plane..][..plane];
            for (d, v) in out[(n * g.o + o) * plane..][..plane].iter_mut().zip(src) {
                *d = v + bias[o];
            }
        }
    }
    out
}

pub(crate) struct ConvGrads {
    pub input: Vec<f64>,
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

pub(crate) fn backward(
    g: &Geometry,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    want_input: bool,
    want_params: bool,
) -> ConvGrads {
    let [_, _, oh, ow] = g.out;
    let plane = oh * ow;
    let cols = g.n * plane;
    let taps = g.c * g.kh * g.kw;
    let idx = im2col_index(g);

    let mut go = vec![0.0; g.o * cols];
    for n in 0..g.n {
        for o in 0..g.o {
            go[o * cols + n * plane..][..plane].copy_from_slice(&grad_out[(n * g.o + o) * plane..][..plane]);
        }
    }

    let mut gk = vec![0.0; kernel.len()];
    let mut gb = vec![0.0; g.o];
    if want_params {
        let patches = gather_cols(&idx, input);
        for o in 0..g.o {
            let row = &go[o * cols..][..cols];
            gb[o] = row.iter().sum();
            for t in 0..taps {
                gk[o * taps + t] = dot(row, &patches[t * cols..][..cols]);
            }
        }
    }

    let mut gi = vec![0.0; input.len()];
    if want_input {
        let mut gcols = vec![0.0; taps * cols];
        for o in 0..g.o {
            let row = &go[o * cols..][..cols];
            for t in 0..taps {
                let wv = kernel[o * taps + t];
                if wv != 0.0 {
                    axpy(&mut gcols[t * cols..][..cols], wv, row);
                }
            }
        }
        for (i, v) in idx.iter().zip(&gcols) {
            if let Some(i) = i {
                gi[*i] += v;
            }
        }
    }
    ConvGrads {
        input: gi,
        kernel: gk,
        bias: gb,
    }
}
