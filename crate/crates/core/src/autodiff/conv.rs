use super::gemm::gemm;
use super::ops::map4;
use super::tape::Tape;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Static geometry of one convolution call.
#[derive(Clone, Copy, Debug)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_len(&self) -> usize {
        self.ho * self.wo
    }

    /// 1×1, stride 1, no padding: the input plane is already the patch matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let Geometry { cin, h, w, k, stride, pad, ho, wo } = *self;
        let n = ho * wo;
        for c in 0..cin {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &mut cols[((c * k + ki) * k + kj) * n..][..n];
                    for oy in 0..ho {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        let dst = &mut row[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            *d = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], gx: &mut [f64]) {
        let Geometry { cin, h, w, k, stride, pad, ho, wo } = *self;
        let n = ho * wo;
        for c in 0..cin {
            let plane = &mut gx[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &cols[((c * k + ki) * k + kj) * n..][..n];
                    for oy in 0..ho {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                plane[iy as usize * w + ix as usize] += row[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn out_extent(len: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = len + 2 * pad;
    if padded < k {
        return Err(Error::Config(format!(
            "conv2d: kernel {k} larger than padded extent {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

impl Tape {
    /// 2-D cross-correlation with bias: `x: B×Cin×H×W`, `w: Cout×Cin×k×k`, `b: Cout`.
    ///
    /// Output extent is `⌊(H + 2·pad − k) / stride⌋ + 1`.
    pub fn conv2d(
        &self,
        x: &Tensor,
        weight: &Tensor,
        bias: &Tensor,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor> {
        let [batch, cin, h, w] = map4("conv2d", x)?;
        let [cout, wcin, k, k2] = map4("conv2d weight", weight)?;
        if wcin != cin || bias.numel() != cout {
            return Err(Error::dim("conv2d", x.shape(), weight.shape()));
        }
        if k != k2 || !(k == 1 || k == 3) {
            return Err(Error::Config(format!("conv2d supports 1×1 and 3×3 kernels, got {k}×{k2}")));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        let geo = Geometry {
            cin,
            h,
            w,
            k,
            stride,
            pad,
            ho: out_extent(h, k, stride, pad)?,
            wo: out_extent(w, k, stride, pad)?,
        };
        let (plen, olen) = (geo.patch_len(), geo.out_len());
        let in_len = cin * h * w;

        let mut out = vec![0.0; batch * cout * olen];
        let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![0.0; plen * olen] };
        for bi in 0..batch {
            let xb = &x.data()[bi * in_len..(bi + 1) * in_len];
            let patches: &[f64] = if geo.is_pointwise() {
                xb
            } else {
                geo.im2col(xb, &mut cols);
                &cols
            };
            let ob = &mut out[bi * cout * olen..(bi + 1) * cout * olen];
            for (co, plane) in ob.chunks_exact_mut(olen).enumerate() {
                plane.fill(bias.data()[co]);
            }
            gemm(cout, plen, olen, weight.data(), false, patches, false, ob, 1.0);
        }

        let (sx, sw) = (x.shared(), weight.shared());
        self.record(
            "conv2d",
            &[x, weight, bias],
            vec![batch, cout, geo.ho, geo.wo],
            out,
            move |g, needs| {
                let mut gx = needs[0].then(|| vec![0.0; batch * in_len]);
                let mut gw = needs[1].then(|| vec![0.0; cout * plen]);
                let mut cols = vec![0.0; plen * olen];
                let mut gcols = vec![0.0; plen * olen];
                for bi in 0..batch {
                    let gb = &g[bi * cout * olen..(bi + 1) * cout * olen];
                    let xb = &sx[bi * in_len..(bi + 1) * in_len];
                    if let Some(gw) = gw.as_mut() {
                        let patches: &[f64] = if geo.is_pointwise() {
                            xb
                        } else {
                            geo.im2col(xb, &mut cols);
                            &cols
                        };
                        gemm(cout, olen, plen, gb, false, patches, true, gw, 1.0);
                    }
                    if let Some(gx) = gx.as_mut() {
                        let dst = &mut gx[bi * in_len..(bi + 1) * in_len];
                        if geo.is_pointwise() {
                            gemm(plen, cout, olen, &sw, true, gb, false, dst, 0.0);
                        } else {
                            gemm(plen, cout, olen, &sw, true, gb, false, &mut gcols, 0.0);
                            geo.col2im(&gcols, dst);
                        }
                    }
                }
                let gbias = needs[2].then(|| {
                    let mut acc = vec![0.0; cout];
                    for bi in 0..batch {
                        for (co, a) in acc.iter_mut().enumerate() {
                            *a += g[(bi * cout + co) * olen..][..olen].iter().sum::<f64>();
                        }
                    }
                    acc
                });
                vec![gx, gw, gbias]
            },
        )
    }
}
