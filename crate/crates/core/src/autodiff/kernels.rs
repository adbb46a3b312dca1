//! Forward and backward kernels for each primitive.
//!
//! All loops run in a fixed order so results are bit-reproducible.

use alloc::vec;
use alloc::vec::Vec;

use super::{AutodiffError, OpTag, Primitive};
use crate::tensor::Tensor;

fn mismatch(op: OpTag, inputs: &[&Tensor]) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        shapes: inputs.iter().map(|t| t.shape().to_vec()).collect(),
    }
}

fn expect_arity(op: OpTag, inputs: &[&Tensor], n: usize) -> Result<(), AutodiffError> {
    if inputs.len() == n {
        Ok(())
    } else {
        Err(AutodiffError::Arity {
            op,
            expected: n,
            actual: inputs.len(),
        })
    }
}

fn conv_out(size: usize, stride: usize) -> usize {
    (size - 1) / stride + 1
}

pub(super) fn forward(p: &Primitive, inputs: &[&Tensor]) -> Result<Tensor, AutodiffError> {
    let op = p.tag();
    let arity = match p {
        Primitive::MatMul
        | Primitive::Conv2d { .. }
        | Primitive::BiasAdd
        | Primitive::Add
        | Primitive::Mul
        | Primitive::Mse => 2,
        _ => 1,
    };
    expect_arity(op, inputs, arity)?;
    let out = match p {
        Primitive::MatMul => matmul(inputs[0], inputs[1])?,
        Primitive::Conv2d { stride } => conv2d(inputs[0], inputs[1], *stride)?,
        Primitive::Upsample2x => upsample2x(inputs[0])?,
        Primitive::BiasAdd => bias_add(inputs[0], inputs[1])?,
        Primitive::Add | Primitive::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(mismatch(op, inputs));
            }
            let data = if matches!(p, Primitive::Add) {
                a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()
            } else {
                a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect()
            };
            Tensor::from_vec(a.shape().to_vec(), data).expect("same shape")
        }
        Primitive::Scale(s) => inputs[0].map(|v| v * s),
        Primitive::Relu => inputs[0].map(|v| if v > 0.0 { v } else { 0.0 }),
        Primitive::Sigmoid => inputs[0].map(sigmoid),
        Primitive::Tanh => inputs[0].map(libm::tanh),
        Primitive::Softmax => softmax_last_axis(inputs[0])?,
        Primitive::Mse => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(mismatch(op, inputs));
            }
            let n = a.len() as f64;
            let sum: f64 = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            Tensor::scalar(sum / n)
        }
        Primitive::SoftmaxCrossEntropy { labels } => softmax_cross_entropy(inputs[0], labels)?,
        Primitive::Reshape { shape } => inputs[0]
            .clone()
            .reshaped(shape)
            .map_err(|_| mismatch(op, inputs))?,
        Primitive::SpatialMean => spatial_mean(inputs[0])?,
    };
    if !out.is_finite() {
        return Err(AutodiffError::NonFinite { op });
    }
    Ok(out)
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + libm::exp(-v))
    } else {
        let e = libm::exp(v);
        e / (1.0 + e)
    }
}

fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, AutodiffError> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(mismatch(OpTag::MatMul, &[a, b]));
    }
    let (n, k, m) = (sa[0], sa[1], sb[1]);
    let mut out = vec![0.0; n * m];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * m..(p + 1) * m];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::from_vec(vec![n, m], out).expect("matmul shape"))
}

fn conv2d(x: &Tensor, w: &Tensor, stride: usize) -> Result<Tensor, AutodiffError> {
    let (sx, sw) = (x.shape(), w.shape());
    if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != 3 || sw[3] != 3 {
        return Err(mismatch(OpTag::Conv2d, &[x, w]));
    }
    if stride != 1 && stride != 2 {
        return Err(AutodiffError::InvalidArgument {
            op: OpTag::Conv2d,
            reason: "stride must be 1 or 2",
        });
    }
    let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
    let o = sw[0];
    let (ho, wo) = (conv_out(h, stride), conv_out(wd, stride));
    let (plane, k) = (ho * wo, c * 9);
    let mut out = vec![0.0; n * o * plane];
    let mut cols = vec![0.0; k * plane];
    let (xd, wdat) = (x.data(), w.data());
    for b in 0..n {
        im2col(&xd[b * c * h * wd..(b + 1) * c * h * wd], c, h, wd, stride, ho, wo, &mut cols);
        for oc in 0..o {
            let orow = &mut out[(b * o + oc) * plane..(b * o + oc + 1) * plane];
            for (kk, col) in cols.chunks_exact(plane).enumerate() {
                let wv = wdat[oc * k + kk];
                if wv == 0.0 {
                    continue;
                }
                for (o, v) in orow.iter_mut().zip(col) {
                    *o += wv * v;
                }
            }
        }
    }
    Ok(Tensor::from_vec(vec![n, o, ho, wo], out).expect("conv shape"))
}

/// Unfolds one `[C, H, W]` image into `[C*9, Ho*Wo]` patch columns with zero
/// padding.
#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], c: usize, h: usize, w: usize, stride: usize, ho: usize, wo: usize, cols: &mut [f64]) {
    let plane = ho * wo;
    for ic in 0..c {
        let img = &x[ic * h * w..(ic + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ic * 3 + ky) * 3 + kx) * plane..][..plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &img[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - 1;
                        *d = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patch columns back into an image.
#[allow(clippy::too_many_arguments)]
fn col2im_add(cols: &[f64], c: usize, h: usize, w: usize, stride: usize, ho: usize, wo: usize, x: &mut [f64]) {
    let plane = ho * wo;
    for ic in 0..c {
        let img = &mut x[ic * h * w..(ic + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ic * 3 + ky) * 3 + kx) * plane..][..plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut img[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in row[oy * wo..(oy + 1) * wo].iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Dot product with four interleaved accumulators, combined in a fixed order.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn upsample2x(x: &Tensor) -> Result<Tensor, AutodiffError> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(mismatch(OpTag::Upsample2x, &[x]));
    }
    let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
    let mut out = Vec::with_capacity(nc * 4 * h * w);
    let xd = x.data();
    for plane in 0..nc {
        for y in 0..2 * h {
            let row = &xd[(plane * h + y / 2) * w..(plane * h + y / 2 + 1) * w];
            for v in row {
                out.push(*v);
                out.push(*v);
            }
        }
    }
    Ok(Tensor::from_vec(vec![s[0], s[1], 2 * h, 2 * w], out).expect("upsample shape"))
}

fn bias_add(x: &Tensor, b: &Tensor) -> Result<Tensor, AutodiffError> {
    let s = x.shape();
    if s.len() < 2 || b.shape().len() != 1 || b.shape()[0] != s[1] {
        return Err(mismatch(OpTag::BiasAdd, &[x, b]));
    }
    let inner: usize = s[2..].iter().product();
    let c = s[1];
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v += b.data()[(i / inner) % c];
    }
    Ok(out)
}

fn softmax_last_axis(x: &Tensor) -> Result<Tensor, AutodiffError> {
    let s = x.shape();
    if s.is_empty() {
        return Err(mismatch(OpTag::Softmax, &[x]));
    }
    let k = s[s.len() - 1];
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(k) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = libm::exp(*v - max);
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + libm::log(row.iter().map(|v| libm::exp(v - max)).sum::<f64>());
    row.iter().map(|v| v - lse).collect()
}

fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor, AutodiffError> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(AutodiffError::ShapeMismatch {
            op: OpTag::SoftmaxCrossEntropy,
            shapes: vec![s.to_vec(), vec![labels.len()]],
        });
    }
    let k = s[1];
    if labels.iter().any(|&l| l >= k) {
        return Err(AutodiffError::InvalidArgument {
            op: OpTag::SoftmaxCrossEntropy,
            reason: "label index out of range",
        });
    }
    let mut total = 0.0;
    for (row, &label) in logits.data().chunks(k).zip(labels) {
        total -= log_softmax_row(row)[label];
    }
    Ok(Tensor::scalar(total / labels.len() as f64))
}

fn spatial_mean(x: &Tensor) -> Result<Tensor, AutodiffError> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(mismatch(OpTag::SpatialMean, &[x]));
    }
    let hw = s[2] * s[3];
    let data = x
        .data()
        .chunks(hw)
        .map(|plane| plane.iter().sum::<f64>() / hw as f64)
        .collect();
    Ok(Tensor::from_vec(vec![s[0], s[1]], data).expect("mean shape"))
}

/// Gradients with respect to each input; `None` where `needs[i]` is false.
pub(super) fn backward(
    p: &Primitive,
    inputs: &[&Tensor],
    output: &Tensor,
    grad: &Tensor,
    needs: &[bool],
) -> Vec<Option<Tensor>> {
    let want = |i: usize| needs.get(i).copied().unwrap_or(false);
    match p {
        Primitive::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let (ad, bd, gd) = (a.data(), b.data(), grad.data());
            let da = want(0).then(|| {
                let mut da = vec![0.0; n * k];
                for i in 0..n {
                    let grow = &gd[i * m..(i + 1) * m];
                    for q in 0..k {
                        let brow = &bd[q * m..(q + 1) * m];
                        da[i * k + q] = grow.iter().zip(brow).map(|(g, b)| g * b).sum();
                    }
                }
                Tensor::from_vec(vec![n, k], da).expect("shape")
            });
            let db = want(1).then(|| {
                let mut db = vec![0.0; k * m];
                for i in 0..n {
                    let grow = &gd[i * m..(i + 1) * m];
                    for q in 0..k {
                        let av = ad[i * k + q];
                        if av == 0.0 {
                            continue;
                        }
                        for (d, g) in db[q * m..(q + 1) * m].iter_mut().zip(grow) {
                            *d += av * g;
                        }
                    }
                }
                Tensor::from_vec(vec![k, m], db).expect("shape")
            });
            vec![da, db]
        }
        Primitive::Conv2d { stride } => conv2d_backward(inputs[0], inputs[1], grad, *stride, want(0), want(1)),
        Primitive::Upsample2x => {
            let s = inputs[0].shape();
            let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
            let mut dx = vec![0.0; nc * h * w];
            let gd = grad.data();
            for plane in 0..nc {
                for y in 0..2 * h {
                    for x in 0..2 * w {
                        dx[(plane * h + y / 2) * w + x / 2] += gd[(plane * 2 * h + y) * 2 * w + x];
                    }
                }
            }
            vec![Some(Tensor::from_vec(s.to_vec(), dx).expect("shape"))]
        }
        Primitive::BiasAdd => {
            let s = inputs[0].shape();
            let inner: usize = s[2..].iter().product();
            let c = s[1];
            let db = want(1).then(|| {
                let mut db = vec![0.0; c];
                for (i, g) in grad.data().iter().enumerate() {
                    db[(i / inner) % c] += g;
                }
                Tensor::from_vec(vec![c], db).expect("shape")
            });
            vec![want(0).then(|| grad.clone()), db]
        }
        Primitive::Add => vec![want(0).then(|| grad.clone()), want(1).then(|| grad.clone())],
        Primitive::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let prod = |other: &Tensor| {
                Tensor::from_vec(
                    grad.shape().to_vec(),
                    grad.data().iter().zip(other.data()).map(|(g, v)| g * v).collect(),
                )
                .expect("shape")
            };
            vec![want(0).then(|| prod(b)), want(1).then(|| prod(a))]
        }
        Primitive::Scale(s) => vec![Some(grad.map(|g| g * s))],
        Primitive::Relu => {
            let data = grad
                .data()
                .iter()
                .zip(inputs[0].data())
                .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                .collect();
            vec![Some(Tensor::from_vec(grad.shape().to_vec(), data).expect("shape"))]
        }
        Primitive::Sigmoid => {
            let data = grad
                .data()
                .iter()
                .zip(output.data())
                .map(|(g, y)| g * y * (1.0 - y))
                .collect();
            vec![Some(Tensor::from_vec(grad.shape().to_vec(), data).expect("shape"))]
        }
        Primitive::Tanh => {
            let data = grad
                .data()
                .iter()
                .zip(output.data())
                .map(|(g, y)| g * (1.0 - y * y))
                .collect();
            vec![Some(Tensor::from_vec(grad.shape().to_vec(), data).expect("shape"))]
        }
        Primitive::Softmax => {
            let k = output.shape()[output.shape().len() - 1];
            let mut dx = Vec::with_capacity(output.len());
            for (yrow, grow) in output.data().chunks(k).zip(grad.data().chunks(k)) {
                let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                dx.extend(yrow.iter().zip(grow).map(|(y, g)| y * (g - dot)));
            }
            vec![Some(Tensor::from_vec(output.shape().to_vec(), dx).expect("shape"))]
        }
        Primitive::Mse => {
            let (a, b) = (inputs[0], inputs[1]);
            let scale = 2.0 * grad.item() / a.len() as f64;
            let diff: Vec<f64> = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| scale * (x - y))
                .collect();
            let da = want(0).then(|| Tensor::from_vec(a.shape().to_vec(), diff.clone()).expect("shape"));
            let db = want(1).then(|| {
                Tensor::from_vec(b.shape().to_vec(), diff.iter().map(|d| -d).collect()).expect("shape")
            });
            vec![da, db]
        }
        Primitive::SoftmaxCrossEntropy { labels } => {
            let logits = inputs[0];
            let k = logits.shape()[1];
            let scale = grad.item() / labels.len() as f64;
            let mut dx = Vec::with_capacity(logits.len());
            for (row, &label) in logits.data().chunks(k).zip(labels) {
                let ls = log_softmax_row(row);
                for (j, l) in ls.iter().enumerate() {
                    let target = if j == label { 1.0 } else { 0.0 };
                    dx.push(scale * (libm::exp(*l) - target));
                }
            }
            vec![Some(Tensor::from_vec(logits.shape().to_vec(), dx).expect("shape"))]
        }
        Primitive::Reshape { .. } => vec![Some(
            grad.clone()
                .reshaped(inputs[0].shape())
                .expect("reshape preserves count"),
        )],
        Primitive::SpatialMean => {
            let s = inputs[0].shape();
            let hw = s[2] * s[3];
            let mut dx = Vec::with_capacity(inputs[0].len());
            for g in grad.data() {
                let v = g / hw as f64;
                dx.extend(core::iter::repeat_n(v, hw));
            }
            vec![Some(Tensor::from_vec(s.to_vec(), dx).expect("shape"))]
        }
    }
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    grad: &Tensor,
    stride: usize,
    want_x: bool,
    want_w: bool,
) -> Vec<Option<Tensor>> {
    let (sx, sw) = (x.shape(), w.shape());
    let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
    let o = sw[0];
    let (ho, wo) = (conv_out(h, stride), conv_out(wd, stride));
    let (plane, k) = (ho * wo, c * 9);
    let (xd, wdat, gd) = (x.data(), w.data(), grad.data());
    let mut dx = if want_x { vec![0.0; x.len()] } else { Vec::new() };
    let mut dw = if want_w { vec![0.0; w.len()] } else { Vec::new() };
    let mut cols = vec![0.0; k * plane];
    let img = c * h * wd;
    for b in 0..n {
        let g = &gd[b * o * plane..(b + 1) * o * plane];
        if want_w {
            im2col(&xd[b * img..(b + 1) * img], c, h, wd, stride, ho, wo, &mut cols);
            for (oc, grow) in g.chunks_exact(plane).enumerate() {
                for (kk, col) in cols.chunks_exact(plane).enumerate() {
                    dw[oc * k + kk] += dot(grow, col);
                }
            }
        }
        if want_x {
            cols.fill(0.0);
            for (oc, grow) in g.chunks_exact(plane).enumerate() {
                for (kk, col) in cols.chunks_exact_mut(plane).enumerate() {
                    let wv = wdat[oc * k + kk];
                    if wv == 0.0 {
                        continue;
                    }
                    for (d, gv) in col.iter_mut().zip(grow) {
                        *d += wv * gv;
                    }
                }
            }
            col2im_add(&cols, c, h, wd, stride, ho, wo, &mut dx[b * img..(b + 1) * img]);
        }
    }
    vec![
        want_x.then(|| Tensor::from_vec(sx.to_vec(), dx).expect("shape")),
        want_w.then(|| Tensor::from_vec(sw.to_vec(), dw).expect("shape")),
    ]
}
