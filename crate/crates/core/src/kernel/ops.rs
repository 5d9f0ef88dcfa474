//! Elementwise, pooling, resampling and concatenation kernels with their adjoints.

use super::Tensor;
use crate::error::{Error, Result};

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
}

pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .map(|&v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
}

/// Uses the forward output `p`: dp/dx = p (1 - p).
pub fn sigmoid_backward(out: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = out
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&p, &g)| g * p * (1.0 - p))
        .collect();
    Tensor::new(out.shape().to_vec(), data).expect("shape preserved")
}

/// 2x2 max-pool with stride 2. Returns the output and, per output element,
/// the flat input index that won.
pub fn maxpool2(x: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    let [n, c, h, w] = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("maxpool2: odd spatial size {h}x{w}")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    let data = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if data[i] > data[best] {
                        best = i;
                    }
                }
                out.push(data[best]);
                arg.push(best as u32);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, ho, wo], out)?, arg))
}

pub fn maxpool2_backward(input_shape: &[usize], argmax: &[u32], grad_out: &Tensor) -> Result<Tensor> {
    if argmax.len() != grad_out.numel() {
        return Err(Error::Shape("maxpool2 backward: argmax/gradient size mismatch".into()));
    }
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        d[i as usize] += g;
    }
    Ok(dx)
}

/// Nearest-neighbour upsampling by 2 in both spatial axes.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4()?;
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![0.0f32; n * c * ho * wo];
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
        for oy in 0..ho {
            let row = &src[(oy / 2) * w..(oy / 2 + 1) * w];
            for (ox, v) in dst[oy * wo..(oy + 1) * wo].iter_mut().enumerate() {
                *v = row[ox / 2];
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], out)
}

pub fn upsample2_backward(grad_out: &Tensor) -> Result<Tensor> {
    let [n, c, ho, wo] = grad_out.dims4()?;
    let (h, w) = (ho / 2, wo / 2);
    let mut dx = vec![0.0f32; n * c * h * w];
    for plane in 0..n * c {
        let src = &grad_out.data()[plane * ho * wo..(plane + 1) * ho * wo];
        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                dst[(oy / 2) * w + ox / 2] += src[oy * wo + ox];
            }
        }
    }
    Tensor::new(vec![n, c, h, w], dx)
}

/// Concatenates along the channel axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [n, ca, h, w] = a.dims4()?;
    let [nb, cb, hb, wb] = b.dims4()?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::Shape(format!(
            "concat: incompatible shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (sa, sb) = (ca * h * w, cb * h * w);
    let mut out = Vec::with_capacity(n * (sa + sb));
    for i in 0..n {
        out.extend_from_slice(&a.data()[i * sa..(i + 1) * sa]);
        out.extend_from_slice(&b.data()[i * sb..(i + 1) * sb]);
    }
    Tensor::new(vec![n, ca + cb, h, w], out)
}

/// Splits a channel-concatenated gradient back into its two parts.
pub fn concat_channels_backward(grad_out: &Tensor, a_channels: usize) -> Result<(Tensor, Tensor)> {
    let [n, c, h, w] = grad_out.dims4()?;
    if a_channels == 0 || a_channels >= c {
        return Err(Error::Shape("concat backward: bad split point".into()));
    }
    let cb = c - a_channels;
    let (sa, sb) = (a_channels * h * w, cb * h * w);
    let mut ga = Vec::with_capacity(n * sa);
    let mut gb = Vec::with_capacity(n * sb);
    for i in 0..n {
        let chunk = &grad_out.data()[i * (sa + sb)..(i + 1) * (sa + sb)];
        ga.extend_from_slice(&chunk[..sa]);
        gb.extend_from_slice(&chunk[sa..]);
    }
    Ok((
        Tensor::new(vec![n, a_channels, h, w], ga)?,
        Tensor::new(vec![n, cb, h, w], gb)?,
    ))
}
