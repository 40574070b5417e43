//! Pointwise, pooling, dense, normalization and loss primitives with their
//! analytic gradients.

use crate::{Error, Result, Tensor};

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Gradient of [`relu`]; the subgradient at 0 is taken as 0.
pub fn relu_backward(grad_out: &Tensor, input: &Tensor) -> Result<Tensor> {
    grad_out.zip_map(input, |g, x| if x > 0.0 { g } else { 0.0 })
}

/// Winning flat input index for every pooled output element.
#[derive(Debug, Clone)]
pub struct PoolIndex {
    input_shape: Vec<usize>,
    winners: Vec<usize>,
}

/// Non-overlapping `size`×`size` max pooling; trailing rows/columns that do not
/// fill a window are dropped. Ties go to the first element in scan order.
pub fn maxpool2d(x: &Tensor, size: usize) -> Result<(Tensor, PoolIndex)> {
    let (n, c, h, w) = x.dims4("maxpool2d")?;
    if size == 0 || size > h || size > w {
        return Err(Error::shape(
            "maxpool2d",
            format!("window {size} does not fit spatial extent {h}x{w}"),
        ));
    }
    let (ho, wo) = (h / size, w / size);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let mut winners = Vec::with_capacity(n * c * ho * wo);
    let src = x.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * size * w + ox * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let i = base + (oy * size + dy) * w + ox * size + dx;
                        if src[i] > src[best] {
                            best = i;
                        }
                    }
                }
                dst[(plane * ho + oy) * wo + ox] = src[best];
                winners.push(best);
            }
        }
    }
    Ok((
        out,
        PoolIndex {
            input_shape: x.shape().to_vec(),
            winners,
        },
    ))
}

pub fn maxpool2d_backward(grad_out: &Tensor, index: &PoolIndex) -> Result<Tensor> {
    if grad_out.len() != index.winners.len() {
        return Err(Error::shape(
            "maxpool2d_backward",
            format!(
                "grad_out has {} values, pooling produced {}",
                grad_out.len(),
                index.winners.len()
            ),
        ));
    }
    let mut grad = Tensor::zeros(&index.input_shape);
    for (&g, &i) in grad_out.data().iter().zip(&index.winners) {
        grad.data_mut()[i] += g;
    }
    Ok(grad)
}

/// `[N,C,H,W] -> [N,C]` spatial mean.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4("global_avg_pool")?;
    let area = (h * w) as f64;
    let mut out = Tensor::zeros(&[n, c]);
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = x.data()[i * h * w..(i + 1) * h * w].iter().sum::<f64>() / area;
    }
    Ok(out)
}

pub fn global_avg_pool_backward(grad_out: &Tensor, input_shape: &[usize]) -> Result<Tensor> {
    let [n, c, h, w] = input_shape[..] else {
        return Err(Error::shape("global_avg_pool_backward", "input must be rank 4"));
    };
    if grad_out.shape() != [n, c] {
        return Err(Error::shape(
            "global_avg_pool_backward",
            format!("grad_out {:?} vs expected [{n}, {c}]", grad_out.shape()),
        ));
    }
    let area = (h * w) as f64;
    let mut grad = Tensor::zeros(input_shape);
    for (i, &g) in grad_out.data().iter().enumerate() {
        grad.data_mut()[i * h * w..(i + 1) * h * w].fill(g / area);
    }
    Ok(grad)
}

/// `y[N,O] = x[N,I] * weight[O,I]^T + bias[O]`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, i) = x.dims2("linear")?;
    let (o, wi) = weight.dims2("linear")?;
    if wi != i || bias.shape() != [o] {
        return Err(Error::shape(
            "linear",
            format!(
                "input features {i}, weight {:?}, bias {:?}",
                weight.shape(),
                bias.shape()
            ),
        ));
    }
    let mut y = Tensor::zeros(&[n, o]);
    for r in 0..n {
        let xr = &x.data()[r * i..(r + 1) * i];
        for c in 0..o {
            let wr = &weight.data()[c * i..(c + 1) * i];
            y.data_mut()[r * o + c] =
                bias.data()[c] + xr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    Ok(y)
}

/// Returns `(grad_x, grad_weight, grad_bias)`.
pub fn linear_backward(
    grad_out: &Tensor,
    x: &Tensor,
    weight: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, i) = x.dims2("linear_backward")?;
    let (o, _) = weight.dims2("linear_backward")?;
    if grad_out.shape() != [n, o] {
        return Err(Error::shape(
            "linear_backward",
            format!("grad_out {:?} vs expected [{n}, {o}]", grad_out.shape()),
        ));
    }
    let mut gx = Tensor::zeros(&[n, i]);
    let mut gw = Tensor::zeros(&[o, i]);
    let mut gb = Tensor::zeros(&[o]);
    for r in 0..n {
        for c in 0..o {
            let g = grad_out.data()[r * o + c];
            gb.data_mut()[c] += g;
            for k in 0..i {
                gx.data_mut()[r * i + k] += g * weight.data()[c * i + k];
                gw.data_mut()[c * i + k] += g * x.data()[r * i + k];
            }
        }
    }
    Ok((gx, gw, gb))
}

/// Per-channel statistics and normalized activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    pub training: bool,
}

fn channel_planes(x: &Tensor) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = x.dims4("batchnorm2d")?;
    Ok((n, c, h * w))
}

/// Batch normalization over `(N,H,W)` per channel.
///
/// In training mode the biased batch variance normalizes; otherwise the
/// supplied running statistics do.
pub fn batchnorm2d(
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    eps: f64,
    training: bool,
) -> Result<(Tensor, BatchNormCache)> {
    let (n, c, area) = channel_planes(x)?;
    for (name, t) in [
        ("weight", weight),
        ("bias", bias),
        ("running_mean", running_mean),
        ("running_var", running_var),
    ] {
        if t.shape() != [c] {
            return Err(Error::shape(
                "batchnorm2d",
                format!("{name} has shape {:?}, expected [{c}]", t.shape()),
            ));
        }
    }
    let count = (n * area) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    if training {
        if n * area == 0 {
            return Err(Error::Empty("batchnorm2d batch"));
        }
        for b in 0..n {
            for ch in 0..c {
                let plane = &x.data()[(b * c + ch) * area..(b * c + ch + 1) * area];
                mean[ch] += plane.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for b in 0..n {
            for ch in 0..c {
                let plane = &x.data()[(b * c + ch) * area..(b * c + ch + 1) * area];
                var[ch] += plane.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count);
    } else {
        mean.copy_from_slice(running_mean.data());
        var.copy_from_slice(running_var.data());
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut normalized = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    for b in 0..n {
        for ch in 0..c {
            let range = (b * c + ch) * area..(b * c + ch + 1) * area;
            let (g, s) = (weight.data()[ch], bias.data()[ch]);
            for i in range {
                let xh = (x.data()[i] - mean[ch]) * inv_std[ch];
                normalized.data_mut()[i] = xh;
                y.data_mut()[i] = g * xh + s;
            }
        }
    }
    y.debug_check_finite("batchnorm2d");
    Ok((
        y,
        BatchNormCache {
            normalized,
            inv_std,
            batch_mean: mean,
            batch_var: var,
            training,
        },
    ))
}

/// Returns `(grad_x, grad_weight, grad_bias)`.
pub fn batchnorm2d_backward(
    grad_out: &Tensor,
    cache: &BatchNormCache,
    weight: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    grad_out.expect_same_shape(&cache.normalized, "batchnorm2d_backward")?;
    let (n, c, area) = channel_planes(grad_out)?;
    let count = (n * area) as f64;
    let mut gw = vec![0.0; c];
    let mut gb = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let range = (b * c + ch) * area..(b * c + ch + 1) * area;
            for i in range {
                let g = grad_out.data()[i];
                gb[ch] += g;
                gw[ch] += g * cache.normalized.data()[i];
            }
        }
    }
    let mut gx = Tensor::zeros(grad_out.shape());
    for b in 0..n {
        for ch in 0..c {
            let scale = weight.data()[ch] * cache.inv_std[ch];
            let range = (b * c + ch) * area..(b * c + ch + 1) * area;
            for i in range {
                let g = grad_out.data()[i];
                gx.data_mut()[i] = if cache.training {
                    scale * (g - gb[ch] / count - cache.normalized.data()[i] * gw[ch] / count)
                } else {
                    scale * g
                };
            }
        }
    }
    Ok((gx, Tensor::new(vec![c], gw)?, Tensor::new(vec![c], gb)?))
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, k) = logits.dims2("softmax_cross_entropy")?;
    if labels.len() != n {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("{} labels for {n} rows", labels.len()),
        ));
    }
    if n == 0 {
        return Err(Error::Empty("softmax_cross_entropy batch"));
    }
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(&[n, k]);
    for (r, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::Label {
                index: r,
                label,
                classes: k,
            });
        }
        let row = &logits.data()[r * k..(r + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + denom.ln();
        loss += log_z - row[label];
        for (j, v) in row.iter().enumerate() {
            let p = (v - log_z).exp();
            grad.data_mut()[r * k + j] = (p - if j == label { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clips_negatives() {
        let x = Tensor::new(vec![4], vec![-2.0, -0.5, 0.5, 3.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 0.5, 3.0]);
        let g = relu_backward(&Tensor::full(&[4], 1.0), &x).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn uniform_logits_give_ln_classes() {
        let logits = Tensor::full(&[3, 10], 0.7);
        for label in [0, 4, 9] {
            let (loss, _) = softmax_cross_entropy(&logits, &[label, label, label]).unwrap();
            assert!((loss - 10f64.ln()).abs() < 1e-12);
        }
        assert!((10f64.ln() - 2.302585).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let logits = Tensor::zeros(&[2, 3]);
        assert!(matches!(
            softmax_cross_entropy(&logits, &[0, 3]),
            Err(Error::Label { index: 1, label: 3, classes: 3 })
        ));
        assert!(softmax_cross_entropy(&logits, &[0]).is_err());
    }

    #[test]
    fn maxpool_routes_to_winner() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 4.0, 3.0, 2.0]).unwrap();
        let (y, idx) = maxpool2d(&x, 2).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let g = maxpool2d_backward(&Tensor::full(&[1, 1, 1, 1], 2.0), &idx).unwrap();
        assert_eq!(g.data(), &[0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn batchnorm_inference_uses_running_stats() {
        let x = Tensor::new(vec![1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        let (y, _) = batchnorm2d(
            &x,
            &Tensor::full(&[1], 2.0),
            &Tensor::full(&[1], 0.5),
            &Tensor::full(&[1], 1.0),
            &Tensor::full(&[1], 4.0),
            0.0,
            false,
        )
        .unwrap();
        assert_eq!(y.data(), &[0.5, 2.5]);
    }

    #[test]
    fn batchnorm_training_normalizes() {
        let x = Tensor::from_fn(&[2, 2, 3, 3], |i| (i as f64 * 0.37).sin() * 3.0 + 1.0);
        let (y, cache) = batchnorm2d(
            &x,
            &Tensor::full(&[2], 1.0),
            &Tensor::zeros(&[2]),
            &Tensor::zeros(&[2]),
            &Tensor::full(&[2], 1.0),
            1e-12,
            true,
        )
        .unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|b| y.data()[(b * 2 + ch) * 9..(b * 2 + ch + 1) * 9].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / 18.0;
            let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 18.0;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-9);
        }
        assert!(cache.training);
    }
}
