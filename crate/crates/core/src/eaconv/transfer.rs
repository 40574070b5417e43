use super::model::{Layer, Model};
use super::resblock::BranchWeights;
use crate::basis::{BasisBank, Projector};
use crate::numerics::{Conv2d, Param};
use crate::{Error, Result, Tensor};

/// Outcome of [`transfer_weights`].
#[derive(Debug, Clone, PartialEq)]
pub struct TransferReport {
    /// Layer indices whose kernels were projected onto the basis.
    pub projected: Vec<usize>,
    /// Condition number of the identity-path design matrix (1 if nothing was projected).
    pub condition: f64,
}

fn copy(dst: &mut Param, src: &Param, what: &str) -> Result<()> {
    if dst.value.shape() != src.value.shape() {
        return Err(Error::Incompatible(format!(
            "{what}: shapes {:?} and {:?} differ",
            src.value.shape(),
            dst.value.shape()
        )));
    }
    dst.value = src.value.clone();
    Ok(())
}

fn copy_tensor(dst: &mut Tensor, src: &Tensor, what: &str) -> Result<()> {
    if dst.shape() != src.shape() {
        return Err(Error::Incompatible(format!("{what}: shapes differ")));
    }
    *dst = src.clone();
    Ok(())
}

fn copy_conv(dst: &mut Conv2d, src: &Conv2d, what: &str) -> Result<()> {
    if (dst.stride, dst.padding) != (src.stride, src.padding) {
        return Err(Error::Incompatible(format!("{what}: stride/padding differ")));
    }
    copy(&mut dst.weight, &src.weight, what)?;
    match (dst.bias.as_mut(), src.bias.as_ref()) {
        (Some(d), Some(s)) => copy(d, s, what),
        (None, None) => Ok(()),
        _ => Err(Error::Incompatible(format!("{what}: bias presence differs"))),
    }
}

fn projector_for<'a>(
    bank: &BasisBank,
    cache: &'a mut Option<Projector>,
    what: &str,
) -> Result<&'a Projector> {
    if !bank.is_complete() {
        let k = bank.kernel_size();
        return Err(Error::Incompatible(format!(
            "{what}: basis has {} functions, a complete {k}x{k} basis needs {}",
            bank.num_basis(),
            k * k
        )));
    }
    if cache.is_none() {
        *cache = Some(bank.projector()?);
    }
    Ok(cache.as_ref().expect("projector just built"))
}

fn project_into(
    dst: &mut Param,
    kernels: &Tensor,
    projector: &Projector,
    what: &str,
) -> Result<()> {
    let w = projector.project(kernels)?;
    if w.shape() != dst.value.shape() {
        return Err(Error::Incompatible(format!(
            "{what}: projected weights {:?} do not fit {:?}",
            w.shape(),
            dst.value.shape()
        )));
    }
    dst.value = w;
    Ok(())
}

/// Initializes an augmented model from a standard one with the same skeleton.
///
/// Spatial kernels of every augmented layer are projected (least squares) onto
/// the identity-path basis, which is exact for a complete basis; path
/// coefficients restart at `[1, 0, ..]` so the other paths are disconnected.
/// Everything else, including 1×1 projections, batch-norm state and the
/// classifier, is copied verbatim.
pub fn transfer_weights(standard: &Model, ea: &mut Model) -> Result<TransferReport> {
    if standard.layers().len() != ea.layers().len() {
        return Err(Error::Incompatible(format!(
            "{} layers vs {}",
            standard.layers().len(),
            ea.layers().len()
        )));
    }
    if standard.config().input != ea.config().input {
        return Err(Error::Incompatible("input extents differ".into()));
    }
    let mut projector: Option<Projector> = None;
    let mut projected = Vec::new();
    for (i, (src, dst)) in standard.layers().iter().zip(ea.layers_mut()).enumerate() {
        let what = format!("layer {i}");
        match (src, dst) {
            (Layer::Conv(s), Layer::Conv(d)) => copy_conv(d, s, &what)?,
            (Layer::Conv(s), Layer::EaConv(d)) => {
                if (d.stride, d.padding) != (s.stride, s.padding) {
                    return Err(Error::Incompatible(format!("{what}: stride/padding differ")));
                }
                let proj = projector_for(&d.bank, &mut projector, &what)?;
                project_into(&mut d.w, &s.weight.value, proj, &what)?;
                match &s.bias {
                    Some(b) => copy(&mut d.bias, b, &what)?,
                    None => d.bias.value.fill(0.0),
                }
                d.reset_beta();
                projected.push(i);
            }
            (Layer::BatchNorm(s), Layer::BatchNorm(d)) => {
                copy(&mut d.weight, &s.weight, &what)?;
                copy(&mut d.bias, &s.bias, &what)?;
                copy_tensor(&mut d.running_mean, &s.running_mean, &what)?;
                copy_tensor(&mut d.running_var, &s.running_var, &what)?;
            }
            (Layer::Linear(s), Layer::Linear(d)) => {
                copy(&mut d.weight, &s.weight, &what)?;
                copy(&mut d.bias, &s.bias, &what)?;
            }
            (Layer::Relu, Layer::Relu) | (Layer::Gap, Layer::Gap) => {}
            (Layer::MaxPool(a), Layer::MaxPool(b)) if a == b => {}
            (Layer::ResBlock(s), Layer::ResBlock(d)) => {
                let BranchWeights::Spatial { conv1, conv2 } = &s.weights else {
                    return Err(Error::Incompatible(format!(
                        "{what}: source block must be a standard block"
                    )));
                };
                match &mut d.weights {
                    BranchWeights::Spatial {
                        conv1: d1,
                        conv2: d2,
                    } => {
                        copy(d1, conv1, &what)?;
                        copy(d2, conv2, &what)?;
                    }
                    BranchWeights::Basis {
                        bank, w1, w2, beta, ..
                    } => {
                        let proj = projector_for(bank, &mut projector, &what)?;
                        project_into(w1, &conv1.value, proj, &what)?;
                        project_into(w2, &conv2.value, proj, &what)?;
                        beta.value = Tensor::from_fn(&[bank.paths()], |p| {
                            if p == 0 {
                                1.0
                            } else {
                                0.0
                            }
                        });
                        projected.push(i);
                    }
                }
                for (bn_d, bn_s) in [(&mut d.bn1, &s.bn1), (&mut d.bn2, &s.bn2)] {
                    copy(&mut bn_d.weight, &bn_s.weight, &what)?;
                    copy(&mut bn_d.bias, &bn_s.bias, &what)?;
                    copy_tensor(&mut bn_d.running_mean, &bn_s.running_mean, &what)?;
                    copy_tensor(&mut bn_d.running_var, &bn_s.running_var, &what)?;
                }
                match (d.projection.as_mut(), s.projection.as_ref()) {
                    (Some(dp), Some(sp)) => copy_conv(dp, sp, &what)?,
                    (None, None) => {}
                    _ => {
                        return Err(Error::Incompatible(format!(
                            "{what}: skip projection presence differs"
                        )))
                    }
                }
            }
            _ => {
                return Err(Error::Incompatible(format!(
                    "{what}: layer kinds {} and {} cannot be paired",
                    standard.config().layers[i].name(),
                    ea.config().layers[i].name()
                )))
            }
        }
    }
    Ok(TransferReport {
        projected,
        condition: projector.map(|p| p.condition()).unwrap_or(1.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{build_basis_bank, BasisConfig};
    use crate::eaconv::{build_model, ModelConfig};

    fn jitter_buffers(m: &mut Model) {
        for (i, (_, t)) in m.buffers_mut().into_iter().enumerate() {
            for (j, v) in t.data_mut().iter_mut().enumerate() {
                *v += 0.01 * ((i * 7 + j) % 5) as f64;
            }
        }
    }

    fn round_trip(host: ModelConfig, positions: &[usize]) {
        let bank = build_basis_bank(&BasisConfig::standard(3, 1.0, 0.5)).unwrap();
        let mut std = build_model(&host, None, 3).unwrap();
        jitter_buffers(&mut std);
        let mut ea = build_model(&host.augment(positions).unwrap(), Some(bank.into_shared()), 4)
            .unwrap();
        let report = transfer_weights(&std, &mut ea).unwrap();
        assert_eq!(report.projected, positions);
        assert!(report.condition < 1e6);
        let x = Tensor::from_fn(&[3, 1, 16, 16], |i| ((i * 31) % 17) as f64 / 17.0);
        let diff = std.forward(&x).unwrap().max_abs_diff(&ea.forward(&x).unwrap());
        assert!(diff < 1e-8, "{diff}");
    }

    #[test]
    fn four_conv_round_trip() {
        round_trip(ModelConfig::four_conv([1, 16, 16], [4, 6, 6, 8], 3), &[0, 4]);
    }

    #[test]
    fn resnet_round_trip() {
        round_trip(ModelConfig::small_resnet([1, 16, 16], &[4, 6], 3), &[0, 3, 6]);
    }

    #[test]
    fn mismatched_skeletons_are_rejected() {
        let bank = build_basis_bank(&BasisConfig::standard(3, 1.0, 0.5)).unwrap();
        let std = build_model(&ModelConfig::four_conv([1, 16, 16], [4, 6, 6, 8], 3), None, 0)
            .unwrap();
        let other = ModelConfig::four_conv([1, 16, 16], [4, 6, 6, 9], 3);
        let mut ea =
            build_model(&other.augment_first_conv().unwrap(), Some(bank.into_shared()), 0).unwrap();
        assert!(matches!(transfer_weights(&std, &mut ea), Err(Error::Incompatible(_))));
    }
}
