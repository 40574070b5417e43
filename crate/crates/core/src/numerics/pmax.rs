//! Per-pixel maximum over transformation paths.

use crate::{Error, Result, Tensor};

/// Winning path for every output element.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathIndex {
    shape: Vec<usize>,
    winners: Vec<usize>,
}

impl PathIndex {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn winners(&self) -> &[usize] {
        &self.winners
    }

    /// Translates winners through `map` (subset position -> path index).
    pub fn remap(self, map: &[usize]) -> PathIndex {
        PathIndex {
            shape: self.shape,
            winners: self.winners.into_iter().map(|w| map[w]).collect(),
        }
    }

    /// Number of elements won by path `p`.
    pub fn count(&self, p: usize) -> usize {
        self.winners.iter().filter(|&&w| w == p).count()
    }
}

/// `stack[P, ...] -> (max over P, argmax)`; ties go to the lowest path index.
pub fn pixelwise_max(stack: &Tensor) -> Result<(Tensor, PathIndex)> {
    let paths = *stack
        .shape()
        .first()
        .ok_or(Error::Empty("pixelwise_max stack"))?;
    if paths == 0 {
        return Err(Error::Empty("pixelwise_max stack"));
    }
    let slices: Vec<&[f64]> = (0..paths).map(|p| stack.outer(p)).collect();
    let active = vec![true; paths];
    let (data, winners) = max_slices(&slices, &active);
    let shape = stack.shape()[1..].to_vec();
    Ok((
        Tensor::new(shape.clone(), data)?,
        PathIndex { shape, winners },
    ))
}

/// Max over the `active` subset of equally-shaped path responses.
///
/// Inactive paths never win. If no path is active every path competes.
pub fn max_over_paths(paths: &[Tensor], active: &[bool]) -> Result<(Tensor, PathIndex)> {
    let first = paths.first().ok_or(Error::Empty("max_over_paths"))?;
    if active.len() != paths.len() {
        return Err(Error::shape(
            "max_over_paths",
            format!("{} activity flags for {} paths", active.len(), paths.len()),
        ));
    }
    for p in paths {
        first.expect_same_shape(p, "max_over_paths")?;
    }
    let slices: Vec<&[f64]> = paths.iter().map(Tensor::data).collect();
    let all = vec![true; paths.len()];
    let active = if active.iter().any(|&a| a) { active } else { &all };
    let (data, winners) = max_slices(&slices, active);
    let shape = first.shape().to_vec();
    Ok((
        Tensor::new(shape.clone(), data)?,
        PathIndex { shape, winners },
    ))
}

fn max_slices(slices: &[&[f64]], active: &[bool]) -> (Vec<f64>, Vec<usize>) {
    let len = slices[0].len();
    let first = active.iter().position(|&a| a).unwrap_or(0);
    let mut out = slices[first].to_vec();
    let mut winners = vec![first; len];
    for (p, slice) in slices.iter().enumerate().skip(first + 1) {
        if !active[p] {
            continue;
        }
        for i in 0..len {
            if slice[i] > out[i] {
                out[i] = slice[i];
                winners[i] = p;
            }
        }
    }
    (out, winners)
}

/// Routes each gradient element to its winning path; returns `[P, ...]`.
pub fn pixelwise_max_backward(
    grad_out: &Tensor,
    argmax: &PathIndex,
    paths: usize,
) -> Result<Tensor> {
    if grad_out.shape() != argmax.shape() {
        return Err(Error::shape(
            "pixelwise_max_backward",
            format!(
                "grad_out {:?} vs argmax {:?}",
                grad_out.shape(),
                argmax.shape()
            ),
        ));
    }
    if let Some(&bad) = argmax.winners.iter().find(|&&w| w >= paths) {
        return Err(Error::shape(
            "pixelwise_max_backward",
            format!("argmax refers to path {bad} but only {paths} paths exist"),
        ));
    }
    let mut shape = vec![paths];
    shape.extend_from_slice(grad_out.shape());
    let mut grad = Tensor::zeros(&shape);
    let len = grad_out.len();
    for (i, (&g, &w)) in grad_out.data().iter().zip(&argmax.winners).enumerate() {
        grad.data_mut()[w * len + i] = g;
    }
    Ok(grad)
}
