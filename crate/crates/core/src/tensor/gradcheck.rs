//! Central finite-difference verification of tape gradients.

use super::{NodeId, Tape, Tensor5};
use crate::error::Result;

/// Compare analytic gradients of a scalar-valued graph against central
/// finite differences, coordinate by coordinate, and return the largest
/// relative error |a - n| / max(|a|, |n|, 1e-12).
///
/// `build` must construct the same graph for any parameter values. The step
/// for coordinate theta is `eps_scale * max(1, |theta|)`.
pub fn grad_check<F>(build: &F, params: &[Tensor5], eps_scale: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    grad_check_sampled(build, params, eps_scale, usize::MAX)
}

/// `grad_check` restricted to a deterministic subsample of at most
/// `max_coords` coordinates per parameter tensor (evenly strided).
pub fn grad_check_sampled<F>(
    build: &F,
    params: &[Tensor5],
    eps_scale: f64,
    max_coords: usize,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let eval = |values: &[Tensor5]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = values.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let loss = build(&mut tape, &ids)?;
        Ok(tape.scalar_value(loss))
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &ids)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).map(|g| g.to_vec()).unwrap_or_default())
        .collect();

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor5> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        let n = param.numel();
        let stride = n.div_ceil(max_coords.max(1)).max(1);
        for ci in (0..n).step_by(stride) {
            let theta = param.data[ci];
            let eps = eps_scale * theta.abs().max(1.0);
            work[pi].data[ci] = theta + eps;
            let plus = eval(&work)?;
            work[pi].data[ci] = theta - eps;
            let minus = eval(&work)?;
            work[pi].data[ci] = theta;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi].get(ci).copied().unwrap_or(0.0);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ConvSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Random but fixed co-gradients make every output coordinate matter.
    fn weighted_sum(tape: &mut Tape, out: NodeId, seed: u64) -> NodeId {
        let dims = tape.dims(out);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = tape.constant(Tensor5::random(dims, &mut rng, 0.5, 1.5));
        let prod = tape.mul(out, r).unwrap();
        tape.sum_all(prod)
    }

    #[test]
    fn linear_ops_are_exact_to_roundoff() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor5::random([1, 2, 2, 4, 4], &mut rng, -1.0, 1.0);
        let b = Tensor5::random([1, 2, 2, 4, 4], &mut rng, -1.0, 1.0);
        let build = |tape: &mut Tape, ids: &[NodeId]| -> crate::Result<NodeId> {
            let s = tape.add(ids[0], ids[1])?;
            let d = tape.sub(s, ids[1])?;
            let cat = tape.concat_channels(s, d)?;
            Ok(weighted_sum(tape, cat, 7))
        };
        let err = grad_check(&build, &[a, b], 1e-2).unwrap();
        assert!(err < 1e-10, "err {err}");
    }

    #[test]
    fn conv3d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = ConvSpec::standard(2, 3);
        let x = Tensor5::random([2, 2, 3, 6, 6], &mut rng, -1.0, 1.0);
        let w = Tensor5::random(spec.weight_dims(), &mut rng, -0.5, 0.5);
        let bias = Tensor5::random(spec.bias_dims(), &mut rng, -0.2, 0.2);
        let build = move |tape: &mut Tape, ids: &[NodeId]| -> crate::Result<NodeId> {
            let y = tape.conv3d(ids[0], ids[1], Some(ids[2]), &spec)?;
            Ok(weighted_sum(tape, y, 11))
        };
        let err = grad_check(&build, &[x, w, bias], 1e-4).unwrap();
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn strided_conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = ConvSpec::downsample(2, 2);
        let x = Tensor5::random([1, 2, 3, 8, 8], &mut rng, -1.0, 1.0);
        let w = Tensor5::random(spec.weight_dims(), &mut rng, -0.5, 0.5);
        let build = move |tape: &mut Tape, ids: &[NodeId]| -> crate::Result<NodeId> {
            let y = tape.conv3d(ids[0], ids[1], None, &spec)?;
            Ok(weighted_sum(tape, y, 13))
        };
        let err = grad_check(&build, &[x, w], 1e-4).unwrap();
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn transposed_conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = ConvSpec::upsample(2, 2);
        let x = Tensor5::random([1, 2, 3, 4, 4], &mut rng, -1.0, 1.0);
        let w = Tensor5::random(spec.weight_dims(), &mut rng, -0.5, 0.5);
        let bias = Tensor5::random(spec.bias_dims(), &mut rng, -0.2, 0.2);
        let build = move |tape: &mut Tape, ids: &[NodeId]| -> crate::Result<NodeId> {
            let y = tape.conv3d_transpose(ids[0], ids[1], Some(ids[2]), &spec)?;
            Ok(weighted_sum(tape, y, 17))
        };
        let err = grad_check(&build, &[x, w, bias], 1e-4).unwrap();
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn prelu_gradients_away_from_the_kink() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // Inputs bounded away from zero so the finite difference never
        // crosses the kink.
        let mut x = Tensor5::random([2, 3, 2, 4, 4], &mut rng, 0.01, 1.0);
        for (i, v) in x.data.iter_mut().enumerate() {
            if i % 2 == 0 {
                *v = -*v;
            }
        }
        let slope = Tensor5::from_vec([1, 3, 1, 1, 1], vec![0.25, 0.5, 0.1]).unwrap();
        let build = |tape: &mut Tape, ids: &[NodeId]| -> crate::Result<NodeId> {
            let y = tape.prelu(ids[0], ids[1])?;
            Ok(weighted_sum(tape, y, 19))
        };
        let err = grad_check(&build, &[x, slope], 1e-4).unwrap();
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn pooling_blur_and_reductions_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor5::random([1, 1, 2, 8, 8], &mut rng, 0.1, 2.0);
        let taps = vec![0.25, 0.5, 0.25];
        let build = move |tape: &mut Tape, ids: &[NodeId]| -> crate::Result<NodeId> {
            let b = tape.blur2d(ids[0], &taps)?;
            let p = tape.avg_pool2(b)?;
            let sq = tape.mul(p, p)?;
            let m = tape.mean_all(sq);
            let mx = tape.max_all(ids[0]);
            let r = tape.recip(mx);
            let scaled = tape.scale(m, r)?;
            let powed = tape.pow_const(scaled, 1.3);
            Ok(tape.sum_all(powed))
        };
        let err = grad_check(&build, &[x], 1e-5).unwrap();
        assert!(err < 1e-6, "err {err}");
    }
}
