//! Composite training loss: (1 - alpha) * MAE + alpha * (1 - MS-SSIM), with
//! alpha rebalanced from rolling sums of the two terms.
//!
//! MS-SSIM enters the minimized loss as the dissimilarity 1 - MS-SSIM; both
//! balancer sums use that "smaller is better" sense.

use crate::error::{Error, Result};
use crate::tensor::{NodeId, Tape};
use std::collections::VecDeque;

/// Standard five-scale weights; prefixes are renormalized when fewer scales
/// fit the image.
pub const SCALE_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

#[derive(Clone, Copy, Debug)]
pub struct MsSsimSettings {
    pub window: usize,
    pub sigma: f64,
    pub max_scales: usize,
    pub k1: f64,
    pub k2: f64,
}

impl Default for MsSsimSettings {
    fn default() -> Self {
        Self { window: 11, sigma: 1.5, max_scales: 5, k1: 0.01, k2: 0.03 }
    }
}

/// Normalized Gaussian taps for the separable window.
pub fn gaussian_taps(window: usize, sigma: f64) -> Vec<f64> {
    let mid = (window as f64 - 1.0) / 2.0;
    let mut taps: Vec<f64> = (0..window)
        .map(|i| {
            let d = i as f64 - mid;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

pub fn scale_weights(scales: usize) -> Vec<f64> {
    let take = &SCALE_WEIGHTS[..scales.min(SCALE_WEIGHTS.len())];
    let sum: f64 = take.iter().sum();
    take.iter().map(|w| w / sum).collect()
}

/// Window and scale count that fit an h x w slice: scales are dropped first,
/// then the window shrinks for images narrower than it.
fn fit_settings(h: usize, w: usize, settings: &MsSsimSettings) -> (usize, usize) {
    let m = h.min(w);
    let mut window = settings.window;
    if m < window {
        window = if m % 2 == 0 { m - 1 } else { m };
        log::warn!("image {h}x{w} is narrower than the {} window; shrinking to {window}", settings.window);
    }
    let mut scales = 1;
    while scales < settings.max_scales && (m >> scales) >= window {
        scales += 1;
    }
    if scales < settings.max_scales {
        log::warn!("image {h}x{w} supports only {scales} of {} scales", settings.max_scales);
    }
    (window, scales)
}

/// Multi-scale structural similarity between two same-shape tensors, built
/// on the tape (differentiable through both arguments). Inputs are expected
/// to be normalized so their joint dynamic range is 1.
pub fn ms_ssim_graph(
    tape: &mut Tape,
    x: NodeId,
    y: NodeId,
    settings: &MsSsimSettings,
) -> Result<NodeId> {
    let dims = tape.dims(x);
    if dims != tape.dims(y) {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            dims,
            tape.dims(y)
        )));
    }
    let (window, scales) = fit_settings(dims[3], dims[4], settings);
    let taps = gaussian_taps(window, settings.sigma);
    let weights = scale_weights(scales);
    let c1 = settings.k1 * settings.k1;
    let c2 = settings.k2 * settings.k2;

    let mut xs = x;
    let mut ys = y;
    let mut product: Option<NodeId> = None;
    for (s, &weight) in weights.iter().enumerate() {
        if s > 0 {
            xs = tape.avg_pool2(xs)?;
            ys = tape.avg_pool2(ys)?;
        }
        let mu_x = tape.blur2d(xs, &taps)?;
        let mu_y = tape.blur2d(ys, &taps)?;
        let xx = tape.mul(xs, xs)?;
        let yy = tape.mul(ys, ys)?;
        let xy = tape.mul(xs, ys)?;
        let m_xx = tape.blur2d(xx, &taps)?;
        let m_yy = tape.blur2d(yy, &taps)?;
        let m_xy = tape.blur2d(xy, &taps)?;
        let mu_x2 = tape.mul(mu_x, mu_x)?;
        let mu_y2 = tape.mul(mu_y, mu_y)?;
        let mu_xy = tape.mul(mu_x, mu_y)?;
        let sigma_x2 = tape.sub(m_xx, mu_x2)?;
        let sigma_y2 = tape.sub(m_yy, mu_y2)?;
        let sigma_xy = tape.sub(m_xy, mu_xy)?;

        let cs_num = tape.mul_const(sigma_xy, 2.0);
        let cs_num = tape.add_const(cs_num, c2);
        let cs_den = tape.add(sigma_x2, sigma_y2)?;
        let cs_den = tape.add_const(cs_den, c2);
        let cs_den_inv = tape.recip(cs_den);
        let cs_map = tape.mul(cs_num, cs_den_inv)?;

        let term = if s + 1 < scales {
            tape.mean_all(cs_map)
        } else {
            let l_num = tape.mul_const(mu_xy, 2.0);
            let l_num = tape.add_const(l_num, c1);
            let l_den = tape.add(mu_x2, mu_y2)?;
            let l_den = tape.add_const(l_den, c1);
            let l_den_inv = tape.recip(l_den);
            let l_map = tape.mul(l_num, l_den_inv)?;
            let ssim_map = tape.mul(l_map, cs_map)?;
            tape.mean_all(ssim_map)
        };
        // Negative means are clipped before the fractional power.
        let term = tape.relu(term);
        let term = tape.pow_const(term, weight);
        product = Some(match product {
            Some(p) => tape.mul(p, term)?,
            None => term,
        });
    }
    Ok(product.expect("at least one scale"))
}

/// Rolling balance between the MAE and MS-SSIM dissimilarity terms.
#[derive(Clone, Debug)]
pub struct LossBalancer {
    window: usize,
    mae_terms: VecDeque<f64>,
    ms_terms: VecDeque<f64>,
    alpha: f64,
}

impl LossBalancer {
    pub const DEFAULT_WINDOW: usize = 50;

    pub fn new(window: usize) -> Result<Self> {
        if window < 1 {
            return Err(Error::InvalidConfig("balancer window must be at least 1".into()));
        }
        Ok(Self {
            window,
            mae_terms: VecDeque::with_capacity(window),
            ms_terms: VecDeque::with_capacity(window),
            alpha: 0.5,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn record(&mut self, mae: f64, ms_loss: f64) {
        if self.mae_terms.len() == self.window {
            self.mae_terms.pop_front();
            self.ms_terms.pop_front();
        }
        self.mae_terms.push_back(mae);
        self.ms_terms.push_back(ms_loss);
    }

    /// alpha = sum(MAE) / (sum(MAE) + sum(MS-SSIM loss)) over the recorded
    /// window; unchanged when both sums are zero.
    pub fn update_alpha(&mut self) -> f64 {
        let mae: f64 = self.mae_terms.iter().sum();
        let ms: f64 = self.ms_terms.iter().sum();
        if mae + ms > 0.0 {
            self.alpha = (mae / (mae + ms)).clamp(0.0, 1.0);
        }
        self.alpha
    }

    pub fn recorded(&self) -> usize {
        self.mae_terms.len()
    }
}

pub struct CompositeLoss {
    pub loss: NodeId,
    pub mae_term: f64,
    pub ms_loss_term: f64,
    pub alpha_used: f64,
}

/// Build the composite loss on the tape and record this iteration's term
/// values in the balancer. The MS-SSIM term normalizes both tensors by
/// their joint maximum (a graph node, so gradients see it); an all-zero
/// pair scores MS-SSIM 1 and contributes no dissimilarity.
pub fn composite_loss(
    tape: &mut Tape,
    prediction: NodeId,
    target: NodeId,
    balancer: &mut LossBalancer,
    settings: &MsSsimSettings,
) -> Result<CompositeLoss> {
    if tape.dims(prediction) != tape.dims(target) {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            tape.dims(prediction),
            tape.dims(target)
        )));
    }
    let alpha = balancer.alpha();

    let diff = tape.sub(prediction, target)?;
    let absdiff = tape.abs(diff);
    let mae_node = tape.mean_all(absdiff);

    let joint = tape.concat_channels(prediction, target)?;
    let joint_max = tape.max_all(joint);
    let ms_node = if tape.scalar_value(joint_max) > 0.0 {
        let inv = tape.recip(joint_max);
        let xn = tape.scale(prediction, inv)?;
        let yn = tape.scale(target, inv)?;
        ms_ssim_graph(tape, xn, yn, settings)?
    } else {
        log::debug!("joint maximum is non-positive; scoring the pair as identical");
        tape.scalar_const(1.0)
    };
    let ms_loss_node = {
        let neg = tape.mul_const(ms_node, -1.0);
        tape.add_const(neg, 1.0)
    };

    let mae_scaled = tape.mul_const(mae_node, 1.0 - alpha);
    let ms_scaled = tape.mul_const(ms_loss_node, alpha);
    let loss = tape.add(mae_scaled, ms_scaled)?;

    let mae_term = tape.scalar_value(mae_node);
    let ms_loss_term = tape.scalar_value(ms_loss_node);
    balancer.record(mae_term, ms_loss_term);
    Ok(CompositeLoss { loss, mae_term, ms_loss_term, alpha_used: alpha })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor5;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn balancer_alpha_follows_the_window_sums() {
        let mut b = LossBalancer::new(10).unwrap();
        assert_eq!(b.alpha(), 0.5);
        b.record(3.0, 1.0);
        assert_eq!(b.update_alpha(), 0.75);

        let mut b = LossBalancer::new(10).unwrap();
        b.record(2.0, 1.0);
        b.record(4.0, 1.0);
        assert_eq!(b.update_alpha(), 6.0 / 8.0);

        let mut b = LossBalancer::new(10).unwrap();
        b.record(1.0, 1.0);
        assert_eq!(b.update_alpha(), 0.5);
    }

    #[test]
    fn balancer_keeps_alpha_when_sums_vanish() {
        let mut b = LossBalancer::new(4).unwrap();
        b.record(3.0, 1.0);
        b.update_alpha();
        let a = b.alpha();
        let mut b2 = b.clone();
        for _ in 0..4 {
            b2.record(0.0, 0.0);
        }
        assert_eq!(b2.update_alpha(), a);
    }

    #[test]
    fn balancer_window_drops_old_terms() {
        let mut b = LossBalancer::new(2).unwrap();
        b.record(100.0, 1.0);
        b.record(1.0, 1.0);
        b.record(1.0, 1.0); // pushes the 100 out
        assert_eq!(b.update_alpha(), 2.0 / 4.0);
    }

    #[test]
    fn identical_tensors_have_unit_similarity_and_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = Tensor5::random([1, 1, 2, 32, 32], &mut rng, 0.1, 1.0);
        let mut tape = Tape::new();
        let x = tape.constant(t.clone());
        let y = tape.constant(t);
        let ms = ms_ssim_graph(&mut tape, x, y, &MsSsimSettings::default()).unwrap();
        assert!((tape.scalar_value(ms) - 1.0).abs() < 1e-9);

        let mut balancer = LossBalancer::new(5).unwrap();
        let out = composite_loss(&mut tape, x, y, &mut balancer, &MsSsimSettings::default()).unwrap();
        assert!(tape.scalar_value(out.loss).abs() < 1e-9);
        assert!(out.mae_term.abs() < 1e-12);
    }

    #[test]
    fn alpha_zero_reduces_to_pure_mae() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Tensor5::random([1, 1, 1, 16, 16], &mut rng, 0.0, 1.0);
        let b = Tensor5::random([1, 1, 1, 16, 16], &mut rng, 0.0, 1.0);
        let mut tape = Tape::new();
        let x = tape.constant(a.clone());
        let y = tape.constant(b.clone());
        let mut balancer = LossBalancer::new(5).unwrap();
        // Force alpha to 0 by recording a pure-MS window.
        balancer.record(0.0, 1.0);
        balancer.update_alpha();
        assert_eq!(balancer.alpha(), 0.0);
        let out = composite_loss(&mut tape, x, y, &mut balancer, &MsSsimSettings::default()).unwrap();
        let expected_mae: f64 =
            a.data.iter().zip(&b.data).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.numel() as f64;
        assert!((tape.scalar_value(out.loss) - expected_mae).abs() < 1e-12);
    }

    #[test]
    fn noisier_pairs_score_lower() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let clean = Tensor5::random([1, 1, 1, 64, 64], &mut rng, 0.2, 1.0);
        let mut scores = Vec::new();
        for noise in [0.05, 0.2, 0.6] {
            let noisy = Tensor5::from_vec(
                clean.dims,
                clean
                    .data
                    .iter()
                    .map(|v| v + rng.random_range(-noise..noise))
                    .collect(),
            )
            .unwrap();
            let mut tape = Tape::new();
            let x = tape.constant(clean.clone());
            let y = tape.constant(noisy);
            let ms = ms_ssim_graph(&mut tape, x, y, &MsSsimSettings::default()).unwrap();
            scores.push(tape.scalar_value(ms));
        }
        assert!(scores[0] > scores[1] && scores[1] > scores[2], "{scores:?}");
    }

    #[test]
    fn composite_loss_gradient_matches_finite_differences() {
        use crate::tensor::gradcheck::grad_check;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pred = Tensor5::random([1, 1, 1, 12, 12], &mut rng, 0.2, 1.0);
        let target = Tensor5::random([1, 1, 1, 12, 12], &mut rng, 0.2, 1.0);
        let settings = MsSsimSettings { window: 5, max_scales: 2, ..Default::default() };
        let build = move |tape: &mut Tape, ids: &[crate::tensor::NodeId]| -> crate::Result<NodeId> {
            let mut balancer = LossBalancer::new(5)?;
            let out = composite_loss(tape, ids[0], ids[1], &mut balancer, &settings)?;
            Ok(out.loss)
        };
        let err = grad_check(&build, &[pred, target], 1e-5).unwrap();
        assert!(err < 1e-5, "err {err}");
    }

    #[test]
    fn gaussian_taps_are_normalized_and_symmetric() {
        let taps = gaussian_taps(11, 1.5);
        assert_eq!(taps.len(), 11);
        assert!((taps.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..5 {
            assert!((taps[i] - taps[10 - i]).abs() < 1e-15);
        }
        assert!(taps[5] > taps[4]);
    }
}
