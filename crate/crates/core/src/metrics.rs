//! Evaluation metrics: MAE, per-slice MS-SSIM, region-of-interest
//! statistics, line profiles and FWHM.

use crate::error::{Error, Result};
use crate::geometry::{Point3, VoxelIndex};
use crate::loss::{ms_ssim_graph, MsSsimSettings};
use crate::tensor::{Tape, Tensor5};
use crate::volume::Volume;

/// Mean absolute voxel difference, in the unit of the inputs.
pub fn mae(recon: &Volume, target: &Volume) -> Result<f64> {
    if !recon.same_grid(target) {
        return Err(Error::IncompatibleGrid("mae needs one shared grid".into()));
    }
    let n = recon.data().len();
    let sum: f64 = recon
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(sum / n as f64)
}

/// Per-slice multi-scale structural similarity, averaged over transaxial
/// slices. Each slice pair is normalized by its joint maximum; pairs with a
/// non-positive joint maximum score 1 (treated as identical empties).
pub fn ms_ssim(recon: &Volume, target: &Volume) -> Result<f64> {
    let per_slice = ms_ssim_slices(recon, target)?;
    Ok(per_slice.iter().sum::<f64>() / per_slice.len() as f64)
}

pub fn ms_ssim_slices(recon: &Volume, target: &Volume) -> Result<Vec<f64>> {
    if !recon.same_grid(target) {
        return Err(Error::IncompatibleGrid("ms_ssim needs one shared grid".into()));
    }
    let [nd, nh, nw] = recon.grid().dims();
    let plane = nh * nw;
    let settings = MsSsimSettings::default();
    let mut scores = Vec::with_capacity(nd);
    for d in 0..nd {
        let a = &recon.data()[d * plane..(d + 1) * plane];
        let b = &target.data()[d * plane..(d + 1) * plane];
        let joint_max = a.iter().chain(b).fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        if joint_max <= 0.0 {
            log::debug!("slice {d}: non-positive joint maximum, scoring 1.0");
            scores.push(1.0);
            continue;
        }
        let norm = |s: &[f64]| -> Vec<f64> { s.iter().map(|v| v / joint_max).collect() };
        let mut tape = Tape::new();
        let x = tape.constant(Tensor5::from_vec([1, 1, 1, nh, nw], norm(a))?);
        let y = tape.constant(Tensor5::from_vec([1, 1, 1, nh, nw], norm(b))?);
        let ms = ms_ssim_graph(&mut tape, x, y, &settings)?;
        scores.push(tape.scalar_value(ms).clamp(0.0, 1.0));
    }
    Ok(scores)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiStats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub voxels: usize,
}

/// Statistics over voxels whose centres lie inside the sphere.
pub fn roi_stats(volume: &Volume, center: Point3, diameter_mm: f64) -> Result<RoiStats> {
    let grid = volume.grid();
    let r2 = (diameter_mm / 2.0) * (diameter_mm / 2.0);
    let [nd, nh, nw] = grid.dims();
    let mut values = Vec::new();
    for d in 0..nd {
        for h in 0..nh {
            for w in 0..nw {
                let idx = VoxelIndex::new(d, h, w);
                let p = grid.voxel_center(idx);
                if (p - center).dot(p - center) <= r2 {
                    values.push(volume.get(idx));
                }
            }
        }
    }
    if values.is_empty() {
        return Err(Error::EmptyRoi);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(RoiStats { mean, std: var.sqrt(), min, max, voxels: values.len() })
}

/// Trilinear samples at `samples` equally spaced points from start to end.
/// Positions are millimetres from the start point.
pub fn line_profile(
    volume: &Volume,
    start: Point3,
    end: Point3,
    samples: usize,
) -> Result<Vec<(f64, f64)>> {
    if samples < 2 {
        return Err(Error::InvalidArgument("need at least 2 profile samples".into()));
    }
    let grid = volume.grid();
    let lo = grid.extent_min();
    let hi = grid.extent_max();
    let inside = |p: Point3| {
        p.x >= lo.x && p.x <= hi.x && p.y >= lo.y && p.y <= hi.y && p.z >= lo.z && p.z <= hi.z
    };
    if !inside(start) || !inside(end) {
        return Err(Error::OutOfGrid);
    }
    let length = (end - start).norm();
    let dims = grid.dims();
    let size = grid.voxel_size();
    let origin = grid.origin();
    let mut out = Vec::with_capacity(samples);
    for i in 0..samples {
        let t = i as f64 / (samples - 1) as f64;
        let p = start + (end - start) * t;
        // Fractional lattice coordinates, clamped at the centre lattice edge.
        let cell = |f: f64, n: usize| -> (usize, f64) {
            if n == 1 {
                return (0, 0.0);
            }
            let i0 = f.floor().clamp(0.0, (n - 2) as f64);
            (i0 as usize, (f - i0).clamp(0.0, 1.0))
        };
        let (iw, tw) = cell((p.x - origin.x) / size[2], dims[2]);
        let (ih, th) = cell((p.y - origin.y) / size[1], dims[1]);
        let (id, td) = cell((p.z - origin.z) / size[0], dims[0]);
        let at = |dd: usize, hh: usize, ww: usize| {
            volume.get(VoxelIndex::new(
                dd.min(dims[0] - 1),
                hh.min(dims[1] - 1),
                ww.min(dims[2] - 1),
            ))
        };
        let mut value = 0.0;
        for (dz, wz) in [(0, 1.0 - td), (1, td)] {
            for (dy, wy) in [(0, 1.0 - th), (1, th)] {
                for (dx, wx) in [(0, 1.0 - tw), (1, tw)] {
                    let wgt = wz * wy * wx;
                    if wgt != 0.0 {
                        value += wgt * at(id + dz, ih + dy, iw + dx);
                    }
                }
            }
        }
        out.push((t * length, value));
    }
    Ok(out)
}

/// Full width at half maximum of a single-peaked profile. The baseline is
/// the smaller of the two endpoint values; crossings are found by linear
/// interpolation between samples.
pub fn fwhm(profile: &[(f64, f64)]) -> Result<f64> {
    if profile.len() < 3 {
        return Err(Error::NotMeasurable { side: "either" });
    }
    let baseline = profile[0].1.min(profile[profile.len() - 1].1);
    let (peak_idx, &(_, peak)) = profile
        .iter()
        .enumerate()
        .max_by(|a, b| a.1 .1.partial_cmp(&b.1 .1).expect("finite profile"))
        .expect("non-empty");
    if peak <= baseline {
        return Err(Error::NotMeasurable { side: "either" });
    }
    let half = baseline + (peak - baseline) / 2.0;

    let cross = |i: usize, j: usize| -> f64 {
        let (x0, v0) = profile[i];
        let (x1, v1) = profile[j];
        x0 + (half - v0) / (v1 - v0) * (x1 - x0)
    };
    let mut left = None;
    for i in (0..peak_idx).rev() {
        if profile[i].1 <= half {
            left = Some(cross(i, i + 1));
            break;
        }
    }
    let Some(left) = left else {
        return Err(Error::NotMeasurable { side: "left" });
    };
    let mut right = None;
    for i in peak_idx + 1..profile.len() {
        if profile[i].1 <= half {
            right = Some(cross(i - 1, i));
            break;
        }
    }
    let Some(right) = right else {
        return Err(Error::NotMeasurable { side: "right" });
    };
    Ok(right - left)
}

#[derive(Clone, Copy, Debug)]
pub struct SliceMetrics {
    pub slice: usize,
    pub mae: f64,
    pub ms_ssim: f64,
}

/// Per-slice and per-study evaluation record.
#[derive(Clone, Debug, Default)]
pub struct MetricsReport {
    pub per_slice: Vec<SliceMetrics>,
    pub mean_mae: f64,
    pub mean_ms_ssim: f64,
    pub roi: Option<RoiStats>,
    pub fwhm_mm: Option<f64>,
}

impl MetricsReport {
    pub fn evaluate(recon: &Volume, target: &Volume) -> Result<Self> {
        if !recon.same_grid(target) {
            return Err(Error::IncompatibleGrid("evaluate needs one shared grid".into()));
        }
        let [nd, nh, nw] = recon.grid().dims();
        let plane = nh * nw;
        let ssim = ms_ssim_slices(recon, target)?;
        let mut per_slice = Vec::with_capacity(nd);
        for d in 0..nd {
            let a = &recon.data()[d * plane..(d + 1) * plane];
            let b = &target.data()[d * plane..(d + 1) * plane];
            let mae_slice =
                a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / plane as f64;
            per_slice.push(SliceMetrics { slice: d, mae: mae_slice, ms_ssim: ssim[d] });
        }
        let n = per_slice.len() as f64;
        let mean_mae = per_slice.iter().map(|s| s.mae).sum::<f64>() / n;
        let mean_ms_ssim = per_slice.iter().map(|s| s.ms_ssim).sum::<f64>() / n;
        Ok(Self { per_slice, mean_mae, mean_ms_ssim, roi: None, fwhm_mm: None })
    }

    /// One record per line; `slice` rows then a `summary` row, with the
    /// optional ROI and FWHM rows at the end.
    pub fn to_text(&self) -> String {
        let mut out = String::from("metrics-report v1\n");
        out.push_str(&format!("slices {}\n", self.per_slice.len()));
        for s in &self.per_slice {
            out.push_str(&format!(
                "slice {} mae {:.9} ms_ssim {:.9}\n",
                s.slice, s.mae, s.ms_ssim
            ));
        }
        out.push_str(&format!(
            "summary mae {:.9} ms_ssim {:.9}\n",
            self.mean_mae, self.mean_ms_ssim
        ));
        if let Some(roi) = &self.roi {
            out.push_str(&format!(
                "roi mean {:.6} std {:.6} min {:.6} max {:.6} voxels {}\n",
                roi.mean, roi.std, roi.min, roi.max, roi.voxels
            ));
        }
        if let Some(f) = self.fwhm_mm {
            out.push_str(&format!("fwhm_mm {f:.6}\n"));
        }
        out
    }

    /// Plot-ready column data: slice, mae, ms_ssim.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("slice,mae,ms_ssim\n");
        for s in &self.per_slice {
            out.push_str(&format!("{},{:.9},{:.9}\n", s.slice, s.mae, s.ms_ssim));
        }
        out
    }
}
