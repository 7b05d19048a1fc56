//! Analytical activity/attenuation phantoms.
//!
//! Shapes are evaluated at voxel centres: a voxel takes the value of the
//! innermost shape containing its centre, or the background, or zero outside
//! every shape.

use crate::error::{Error, Result};
use crate::geometry::{Point3, VoxelGrid, VoxelIndex};
use crate::parallel;
use crate::volume::{Unit, Volume};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Linear attenuation of water at 511 keV, 1/mm.
pub const MU_WATER_PER_MM: f64 = 0.0096;

/// Axis-aligned cylinder along z, with uniform activity and attenuation.
#[derive(Clone, Debug)]
pub struct CylinderSpec {
    pub center: Point3,
    pub radius_mm: f64,
    pub half_length_mm: f64,
    pub activity_bq_ml: f64,
    pub mu_per_mm: f64,
}

impl CylinderSpec {
    fn contains(&self, p: Point3) -> bool {
        let dx = p.x - self.center.x;
        let dy = p.y - self.center.y;
        dx * dx + dy * dy <= self.radius_mm * self.radius_mm
            && (p.z - self.center.z).abs() <= self.half_length_mm
    }
}

#[derive(Clone, Debug)]
pub struct SphereSpec {
    pub center: Point3,
    pub diameter_mm: f64,
    pub activity_bq_ml: f64,
}

impl SphereSpec {
    fn contains(&self, p: Point3) -> bool {
        let r = self.diameter_mm / 2.0;
        (p - self.center).dot(p - self.center) <= r * r
    }
}

/// Ellipsoid with semi-axes (ax, ay, az), rotated by `angle_rad` about z.
#[derive(Clone, Debug)]
pub struct EllipsoidSpec {
    pub center: Point3,
    pub semi_axes_mm: [f64; 3],
    pub angle_rad: f64,
    pub activity_bq_ml: f64,
}

impl EllipsoidSpec {
    fn contains(&self, p: Point3) -> bool {
        let d = p - self.center;
        let (s, c) = self.angle_rad.sin_cos();
        let x = c * d.x + s * d.y;
        let y = -s * d.x + c * d.y;
        let [ax, ay, az] = self.semi_axes_mm;
        (x / ax).powi(2) + (y / ay).powi(2) + (d.z / az).powi(2) <= 1.0
    }

    fn max_radius(&self) -> f64 {
        self.semi_axes_mm[0].max(self.semi_axes_mm[1])
    }
}

#[derive(Clone, Debug)]
pub enum PhantomSpec {
    /// Uniform cylinder: activity and water-like attenuation inside, nothing outside.
    UniformCylinder(CylinderSpec),
    /// Spheres of configurable diameter inside a background cylinder. Spheres
    /// override activity only; attenuation stays at the background value.
    SphereSet {
        background: CylinderSpec,
        spheres: Vec<SphereSpec>,
    },
    /// Randomly placed ellipsoids inside a background cylinder, for training
    /// corpora. Deterministic for a fixed seed.
    RandomEllipsoids {
        background: CylinderSpec,
        count: usize,
        semi_axes_mm: (f64, f64),
        activity_bq_ml: (f64, f64),
        seed: u64,
    },
}

impl PhantomSpec {
    fn validate(&self, grid: &VoxelGrid) -> Result<()> {
        let check_cylinder = |c: &CylinderSpec| -> Result<()> {
            if !(c.radius_mm > 0.0) || !(c.half_length_mm > 0.0) {
                return Err(Error::InvalidSpec("cylinder extents must be positive".into()));
            }
            if c.activity_bq_ml < 0.0 || c.mu_per_mm < 0.0 {
                return Err(Error::InvalidSpec("activity and mu must be non-negative".into()));
            }
            let lo = grid.extent_min();
            let hi = grid.extent_max();
            let inside = c.center.x - c.radius_mm >= lo.x
                && c.center.x + c.radius_mm <= hi.x
                && c.center.y - c.radius_mm >= lo.y
                && c.center.y + c.radius_mm <= hi.y
                && c.center.z - c.half_length_mm >= lo.z
                && c.center.z + c.half_length_mm <= hi.z;
            if !inside {
                return Err(Error::InvalidSpec("cylinder extends outside the grid".into()));
            }
            Ok(())
        };
        match self {
            PhantomSpec::UniformCylinder(c) => check_cylinder(c),
            PhantomSpec::SphereSet { background, spheres } => {
                check_cylinder(background)?;
                for s in spheres {
                    if !(s.diameter_mm > 0.0) {
                        return Err(Error::InvalidSpec("sphere diameter must be positive".into()));
                    }
                    if s.activity_bq_ml < 0.0 {
                        return Err(Error::InvalidSpec("sphere activity must be non-negative".into()));
                    }
                    let r = s.diameter_mm / 2.0;
                    let dx = s.center.x - background.center.x;
                    let dy = s.center.y - background.center.y;
                    let inside = (dx * dx + dy * dy).sqrt() + r <= background.radius_mm
                        && (s.center.z - background.center.z).abs() + r
                            <= background.half_length_mm;
                    if !inside {
                        return Err(Error::InvalidSpec(
                            "sphere extends outside the background cylinder".into(),
                        ));
                    }
                }
                Ok(())
            }
            PhantomSpec::RandomEllipsoids { background, count, semi_axes_mm, activity_bq_ml, .. } => {
                check_cylinder(background)?;
                if *count == 0 {
                    return Err(Error::InvalidSpec("ellipsoid count must be positive".into()));
                }
                if !(semi_axes_mm.0 > 0.0) || semi_axes_mm.1 < semi_axes_mm.0 {
                    return Err(Error::InvalidSpec("bad semi-axis range".into()));
                }
                if activity_bq_ml.0 < 0.0 || activity_bq_ml.1 < activity_bq_ml.0 {
                    return Err(Error::InvalidSpec("bad activity range".into()));
                }
                Ok(())
            }
        }
    }

    fn draw_ellipsoids(&self) -> Vec<EllipsoidSpec> {
        match self {
            PhantomSpec::RandomEllipsoids { background, count, semi_axes_mm, activity_bq_ml, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let mut out = Vec::with_capacity(*count);
                for _ in 0..*count {
                    let semi = [
                        rng.random_range(semi_axes_mm.0..=semi_axes_mm.1),
                        rng.random_range(semi_axes_mm.0..=semi_axes_mm.1),
                        rng.random_range(semi_axes_mm.0..=semi_axes_mm.1),
                    ];
                    let e_radius = semi[0].max(semi[1]);
                    // Keep the whole ellipsoid inside the background cylinder.
                    let max_r = (background.radius_mm - e_radius).max(0.0);
                    let (x, y) = loop {
                        let x = rng.random_range(-max_r..=max_r);
                        let y = rng.random_range(-max_r..=max_r);
                        if x * x + y * y <= max_r * max_r {
                            break (x, y);
                        }
                    };
                    let max_z = (background.half_length_mm - semi[2]).max(0.0);
                    let z = rng.random_range(-max_z..=max_z);
                    out.push(EllipsoidSpec {
                        center: Point3::new(
                            background.center.x + x,
                            background.center.y + y,
                            background.center.z + z,
                        ),
                        semi_axes_mm: semi,
                        angle_rad: rng.random_range(0.0..std::f64::consts::PI),
                        activity_bq_ml: rng.random_range(activity_bq_ml.0..=activity_bq_ml.1),
                    });
                }
                out
            }
            _ => Vec::new(),
        }
    }
}

/// Rasterize a phantom onto `grid`, returning (activity, attenuation).
pub fn build_phantom(spec: &PhantomSpec, grid: &VoxelGrid) -> Result<(Volume, Volume)> {
    spec.validate(grid)?;
    let ellipsoids = spec.draw_ellipsoids();
    let [_, nh, nw] = grid.dims();
    let mut activity = Volume::zeros(grid.clone(), Unit::BqPerMl);
    let mut mu = Volume::zeros(grid.clone(), Unit::PerMm);

    let slice_len = nh * nw;
    let value_at = |p: Point3| -> (f64, f64) {
        match spec {
            PhantomSpec::UniformCylinder(c) => {
                if c.contains(p) {
                    (c.activity_bq_ml, c.mu_per_mm)
                } else {
                    (0.0, 0.0)
                }
            }
            PhantomSpec::SphereSet { background, spheres } => {
                if !background.contains(p) {
                    return (0.0, 0.0);
                }
                let mut a = background.activity_bq_ml;
                for s in spheres {
                    if s.contains(p) {
                        a = s.activity_bq_ml;
                    }
                }
                (a, background.mu_per_mm)
            }
            PhantomSpec::RandomEllipsoids { background, .. } => {
                if !background.contains(p) {
                    return (0.0, 0.0);
                }
                let mut a = background.activity_bq_ml;
                for e in &ellipsoids {
                    if e.contains(p) {
                        a = e.activity_bq_ml;
                    }
                }
                (a, background.mu_per_mm)
            }
        }
    };

    {
        let act = activity.data_mut();
        parallel::for_each_chunk_mut(act, slice_len, |d, slice| {
            for h in 0..nh {
                for w in 0..nw {
                    let p = grid.voxel_center(VoxelIndex::new(d, h, w));
                    slice[h * nw + w] = value_at(p).0;
                }
            }
        });
    }
    {
        let mud = mu.data_mut();
        parallel::for_each_chunk_mut(mud, slice_len, |d, slice| {
            for h in 0..nh {
                for w in 0..nw {
                    let p = grid.voxel_center(VoxelIndex::new(d, h, w));
                    slice[h * nw + w] = value_at(p).1;
                }
            }
        });
    }
    Ok((activity, mu))
}

/// Exact integral of the voxelized field along the segment p1..p2.
///
/// Voxel-boundary ray marching: the contribution of each traversed voxel is
/// its value times the chord length inside it. Returns 0 for segments that
/// miss the grid.
pub fn line_integral(volume: &Volume, p1: Point3, p2: Point3) -> f64 {
    let grid = volume.grid();
    let lo = grid.extent_min();
    let hi = grid.extent_max();
    let dir = p2 - p1;
    let seg_len = dir.norm();
    if seg_len == 0.0 {
        return 0.0;
    }

    // Clip the parametric segment t in [0,1] against the grid box.
    let mut t_enter: f64 = 0.0;
    let mut t_exit: f64 = 1.0;
    for (p, d, l, h) in [
        (p1.x, dir.x, lo.x, hi.x),
        (p1.y, dir.y, lo.y, hi.y),
        (p1.z, dir.z, lo.z, hi.z),
    ] {
        if d == 0.0 {
            if p < l || p > h {
                return 0.0;
            }
        } else {
            let (mut t0, mut t1) = ((l - p) / d, (h - p) / d);
            if t0 > t1 {
                std::mem::swap(&mut t0, &mut t1);
            }
            t_enter = t_enter.max(t0);
            t_exit = t_exit.min(t1);
        }
    }
    if t_enter >= t_exit {
        return 0.0;
    }

    let dims = grid.dims();
    let size = grid.voxel_size();
    // Per-axis state in (w, h, d) = (x, y, z) order.
    let axes = [
        (p1.x, dir.x, lo.x, size[2], dims[2]),
        (p1.y, dir.y, lo.y, size[1], dims[1]),
        (p1.z, dir.z, lo.z, size[0], dims[0]),
    ];
    let mut idx = [0i64; 3];
    let mut t_next = [f64::INFINITY; 3];
    let mut dt = [f64::INFINITY; 3];
    let mut step = [0i64; 3];
    let eps = 1e-12 * (t_exit - t_enter);
    let t_mid0 = t_enter + eps;
    for (a, &(p, d, l, s, n)) in axes.iter().enumerate() {
        let x = p + d * t_mid0;
        let mut i = ((x - l) / s).floor() as i64;
        i = i.clamp(0, n as i64 - 1);
        idx[a] = i;
        if d != 0.0 {
            step[a] = if d > 0.0 { 1 } else { -1 };
            dt[a] = (s / d).abs();
            let boundary = if d > 0.0 {
                l + (i + 1) as f64 * s
            } else {
                l + i as f64 * s
            };
            t_next[a] = (boundary - p) / d;
        }
    }

    let flat = |idx: &[i64; 3]| -> usize {
        ((idx[2] as usize) * dims[1] + idx[1] as usize) * dims[2] + idx[0] as usize
    };
    let data = volume.data();
    let mut total = 0.0;
    let mut t_cur = t_enter;
    loop {
        let a = if t_next[0] <= t_next[1] && t_next[0] <= t_next[2] {
            0
        } else if t_next[1] <= t_next[2] {
            1
        } else {
            2
        };
        let t_stop = t_next[a].min(t_exit);
        if t_stop > t_cur {
            total += data[flat(&idx)] * (t_stop - t_cur) * seg_len;
        }
        if t_next[a] >= t_exit {
            break;
        }
        t_cur = t_next[a];
        idx[a] += step[a];
        let n = [dims[2], dims[1], dims[0]][a] as i64;
        if idx[a] < 0 || idx[a] >= n {
            break;
        }
        t_next[a] += dt[a];
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_64() -> VoxelGrid {
        VoxelGrid::centered([16, 64, 64], [4.0, 4.0, 4.0]).unwrap()
    }

    #[test]
    fn uniform_cylinder_fills_inside_only() {
        let grid = grid_64();
        let spec = PhantomSpec::UniformCylinder(CylinderSpec {
            center: Point3::new(0.0, 0.0, 0.0),
            radius_mm: 100.0,
            half_length_mm: 30.0,
            activity_bq_ml: 5000.0,
            mu_per_mm: MU_WATER_PER_MM,
        });
        let (act, mu) = build_phantom(&spec, &grid).unwrap();
        let dims = grid.dims();
        for d in 0..dims[0] {
            for h in 0..dims[1] {
                for w in 0..dims[2] {
                    let idx = VoxelIndex::new(d, h, w);
                    let p = grid.voxel_center(idx);
                    let inside = p.x * p.x + p.y * p.y <= 100.0 * 100.0 && p.z.abs() <= 30.0;
                    if inside {
                        assert_eq!(act.get(idx), 5000.0);
                        assert_eq!(mu.get(idx), MU_WATER_PER_MM);
                    } else {
                        assert_eq!(act.get(idx), 0.0);
                        assert_eq!(mu.get(idx), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn sphere_profile_width_matches_diameter() {
        let grid = VoxelGrid::centered([16, 64, 64], [2.0, 2.0, 2.0]).unwrap();
        let spec = PhantomSpec::SphereSet {
            background: CylinderSpec {
                center: Point3::new(0.0, 0.0, 0.0),
                radius_mm: 50.0,
                half_length_mm: 14.0,
                activity_bq_ml: 0.0,
                mu_per_mm: MU_WATER_PER_MM,
            },
            spheres: vec![SphereSpec {
                center: Point3::new(0.0, 0.0, 0.0),
                diameter_mm: 25.0,
                activity_bq_ml: 10_000.0,
            }],
        };
        let (act, _) = build_phantom(&spec, &grid).unwrap();
        // Count hot voxels along the central row; full width must be the
        // diameter to within one voxel.
        let dims = grid.dims();
        let d = dims[0] / 2;
        let h = dims[1] / 2;
        let hot: Vec<usize> = (0..dims[2])
            .filter(|&w| act.get(VoxelIndex::new(d, h, w)) > 0.0)
            .collect();
        let width_mm = hot.len() as f64 * 2.0;
        assert!((width_mm - 25.0).abs() <= 2.0, "width {width_mm}");
    }

    #[test]
    fn random_ellipsoids_are_deterministic() {
        let grid = grid_64();
        let spec = PhantomSpec::RandomEllipsoids {
            background: CylinderSpec {
                center: Point3::new(0.0, 0.0, 0.0),
                radius_mm: 100.0,
                half_length_mm: 30.0,
                activity_bq_ml: 1000.0,
                mu_per_mm: MU_WATER_PER_MM,
            },
            count: 6,
            semi_axes_mm: (8.0, 24.0),
            activity_bq_ml: (2000.0, 9000.0),
            seed: 7,
        };
        let (a1, m1) = build_phantom(&spec, &grid).unwrap();
        let (a2, m2) = build_phantom(&spec, &grid).unwrap();
        assert_eq!(a1.data(), a2.data());
        assert_eq!(m1.data(), m2.data());
    }

    #[test]
    fn shape_outside_grid_is_rejected() {
        let grid = grid_64();
        let spec = PhantomSpec::UniformCylinder(CylinderSpec {
            center: Point3::new(0.0, 0.0, 0.0),
            radius_mm: 200.0, // grid is only 128 mm across
            half_length_mm: 10.0,
            activity_bq_ml: 1.0,
            mu_per_mm: 0.0,
        });
        assert!(build_phantom(&spec, &grid).is_err());
    }

    #[test]
    fn uniform_chord_integral_is_value_times_length() {
        let grid = VoxelGrid::centered([16, 64, 64], [4.0, 4.0, 4.0]).unwrap();
        let mut vol = Volume::zeros(grid, Unit::PerMm);
        vol.data_mut().fill(0.0096);
        let got = line_integral(&vol, Point3::new(-50.0, 1.3, 0.7), Point3::new(50.0, 1.3, 0.7));
        assert!((got - 0.96).abs() < 1e-9, "got {got}");
    }

    #[test]
    fn segment_outside_grid_integrates_to_zero() {
        let grid = VoxelGrid::centered([8, 8, 8], [2.0, 2.0, 2.0]).unwrap();
        let mut vol = Volume::zeros(grid, Unit::PerMm);
        vol.data_mut().fill(1.0);
        let got = line_integral(&vol, Point3::new(100.0, 100.0, 0.0), Point3::new(100.0, -100.0, 0.0));
        assert_eq!(got, 0.0);
    }

    #[test]
    fn matches_dense_quadrature_on_random_chords() {
        use rand::Rng;
        use rand::SeedableRng;
        let grid = VoxelGrid::centered([12, 40, 40], [3.0, 2.0, 2.0]).unwrap();
        let mut vol = Volume::zeros(grid.clone(), Unit::PerMm);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for v in vol.data_mut() {
            *v = rng.random_range(0.0..0.02);
        }
        for _ in 0..20 {
            let p1 = Point3::new(
                rng.random_range(-80.0..80.0),
                rng.random_range(-80.0..80.0),
                rng.random_range(-30.0..30.0),
            );
            let p2 = Point3::new(
                rng.random_range(-80.0..80.0),
                rng.random_range(-80.0..80.0),
                rng.random_range(-30.0..30.0),
            );
            let exact = line_integral(&vol, p1, p2);
            // Midpoint quadrature oracle.
            let n = 10_000;
            let mut approx = 0.0;
            let step = 1.0 / n as f64;
            let seg_len = (p2 - p1).norm();
            for i in 0..n {
                let t = (i as f64 + 0.5) * step;
                let p = p1 + (p2 - p1) * t;
                if let Some(idx) = grid.voxel_of_point(p) {
                    // Quadrature should sample the containing voxel, not the
                    // nearest centre; for interior points they coincide.
                    approx += vol.get(idx) * step * seg_len;
                }
            }
            if exact > 1e-6 {
                let rel = (exact - approx).abs() / exact;
                assert!(rel < 0.005, "rel {rel} exact {exact} approx {approx}");
            } else {
                assert!((exact - approx).abs() < 1e-4);
            }
        }
    }
}
