//! TOF list-mode event simulation from voxelized activity/attenuation maps.
//!
//! Emission voxels are drawn proportionally to activity, photon pairs fly
//! back-to-back along an isotropic line, endpoints snap to the nearest
//! crystals, and events survive with probability exp(-integral of mu) times
//! the pair efficiency. Arrival-time differences come from the exact inverse
//! of the most-likely-annihilation-position formula, optionally blurred by
//! the scanner timing resolution.

use crate::error::{Error, Result};
use crate::geometry::{
    crystal_position, CrystalAddress, Point3, ScannerGeometry, VoxelIndex,
    SPEED_OF_LIGHT_MM_PER_PS,
};
use crate::parallel;
use crate::phantom::line_integral;
use crate::volume::Volume;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Gaussian FWHM to sigma.
pub const FWHM_TO_SIGMA: f64 = 2.354_820_045_030_949_3;

/// One coincidence: two crystal addresses, arrival-time difference t1 - t2
/// in picoseconds, and the prompt/delay flag.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ListModeEvent {
    pub a1: CrystalAddress,
    pub a2: CrystalAddress,
    pub delta_t_ps: f32,
    pub is_prompt: bool,
}

/// Per-crystal relative detection efficiency in (0, 1], ring-major.
#[derive(Clone, Debug)]
pub struct EfficiencyTable {
    crystals_per_ring: usize,
    values: Vec<f64>,
}

impl EfficiencyTable {
    pub fn uniform(geometry: &ScannerGeometry) -> Self {
        Self {
            crystals_per_ring: geometry.crystals_per_ring,
            values: vec![1.0; geometry.num_crystals()],
        }
    }

    pub fn from_values(geometry: &ScannerGeometry, values: Vec<f64>) -> Result<Self> {
        if values.len() != geometry.num_crystals() {
            return Err(Error::InvalidEfficiency(format!(
                "expected {} entries, got {}",
                geometry.num_crystals(),
                values.len()
            )));
        }
        for (i, &v) in values.iter().enumerate() {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::InvalidEfficiency(format!(
                    "entry {i} is {v}, must be in (0, 1]"
                )));
            }
        }
        Ok(Self { crystals_per_ring: geometry.crystals_per_ring, values })
    }

    /// Random efficiencies in [lo, hi], for tests and demos.
    pub fn random(geometry: &ScannerGeometry, seed: u64, lo: f64, hi: f64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..geometry.num_crystals())
            .map(|_| rng.random_range(lo..=hi))
            .collect();
        Self::from_values(geometry, values)
    }

    pub fn value(&self, addr: CrystalAddress) -> f64 {
        self.values[addr.ring as usize * self.crystals_per_ring + addr.crystal as usize]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn matches(&self, geometry: &ScannerGeometry) -> bool {
        self.crystals_per_ring == geometry.crystals_per_ring
            && self.values.len() == geometry.num_crystals()
    }
}

#[derive(Clone, Debug)]
pub struct SimulationConfig {
    /// Number of prompt events to emit; met exactly.
    pub target_prompts: u64,
    /// Delays are emitted at this fraction of the prompt count, in [0, 1).
    pub randoms_fraction: f64,
    pub seed: u64,
    /// Generation shards; the merged stream is deterministic for a fixed
    /// (seed, shards) pair. Shards run in parallel when available.
    pub shards: usize,
    pub attenuation: bool,
    pub timing_blur: bool,
    /// Jitter the annihilation point uniformly inside the source voxel.
    /// When off, emissions happen at voxel centres (point sources), which
    /// keeps blur-free events inside their source voxel.
    pub jitter_in_voxel: bool,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            target_prompts: 100_000,
            randoms_fraction: 0.0,
            seed: 0,
            shards: 1,
            attenuation: true,
            timing_blur: true,
            jitter_in_voxel: true,
        }
    }
}

impl SimulationConfig {
    fn validate(&self) -> Result<()> {
        if self.target_prompts < 1 {
            return Err(Error::InvalidConfig("target prompt count must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.randoms_fraction) {
            return Err(Error::InvalidConfig("randoms fraction must be in [0, 1)".into()));
        }
        if self.shards < 1 {
            return Err(Error::InvalidConfig("shard count must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SimulationStats {
    /// Emission attempts, including rejected ones.
    pub attempts: u64,
    /// Attempts whose photon line missed the detector rings.
    pub geometric_rejections: u64,
    /// Attempts rejected by the attenuation/efficiency survival draw.
    pub survival_rejections: u64,
    pub prompts: u64,
    pub delays: u64,
}

/// Arrival-time difference that places the most likely annihilation position
/// at the projection of `p` onto the segment between the two detectors.
pub fn tof_delta_from_position(p: Point3, p1: Point3, p2: Point3) -> Result<f64> {
    let axis = p1 - p2;
    let len = axis.norm();
    if len == 0.0 {
        return Err(Error::DegenerateLor);
    }
    let unit = axis * (1.0 / len);
    let mid = (p1 + p2) * 0.5;
    let along = (p - mid).dot(unit).clamp(-len / 2.0, len / 2.0);
    Ok(2.0 * along / SPEED_OF_LIGHT_MM_PER_PS)
}

/// Keep each event independently with probability `keep_prob`, preserving
/// order. Deterministic for a fixed rng state.
pub fn decimate<R: Rng>(
    events: &[ListModeEvent],
    keep_prob: f64,
    rng: &mut R,
) -> Result<Vec<ListModeEvent>> {
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "keep probability must be in (0, 1], got {keep_prob}"
        )));
    }
    Ok(events
        .iter()
        .filter(|_| rng.random::<f64>() < keep_prob)
        .copied()
        .collect())
}

struct EmissionSampler {
    cumulative: Vec<f64>,
    total: f64,
}

impl EmissionSampler {
    fn new(activity: &Volume) -> Result<Self> {
        let mut cumulative = Vec::with_capacity(activity.data().len());
        let mut total = 0.0;
        for &a in activity.data() {
            total += a.max(0.0);
            cumulative.push(total);
        }
        if !(total > 0.0) {
            return Err(Error::InvalidInput("activity volume is all zero".into()));
        }
        Ok(Self { cumulative, total })
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        let r = rng.random_range(0.0..self.total);
        // First index with cumulative > r; zero-activity voxels repeat the
        // previous cumulative value and can never be selected.
        self.cumulative
            .partition_point(|&c| c <= r)
            .min(self.cumulative.len() - 1)
    }
}

fn nearest_crystal(geometry: &ScannerGeometry, p: Point3) -> Option<CrystalAddress> {
    let ring_f = p.z / geometry.crystal_axial_pitch_mm
        + (geometry.num_rings as f64 - 1.0) / 2.0;
    let ring = ring_f.round();
    if ring < 0.0 || ring >= geometry.num_rings as f64 {
        return None;
    }
    let n = geometry.crystals_per_ring as f64;
    let angle = p.y.atan2(p.x);
    let c = (angle / (2.0 * std::f64::consts::PI) * n).round();
    let crystal = (c.rem_euclid(n)) as u16;
    Some(CrystalAddress::new(ring as u16, crystal))
}

/// Upper bound on |dir_z| for photon lines that can reach the rings from any
/// point of the grid; directions outside the band are certain geometric
/// rejections, so sampling is restricted to it (exact conditioning).
fn axial_direction_band(geometry: &ScannerGeometry, activity: &Volume) -> f64 {
    let grid = activity.grid();
    let lo = grid.extent_min();
    let hi = grid.extent_max();
    let z_max = lo.z.abs().max(hi.z.abs());
    let r_xy = grid.max_transaxial_extent();
    let reach = geometry.axial_half_extent() + geometry.crystal_axial_pitch_mm + z_max;
    let min_path = (geometry.ring_radius_mm - r_xy).max(1.0);
    let tan = reach / min_path * 1.05;
    (tan / (1.0 + tan * tan).sqrt()).min(1.0)
}

struct ShardPlan {
    prompts: u64,
    delays: u64,
}

fn plan_shards(config: &SimulationConfig) -> Vec<ShardPlan> {
    let n = config.target_prompts;
    let s = config.shards as u64;
    let total_delays = (config.randoms_fraction * n as f64).round() as u64;
    let mut plans = Vec::with_capacity(config.shards);
    let mut prompt_cum = 0u64;
    let mut delay_cum = 0u64;
    for i in 0..s {
        let prompt_next = n * (i + 1) / s;
        let delay_next = total_delays * (i + 1) / s;
        plans.push(ShardPlan {
            prompts: prompt_next - prompt_cum,
            delays: delay_next - delay_cum,
        });
        prompt_cum = prompt_next;
        delay_cum = delay_next;
    }
    plans
}

/// Simulate a list-mode stream. Prompt count equals the configured target
/// exactly; delays are uniform crystal pairs with uniform in-bore arrival
/// differences at the configured fraction of the prompt count.
pub fn simulate_events(
    activity: &Volume,
    mu: &Volume,
    geometry: &ScannerGeometry,
    efficiencies: &EfficiencyTable,
    config: &SimulationConfig,
) -> Result<(Vec<ListModeEvent>, SimulationStats)> {
    config.validate()?;
    if !activity.same_grid(mu) {
        return Err(Error::IncompatibleGrid(
            "activity and attenuation must share one grid".into(),
        ));
    }
    if !activity.grid().fits_inside(geometry) {
        return Err(Error::InvalidGrid(
            "grid does not fit inside the scanner bore".into(),
        ));
    }
    if !efficiencies.matches(geometry) {
        return Err(Error::InvalidEfficiency(
            "efficiency table does not match the geometry".into(),
        ));
    }
    let sampler = EmissionSampler::new(activity)?;

    let mut positions = Vec::with_capacity(geometry.num_crystals());
    for ring in 0..geometry.num_rings as u16 {
        for crystal in 0..geometry.crystals_per_ring as u16 {
            positions.push(crystal_position(geometry, CrystalAddress::new(ring, crystal))?);
        }
    }
    let pos = |a: CrystalAddress| positions[geometry.crystal_index(a)];

    let z_band = axial_direction_band(geometry, activity);
    let sigma_ps = geometry.timing_resolution_fwhm_ps / FWHM_TO_SIGMA;
    let blur = Normal::new(0.0, sigma_ps).expect("positive sigma");
    let plans = plan_shards(config);

    let shard_results: Vec<(Vec<ListModeEvent>, SimulationStats)> =
        parallel::map_indexed(plans.len(), |shard| {
            let plan = &plans[shard];
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(shard as u64 + 1);
            let mut events = Vec::with_capacity((plan.prompts + plan.delays) as usize);
            let mut stats = SimulationStats::default();
            let grid = activity.grid();
            let size = grid.voxel_size();
            let dims = grid.dims();

            for _ in 0..plan.prompts {
                loop {
                    stats.attempts += 1;
                    let flat = sampler.sample(&mut rng);
                    let d = flat / (dims[1] * dims[2]);
                    let rem = flat % (dims[1] * dims[2]);
                    let idx = VoxelIndex::new(d, rem / dims[2], rem % dims[2]);
                    let mut p = grid.voxel_center(idx);
                    if config.jitter_in_voxel {
                        p = p + Point3::new(
                            rng.random_range(-0.5..0.5) * size[2],
                            rng.random_range(-0.5..0.5) * size[1],
                            rng.random_range(-0.5..0.5) * size[0],
                        );
                    }
                    // Isotropic direction restricted to the reachable band.
                    let dz = rng.random_range(-z_band..z_band);
                    let phi = rng.random_range(0.0..std::f64::consts::TAU);
                    let sxy = (1.0 - dz * dz).sqrt();
                    let dir = Point3::new(sxy * phi.cos(), sxy * phi.sin(), dz);

                    let a = dir.x * dir.x + dir.y * dir.y;
                    if a < 1e-12 {
                        stats.geometric_rejections += 1;
                        continue;
                    }
                    let b = 2.0 * (p.x * dir.x + p.y * dir.y);
                    let c = p.x * p.x + p.y * p.y
                        - geometry.ring_radius_mm * geometry.ring_radius_mm;
                    let disc = b * b - 4.0 * a * c;
                    if disc <= 0.0 {
                        stats.geometric_rejections += 1;
                        continue;
                    }
                    let sq = disc.sqrt();
                    let t1 = (-b + sq) / (2.0 * a);
                    let t2 = (-b - sq) / (2.0 * a);
                    let e1 = p + dir * t1;
                    let e2 = p + dir * t2;
                    let (Some(a1), Some(a2)) =
                        (nearest_crystal(geometry, e1), nearest_crystal(geometry, e2))
                    else {
                        stats.geometric_rejections += 1;
                        continue;
                    };
                    if a1 == a2 {
                        stats.geometric_rejections += 1;
                        continue;
                    }
                    let (p1, p2) = (pos(a1), pos(a2));

                    let mut survival = efficiencies.value(a1) * efficiencies.value(a2);
                    if config.attenuation {
                        survival *= (-line_integral(mu, p1, p2)).exp();
                    }
                    if rng.random::<f64>() >= survival {
                        stats.survival_rejections += 1;
                        continue;
                    }

                    let mut delta_t = tof_delta_from_position(p, p1, p2)
                        .expect("distinct crystals");
                    if config.timing_blur {
                        delta_t += blur.sample(&mut rng);
                    }
                    // Keep the implied annihilation between the detectors.
                    let bound = p1.distance(p2) / SPEED_OF_LIGHT_MM_PER_PS;
                    delta_t = delta_t.clamp(-bound, bound);

                    events.push(ListModeEvent {
                        a1,
                        a2,
                        delta_t_ps: delta_t as f32,
                        is_prompt: true,
                    });
                    stats.prompts += 1;
                    break;
                }
            }

            for _ in 0..plan.delays {
                let (a1, a2) = loop {
                    let a1 = CrystalAddress::new(
                        rng.random_range(0..geometry.num_rings as u16),
                        rng.random_range(0..geometry.crystals_per_ring as u16),
                    );
                    let a2 = CrystalAddress::new(
                        rng.random_range(0..geometry.num_rings as u16),
                        rng.random_range(0..geometry.crystals_per_ring as u16),
                    );
                    if a1 != a2 {
                        break (a1, a2);
                    }
                };
                let bound = pos(a1).distance(pos(a2)) / SPEED_OF_LIGHT_MM_PER_PS;
                events.push(ListModeEvent {
                    a1,
                    a2,
                    delta_t_ps: rng.random_range(-bound..bound) as f32,
                    is_prompt: false,
                });
                stats.delays += 1;
            }
            (events, stats)
        });

    let mut events = Vec::with_capacity(
        shard_results.iter().map(|(e, _)| e.len()).sum(),
    );
    let mut stats = SimulationStats::default();
    for (shard_events, s) in shard_results {
        events.extend(shard_events);
        stats.attempts += s.attempts;
        stats.geometric_rejections += s.geometric_rejections;
        stats.survival_rejections += s.survival_rejections;
        stats.prompts += s.prompts;
        stats.delays += s.delays;
    }
    Ok((events, stats))
}
