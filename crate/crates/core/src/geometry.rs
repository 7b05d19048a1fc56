//! Cylindrical scanner model and the voxel grid it images onto.
//!
//! Coordinates are millimetres. The scanner axis is z; transaxial planes are
//! x/y. Grid indices are (d, h, w) where d maps to z, h to y and w to x.

use crate::error::{Error, Result};

/// Speed of light in mm per picosecond.
pub const SPEED_OF_LIGHT_MM_PER_PS: f64 = 0.299792458;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, other: Point3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn distance(self, other: Point3) -> f64 {
        (self - other).norm()
    }
}

impl std::ops::Add for Point3 {
    type Output = Point3;
    fn add(self, o: Point3) -> Point3 {
        Point3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl std::ops::Sub for Point3 {
    type Output = Point3;
    fn sub(self, o: Point3) -> Point3 {
        Point3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl std::ops::Mul<f64> for Point3 {
    type Output = Point3;
    fn mul(self, s: f64) -> Point3 {
        Point3::new(self.x * s, self.y * s, self.z * s)
    }
}

/// Cylindrical detector: `num_rings` rings of point-like crystals on a
/// cylinder of radius `ring_radius_mm`, centred axially on z = 0.
#[derive(Clone, Debug, PartialEq)]
pub struct ScannerGeometry {
    pub ring_radius_mm: f64,
    pub num_rings: usize,
    pub crystals_per_ring: usize,
    pub crystal_axial_pitch_mm: f64,
    pub timing_resolution_fwhm_ps: f64,
}

impl ScannerGeometry {
    pub fn new(
        ring_radius_mm: f64,
        num_rings: usize,
        crystals_per_ring: usize,
        crystal_axial_pitch_mm: f64,
        timing_resolution_fwhm_ps: f64,
    ) -> Result<Self> {
        if !(ring_radius_mm > 0.0) {
            return Err(Error::InvalidGeometry("ring radius must be positive".into()));
        }
        if num_rings < 1 {
            return Err(Error::InvalidGeometry("need at least one ring".into()));
        }
        if crystals_per_ring < 8 || crystals_per_ring % 2 != 0 {
            return Err(Error::InvalidGeometry(
                "crystals per ring must be even and at least 8".into(),
            ));
        }
        if !(crystal_axial_pitch_mm > 0.0) {
            return Err(Error::InvalidGeometry("axial pitch must be positive".into()));
        }
        if !(timing_resolution_fwhm_ps > 0.0) {
            return Err(Error::InvalidGeometry(
                "timing resolution must be positive".into(),
            ));
        }
        Ok(Self {
            ring_radius_mm,
            num_rings,
            crystals_per_ring,
            crystal_axial_pitch_mm,
            timing_resolution_fwhm_ps,
        })
    }

    /// Desk-scale geometry: 400 mm radius, 192 crystals per ring, 3.2 mm
    /// pitch, 214 ps timing FWHM.
    pub fn desk(num_rings: usize) -> Self {
        Self::new(400.0, num_rings, 192, 3.2, 214.0).expect("desk geometry is valid")
    }

    pub fn num_crystals(&self) -> usize {
        self.num_rings * self.crystals_per_ring
    }

    pub fn contains(&self, addr: CrystalAddress) -> bool {
        (addr.ring as usize) < self.num_rings
            && (addr.crystal as usize) < self.crystals_per_ring
    }

    /// Flat index of a crystal, ring-major.
    pub fn crystal_index(&self, addr: CrystalAddress) -> usize {
        addr.ring as usize * self.crystals_per_ring + addr.crystal as usize
    }

    /// Axial extent covered by the rings: centres of the first and last ring.
    pub fn axial_half_extent(&self) -> f64 {
        (self.num_rings as f64 - 1.0) / 2.0 * self.crystal_axial_pitch_mm
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CrystalAddress {
    pub ring: u16,
    pub crystal: u16,
}

impl CrystalAddress {
    pub const fn new(ring: u16, crystal: u16) -> Self {
        Self { ring, crystal }
    }
}

/// Front-face centre of a crystal.
///
/// Crystal 0 sits at transaxial angle zero (+x); rings are centred so the
/// detector mid-plane is z = 0.
pub fn crystal_position(geometry: &ScannerGeometry, addr: CrystalAddress) -> Result<Point3> {
    if !geometry.contains(addr) {
        return Err(Error::InvalidAddress {
            ring: addr.ring as usize,
            crystal: addr.crystal as usize,
        });
    }
    let angle = 2.0 * std::f64::consts::PI * addr.crystal as f64
        / geometry.crystals_per_ring as f64;
    let z = (addr.ring as f64 - (geometry.num_rings as f64 - 1.0) / 2.0)
        * geometry.crystal_axial_pitch_mm;
    Ok(Point3::new(
        geometry.ring_radius_mm * angle.cos(),
        geometry.ring_radius_mm * angle.sin(),
        z,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct VoxelIndex {
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl VoxelIndex {
    pub const fn new(d: usize, h: usize, w: usize) -> Self {
        Self { d, h, w }
    }
}

/// Regular voxel lattice. `origin` is the centre of voxel (0, 0, 0);
/// `voxel_size` is ordered (d, h, w), i.e. (z, y, x) extents.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    dims: [usize; 3],
    voxel_size: [f64; 3],
    origin: Point3,
}

impl VoxelGrid {
    pub fn new(dims: [usize; 3], voxel_size: [f64; 3], origin: Point3) -> Result<Self> {
        if dims.iter().any(|&n| n < 1) {
            return Err(Error::InvalidGrid("all dims must be at least 1".into()));
        }
        if voxel_size.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidGrid("voxel sizes must be positive".into()));
        }
        Ok(Self { dims, voxel_size, origin })
    }

    /// Grid centred on the coordinate origin.
    pub fn centered(dims: [usize; 3], voxel_size: [f64; 3]) -> Result<Self> {
        let origin = Point3::new(
            -(dims[2] as f64 - 1.0) / 2.0 * voxel_size[2],
            -(dims[1] as f64 - 1.0) / 2.0 * voxel_size[1],
            -(dims[0] as f64 - 1.0) / 2.0 * voxel_size[0],
        );
        Self::new(dims, voxel_size, origin)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        self.voxel_size
    }

    pub fn origin(&self) -> Point3 {
        self.origin
    }

    pub fn num_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn flat(&self, idx: VoxelIndex) -> usize {
        (idx.d * self.dims[1] + idx.h) * self.dims[2] + idx.w
    }

    pub fn voxel_center(&self, idx: VoxelIndex) -> Point3 {
        Point3::new(
            self.origin.x + idx.w as f64 * self.voxel_size[2],
            self.origin.y + idx.h as f64 * self.voxel_size[1],
            self.origin.z + idx.d as f64 * self.voxel_size[0],
        )
    }

    /// Outer corner of the grid extent (half a voxel beyond the first centre).
    pub fn extent_min(&self) -> Point3 {
        Point3::new(
            self.origin.x - self.voxel_size[2] / 2.0,
            self.origin.y - self.voxel_size[1] / 2.0,
            self.origin.z - self.voxel_size[0] / 2.0,
        )
    }

    pub fn extent_max(&self) -> Point3 {
        Point3::new(
            self.origin.x + (self.dims[2] as f64 - 0.5) * self.voxel_size[2],
            self.origin.y + (self.dims[1] as f64 - 0.5) * self.voxel_size[1],
            self.origin.z + (self.dims[0] as f64 - 0.5) * self.voxel_size[0],
        )
    }

    /// Largest transaxial distance from the axis to a grid corner. Used to
    /// check that the grid fits inside the scanner bore.
    pub fn max_transaxial_extent(&self) -> f64 {
        let lo = self.extent_min();
        let hi = self.extent_max();
        let x = lo.x.abs().max(hi.x.abs());
        let y = lo.y.abs().max(hi.y.abs());
        (x * x + y * y).sqrt()
    }

    pub fn fits_inside(&self, geometry: &ScannerGeometry) -> bool {
        self.max_transaxial_extent() < geometry.ring_radius_mm
    }

    /// Index of the voxel whose centre is nearest to `p`, or `None` when the
    /// point falls outside the grid extent.
    ///
    /// Ties at the midpoint between two centres round half away from zero,
    /// which for in-grid points means the higher index wins.
    pub fn voxel_of_point(&self, p: Point3) -> Option<VoxelIndex> {
        let fw = (p.x - self.origin.x) / self.voxel_size[2];
        let fh = (p.y - self.origin.y) / self.voxel_size[1];
        let fd = (p.z - self.origin.z) / self.voxel_size[0];
        let (iw, ih, id) = (fw.round(), fh.round(), fd.round());
        let inside = |i: f64, n: usize| i >= 0.0 && i < n as f64;
        if inside(id, self.dims[0]) && inside(ih, self.dims[1]) && inside(iw, self.dims[2]) {
            Some(VoxelIndex::new(id as usize, ih as usize, iw as usize))
        } else {
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single_ring() -> ScannerGeometry {
        ScannerGeometry::new(400.0, 1, 8, 3.2, 214.0).unwrap()
    }

    #[test]
    fn crystal_zero_sits_on_positive_x() {
        let p = crystal_position(&single_ring(), CrystalAddress::new(0, 0)).unwrap();
        assert!((p.x - 400.0).abs() < 1e-12);
        assert!(p.y.abs() < 1e-12);
        assert!(p.z.abs() < 1e-12);
    }

    #[test]
    fn quarter_turn_lands_on_positive_y() {
        let p = crystal_position(&single_ring(), CrystalAddress::new(0, 2)).unwrap();
        assert!(p.x.abs() < 1e-10);
        assert!((p.y - 400.0).abs() < 1e-10);
    }

    #[test]
    fn two_ring_axial_centering() {
        let geom = ScannerGeometry::new(400.0, 2, 8, 3.2, 214.0).unwrap();
        let p = crystal_position(&geom, CrystalAddress::new(1, 0)).unwrap();
        assert!((p.z - 1.6).abs() < 1e-12);
        let p0 = crystal_position(&geom, CrystalAddress::new(0, 0)).unwrap();
        assert!((p0.z + 1.6).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_address_is_an_error() {
        let geom = single_ring();
        assert!(crystal_position(&geom, CrystalAddress::new(1, 0)).is_err());
        assert!(crystal_position(&geom, CrystalAddress::new(0, 8)).is_err());
    }

    #[test]
    fn opposing_crystals_span_the_bore() {
        let geom = ScannerGeometry::new(400.0, 1, 192, 3.2, 214.0).unwrap();
        for c in 0..96u16 {
            let a = crystal_position(&geom, CrystalAddress::new(0, c)).unwrap();
            let b = crystal_position(&geom, CrystalAddress::new(0, c + 96)).unwrap();
            assert!((a.distance(b) - 800.0).abs() < 1e-9);
        }
    }

    #[test]
    fn crystal_positions_are_injective() {
        let geom = ScannerGeometry::new(400.0, 4, 32, 3.2, 214.0).unwrap();
        let mut seen = Vec::new();
        for r in 0..4u16 {
            for c in 0..32u16 {
                let p = crystal_position(&geom, CrystalAddress::new(r, c)).unwrap();
                for q in &seen {
                    assert!(p.distance(*q) > 1e-6);
                }
                seen.push(p);
            }
        }
    }

    #[test]
    fn voxel_center_round_trips() {
        let grid = VoxelGrid::centered([4, 6, 8], [2.0, 3.0, 1.5]).unwrap();
        for d in 0..4 {
            for h in 0..6 {
                for w in 0..8 {
                    let idx = VoxelIndex::new(d, h, w);
                    assert_eq!(grid.voxel_of_point(grid.voxel_center(idx)), Some(idx));
                }
            }
        }
    }

    #[test]
    fn midpoint_between_centers_rounds_up() {
        let grid = VoxelGrid::centered([1, 1, 8], [1.0, 1.0, 2.0]).unwrap();
        let c0 = grid.voxel_center(VoxelIndex::new(0, 0, 3));
        let mid = Point3::new(c0.x + 1.0, c0.y, c0.z);
        assert_eq!(grid.voxel_of_point(mid), Some(VoxelIndex::new(0, 0, 4)));
    }

    #[test]
    fn point_beyond_extent_is_none() {
        let grid = VoxelGrid::centered([4, 4, 4], [2.0, 2.0, 2.0]).unwrap();
        let hi = grid.extent_max();
        assert_eq!(grid.voxel_of_point(Point3::new(hi.x + 1.0, 0.0, 0.0)), None);
        assert_eq!(grid.voxel_of_point(Point3::new(0.0, 0.0, hi.z + 1.0)), None);
    }

    #[test]
    fn nearest_voxel_matches_exhaustive_search() {
        let grid = VoxelGrid::centered([6, 10, 12], [2.5, 1.0, 1.75]).unwrap();
        let lo = grid.extent_min();
        let hi = grid.extent_max();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..10_000 {
            let p = Point3::new(
                rng.random_range(lo.x..hi.x),
                rng.random_range(lo.y..hi.y),
                rng.random_range(lo.z..hi.z),
            );
            let got = grid.voxel_of_point(p).expect("in-grid point");
            let mut best = VoxelIndex::new(0, 0, 0);
            let mut best_d2 = f64::INFINITY;
            for d in 0..6 {
                for h in 0..10 {
                    for w in 0..12 {
                        let idx = VoxelIndex::new(d, h, w);
                        let c = grid.voxel_center(idx);
                        let d2 = (c - p).dot(c - p);
                        if d2 < best_d2 {
                            best_d2 = d2;
                            best = idx;
                        }
                    }
                }
            }
            assert_eq!(got, best, "point {p:?}");
        }
    }
}
