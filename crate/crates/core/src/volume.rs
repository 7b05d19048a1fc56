//! Generic 3D scalar field on a voxel grid.

use crate::error::{Error, Result};
use crate::geometry::{VoxelGrid, VoxelIndex};

/// Physical unit of the voxel values, carried through file I/O.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unit {
    /// Weighted counts or other unitless quantities.
    Dimensionless,
    /// Activity concentration.
    BqPerMl,
    /// Linear attenuation coefficient.
    PerMm,
}

impl Unit {
    pub fn tag(self) -> u8 {
        match self {
            Unit::Dimensionless => 0,
            Unit::BqPerMl => 1,
            Unit::PerMm => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Unit::Dimensionless),
            1 => Ok(Unit::BqPerMl),
            2 => Ok(Unit::PerMm),
            other => Err(Error::Format(format!("unknown unit tag {other}"))),
        }
    }
}

/// Scalar volume stored depth-major: index = (d * H + h) * W + w.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    grid: VoxelGrid,
    unit: Unit,
    data: Vec<f64>,
}

impl Volume {
    pub fn zeros(grid: VoxelGrid, unit: Unit) -> Self {
        let n = grid.num_voxels();
        Self { grid, unit, data: vec![0.0; n] }
    }

    pub fn from_data(grid: VoxelGrid, unit: Unit, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.num_voxels() {
            return Err(Error::ShapeMismatch(format!(
                "volume data length {} does not match grid with {} voxels",
                data.len(),
                grid.num_voxels()
            )));
        }
        Ok(Self { grid, unit, data })
    }

    pub fn grid(&self) -> &VoxelGrid {
        &self.grid
    }

    pub fn unit(&self) -> Unit {
        self.unit
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, idx: VoxelIndex) -> f64 {
        self.data[self.grid.flat(idx)]
    }

    pub fn set(&mut self, idx: VoxelIndex, value: f64) {
        let i = self.grid.flat(idx);
        self.data[i] = value;
    }

    pub fn same_grid(&self, other: &Volume) -> bool {
        self.grid == other.grid
    }
}
