use crate::error::{Error, Result};

/// Spatial extents `(D, H, W)`.
pub type Dims = [usize; 3];

pub fn voxel_count(d: Dims) -> usize {
    d[0] * d[1] * d[2]
}

/// Binary volume stored as bytes in `{0, 1}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    dims: Dims,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(dims: Dims, data: Vec<u8>) -> Result<Self> {
        if data.len() != voxel_count(dims) {
            return Err(Error::shape(
                "mask",
                format!("{dims:?} needs {} voxels, got {}", voxel_count(dims), data.len()),
            ));
        }
        if let Some(&bad) = data.iter().find(|&&v| v > 1) {
            return Err(Error::invalid(format!("mask value {bad} is not binary")));
        }
        Ok(Mask { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        Mask {
            dims,
            data: vec![0; voxel_count(dims)],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> bool {
        self.data[self.index(z, y, x)] != 0
    }

    pub fn set(&mut self, z: usize, y: usize, x: usize, on: bool) {
        let i = self.index(z, y, x);
        self.data[i] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Cube of side `extent` starting at `origin`.
    pub fn crop(&self, origin: Dims, extent: usize) -> Mask {
        let mut out = Vec::with_capacity(extent.pow(3));
        for z in origin[0]..origin[0] + extent {
            for y in origin[1]..origin[1] + extent {
                let row = self.index(z, y, origin[2]);
                out.extend_from_slice(&self.data[row..row + extent]);
            }
        }
        Mask {
            dims: [extent; 3],
            data: out,
        }
    }
}
