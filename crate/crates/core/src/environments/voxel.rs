//! Occupancy rasterization of a scene into a fixed 32³ grid.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Aabb, Environment};
use crate::error::{KinoError, Result};

pub const GRID_SIZE: usize = 32;
const CELLS: usize = GRID_SIZE * GRID_SIZE * GRID_SIZE;
/// Point samples drawn for an obstacle that fills the whole workspace;
/// smaller obstacles receive a proportional share.
pub const VOXEL_POINTS: usize = 20_000;

const MAGIC: &[u8; 4] = b"KPVX";
const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 4 + 4 + 4 + 6 * 8;

/// Binary occupancy grid indexed `[x][y][z]`; 2D scenes fill every depth
/// layer identically.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub occupancy: Vec<u8>,
    pub origin: [f64; 3],
    pub cell_size: [f64; 3],
    pub dims: u32,
}

impl VoxelGrid {
    pub fn empty_for(env: &Environment) -> Self {
        let mut origin = [0.0; 3];
        let mut cell_size = [1.0; 3];
        for (a, b) in env.workspace.iter().enumerate() {
            origin[a] = b.lo;
            cell_size[a] = b.width() / GRID_SIZE as f64;
        }
        VoxelGrid {
            occupancy: vec![0; CELLS],
            origin,
            cell_size,
            dims: env.dims() as u32,
        }
    }

    #[inline]
    pub fn index(x: usize, y: usize, z: usize) -> usize {
        (x * GRID_SIZE + y) * GRID_SIZE + z
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.occupancy[Self::index(x, y, z)] != 0
    }

    pub fn occupied_count(&self) -> usize {
        self.occupancy.iter().filter(|&&c| c != 0).count()
    }

    pub fn occupied_fraction(&self) -> f64 {
        self.occupied_count() as f64 / CELLS as f64
    }

    /// World coordinates of a cell center.
    pub fn cell_center(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        let c = [x, y, z];
        std::array::from_fn(|a| self.origin[a] + (c[a] as f64 + 0.5) * self.cell_size[a])
    }

    fn cell_of(&self, p: &[f64; 3], axis: usize) -> usize {
        let i = ((p[axis] - self.origin[axis]) / self.cell_size[axis]).floor();
        (i.max(0.0) as usize).min(GRID_SIZE - 1)
    }

    fn mark(&mut self, x: usize, y: usize, z: Option<usize>) {
        match z {
            Some(z) => self.occupancy[Self::index(x, y, z)] = 1,
            None => (0..GRID_SIZE).for_each(|z| self.occupancy[Self::index(x, y, z)] = 1),
        }
    }

    /// Little-endian layout: magic `KPVX`, `u32` version, `u32` workspace
    /// dimension, origin `3 x f64`, cell size `3 x f64`, then 32768 bytes of
    /// occupancy (0 or 1) in `[x][y][z]` order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + CELLS);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.dims.to_le_bytes());
        for v in self.origin.iter().chain(&self.cell_size) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.occupancy);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |r: &str| KinoError::Format {
            what: "voxel grid",
            reason: r.to_string(),
        };
        if bytes.len() != HEADER_LEN + CELLS {
            return Err(bad("unexpected length"));
        }
        if &bytes[..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        if u32_at(4) != VERSION {
            return Err(bad("unsupported version"));
        }
        let dims = u32_at(8);
        let origin = std::array::from_fn(|i| f64_at(12 + 8 * i));
        let cell_size = std::array::from_fn(|i| f64_at(36 + 8 * i));
        let occupancy = bytes[HEADER_LEN..].to_vec();
        if occupancy.iter().any(|&c| c > 1) {
            return Err(bad("occupancy must be 0 or 1"));
        }
        Ok(VoxelGrid {
            occupancy,
            origin,
            cell_size,
            dims,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| KinoError::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| KinoError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| KinoError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn fnv1a(words: impl Iterator<Item = u64>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for w in words {
        for b in w.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Rasterizes the obstacles: every cell whose center lies in an obstacle is
/// occupied, and each obstacle additionally scatters uniform point samples
/// (its volume share of [`VOXEL_POINTS`]) that mark the cells they land in.
///
/// Each obstacle's sample stream depends only on one base seed drawn from
/// `rng` and on the obstacle's own geometry, so adding an obstacle can only
/// add occupied cells.
pub fn voxelize<R: RngCore + ?Sized>(env: &Environment, rng: &mut R) -> VoxelGrid {
    let mut grid = VoxelGrid::empty_for(env);
    let base = rng.next_u64();
    let dims = env.dims();
    let ws = env.bounds_box();
    let ws_volume: f64 = env.workspace.iter().map(|b| b.width()).product();
    let depth = |z: usize| (dims == 3).then_some(z);

    for (obstacle, b) in env.obstacles.iter().zip(env.boxes()) {
        let mut clip = *b;
        for a in 0..dims {
            clip.lo[a] = clip.lo[a].max(ws.lo[a]);
            clip.hi[a] = clip.hi[a].min(ws.hi[a]);
        }
        rasterize_centers(&mut grid, &clip, dims);

        let volume: f64 = (0..dims).map(|a| clip.hi[a] - clip.lo[a]).product();
        let count = (VOXEL_POINTS as f64 * volume / ws_volume).ceil() as usize;
        let seed = fnv1a(
            std::iter::once(base).chain(
                obstacle
                    .center
                    .iter()
                    .chain(&obstacle.half_extents)
                    .map(|v| v.to_bits()),
            ),
        );
        let mut stream = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..count {
            let mut p = [0.0; 3];
            for a in 0..dims {
                p[a] = clip.lo[a] + stream.random::<f64>() * (clip.hi[a] - clip.lo[a]);
            }
            let (x, y) = (grid.cell_of(&p, 0), grid.cell_of(&p, 1));
            let z = depth(grid.cell_of(&p, 2));
            grid.mark(x, y, z);
        }
    }
    grid
}

fn rasterize_centers(grid: &mut VoxelGrid, clip: &Aabb, dims: usize) {
    let range = |a: usize, grid: &VoxelGrid| {
        let first = ((clip.lo[a] - grid.origin[a]) / grid.cell_size[a] - 0.5).ceil().max(0.0) as usize;
        let last = ((clip.hi[a] - grid.origin[a]) / grid.cell_size[a] - 0.5).floor();
        if last < 0.0 {
            return 1..0;
        }
        first..(last as usize + 1).min(GRID_SIZE)
    };
    let (xs, ys) = (range(0, grid), range(1, grid));
    let zs = if dims == 3 { Some(range(2, grid)) } else { None };
    for x in xs {
        for y in ys.clone() {
            match &zs {
                Some(zs) => zs.clone().for_each(|z| grid.mark(x, y, Some(z))),
                None => grid.mark(x, y, None),
            }
        }
    }
}
