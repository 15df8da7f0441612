//! Multilevel hash-grid encoding with analytic gradients.
//!
//! Each level owns a table of `table_size x F` learnable features. An input
//! normalised to the unit cube is scaled by the level resolution, the
//! surrounding lattice cell's `2^D` corners are hashed into the table, and the
//! corner features are blended with multilinear weights. Level outputs are
//! concatenated coarse to fine.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Quat, Vec3};
use crate::scalar::{lit, Real};
use crate::scene::Aabb;

/// Per-axis multipliers of the spatial hash. The first is 1 so that
/// neighbouring cells along x land in neighbouring rows.
pub const HASH_PRIMES: [u32; 4] = [1, 2_654_435_761, 805_459_861, 3_674_653_429];

/// Finest resolution targeted when deriving the growth factor.
pub const FINEST_RESOLUTION: f64 = 512.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HashGridConfig {
    pub levels: usize,
    pub features_per_level: usize,
    pub base_resolution: u32,
    /// Per-level resolution multiplier, `> 1`.
    pub growth: f64,
    pub log2_table_size: u32,
}

impl Default for HashGridConfig {
    fn default() -> Self {
        Self::with_levels(6)
    }
}

impl HashGridConfig {
    /// `levels` levels of 4 features from resolution 16 up to about 512.
    pub fn with_levels(levels: usize) -> Self {
        let base = 16u32;
        let growth = if levels > 1 {
            (FINEST_RESOLUTION / base as f64).powf(1.0 / (levels - 1) as f64)
        } else {
            2.0
        };
        Self {
            levels,
            features_per_level: 4,
            base_resolution: base,
            growth,
            log2_table_size: 14,
        }
    }

    pub fn table_size(&self) -> usize {
        1usize << self.log2_table_size
    }

    pub fn output_dim(&self) -> usize {
        self.levels * self.features_per_level
    }

    /// `r_base * b^level` for a zero-based level.
    pub fn resolution(&self, level: usize) -> f64 {
        self.base_resolution as f64 * self.growth.powi(level as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.features_per_level == 0 || self.base_resolution == 0 {
            return Err(Error::Config(
                "hash grid needs positive levels, features and base resolution".into(),
            ));
        }
        if !(self.growth > 1.0) && self.levels > 1 {
            return Err(Error::Config("hash grid growth must exceed 1".into()));
        }
        if self.log2_table_size == 0 || self.log2_table_size > 30 {
            return Err(Error::Config("log2_table_size must be in 1..=30".into()));
        }
        Ok(())
    }
}

/// Spatial hash of an integer lattice coordinate, reduced to `table_size`
/// (a power of two) by masking.
#[inline]
pub fn hash_index<const D: usize>(coord: [u32; D], table_size: usize) -> usize {
    debug_assert!(table_size.is_power_of_two());
    let mut h = 0u32;
    for d in 0..D {
        h ^= coord[d].wrapping_mul(HASH_PRIMES[d]);
    }
    (h as usize) & (table_size - 1)
}

/// Sparse gradient of one backward call: `(flat table offset, value)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TableGrad<T> {
    pub entries: Vec<(usize, T)>,
}

impl<T: Real> TableGrad<T> {
    pub fn accumulate_into(&self, dense: &mut [T]) {
        for &(i, g) in &self.entries {
            dense[i] += g;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodeGrad<T, const D: usize> {
    pub tables: TableGrad<T>,
    /// Gradient w.r.t. the un-normalised input.
    pub input: [T; D],
}

/// Hash-grid over a `D`-dimensional box.
#[derive(Debug)]
pub struct HashGrid<T, const D: usize> {
    config: HashGridConfig,
    pub tables: Vec<T>,
    domain_min: [T; D],
    domain_max: [T; D],
    out_of_box: AtomicU64,
}

/// The 3D position encoder.
pub type HashGridEncoder<T> = HashGrid<T, 3>;

impl<T: Real, const D: usize> Clone for HashGrid<T, D> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            tables: self.tables.clone(),
            domain_min: self.domain_min,
            domain_max: self.domain_max,
            out_of_box: AtomicU64::new(self.out_of_box.load(Ordering::Relaxed)),
        }
    }
}

impl<T: Real, const D: usize> PartialEq for HashGrid<T, D> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.tables == other.tables
            && self.domain_min == other.domain_min
            && self.domain_max == other.domain_max
    }
}

impl<T: Real, const D: usize> HashGrid<T, D> {
    /// Grid with all-zero tables over `[domain_min, domain_max]`.
    pub fn new(config: HashGridConfig, domain_min: [T; D], domain_max: [T; D]) -> Result<Self> {
        assert!(D <= HASH_PRIMES.len());
        config.validate()?;
        if (0..D).any(|d| !(domain_min[d] < domain_max[d])) {
            return Err(Error::Config("hash grid domain must have positive extent".into()));
        }
        let len = config.levels * config.table_size() * config.features_per_level;
        Ok(Self {
            tables: vec![T::zero(); len],
            config,
            domain_min,
            domain_max,
            out_of_box: AtomicU64::new(0),
        })
    }

    /// Fills tables uniformly from `[-range, range]`.
    pub fn init_uniform(&mut self, rng: &mut impl Rng, range: f64) {
        for v in &mut self.tables {
            *v = lit(rng.random_range(-range..range));
        }
    }

    pub fn config(&self) -> &HashGridConfig {
        &self.config
    }

    pub fn domain(&self) -> ([T; D], [T; D]) {
        (self.domain_min, self.domain_max)
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    /// Number of inputs that fell outside the domain and were clamped.
    pub fn out_of_box_count(&self) -> u64 {
        self.out_of_box.load(Ordering::Relaxed)
    }

    /// Table index of a lattice vertex at a level (levels share the hash, not the table).
    pub fn hash_index(&self, _level: usize, coord: [u32; D]) -> usize {
        hash_index(coord, self.config.table_size())
    }

    /// Flat offset of the first feature of `row` at `level`.
    pub fn row_offset(&self, level: usize, row: usize) -> usize {
        (level * self.config.table_size() + row) * self.config.features_per_level
    }

    fn normalise(&self, x: [T; D]) -> Result<([T; D], [bool; D])> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("hash grid input is not finite".into()));
        }
        let mut out = [T::zero(); D];
        let mut inside = [true; D];
        let mut clamped = false;
        for d in 0..D {
            let t = (x[d] - self.domain_min[d]) / (self.domain_max[d] - self.domain_min[d]);
            if t < T::zero() {
                out[d] = T::zero();
                inside[d] = false;
                clamped = true;
            } else if t > T::one() {
                out[d] = T::one();
                inside[d] = false;
                clamped = true;
            } else {
                out[d] = t;
            }
        }
        if clamped {
            self.out_of_box.fetch_add(1, Ordering::Relaxed);
        }
        Ok((out, inside))
    }

    fn cell(&self, level: usize, unit: &[T; D]) -> ([u32; D], [T; D]) {
        let res = lit::<T>(self.config.resolution(level));
        let mut base = [0u32; D];
        let mut frac = [T::zero(); D];
        for d in 0..D {
            let s = unit[d] * res;
            let f = s.floor();
            base[d] = f.to_u32().unwrap_or(0);
            frac[d] = s - f;
        }
        (base, frac)
    }

    #[inline]
    fn corner_weight(mask: usize, frac: &[T; D]) -> T {
        let mut w = T::one();
        for (d, f) in frac.iter().enumerate() {
            w *= if mask >> d & 1 == 1 { *f } else { T::one() - *f };
        }
        w
    }

    pub fn encode(&self, x: [T; D]) -> Result<Vec<T>> {
        let mut out = vec![T::zero(); self.output_dim()];
        self.encode_into(x, &mut out)?;
        Ok(out)
    }

    pub fn encode_into(&self, x: [T; D], out: &mut [T]) -> Result<()> {
        let f = self.config.features_per_level;
        if out.len() != self.output_dim() {
            return Err(Error::Shape {
                expected: self.output_dim(),
                got: out.len(),
            });
        }
        let (unit, _) = self.normalise(x)?;
        let table_size = self.config.table_size();
        for level in 0..self.config.levels {
            let (base, frac) = self.cell(level, &unit);
            let dst = &mut out[level * f..(level + 1) * f];
            dst.fill(T::zero());
            for mask in 0..(1usize << D) {
                let w = Self::corner_weight(mask, &frac);
                if w == T::zero() {
                    continue;
                }
                let coord: [u32; D] = std::array::from_fn(|d| base[d].wrapping_add((mask >> d & 1) as u32));
                let o = self.row_offset(level, hash_index(coord, table_size));
                for k in 0..f {
                    dst[k] += w * self.tables[o + k];
                }
            }
        }
        Ok(())
    }

    /// Table and input gradients for `upstream = dL/d(encode(x))`.
    pub fn encode_backward(&self, x: [T; D], upstream: &[T]) -> Result<EncodeGrad<T, D>> {
        let f = self.config.features_per_level;
        if upstream.len() != self.output_dim() {
            return Err(Error::Shape {
                expected: self.output_dim(),
                got: upstream.len(),
            });
        }
        let (unit, inside) = self.normalise(x)?;
        let table_size = self.config.table_size();
        let mut entries = Vec::with_capacity(self.config.levels * (1 << D) * f);
        let mut grad_unit = [T::zero(); D];
        for level in 0..self.config.levels {
            let up = &upstream[level * f..(level + 1) * f];
            if up.iter().all(|g| *g == T::zero()) {
                continue;
            }
            let res = lit::<T>(self.config.resolution(level));
            let (base, frac) = self.cell(level, &unit);
            for mask in 0..(1usize << D) {
                let coord: [u32; D] = std::array::from_fn(|d| base[d].wrapping_add((mask >> d & 1) as u32));
                let o = self.row_offset(level, hash_index(coord, table_size));
                let w = Self::corner_weight(mask, &frac);
                let mut dot = T::zero();
                for k in 0..f {
                    if w != T::zero() {
                        entries.push((o + k, w * up[k]));
                    }
                    dot += up[k] * self.tables[o + k];
                }
                for d in 0..D {
                    // d(weight)/d(frac_d): replace factor d by its derivative (+1 or -1)
                    let mut dw = if mask >> d & 1 == 1 { T::one() } else { -T::one() };
                    for (e, fe) in frac.iter().enumerate() {
                        if e != d {
                            dw *= if mask >> e & 1 == 1 { *fe } else { T::one() - *fe };
                        }
                    }
                    grad_unit[d] += dw * dot * res;
                }
            }
        }
        let input = std::array::from_fn(|d| {
            if inside[d] {
                grad_unit[d] / (self.domain_max[d] - self.domain_min[d])
            } else {
                T::zero()
            }
        });
        Ok(EncodeGrad {
            tables: TableGrad { entries },
            input,
        })
    }
}

/// Level counts allocated to position, scale, rotation and view direction.
/// A zero entry passes that input through raw.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodingConfig {
    pub position: usize,
    pub scale: usize,
    pub rotation: usize,
    pub view: usize,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self {
            position: 6,
            scale: 0,
            rotation: 0,
            view: 0,
        }
    }
}

impl EncodingConfig {
    pub fn new(position: usize, scale: usize, rotation: usize, view: usize) -> Self {
        Self {
            position,
            scale,
            rotation,
            view,
        }
    }
}

impl std::str::FromStr for EncodingConfig {
    type Err = Error;

    /// Parses `P,S,R,V`, e.g. `6,0,0,0`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .trim_matches(|c| c == '(' || c == ')')
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("bad encoding tuple {s:?}")))?;
        match parts[..] {
            [p, sc, r, v] => Ok(Self::new(p, sc, r, v)),
            _ => Err(Error::Config(format!("encoding tuple needs four entries, got {s:?}"))),
        }
    }
}

/// Which slice of the assembled input a field occupies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InputLayout {
    pub position: (usize, usize),
    pub view: (usize, usize),
    pub rotation: (usize, usize),
    pub scale: (usize, usize),
}

impl InputLayout {
    pub fn width(&self) -> usize {
        self.scale.1
    }
}

/// Gradients of one assembled input row w.r.t. the raw Gaussian attributes.
#[derive(Clone, Debug, PartialEq)]
pub struct InputGrad<T> {
    pub position: Vec3<T>,
    pub view: Vec3<T>,
    pub rotation: Quat<T>,
    /// W.r.t. the linear scale `exp(log_scale)`.
    pub scale: Vec3<T>,
    pub position_tables: TableGrad<T>,
    pub scale_tables: TableGrad<T>,
    pub rotation_tables: TableGrad<T>,
    pub view_tables: TableGrad<T>,
}

/// Builds the network input `[H(P), V, R, S]` for one Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct InputEncoder<T: Real> {
    config: EncodingConfig,
    bounds: Aabb<T>,
    pub position: Option<HashGrid<T, 3>>,
    pub scale: Option<HashGrid<T, 3>>,
    pub rotation: Option<HashGrid<T, 4>>,
    pub view: Option<HashGrid<T, 3>>,
}

/// Hash-grid inputs for scale live in `[0, SCALE_DOMAIN_FRACTION * largest scene extent]`.
pub const SCALE_DOMAIN_FRACTION: f64 = 0.25;
/// Half-width of the uniform table initialisation.
pub const TABLE_INIT_RANGE: f64 = 1e-4;

impl<T: Real> InputEncoder<T> {
    /// Zero-initialised grids; see [`InputEncoder::init_tables`].
    pub fn new(config: EncodingConfig, bounds: Aabb<T>) -> Result<Self> {
        let grid3 = |levels: usize, lo: [T; 3], hi: [T; 3]| -> Result<Option<HashGrid<T, 3>>> {
            if levels == 0 {
                Ok(None)
            } else {
                HashGrid::new(HashGridConfig::with_levels(levels), lo, hi).map(Some)
            }
        };
        let extent = bounds.extent();
        let largest = extent[0].max(extent[1]).max(extent[2]);
        let smax = largest * lit(SCALE_DOMAIN_FRACTION);
        let neg = -T::one();
        Ok(Self {
            config,
            position: grid3(config.position, bounds.min, bounds.max)?,
            scale: grid3(config.scale, [T::zero(); 3], [smax; 3])?,
            rotation: if config.rotation == 0 {
                None
            } else {
                Some(HashGrid::new(
                    HashGridConfig::with_levels(config.rotation),
                    [neg; 4],
                    [T::one(); 4],
                )?)
            },
            view: grid3(config.view, [neg; 3], [T::one(); 3])?,
            bounds,
        })
    }

    pub fn init_tables(&mut self, rng: &mut impl Rng) {
        if let Some(g) = &mut self.position {
            g.init_uniform(rng, TABLE_INIT_RANGE);
        }
        if let Some(g) = &mut self.scale {
            g.init_uniform(rng, TABLE_INIT_RANGE);
        }
        if let Some(g) = &mut self.rotation {
            g.init_uniform(rng, TABLE_INIT_RANGE);
        }
        if let Some(g) = &mut self.view {
            g.init_uniform(rng, TABLE_INIT_RANGE);
        }
    }

    pub fn config(&self) -> EncodingConfig {
        self.config
    }

    pub fn bounds(&self) -> Aabb<T> {
        self.bounds
    }

    pub fn layout(&self) -> InputLayout {
        let width = |grid_dim: Option<usize>, raw: usize| grid_dim.unwrap_or(raw);
        let p = width(self.position.as_ref().map(|g| g.output_dim()), 3);
        let v = width(self.view.as_ref().map(|g| g.output_dim()), 3);
        let r = width(self.rotation.as_ref().map(|g| g.output_dim()), 4);
        let s = width(self.scale.as_ref().map(|g| g.output_dim()), 3);
        InputLayout {
            position: (0, p),
            view: (p, p + v),
            rotation: (p + v, p + v + r),
            scale: (p + v + r, p + v + r + s),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layout().width()
    }

    /// Mutable access to every table, in position, scale, rotation, view order.
    pub fn tables_mut(&mut self) -> [Option<&mut Vec<T>>; 4] {
        [
            self.position.as_mut().map(|g| &mut g.tables),
            self.scale.as_mut().map(|g| &mut g.tables),
            self.rotation.as_mut().map(|g| &mut g.tables),
            self.view.as_mut().map(|g| &mut g.tables),
        ]
    }

    pub fn tables(&self) -> [Option<&Vec<T>>; 4] {
        [
            self.position.as_ref().map(|g| &g.tables),
            self.scale.as_ref().map(|g| &g.tables),
            self.rotation.as_ref().map(|g| &g.tables),
            self.view.as_ref().map(|g| &g.tables),
        ]
    }

    fn raw_position(&self, p: Vec3<T>) -> Vec3<T> {
        std::array::from_fn(|k| (p[k] - self.bounds.min[k]) / (self.bounds.max[k] - self.bounds.min[k]))
    }

    /// Writes one input row. `scale` is the linear scale, not its log.
    pub fn assemble(
        &self,
        position: Vec3<T>,
        view: Vec3<T>,
        rotation: Quat<T>,
        scale: Vec3<T>,
        out: &mut [T],
    ) -> Result<()> {
        let lay = self.layout();
        if out.len() != lay.width() {
            return Err(Error::Shape {
                expected: lay.width(),
                got: out.len(),
            });
        }
        let (a, b) = lay.position;
        match &self.position {
            Some(g) => g.encode_into(position, &mut out[a..b])?,
            None => out[a..b].copy_from_slice(&self.raw_position(position)),
        }
        let (a, b) = lay.view;
        match &self.view {
            Some(g) => g.encode_into(view, &mut out[a..b])?,
            None => out[a..b].copy_from_slice(&view),
        }
        let (a, b) = lay.rotation;
        match &self.rotation {
            Some(g) => g.encode_into(rotation, &mut out[a..b])?,
            None => out[a..b].copy_from_slice(&rotation),
        }
        let (a, b) = lay.scale;
        match &self.scale {
            Some(g) => g.encode_into(scale, &mut out[a..b])?,
            None => out[a..b].copy_from_slice(&scale),
        }
        Ok(())
    }

    pub fn assemble_backward(
        &self,
        position: Vec3<T>,
        view: Vec3<T>,
        rotation: Quat<T>,
        scale: Vec3<T>,
        grad: &[T],
    ) -> Result<InputGrad<T>> {
        let lay = self.layout();
        if grad.len() != lay.width() {
            return Err(Error::Shape {
                expected: lay.width(),
                got: grad.len(),
            });
        }
        let mut out = InputGrad {
            position: [T::zero(); 3],
            view: [T::zero(); 3],
            rotation: [T::zero(); 4],
            scale: [T::zero(); 3],
            position_tables: TableGrad::default(),
            scale_tables: TableGrad::default(),
            rotation_tables: TableGrad::default(),
            view_tables: TableGrad::default(),
        };
        let (a, b) = lay.position;
        match &self.position {
            Some(g) => {
                let e = g.encode_backward(position, &grad[a..b])?;
                out.position = e.input;
                out.position_tables = e.tables;
            }
            None => {
                for k in 0..3 {
                    out.position[k] = grad[a + k] / (self.bounds.max[k] - self.bounds.min[k]);
                }
            }
        }
        let (a, b) = lay.view;
        match &self.view {
            Some(g) => {
                let e = g.encode_backward(view, &grad[a..b])?;
                out.view = e.input;
                out.view_tables = e.tables;
            }
            None => out.view.copy_from_slice(&grad[a..b]),
        }
        let (a, b) = lay.rotation;
        match &self.rotation {
            Some(g) => {
                let e = g.encode_backward(rotation, &grad[a..b])?;
                out.rotation = e.input;
                out.rotation_tables = e.tables;
            }
            None => out.rotation.copy_from_slice(&grad[a..b]),
        }
        let (a, b) = lay.scale;
        match &self.scale {
            Some(g) => {
                let e = g.encode_backward(scale, &grad[a..b])?;
                out.scale = e.input;
                out.scale_tables = e.tables;
            }
            None => out.scale.copy_from_slice(&grad[a..b]),
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_grid(levels: usize, log2: u32) -> HashGridEncoder<f64> {
        let mut cfg = HashGridConfig::with_levels(levels);
        cfg.log2_table_size = log2;
        HashGrid::new(cfg, [0.0; 3], [1.0; 3]).unwrap()
    }

    #[test]
    fn default_output_is_24() {
        let g = unit_grid(6, 14);
        assert_eq!(g.encode([0.3, 0.2, 0.9]).unwrap().len(), 24);
        assert_eq!(g.config().resolution(5), 512.0);
    }

    #[test]
    fn hash_examples() {
        assert_eq!(hash_index([0u32, 0, 0], 1 << 14), 0);
        assert_eq!(hash_index([1u32, 0, 0], 1 << 14), 1);
        assert_eq!(hash_index([7u32, 11, 3], 1 << 14), hash_index([7u32, 11, 3], 1 << 14));
        // independent hand evaluation in u64 arithmetic
        let (x, y, z) = (7u64, 11u64, 3u64);
        let h = (x ^ (y * 2_654_435_761) ^ (z * 805_459_861)) & 0xFFFF_FFFF;
        assert_eq!(hash_index([7u32, 11, 3], 1 << 14), (h % (1 << 14)) as usize);
    }

    #[test]
    fn vertex_input_selects_one_row() {
        let mut g = unit_grid(1, 10);
        g.init_uniform(&mut ChaCha8Rng::seed_from_u64(1), 1.0);
        // 0.25 * 16 = 4 exactly
        let out = g.encode([0.25, 0.5, 0.75]).unwrap();
        let o = g.row_offset(0, g.hash_index(0, [4, 8, 12]));
        assert_eq!(out, g.tables[o..o + 4].to_vec());
    }

    #[test]
    fn cell_centre_is_mean_of_corners() {
        let mut g = unit_grid(1, 12);
        g.init_uniform(&mut ChaCha8Rng::seed_from_u64(2), 1.0);
        let x = [2.5 / 16.0, 5.5 / 16.0, 9.5 / 16.0];
        let out = g.encode(x).unwrap();
        let mut oracle = [0.0; 4];
        for dx in 0..2u32 {
            for dy in 0..2u32 {
                for dz in 0..2u32 {
                    let o = g.row_offset(0, g.hash_index(0, [2 + dx, 5 + dy, 9 + dz]));
                    for k in 0..4 {
                        oracle[k] += 0.125 * g.tables[o + k];
                    }
                }
            }
        }
        for k in 0..4 {
            assert!((out[k] - oracle[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut g = unit_grid(6, 14);
        g.init_uniform(&mut ChaCha8Rng::seed_from_u64(3), 1.0);
        let e = g.encode_backward([0.3, 0.4, 0.5], &[0.0; 24]).unwrap();
        assert!(e.tables.entries.iter().all(|(_, v)| *v == 0.0));
        assert_eq!(e.input, [0.0; 3]);
    }

    #[test]
    fn vertex_backward_routes_to_single_row() {
        let g = unit_grid(1, 10);
        let up = [1.0, -2.0, 3.0, 0.5];
        let e = g.encode_backward([0.25, 0.5, 0.75], &up).unwrap();
        let o = g.row_offset(0, g.hash_index(0, [4, 8, 12]));
        let mut dense = vec![0.0; g.tables.len()];
        e.tables.accumulate_into(&mut dense);
        assert_eq!(&dense[o..o + 4], &up);
        assert_eq!(dense.iter().filter(|v| **v != 0.0).count(), 4);
    }

    #[test]
    fn out_of_box_is_clamped_and_counted() {
        let g = unit_grid(2, 10);
        let a = g.encode([1.5, 0.5, -0.2]).unwrap();
        let b = g.encode([1.0, 0.5, 0.0]).unwrap();
        assert_eq!(a, b);
        assert_eq!(g.out_of_box_count(), 1);
        assert!(g.encode([f64::NAN, 0.0, 0.0]).is_err());
    }

    #[test]
    fn layout_matches_config() {
        let b = Aabb::new([-1.0f64; 3], [1.0; 3]);
        let e = InputEncoder::new(EncodingConfig::default(), b).unwrap();
        assert_eq!(e.input_dim(), 34);
        let l = e.layout();
        assert_eq!((l.view, l.rotation, l.scale), ((24, 27), (27, 31), (31, 34)));
        let e = InputEncoder::new(EncodingConfig::new(6, 1, 1, 0), b).unwrap();
        assert_eq!(e.input_dim(), 24 + 3 + 4 + 4);
        let e = InputEncoder::new(EncodingConfig::new(5, 0, 0, 1), b).unwrap();
        assert_eq!(e.input_dim(), 20 + 4 + 4 + 3);
    }

    #[test]
    fn raw_fields_pass_through() {
        let b = Aabb::new([-1.0f64; 3], [1.0; 3]);
        let e = InputEncoder::new(EncodingConfig::default(), b).unwrap();
        let mut row = vec![0.0; 34];
        let v = [0.0, 0.6, 0.8];
        let q = [0.5, 0.5, 0.5, 0.5];
        let s = [0.1, 0.2, 0.3];
        e.assemble([0.1, 0.2, 0.3], v, q, s, &mut row).unwrap();
        assert_eq!(&row[24..27], &v);
        assert_eq!(&row[27..31], &q);
        assert_eq!(&row[31..34], &s);
    }

    #[test]
    fn encoding_tuple_parses() {
        assert_eq!(
            "(6,1,1,0)".parse::<EncodingConfig>().unwrap(),
            EncodingConfig::new(6, 1, 1, 0)
        );
        assert!("6,0,0".parse::<EncodingConfig>().is_err());
    }
}
