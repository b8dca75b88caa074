//! Pillar voxelization: static-shape (padded + masked) and dynamic
//! (gather/scatter) layouts, plus the densify bridge between them.
//!
//! Cells are half-open intervals `[low, high)` on x and y; z stays a
//! feature. Point order is never shuffled: within a pillar, points keep
//! input order, and pillars are slotted in first-occurrence order, which
//! makes both layouts byte-deterministic for identical inputs.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Unordered point set. Columns 0..3 are x, y, z in meters; remaining
/// columns are auxiliary features (by default one intensity column).
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Tensor,
}

impl PointCloud {
    pub fn new(points: Tensor) -> Result<Self> {
        if points.ndim() != 2 {
            return Err(Error::Shape(format!(
                "point cloud must be [m x f], got {:?}",
                points.shape()
            )));
        }
        if points.shape()[1] < 3 {
            return Err(Error::Shape(format!(
                "point cloud needs >= 3 feature columns, got {}",
                points.shape()[1]
            )));
        }
        if !points.is_finite() {
            return Err(Error::Contract("point cloud contains non-finite values".into()));
        }
        Ok(PointCloud { points })
    }

    pub fn empty(f: usize) -> Self {
        PointCloud {
            points: Tensor::zeros(&[0, f]),
        }
    }

    pub fn len(&self) -> usize {
        self.points.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.points.shape()[1]
    }

    pub fn points(&self) -> &Tensor {
        &self.points
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let f = self.feature_dim();
        &self.points.data()[i * f..(i + 1) * f]
    }

    /// CSV with an `x,y,z,i` style header, one point per row.
    pub fn to_csv(&self) -> String {
        let f = self.feature_dim();
        let mut header: Vec<String> = vec!["x".into(), "y".into(), "z".into()];
        for k in 3..f {
            header.push(if k == 3 { "i".into() } else { format!("f{k}") });
        }
        let mut s = header.join(",");
        s.push('\n');
        for i in 0..self.len() {
            let row: Vec<String> = self.row(i).iter().map(|v| format!("{:.16e}", v)).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }

    pub fn from_csv<R: Read>(reader: R) -> Result<Self> {
        let buf = BufReader::new(reader);
        let mut lines = buf.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty point CSV".into()))??;
        let f = header.split(',').count();
        if f < 3 {
            return Err(Error::Parse(format!(
                "point CSV header '{header}' has < 3 columns"
            )));
        }
        let mut data = Vec::new();
        let mut m = 0;
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|t| {
                    t.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Parse(format!("bad point value '{t}': {e}")))
                })
                .collect::<Result<_>>()?;
            if vals.len() != f {
                return Err(Error::Parse(format!(
                    "point row has {} values, header has {f}",
                    vals.len()
                )));
            }
            data.extend(vals);
            m += 1;
        }
        PointCloud::new(Tensor::from_vec(&[m, f], data)?)
    }

    /// Binary layout: little-endian u64 m, u64 f, then m·f f64 row-major.
    pub fn to_binary<W: Write>(&self, w: &mut W) -> Result<()> {
        let f = self.feature_dim();
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&(f as u64).to_le_bytes())?;
        for v in self.points.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn from_binary<R: Read>(r: &mut R) -> Result<Self> {
        let mut u = [0u8; 8];
        r.read_exact(&mut u)?;
        let m = u64::from_le_bytes(u) as usize;
        r.read_exact(&mut u)?;
        let f = u64::from_le_bytes(u) as usize;
        let mut data = vec![0.0f64; m * f];
        for v in data.iter_mut() {
            r.read_exact(&mut u)?;
            *v = f64::from_le_bytes(u);
        }
        PointCloud::new(Tensor::from_vec(&[m, f], data)?)
    }
}

/// Geometry and budget of the pillar grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PillarGridConfig {
    pub origin_xy: (f64, f64),
    pub voxel_size: f64,
    /// Cells along x and y.
    pub grid_extent: (usize, usize),
    /// Max points kept per pillar (P).
    pub cap_points: usize,
    /// Max occupied pillars kept per scene (N).
    pub max_voxels: usize,
}

impl PillarGridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.voxel_size <= 0.0 {
            return Err(Error::Config(format!(
                "voxel_size must be > 0, got {}",
                self.voxel_size
            )));
        }
        if self.cap_points == 0 || self.max_voxels == 0 {
            return Err(Error::Config("cap_points and max_voxels must be >= 1".into()));
        }
        if self.grid_extent.0 == 0 || self.grid_extent.1 == 0 {
            return Err(Error::Config("grid_extent must be positive".into()));
        }
        Ok(())
    }
}

/// Cell index of an (x, y) position, or None outside the grid.
pub fn voxel_index(x: f64, y: f64, config: &PillarGridConfig) -> Option<(usize, usize)> {
    let fx = ((x - config.origin_xy.0) / config.voxel_size).floor();
    let fy = ((y - config.origin_xy.1) / config.voxel_size).floor();
    if fx < 0.0 || fy < 0.0 {
        return None;
    }
    let (ix, iy) = (fx as usize, fy as usize);
    if ix >= config.grid_extent.0 || iy >= config.grid_extent.1 {
        return None;
    }
    Some((ix, iy))
}

/// Where the input points went.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DropStats {
    /// Points discarded because their pillar already held `cap_points`.
    pub cap_dropped_points: usize,
    /// Points outside the grid.
    pub out_of_range_points: usize,
    /// Pillars discarded because `max_voxels` slots were taken.
    pub dropped_voxels: usize,
    /// Points belonging to those discarded pillars.
    pub voxel_dropped_points: usize,
}

/// Static-shape padded layout: `[N x P x f]` features with a `{0,1}` mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedVoxelBatch {
    pub features: Tensor,
    pub mask: Tensor,
    /// (ix, iy) per slot; rows >= num_voxels are [0, 0].
    pub coords: Vec<[usize; 2]>,
    pub num_voxels: usize,
    pub drop_stats: DropStats,
}

impl FixedVoxelBatch {
    pub fn cap_points(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn feature_dim(&self) -> usize {
        self.features.shape()[2]
    }

    pub fn slots(&self) -> usize {
        self.features.shape()[0]
    }

    /// Valid point count in one slot.
    pub fn points_in(&self, slot: usize) -> usize {
        let p = self.cap_points();
        self.mask.data()[slot * p..(slot + 1) * p]
            .iter()
            .filter(|&&m| m == 1.0)
            .count()
    }
}

/// Ragged layout: all in-range points plus a per-point pillar id.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicVoxelBatch {
    /// `[m' x f]`, original input order.
    pub flat_features: Tensor,
    /// Pillar slot per point, each < n_occ.
    pub voxel_id: Vec<usize>,
    pub coords: Vec<[usize; 2]>,
    pub n_occ: usize,
    pub out_of_range_points: usize,
}

/// Bucket points into the fixed layout. Per-pillar overflow beyond
/// `cap_points` keeps the first arrivals; pillars first seen after
/// `max_voxels` slots are taken are dropped whole.
pub fn fixed_voxelize(cloud: &PointCloud, config: &PillarGridConfig) -> Result<FixedVoxelBatch> {
    config.validate()?;
    let f = cloud.feature_dim();
    let n = config.max_voxels;
    let p = config.cap_points;
    let mut features = Tensor::zeros(&[n, p, f]);
    let mut mask = Tensor::zeros(&[n, p]);
    let mut coords = vec![[0usize; 2]; n];
    let mut counts = vec![0usize; n];
    let mut slot_of: HashMap<(usize, usize), usize> = HashMap::new();
    let mut dropped_cells: HashMap<(usize, usize), ()> = HashMap::new();
    let mut n_occ = 0usize;
    let mut stats = DropStats::default();

    for i in 0..cloud.len() {
        let row = cloud.row(i);
        let Some(cell) = voxel_index(row[0], row[1], config) else {
            stats.out_of_range_points += 1;
            continue;
        };
        if dropped_cells.contains_key(&cell) {
            stats.voxel_dropped_points += 1;
            continue;
        }
        let slot = match slot_of.get(&cell) {
            Some(&s) => s,
            None => {
                if n_occ == n {
                    dropped_cells.insert(cell, ());
                    stats.dropped_voxels += 1;
                    stats.voxel_dropped_points += 1;
                    continue;
                }
                let s = n_occ;
                slot_of.insert(cell, s);
                coords[s] = [cell.0, cell.1];
                n_occ += 1;
                s
            }
        };
        if counts[slot] == p {
            stats.cap_dropped_points += 1;
            continue;
        }
        let j = counts[slot];
        counts[slot] += 1;
        features.data_mut()[(slot * p + j) * f..(slot * p + j + 1) * f].copy_from_slice(row);
        mask.data_mut()[slot * p + j] = 1.0;
    }

    Ok(FixedVoxelBatch {
        features,
        mask,
        coords,
        num_voxels: n_occ,
        drop_stats: stats,
    })
}

/// Bucket points into the ragged layout. No caps: every in-range point is
/// kept, pillar slots ordered by first occurrence.
pub fn dynamic_voxelize(
    cloud: &PointCloud,
    config: &PillarGridConfig,
) -> Result<DynamicVoxelBatch> {
    config.validate()?;
    let f = cloud.feature_dim();
    let mut flat = Vec::new();
    let mut voxel_id = Vec::new();
    let mut coords: Vec<[usize; 2]> = Vec::new();
    let mut slot_of: HashMap<(usize, usize), usize> = HashMap::new();
    let mut out_of_range = 0usize;

    for i in 0..cloud.len() {
        let row = cloud.row(i);
        let Some(cell) = voxel_index(row[0], row[1], config) else {
            out_of_range += 1;
            continue;
        };
        let next = coords.len();
        let slot = *slot_of.entry(cell).or_insert_with(|| {
            coords.push([cell.0, cell.1]);
            next
        });
        flat.extend_from_slice(row);
        voxel_id.push(slot);
    }

    let m = voxel_id.len();
    Ok(DynamicVoxelBatch {
        flat_features: Tensor::from_vec(&[m, f], flat)?,
        voxel_id,
        n_occ: coords.len(),
        coords,
        out_of_range_points: out_of_range,
    })
}

/// Re-express a dynamic batch in the fixed layout. Errors if a pillar
/// exceeds `cap_points` or the pillar count exceeds `max_voxels`.
pub fn densify(
    dyn_batch: &DynamicVoxelBatch,
    config: &PillarGridConfig,
) -> Result<FixedVoxelBatch> {
    config.validate()?;
    let p = config.cap_points;
    let f = dyn_batch.flat_features.shape()[1];
    let mut counts = vec![0usize; dyn_batch.n_occ];
    for &v in &dyn_batch.voxel_id {
        counts[v] += 1;
    }
    let over: Vec<String> = counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > p)
        .map(|(v, &c)| {
            format!(
                "({}, {}) holds {c}",
                dyn_batch.coords[v][0], dyn_batch.coords[v][1]
            )
        })
        .collect();
    if !over.is_empty() {
        return Err(Error::Capacity(format!(
            "pillars exceed cap_points {p}: {}",
            over.join(", ")
        )));
    }
    if dyn_batch.n_occ > config.max_voxels {
        return Err(Error::Capacity(format!(
            "{} occupied pillars exceed max_voxels {}",
            dyn_batch.n_occ, config.max_voxels
        )));
    }

    let n = config.max_voxels;
    let mut features = Tensor::zeros(&[n, p, f]);
    let mut mask = Tensor::zeros(&[n, p]);
    let mut coords = vec![[0usize; 2]; n];
    coords[..dyn_batch.n_occ].copy_from_slice(&dyn_batch.coords);
    let mut fill = vec![0usize; dyn_batch.n_occ];
    for (i, &slot) in dyn_batch.voxel_id.iter().enumerate() {
        let j = fill[slot];
        fill[slot] += 1;
        features.data_mut()[(slot * p + j) * f..(slot * p + j + 1) * f]
            .copy_from_slice(&dyn_batch.flat_features.data()[i * f..(i + 1) * f]);
        mask.data_mut()[slot * p + j] = 1.0;
    }

    Ok(FixedVoxelBatch {
        features,
        mask,
        coords,
        num_voxels: dyn_batch.n_occ,
        drop_stats: DropStats {
            out_of_range_points: dyn_batch.out_of_range_points,
            ..DropStats::default()
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use std::collections::BTreeMap;

    fn cfg() -> PillarGridConfig {
        PillarGridConfig {
            origin_xy: (-5.12, -5.12),
            voxel_size: 0.32,
            grid_extent: (32, 32),
            cap_points: 32,
            max_voxels: 512,
        }
    }

    fn cloud_from(rows: &[[f64; 4]]) -> PointCloud {
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        PointCloud::new(Tensor::from_vec(&[rows.len(), 4], data).unwrap()).unwrap()
    }

    fn random_cloud(rng: &mut SplitMix64, m: usize, span: f64) -> PointCloud {
        let mut data = Vec::with_capacity(m * 4);
        for _ in 0..m {
            data.push(rng.uniform(-span, span));
            data.push(rng.uniform(-span, span));
            data.push(rng.uniform(0.0, 2.0));
            data.push(rng.next_f64());
        }
        PointCloud::new(Tensor::from_vec(&[m, 4], data).unwrap()).unwrap()
    }

    #[test]
    fn voxel_index_boundary_convention() {
        let c = cfg();
        assert_eq!(voxel_index(0.0, 0.0, &c), Some((16, 16)));
        assert_eq!(voxel_index(-5.12, -5.12, &c), Some((0, 0)));
        assert_eq!(voxel_index(5.12, 5.12, &c), None); // half-open
        assert_eq!(voxel_index(5.1199, -5.12, &c), Some((31, 0)));
        assert_eq!(voxel_index(-5.13, 0.0, &c), None);
    }

    #[test]
    fn voxel_index_matches_brute_force_histogram() {
        let c = cfg();
        let mut rng = SplitMix64::new(101);
        let cloud = random_cloud(&mut rng, 1000, 6.0);
        let mut ours: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let mut brute: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for i in 0..cloud.len() {
            let row = cloud.row(i);
            if let Some(cell) = voxel_index(row[0], row[1], &c) {
                *ours.entry(cell).or_default() += 1;
            }
            // brute-force: scan all cells for containment
            let (x, y) = (row[0], row[1]);
            for ix in 0..32 {
                for iy in 0..32 {
                    let lo_x = -5.12 + ix as f64 * 0.32;
                    let lo_y = -5.12 + iy as f64 * 0.32;
                    if x >= lo_x && x < lo_x + 0.32 && y >= lo_y && y < lo_y + 0.32 {
                        *brute.entry((ix, iy)).or_default() += 1;
                    }
                }
            }
        }
        assert_eq!(ours, brute);
    }

    #[test]
    fn fixed_voxelize_cap_truncates_deterministically() {
        let mut c = cfg();
        c.cap_points = 2;
        let cloud = cloud_from(&[
            [0.0, 0.0, 0.1, 0.5],
            [0.01, 0.01, 0.2, 0.6],
            [0.02, 0.02, 0.3, 0.7],
        ]);
        let b = fixed_voxelize(&cloud, &c).unwrap();
        assert_eq!(b.num_voxels, 1);
        assert_eq!(b.drop_stats.cap_dropped_points, 1);
        assert_eq!(&b.mask.data()[..2], &[1.0, 1.0]);
        // kept the first two points in input order
        assert_eq!(b.features.at(&[0, 0, 3]), 0.5);
        assert_eq!(b.features.at(&[0, 1, 3]), 0.6);
    }

    #[test]
    fn empty_cloud_gives_empty_batch() {
        let b = fixed_voxelize(&PointCloud::empty(4), &cfg()).unwrap();
        assert_eq!(b.num_voxels, 0);
        assert!(b.mask.data().iter().all(|&m| m == 0.0));
        let d = dynamic_voxelize(&PointCloud::empty(4), &cfg()).unwrap();
        assert_eq!(d.flat_features.shape()[0], 0);
        assert_eq!(d.n_occ, 0);
    }

    #[test]
    fn grouping_matches_brute_force() {
        let c = cfg();
        let mut rng = SplitMix64::new(7);
        let cloud = random_cloud(&mut rng, 300, 5.0);
        let b = fixed_voxelize(&cloud, &c).unwrap();
        // brute-force grouping on (cell -> point rows in input order)
        let mut expect: BTreeMap<(usize, usize), Vec<Vec<f64>>> = BTreeMap::new();
        for i in 0..cloud.len() {
            let row = cloud.row(i);
            if let Some(cell) = voxel_index(row[0], row[1], &c) {
                expect.entry(cell).or_default().push(row.to_vec());
            }
        }
        assert_eq!(b.num_voxels, expect.len());
        for s in 0..b.num_voxels {
            let cell = (b.coords[s][0], b.coords[s][1]);
            let rows = expect.get(&cell).unwrap();
            assert_eq!(b.points_in(s), rows.len());
            for (j, row) in rows.iter().enumerate() {
                for k in 0..4 {
                    assert_eq!(b.features.at(&[s, j, k]), row[k]);
                }
            }
        }
    }

    #[test]
    fn dynamic_three_points_one_cell() {
        let cloud = cloud_from(&[
            [1.0, 1.0, 0.0, 0.1],
            [1.01, 1.01, 0.0, 0.2],
            [1.02, 1.02, 0.0, 0.3],
        ]);
        let d = dynamic_voxelize(&cloud, &cfg()).unwrap();
        assert_eq!(d.flat_features.shape()[0], 3);
        assert_eq!(d.voxel_id, vec![0, 0, 0]);
        assert_eq!(d.n_occ, 1);
    }

    #[test]
    fn dynamic_grouping_matches_brute_force() {
        let c = cfg();
        let mut rng = SplitMix64::new(31);
        let cloud = random_cloud(&mut rng, 250, 5.0);
        let d = dynamic_voxelize(&cloud, &c).unwrap();
        let mut expect: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for i in 0..cloud.len() {
            let row = cloud.row(i);
            if let Some(cell) = voxel_index(row[0], row[1], &c) {
                expect.entry(cell).or_default().push(i);
            }
        }
        assert_eq!(d.n_occ, expect.len());
        let mut kept = 0;
        for (i, &slot) in d.voxel_id.iter().enumerate() {
            let cell = (d.coords[slot][0], d.coords[slot][1]);
            let rows = expect.get(&cell).unwrap();
            let src = rows[kept_count(&d.voxel_id[..i], slot)];
            for k in 0..4 {
                assert_eq!(d.flat_features.at(&[i, k]), cloud.row(src)[k]);
            }
            kept += 1;
        }
        assert_eq!(kept, d.flat_features.shape()[0]);

        fn kept_count(ids: &[usize], slot: usize) -> usize {
            ids.iter().filter(|&&s| s == slot).count()
        }
    }

    #[test]
    fn densify_round_trip_matches_fixed() {
        let c = cfg();
        let mut rng = SplitMix64::new(13);
        let cloud = random_cloud(&mut rng, 400, 5.0);
        let fixed = fixed_voxelize(&cloud, &c).unwrap();
        assert_eq!(fixed.drop_stats, DropStats::default(), "sized for no drops");
        let dens = densify(&dynamic_voxelize(&cloud, &c).unwrap(), &c).unwrap();
        assert_eq!(fixed.features, dens.features);
        assert_eq!(fixed.mask, dens.mask);
        assert_eq!(fixed.coords, dens.coords);
        assert_eq!(fixed.num_voxels, dens.num_voxels);
    }

    #[test]
    fn densify_capacity_error_names_cell() {
        let mut c = cfg();
        c.cap_points = 2;
        let cloud = cloud_from(&[
            [0.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 0.0],
        ]);
        let d = dynamic_voxelize(&cloud, &c).unwrap();
        let err = densify(&d, &c).unwrap_err().to_string();
        assert!(err.contains("(16, 16)"), "{err}");
    }

    #[test]
    fn conservation_under_all_drop_kinds() {
        let mut c = cfg();
        c.cap_points = 3;
        c.max_voxels = 5;
        let mut rng = SplitMix64::new(99);
        // dense core so pillars overflow the cap, plus a far shell that
        // falls outside the grid
        let mut data = Vec::new();
        for _ in 0..400 {
            data.push(rng.uniform(-1.2, 1.2));
            data.push(rng.uniform(-1.2, 1.2));
            data.push(rng.uniform(0.0, 2.0));
            data.push(rng.next_f64());
        }
        for _ in 0..100 {
            data.push(rng.uniform(6.0, 9.0));
            data.push(rng.uniform(-9.0, 9.0));
            data.push(0.0);
            data.push(0.5);
        }
        let cloud = PointCloud::new(Tensor::from_vec(&[500, 4], data).unwrap()).unwrap();
        let b = fixed_voxelize(&cloud, &c).unwrap();
        let kept: usize = (0..b.num_voxels).map(|s| b.points_in(s)).sum();
        let s = &b.drop_stats;
        assert_eq!(
            kept + s.cap_dropped_points + s.out_of_range_points + s.voxel_dropped_points,
            cloud.len()
        );
        assert!(s.dropped_voxels > 0, "test should exercise voxel drops");
        assert!(s.cap_dropped_points > 0, "test should exercise cap drops");
    }

    #[test]
    fn determinism_identical_bytes() {
        let mut rng = SplitMix64::new(4);
        let cloud = random_cloud(&mut rng, 200, 5.0);
        let a = fixed_voxelize(&cloud, &cfg()).unwrap();
        let b = fixed_voxelize(&cloud, &cfg()).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.features), bits(&b.features));
        assert_eq!(bits(&a.mask), bits(&b.mask));
        assert_eq!(a.coords, b.coords);
    }

    #[test]
    fn csv_and_binary_round_trip() {
        let mut rng = SplitMix64::new(21);
        let cloud = random_cloud(&mut rng, 17, 5.0);
        let csv = cloud.to_csv();
        assert!(csv.starts_with("x,y,z,i\n"));
        let back = PointCloud::from_csv(csv.as_bytes()).unwrap();
        assert_eq!(cloud.len(), back.len());
        for (a, b) in cloud.points().data().iter().zip(back.points().data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }

        let mut buf = Vec::new();
        cloud.to_binary(&mut buf).unwrap();
        let back2 = PointCloud::from_binary(&mut buf.as_slice()).unwrap();
        assert_eq!(cloud.points().data(), back2.points().data());
    }
}
