//! Sparse voxelization of event windows.
//!
//! Events are binned into an `m x n x tau` grid over (x, y, t). Each occupied
//! cell becomes a 19-value row: the normalized cell center followed by 16
//! statistics of the events inside it. Rows are then restricted to a crop
//! region and the densest `k` cells are kept, zero-padded to exactly `k` rows.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::event_io::{EventPoint, EventWindow, Polarity};

pub const DEFAULT_GRID_M: usize = 34;
pub const DEFAULT_GRID_N: usize = 26;
pub const DEFAULT_GRID_TAU: usize = 20;
pub const SEARCH_TOP_K: usize = 4096;
pub const TEMPLATE_TOP_K: usize = 1024;
pub const FEATURE_LEN: usize = 16;
pub const ROW_LEN: usize = 3 + FEATURE_LEN;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub m: usize,
    pub n: usize,
    pub tau: usize,
    pub sensor_w: u16,
    pub sensor_h: u16,
    pub t_start: u64,
    pub t_end: u64,
}

impl GridSpec {
    pub fn new(m: usize, n: usize, tau: usize, window: &EventWindow) -> Self {
        Self {
            m,
            n,
            tau,
            sensor_w: window.sensor_w,
            sensor_h: window.sensor_h,
            t_start: window.t_start,
            t_end: window.t_end,
        }
    }

    pub fn with_defaults(window: &EventWindow) -> Self {
        Self::new(DEFAULT_GRID_M, DEFAULT_GRID_N, DEFAULT_GRID_TAU, window)
    }

    /// Total number of cells.
    pub fn cells(&self) -> usize {
        self.m * self.n * self.tau
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 || self.tau == 0 {
            return Err(Error::InvalidArgument(format!(
                "grid dimensions must be >= 1, got {}x{}x{}",
                self.m, self.n, self.tau
            )));
        }
        if self.sensor_w == 0 || self.sensor_h == 0 {
            return Err(Error::InvalidArgument(
                "sensor size must be positive".into(),
            ));
        }
        if self.t_end <= self.t_start {
            return Err(Error::InvalidArgument(format!(
                "empty time span [{}, {})",
                self.t_start, self.t_end
            )));
        }
        Ok(())
    }

    fn duration(&self) -> u64 {
        self.t_end - self.t_start
    }

    /// Cell of an in-bounds event. Integer arithmetic, clamped to the last cell.
    pub fn cell_of(&self, e: &EventPoint) -> CellIndex {
        let ix = (e.x as usize * self.m) / self.sensor_w as usize;
        let iy = (e.y as usize * self.n) / self.sensor_h as usize;
        let iz = ((u128::from(e.t - self.t_start) * self.tau as u128) / u128::from(self.duration()))
            as usize;
        CellIndex {
            z: iz.min(self.tau - 1),
            y: iy.min(self.n - 1),
            x: ix.min(self.m - 1),
        }
    }

    /// Pixel/time extent of a cell.
    pub fn bounds(&self, cell: CellIndex) -> CellBounds {
        let sx = f64::from(self.sensor_w) / self.m as f64;
        let sy = f64::from(self.sensor_h) / self.n as f64;
        let st = self.duration() as f64 / self.tau as f64;
        let t0 = self.t_start as f64;
        CellBounds {
            x: (cell.x as f64 * sx, (cell.x + 1) as f64 * sx),
            y: (cell.y as f64 * sy, (cell.y + 1) as f64 * sy),
            t: (t0 + cell.z as f64 * st, t0 + (cell.z + 1) as f64 * st),
        }
    }

    /// Normalized cell center in `[0,1]^3`.
    pub fn center(&self, cell: CellIndex) -> [f64; 3] {
        [
            (cell.x as f64 + 0.5) / self.m as f64,
            (cell.y as f64 + 0.5) / self.n as f64,
            (cell.z as f64 + 0.5) / self.tau as f64,
        ]
    }
}

/// Grid cell; field order gives the (z, y, x) lexicographic ordering.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize,
)]
pub struct CellIndex {
    pub z: usize,
    pub y: usize,
    pub x: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellBounds {
    pub x: (f64, f64),
    pub y: (f64, f64),
    pub t: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Voxel {
    pub cell: CellIndex,
    /// Cell center, normalized globally or to a crop region after filtering.
    pub coords: [f64; 3],
    pub feat: [f64; FEATURE_LEN],
    pub count: u32,
}

impl Voxel {
    pub fn padding() -> Self {
        Self {
            cell: CellIndex::default(),
            coords: [0.0; 3],
            feat: [0.0; FEATURE_LEN],
            count: 0,
        }
    }

    pub fn row(&self) -> [f64; ROW_LEN] {
        let mut r = [0.0; ROW_LEN];
        r[..3].copy_from_slice(&self.coords);
        r[3..].copy_from_slice(&self.feat);
        r
    }
}

/// Occupied voxels of one window, sorted by cell `(z, y, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelSet {
    pub grid: GridSpec,
    pub voxels: Vec<Voxel>,
    /// Event count of the source window.
    pub window_events: usize,
}

impl VoxelSet {
    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn total_count(&self) -> u64 {
        self.voxels.iter().map(|v| u64::from(v.count)).sum()
    }
}

/// Computes the 16 per-cell statistics, in order:
///
/// - 0: `log(1+count) / log(1+window_events)`
/// - 1, 2: fractions of positive and negative events
/// - 3: mean polarity (in `[-1, 1]`)
/// - 4..=6: mean in-cell offsets of x, y, t (each in `[0,1]`)
/// - 7..=9: standard deviations of those offsets
/// - 10, 11, 12: first-event time offset, last-event time offset, their difference
/// - 13..=15: covariances xy, xt, yt of the offsets
///
/// Events are accumulated in the given order with a one-pass co-moment update.
pub fn voxel_features(
    cell_events: &[EventPoint],
    bounds: &CellBounds,
    window_events: usize,
) -> Result<[f64; FEATURE_LEN]> {
    if cell_events.is_empty() {
        return Err(Error::InvalidArgument(
            "voxel features of an empty cell".into(),
        ));
    }
    let norm = |v: f64, (lo, hi): (f64, f64)| ((v - lo) / (hi - lo)).clamp(0.0, 1.0);

    let mut n = 0.0f64;
    let mut mean = [0.0f64; 3];
    // co-moments: xx, yy, tt, xy, xt, yt
    let mut m2 = [0.0f64; 6];
    let mut positive = 0usize;
    let (mut t_first, mut t_last) = (f64::INFINITY, f64::NEG_INFINITY);
    for e in cell_events {
        let o = [
            norm(f64::from(e.x), bounds.x),
            norm(f64::from(e.y), bounds.y),
            norm(e.t as f64, bounds.t),
        ];
        n += 1.0;
        let d_old = [o[0] - mean[0], o[1] - mean[1], o[2] - mean[2]];
        for a in 0..3 {
            mean[a] += d_old[a] / n;
        }
        let d_new = [o[0] - mean[0], o[1] - mean[1], o[2] - mean[2]];
        m2[0] += d_old[0] * d_new[0];
        m2[1] += d_old[1] * d_new[1];
        m2[2] += d_old[2] * d_new[2];
        m2[3] += d_old[0] * d_new[1];
        m2[4] += d_old[0] * d_new[2];
        m2[5] += d_old[1] * d_new[2];
        if e.p == Polarity::Positive {
            positive += 1;
        }
        t_first = t_first.min(o[2]);
        t_last = t_last.max(o[2]);
    }
    let count = cell_events.len();
    let pos_frac = positive as f64 / n;
    let neg_frac = (count - positive) as f64 / n;
    let window_norm = (1.0 + window_events.max(count) as f64).ln();
    let var = |i: usize| (m2[i] / n).max(0.0);
    Ok([
        (1.0 + count as f64).ln() / window_norm,
        pos_frac,
        neg_frac,
        pos_frac - neg_frac,
        mean[0],
        mean[1],
        mean[2],
        var(0).sqrt(),
        var(1).sqrt(),
        var(2).sqrt(),
        t_first,
        t_last,
        t_last - t_first,
        (m2[3] / n).clamp(-0.25, 0.25),
        (m2[4] / n).clamp(-0.25, 0.25),
        (m2[5] / n).clamp(-0.25, 0.25),
    ])
}

/// Bins a window into occupied voxels with their 19-value descriptors.
pub fn voxelize(window: &EventWindow, grid: &GridSpec) -> Result<VoxelSet> {
    grid.validate()?;
    for (i, e) in window.events.iter().enumerate() {
        if e.x >= grid.sensor_w || e.y >= grid.sensor_h {
            return Err(Error::Validation(format!(
                "event {i} at ({},{}) outside {}x{} sensor",
                e.x, e.y, grid.sensor_w, grid.sensor_h
            )));
        }
        if e.t < grid.t_start || e.t >= grid.t_end {
            return Err(Error::Validation(format!(
                "event {i} at t={} outside [{}, {})",
                e.t, grid.t_start, grid.t_end
            )));
        }
    }
    // stable sort keeps timestamp order inside each cell
    let mut keyed: Vec<(CellIndex, EventPoint)> = window
        .events
        .iter()
        .map(|e| (grid.cell_of(e), *e))
        .collect();
    keyed.sort_by_key(|(c, _)| *c);

    let mut groups: Vec<(CellIndex, Vec<EventPoint>)> = Vec::new();
    for (cell, e) in keyed {
        match groups.last_mut() {
            Some((c, evs)) if *c == cell => evs.push(e),
            _ => groups.push((cell, vec![e])),
        }
    }
    let total = window.events.len();
    let voxels = groups
        .into_par_iter()
        .map(|(cell, evs)| {
            let feat = voxel_features(&evs, &grid.bounds(cell), total)?;
            Ok(Voxel {
                cell,
                coords: grid.center(cell),
                feat,
                count: evs.len() as u32,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VoxelSet {
        grid: *grid,
        voxels,
        window_events: total,
    })
}

/// Axis-aligned crop region in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub center: (f64, f64),
    pub side_w: f64,
    pub side_h: f64,
}

impl Region {
    pub fn new(center: (f64, f64), side_w: f64, side_h: f64) -> Result<Self> {
        if !(side_w > 0.0 && side_h > 0.0) || !side_w.is_finite() || !side_h.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "region sides must be positive, got {side_w}x{side_h}"
            )));
        }
        Ok(Self {
            center,
            side_w,
            side_h,
        })
    }

    pub fn top_left(&self) -> (f64, f64) {
        (
            self.center.0 - 0.5 * self.side_w,
            self.center.1 - 0.5 * self.side_h,
        )
    }

    /// Half-open containment test.
    pub fn contains(&self, px: f64, py: f64) -> bool {
        let (l, t) = self.top_left();
        px >= l && px < l + self.side_w && py >= t && py < t + self.side_h
    }

    pub fn as_bbox(&self) -> BBox {
        let (l, t) = self.top_left();
        BBox::new(l, t, self.side_w, self.side_h)
    }
}

/// Region `factor` times the target size around its center, shifted (not
/// shrunk) to stay on the sensor. A side longer than the sensor is centered.
pub fn crop_region(target: &BBox, factor: f64, sensor_w: u16, sensor_h: u16) -> Result<Region> {
    if !(target.w > 0.0 && target.h > 0.0) || !target.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "cannot crop around degenerate box {target:?}"
        )));
    }
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "crop factor must be positive, got {factor}"
        )));
    }
    let (cx, cy) = target.center();
    let side_w = factor * target.w;
    let side_h = factor * target.h;
    let fit = |c: f64, side: f64, limit: f64| {
        if side >= limit {
            0.5 * limit
        } else {
            c.clamp(0.5 * side, limit - 0.5 * side)
        }
    };
    Region::new(
        (
            fit(cx, side_w, f64::from(sensor_w)),
            fit(cy, side_h, f64::from(sensor_h)),
        ),
        side_w,
        side_h,
    )
}

/// Keeps voxels whose cell center, in pixels, lies in `region`, and
/// re-normalizes their x/y coordinates to the region.
pub fn filter_voxels(voxels: &VoxelSet, region: &Region) -> VoxelSet {
    let (w, h) = (
        f64::from(voxels.grid.sensor_w),
        f64::from(voxels.grid.sensor_h),
    );
    let (left, top) = region.top_left();
    let kept = voxels
        .voxels
        .iter()
        .filter_map(|v| {
            let c = voxels.grid.center(v.cell);
            let (px, py) = (c[0] * w, c[1] * h);
            region.contains(px, py).then(|| Voxel {
                coords: [
                    ((px - left) / region.side_w).clamp(0.0, 1.0),
                    ((py - top) / region.side_h).clamp(0.0, 1.0),
                    c[2],
                ],
                ..*v
            })
        })
        .collect();
    VoxelSet {
        grid: voxels.grid,
        voxels: kept,
        window_events: voxels.window_events,
    }
}

/// Events inside a pixel region (pixel centers are not used; integer coordinates are tested).
pub fn filter_events(events: &[EventPoint], region: &Region) -> Vec<EventPoint> {
    events
        .iter()
        .copied()
        .filter(|e| region.contains(f64::from(e.x), f64::from(e.y)))
        .collect()
}

/// Fixed-size model input: `k` rows, occupied rows first.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelTensor {
    pub rows: Vec<Voxel>,
    pub occupied: usize,
}

impl VoxelTensor {
    pub fn k(&self) -> usize {
        self.rows.len()
    }

    pub fn occupied_rows(&self) -> &[Voxel] {
        &self.rows[..self.occupied]
    }

    /// Flattened `k x 19` values.
    pub fn to_flat(&self) -> Vec<f64> {
        self.rows.iter().flat_map(|v| v.row()).collect()
    }

    /// Header `u32 k, u32 occupied`, then `k*19` little-endian f32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.k() * ROW_LEN * 4);
        out.extend_from_slice(&(self.k() as u32).to_le_bytes());
        out.extend_from_slice(&(self.occupied as u32).to_le_bytes());
        for v in self.to_flat() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    /// Decodes [`to_bytes`](Self::to_bytes) output into `(k, occupied, values)`.
    pub fn parse_bytes(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
        if bytes.len() < 8 {
            return Err(Error::ParseAt {
                offset: bytes.len(),
                msg: "truncated voxel tensor header".into(),
            });
        }
        let k = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
        let occupied = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let need = 8 + k * ROW_LEN * 4;
        if bytes.len() != need || occupied > k {
            return Err(Error::ParseAt {
                offset: bytes.len().min(need),
                msg: format!(
                    "voxel tensor size mismatch: expected {need} bytes, got {}",
                    bytes.len()
                ),
            });
        }
        let values = bytes[8..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok((k, occupied, values))
    }
}

/// Densest `k` voxels (count descending, ties by `(z, y, x)` ascending),
/// zero-padded to exactly `k` rows.
pub fn select_top_k(voxels: &[Voxel], k: usize) -> Result<VoxelTensor> {
    if k == 0 {
        return Err(Error::InvalidArgument("top-k needs k >= 1".into()));
    }
    let mut sorted: Vec<Voxel> = voxels.iter().filter(|v| v.count > 0).copied().collect();
    sorted.sort_by(|a, b| b.count.cmp(&a.count).then(a.cell.cmp(&b.cell)));
    sorted.truncate(k);
    let occupied = sorted.len();
    sorted.resize(k, Voxel::padding());
    Ok(VoxelTensor {
        rows: sorted,
        occupied,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_window(seed: u64, n: usize, w: u16, h: u16, t0: u64, t1: u64) -> EventWindow {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut events: Vec<EventPoint> = (0..n)
            .map(|_| {
                let p = if rng.gen_bool(0.6) {
                    Polarity::Positive
                } else {
                    Polarity::Negative
                };
                EventPoint::new(
                    rng.gen_range(t0..t1),
                    rng.gen_range(0..w),
                    rng.gen_range(0..h),
                    p,
                )
            })
            .collect();
        events.sort_by_key(|e| e.t);
        EventWindow {
            events,
            t_start: t0,
            t_end: t1,
            sensor_w: w,
            sensor_h: h,
        }
    }

    #[test]
    fn empty_window_and_empty_span() {
        let win = random_window(0, 0, 346, 260, 0, 100);
        assert!(voxelize(&win, &GridSpec::with_defaults(&win))
            .unwrap()
            .is_empty());
        let bad = EventWindow { t_end: 0, ..win };
        assert!(voxelize(&bad, &GridSpec::with_defaults(&bad)).is_err());
    }

    #[test]
    fn single_event_forced_binning() {
        let win = EventWindow {
            events: vec![EventPoint::new(1000, 0, 0, Polarity::Positive)],
            t_start: 1000,
            t_end: 2000,
            sensor_w: 346,
            sensor_h: 260,
        };
        let set = voxelize(&win, &GridSpec::with_defaults(&win)).unwrap();
        assert_eq!(set.len(), 1);
        let v = set.voxels[0];
        assert_eq!(v.cell, CellIndex { z: 0, y: 0, x: 0 });
        assert_eq!(v.count, 1);
        assert_eq!(v.coords, [0.5 / 34.0, 0.5 / 26.0, 0.5 / 20.0]);
    }

    #[test]
    fn histogram_oracle_10k() {
        let win = random_window(42, 10_000, 346, 260, 5_000, 38_333);
        let grid = GridSpec::with_defaults(&win);
        assert_eq!(grid.cells(), 17_680);
        let set = voxelize(&win, &grid).unwrap();
        let mut dense = vec![0u32; grid.cells()];
        for e in &win.events {
            // float-free oracle: smallest cell whose upper edge exceeds the coordinate
            let ix = (0..34)
                .find(|&i| (e.x as usize) * 34 < (i + 1) * 346)
                .unwrap();
            let iy = (0..26)
                .find(|&i| (e.y as usize) * 26 < (i + 1) * 260)
                .unwrap();
            let iz = (0..20)
                .find(|&i| (e.t - 5_000) as u128 * 20 < (i as u128 + 1) * 33_333)
                .unwrap();
            dense[(iz * 26 + iy) * 34 + ix] += 1;
        }
        let occupied = dense.iter().filter(|&&c| c > 0).count();
        assert_eq!(set.len(), occupied);
        for v in &set.voxels {
            assert_eq!(dense[(v.cell.z * 26 + v.cell.y) * 34 + v.cell.x], v.count);
        }
        assert_eq!(set.total_count(), 10_000);
    }

    #[test]
    fn feature_examples() {
        let bounds = CellBounds {
            x: (0.0, 10.0),
            y: (0.0, 10.0),
            t: (0.0, 100.0),
        };
        let f =
            voxel_features(&[EventPoint::new(50, 5, 5, Polarity::Positive)], &bounds, 7).unwrap();
        assert_eq!(f[1] + f[2], 1.0);
        for i in [7, 8, 9, 12, 13, 14, 15] {
            assert_eq!(f[i], 0.0, "component {i}");
        }
        let two = [
            EventPoint::new(10, 1, 1, Polarity::Positive),
            EventPoint::new(20, 2, 2, Polarity::Negative),
        ];
        let f = voxel_features(&two, &bounds, 2).unwrap();
        assert_eq!(f[3], 0.0);
        assert_eq!(f[1], 0.5);
        assert_eq!(f[0], 1.0);
        assert!(voxel_features(&[], &bounds, 2).is_err());
    }

    #[test]
    fn feature_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let bounds = CellBounds {
            x: (20.352941176470587, 30.529411764705884),
            y: (10.0, 20.0),
            t: (1000.0, 2666.65),
        };
        let mut evs: Vec<EventPoint> = (0..100)
            .map(|_| {
                EventPoint::new(
                    rng.gen_range(1000..2666),
                    rng.gen_range(21..31),
                    rng.gen_range(10..20),
                    Polarity::Positive,
                )
            })
            .collect();
        evs.sort_by_key(|e| e.t);
        let f = voxel_features(&evs, &bounds, 1000).unwrap();
        let offs: Vec<[f64; 3]> = evs
            .iter()
            .map(|e| {
                [
                    (f64::from(e.x) - bounds.x.0) / (bounds.x.1 - bounds.x.0),
                    (f64::from(e.y) - bounds.y.0) / (bounds.y.1 - bounds.y.0),
                    (e.t as f64 - bounds.t.0) / (bounds.t.1 - bounds.t.0),
                ]
            })
            .collect();
        let n = offs.len() as f64;
        let mean: Vec<f64> = (0..3)
            .map(|a| offs.iter().map(|o| o[a]).sum::<f64>() / n)
            .collect();
        let cov = |a: usize, b: usize| {
            offs.iter()
                .map(|o| (o[a] - mean[a]) * (o[b] - mean[b]))
                .sum::<f64>()
                / n
        };
        let close = |x: f64, y: f64| (x - y).abs() <= 1e-9 * y.abs().max(1e-12);
        for a in 0..3 {
            assert!(close(f[4 + a], mean[a]));
            assert!(close(f[7 + a], cov(a, a).sqrt()));
        }
        assert!(close(f[13], cov(0, 1)));
        assert!(close(f[14], cov(0, 2)));
        assert!(close(f[15], cov(1, 2)));
    }

    #[test]
    fn crop_examples() {
        let r = crop_region(&BBox::new(100.0, 100.0, 20.0, 10.0), 2.0, 346, 260).unwrap();
        assert_eq!(r.center, (110.0, 105.0));
        assert_eq!((r.side_w, r.side_h), (40.0, 20.0));
        let r4 = crop_region(&BBox::new(100.0, 100.0, 20.0, 10.0), 4.0, 346, 260).unwrap();
        assert_eq!(r4.side_w, 2.0 * r.side_w);
        assert!(crop_region(&BBox::new(0.0, 0.0, 0.0, 5.0), 2.0, 346, 260).is_err());
    }

    #[test]
    fn crop_corners_shift_inward() {
        let (w, h) = (346.0, 260.0);
        for &(x, y) in &[
            (0.0, 0.0),
            (w - 30.0, 0.0),
            (0.0, h - 20.0),
            (w - 30.0, h - 20.0),
        ] {
            let r = crop_region(&BBox::new(x, y, 30.0, 20.0), 4.0, 346, 260).unwrap();
            let b = r.as_bbox();
            assert!(
                b.x >= 0.0 && b.y >= 0.0 && b.right() <= w && b.bottom() <= h,
                "{b:?}"
            );
            assert_eq!((b.w, b.h), (120.0, 80.0));
        }
    }

    #[test]
    fn filter_full_and_disjoint() {
        let win = random_window(3, 500, 100, 80, 0, 1000);
        let set = voxelize(&win, &GridSpec::new(10, 8, 4, &win)).unwrap();
        let full = filter_voxels(&set, &Region::new((50.0, 40.0), 100.0, 80.0).unwrap());
        assert_eq!(full.len(), set.len());
        for (a, b) in full.voxels.iter().zip(&set.voxels) {
            assert!((a.coords[0] - b.coords[0]).abs() < 1e-12);
            assert!((a.coords[1] - b.coords[1]).abs() < 1e-12);
        }
        let none = filter_voxels(&set, &Region::new((500.0, 500.0), 10.0, 10.0).unwrap());
        assert!(none.is_empty());
    }

    #[test]
    fn filter_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let win = random_window(4, 3000, 346, 260, 0, 10_000);
        let set = voxelize(&win, &GridSpec::with_defaults(&win)).unwrap();
        for _ in 0..20 {
            let region = Region::new(
                (rng.gen_range(0.0..346.0), rng.gen_range(0.0..260.0)),
                rng.gen_range(5.0..200.0),
                rng.gen_range(5.0..200.0),
            )
            .unwrap();
            let kept = filter_voxels(&set, &region);
            let (l, t) = region.top_left();
            let scan: Vec<CellIndex> = set
                .voxels
                .iter()
                .filter(|v| {
                    let px = (v.cell.x as f64 + 0.5) * 346.0 / 34.0;
                    let py = (v.cell.y as f64 + 0.5) * 260.0 / 26.0;
                    px >= l && px < l + region.side_w && py >= t && py < t + region.side_h
                })
                .map(|v| v.cell)
                .collect();
            assert_eq!(kept.voxels.iter().map(|v| v.cell).collect::<Vec<_>>(), scan);
            assert!(kept
                .voxels
                .iter()
                .all(|v| v.coords.iter().all(|c| (0.0..=1.0).contains(c))));
        }
    }

    fn voxel_with(count: u32, cell: CellIndex) -> Voxel {
        Voxel {
            cell,
            count,
            ..Voxel::padding()
        }
    }

    #[test]
    fn top_k_padding_and_ties() {
        let vs: Vec<Voxel> = (0..3)
            .map(|i| {
                voxel_with(
                    2,
                    CellIndex {
                        z: 2 - i,
                        y: 0,
                        x: i,
                    },
                )
            })
            .collect();
        let t = select_top_k(&vs, 5).unwrap();
        assert_eq!(t.k(), 5);
        assert_eq!(t.occupied, 3);
        assert!(t.rows[3..]
            .iter()
            .all(|r| r.row() == [0.0; ROW_LEN] && r.count == 0));
        let zs: Vec<usize> = t.occupied_rows().iter().map(|v| v.cell.z).collect();
        assert_eq!(zs, vec![0, 1, 2]);
        assert!(select_top_k(&vs, 0).is_err());
    }

    #[test]
    fn tensor_bytes_round_trip() {
        let win = random_window(5, 200, 346, 260, 0, 1000);
        let set = voxelize(&win, &GridSpec::with_defaults(&win)).unwrap();
        let t = select_top_k(&set.voxels, 64).unwrap();
        let bytes = t.to_bytes();
        let (k, occ, vals) = VoxelTensor::parse_bytes(&bytes).unwrap();
        assert_eq!((k, occ), (64, t.occupied));
        let flat = t.to_flat();
        assert!(vals.iter().zip(&flat).all(|(a, b)| *a == *b as f32));
        assert!(VoxelTensor::parse_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn conservation_and_ranges(seed in 0u64..500, n in 1usize..2000) {
            let win = random_window(seed, n, 346, 260, 100, 50_000);
            let grid = GridSpec::with_defaults(&win);
            let set = voxelize(&win, &grid).unwrap();
            prop_assert_eq!(set.total_count(), n as u64);
            prop_assert!(set.len() <= n.min(grid.cells()));
            for v in &set.voxels {
                prop_assert!(v.coords.iter().all(|c| (0.0..=1.0).contains(c)));
                for (i, f) in v.feat.iter().enumerate() {
                    let ok = match i {
                        3 => (-1.0..=1.0).contains(f),
                        13..=15 => (-0.25..=0.25).contains(f),
                        _ => (0.0..=1.0).contains(f),
                    };
                    prop_assert!(ok, "feature {} = {}", i, f);
                }
            }
        }

        #[test]
        fn top_k_idempotent(seed in 0u64..500, k in 1usize..300) {
            let win = random_window(seed, 800, 64, 48, 0, 1000);
            let set = voxelize(&win, &GridSpec::new(8, 6, 5, &win)).unwrap();
            let once = select_top_k(&set.voxels, k).unwrap();
            let twice = select_top_k(once.occupied_rows(), k).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn filter_commutes_on_cell_aligned_regions(seed in 0u64..300, cx0 in 0usize..6, cy0 in 0usize..4, cw in 1usize..4, ch in 1usize..4) {
            // 60x40 sensor, 6x4 grid: cells are 10x10 pixels
            let region = Region::new(
                ((cx0 as f64 + cw as f64 / 2.0) * 10.0, (cy0 as f64 + ch as f64 / 2.0) * 10.0),
                cw as f64 * 10.0,
                ch as f64 * 10.0,
            ).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x_hi = ((cx0 + cw) * 10).min(60) as u16;
            let y_hi = ((cy0 + ch) * 10).min(40) as u16;
            let mut events: Vec<EventPoint> = (0..200).map(|_| EventPoint::new(
                rng.gen_range(0..1000), rng.gen_range((cx0 * 10) as u16..x_hi), rng.gen_range((cy0 * 10) as u16..y_hi), Polarity::Positive,
            )).collect();
            events.sort_by_key(|e| e.t);
            let win = EventWindow { events, t_start: 0, t_end: 1000, sensor_w: 60, sensor_h: 40 };
            let grid = GridSpec::new(6, 4, 3, &win);
            let a = voxelize(&EventWindow { events: filter_events(&win.events, &region), ..win.clone() }, &grid).unwrap();
            let b = filter_voxels(&voxelize(&win, &grid).unwrap(), &region);
            let cells = |s: &VoxelSet| s.voxels.iter().map(|v| (v.cell, v.count)).collect::<Vec<_>>();
            prop_assert_eq!(cells(&a), cells(&b));
        }
    }
}
