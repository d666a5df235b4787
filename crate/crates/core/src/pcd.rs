//! Point-cloud container and the dataset-construction operators: voxel grid
//! sampling, view mixup, and brute-force k-nearest-neighbor search.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::par;

/// Voxel size used when building training clouds, meters.
pub const DEFAULT_GRID_CELL: f64 = 0.02;

/// World-frame points with per-point provenance back to the source image.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    positions: Vec<[f64; 3]>,
    colors: Option<Vec<[f32; 3]>>,
    src_uv: Vec<[f64; 2]>,
    src_view: Vec<u32>,
    point_id: Vec<u64>,
    source_size: (usize, usize),
}

impl PointCloud {
    /// Validates field lengths, finiteness, pixel bounds, and id uniqueness.
    pub fn from_parts(
        positions: Vec<[f64; 3]>,
        colors: Option<Vec<[f32; 3]>>,
        src_uv: Vec<[f64; 2]>,
        src_view: Vec<u32>,
        point_id: Vec<u64>,
        source_size: (usize, usize),
    ) -> Result<Self> {
        let n = positions.len();
        let color_len = colors.as_ref().map_or(n, Vec::len);
        if src_uv.len() != n || src_view.len() != n || point_id.len() != n || color_len != n {
            return Err(Error::invalid("point cloud fields have different lengths"));
        }
        if positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("point positions must be finite"));
        }
        let (w, h) = source_size;
        if src_uv
            .iter()
            .any(|uv| !(uv[0] >= 0.0 && uv[0] < w as f64 && uv[1] >= 0.0 && uv[1] < h as f64))
        {
            return Err(Error::invalid(format!(
                "source pixel outside the {w}x{h} source image"
            )));
        }
        let mut ids = point_id.clone();
        ids.sort_unstable();
        if ids.windows(2).any(|p| p[0] == p[1]) {
            return Err(Error::invalid("point ids must be unique"));
        }
        Ok(PointCloud {
            positions,
            colors,
            src_uv,
            src_view,
            point_id,
            source_size,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn colors(&self) -> Option<&[[f32; 3]]> {
        self.colors.as_deref()
    }

    pub fn src_uv(&self) -> &[[f64; 2]] {
        &self.src_uv
    }

    pub fn src_view(&self) -> &[u32] {
        &self.src_view
    }

    pub fn point_id(&self) -> &[u64] {
        &self.point_id
    }

    /// `(width, height)` of the image the points were lifted from.
    pub fn source_size(&self) -> (usize, usize) {
        self.source_size
    }

    /// Rows of `self` in the given order. Repeated rows are allowed; ids are
    /// carried over verbatim, so the result may hold duplicate ids. Used
    /// internally where the caller tracks identity separately.
    pub(crate) fn gather_rows(&self, rows: &[usize]) -> PointCloud {
        PointCloud {
            positions: rows.iter().map(|&r| self.positions[r]).collect(),
            colors: self.colors.as_ref().map(|c| rows.iter().map(|&r| c[r]).collect()),
            src_uv: rows.iter().map(|&r| self.src_uv[r]).collect(),
            src_view: rows.iter().map(|&r| self.src_view[r]).collect(),
            point_id: rows.iter().map(|&r| self.point_id[r]).collect(),
            source_size: self.source_size,
        }
    }

    pub(crate) fn positions_mut(&mut self) -> &mut [[f64; 3]] {
        &mut self.positions
    }

    pub(crate) fn colors_mut(&mut self) -> Option<&mut Vec<[f32; 3]>> {
        self.colors.as_mut()
    }

    /// Copies of the listed rows, with ids kept. Rows must be distinct.
    pub fn select(&self, rows: &[usize]) -> Result<PointCloud> {
        if rows.iter().any(|&r| r >= self.len()) {
            return Err(Error::invalid("row index out of range"));
        }
        let out = self.gather_rows(rows);
        let mut ids = out.point_id.clone();
        ids.sort_unstable();
        if ids.windows(2).any(|p| p[0] == p[1]) {
            return Err(Error::invalid("select requires distinct rows"));
        }
        Ok(out)
    }
}

#[inline]
fn voxel_key(p: &[f64; 3], cell: f64) -> [i64; 3] {
    [
        (p[0] / cell).floor() as i64,
        (p[1] / cell).floor() as i64,
        (p[2] / cell).floor() as i64,
    ]
}

/// Keeps one point per occupied `cell`³ voxel: the one with the smallest
/// `point_id`. Survivors keep their relative input order.
pub fn grid_sample(pc: &PointCloud, cell: f64) -> Result<PointCloud> {
    if !(cell > 0.0 && cell.is_finite()) {
        return Err(Error::invalid(format!("grid cell must be positive, got {cell}")));
    }
    let mut best: HashMap<[i64; 3], usize> = HashMap::with_capacity(pc.len());
    for (row, p) in pc.positions.iter().enumerate() {
        best.entry(voxel_key(p, cell))
            .and_modify(|r| {
                if pc.point_id[row] < pc.point_id[*r] {
                    *r = row;
                }
            })
            .or_insert(row);
    }
    let mut rows: Vec<usize> = best.into_values().collect();
    rows.sort_unstable();
    Ok(pc.gather_rows(&rows))
}

/// With probability `probability`, concatenates `b` onto `a`. View ids and
/// point ids of `b` are offset past those of `a` so both stay unique.
/// Returns the output cloud and whether mixing happened.
pub fn view_mixup<R: Rng + ?Sized>(
    a: &PointCloud,
    b: &PointCloud,
    probability: f64,
    rng: &mut R,
) -> Result<(PointCloud, bool)> {
    if !(0.0..=1.0).contains(&probability) {
        return Err(Error::invalid(format!(
            "mixup probability must be in [0, 1], got {probability}"
        )));
    }
    // always draw so the stream advances identically for every probability
    let draw: f64 = rng.random();
    if draw >= probability {
        return Ok((a.clone(), false));
    }
    if a.source_size != b.source_size {
        return Err(Error::invalid(
            "mixup requires clouds lifted from equally sized images",
        ));
    }
    if a.colors.is_some() != b.colors.is_some() {
        return Err(Error::invalid(
            "mixup requires both clouds to carry colors or neither",
        ));
    }
    let view_offset = a.src_view.iter().max().map_or(0, |m| m + 1);
    let id_offset = a.point_id.iter().max().map_or(0, |m| m + 1);
    let mut out = a.clone();
    out.positions.extend_from_slice(&b.positions);
    if let (Some(ca), Some(cb)) = (out.colors.as_mut(), b.colors.as_ref()) {
        ca.extend_from_slice(cb);
    }
    out.src_uv.extend_from_slice(&b.src_uv);
    out.src_view.extend(b.src_view.iter().map(|v| v + view_offset));
    out.point_id.extend(b.point_id.iter().map(|id| id + id_offset));
    Ok((out, true))
}

/// Row-major `N × k` neighbor table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborTable {
    pub k: usize,
    pub indices: Vec<usize>,
}

impl NeighborTable {
    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn len(&self) -> usize {
        self.indices.len().checked_div(self.k).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[inline]
fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

type Candidate = (f64, u64, usize);

fn candidate_order(a: &Candidate, b: &Candidate) -> std::cmp::Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

fn check_knn_args(positions: &[[f64; 3]], ids: &[u64], k: usize) -> Result<()> {
    let n = positions.len();
    if ids.len() != n {
        return Err(Error::invalid(format!("{} ids for {n} points", ids.len())));
    }
    if k == 0 || k > n {
        return Err(Error::invalid(format!("k={k} must be in 1..={n}")));
    }
    if positions.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("kNN needs finite positions"));
    }
    Ok(())
}

/// Reference O(n²) search with the same ordering as [`knn_positions`].
pub fn knn_brute_force(positions: &[[f64; 3]], ids: &[u64], k: usize) -> Result<NeighborTable> {
    check_knn_args(positions, ids, k)?;
    let n = positions.len();
    let rows = par::map_range(n, |i| {
        let p = &positions[i];
        let mut cand: Vec<Candidate> = positions
            .iter()
            .enumerate()
            .map(|(j, q)| (dist2(p, q), ids[j], j))
            .collect();
        if k < n {
            cand.select_nth_unstable_by(k - 1, candidate_order);
            cand.truncate(k);
        }
        cand.sort_unstable_by(candidate_order);
        cand.into_iter().map(|c| c.2).collect::<Vec<_>>()
    });
    Ok(NeighborTable {
        k,
        indices: rows.into_iter().flatten().collect(),
    })
}

/// Uniform voxel hash used to restrict kNN candidates.
struct CellIndex {
    origin: [f64; 3],
    size: f64,
    cells: HashMap<[i64; 3], Vec<usize>>,
}

impl CellIndex {
    fn new(positions: &[[f64; 3]], k: usize) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in positions {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        // sized for about k points per cell on a surface-like cloud
        let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
        let per_side = (positions.len() as f64 / k as f64).sqrt().max(1.0);
        let size = if extent > 0.0 { extent / per_side } else { 1.0 };
        let mut index = CellIndex {
            origin: lo,
            size,
            cells: HashMap::new(),
        };
        for (i, p) in positions.iter().enumerate() {
            index.cells.entry(index.key(p)).or_default().push(i);
        }
        index
    }

    fn key(&self, p: &[f64; 3]) -> [i64; 3] {
        std::array::from_fn(|a| ((p[a] - self.origin[a]) / self.size).floor() as i64)
    }
}

/// k nearest neighbors of every point (self included), ordered by distance
/// with ties broken by the smaller id.
///
/// Candidates are gathered ring by ring from a voxel hash until the k-th
/// distance is covered, so the result equals [`knn_brute_force`] exactly.
pub fn knn_positions(positions: &[[f64; 3]], ids: &[u64], k: usize) -> Result<NeighborTable> {
    check_knn_args(positions, ids, k)?;
    let n = positions.len();
    let index = CellIndex::new(positions, k);
    let rows = par::map_range(n, |i| {
        let p = &positions[i];
        let center = index.key(p);
        let mut cand: Vec<Candidate> = Vec::new();
        let mut ring: i64 = 0;
        loop {
            for dx in -ring..=ring {
                for dy in -ring..=ring {
                    for dz in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        let key = [center[0] + dx, center[1] + dy, center[2] + dz];
                        if let Some(members) = index.cells.get(&key) {
                            cand.extend(members.iter().map(|&j| (dist2(p, &positions[j]), ids[j], j)));
                        }
                    }
                }
            }
            // every point within ring·size of p has now been seen
            let covered = ring as f64 * index.size;
            if cand.len() >= k {
                cand.select_nth_unstable_by(k - 1, candidate_order);
                if cand[k - 1].0 < covered * covered || cand.len() == n {
                    break;
                }
            } else if cand.len() == n {
                break;
            }
            ring += 1;
        }
        cand.select_nth_unstable_by(k - 1, candidate_order);
        cand.truncate(k);
        cand.sort_unstable_by(candidate_order);
        cand.into_iter().map(|c| c.2).collect::<Vec<_>>()
    });
    Ok(NeighborTable {
        k,
        indices: rows.into_iter().flatten().collect(),
    })
}

/// [`knn_positions`] over a cloud.
pub fn knn_indices(pc: &PointCloud, k: usize) -> Result<NeighborTable> {
    knn_positions(&pc.positions, &pc.point_id, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn cloud(points: &[[f64; 3]]) -> PointCloud {
        let n = points.len();
        PointCloud::from_parts(
            points.to_vec(),
            None,
            (0..n).map(|i| [(i % 10) as f64, (i / 10 % 10) as f64]).collect(),
            vec![0; n],
            (0..n as u64).collect(),
            (10, 10),
        )
        .unwrap()
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize, extent: f64) -> PointCloud {
        let pts: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                [
                    rng.random_range(-extent..extent),
                    rng.random_range(-extent..extent),
                    rng.random_range(-extent..extent),
                ]
            })
            .collect();
        cloud(&pts)
    }

    #[test]
    fn from_parts_checks_invariants() {
        let ok = PointCloud::from_parts(vec![[0.0; 3]], None, vec![[1.0, 1.0]], vec![0], vec![7], (2, 2));
        assert!(ok.is_ok());
        let dup = PointCloud::from_parts(
            vec![[0.0; 3]; 2],
            None,
            vec![[1.0, 1.0]; 2],
            vec![0; 2],
            vec![7, 7],
            (2, 2),
        );
        assert!(dup.is_err());
        let oob = PointCloud::from_parts(vec![[0.0; 3]], None, vec![[2.0, 1.0]], vec![0], vec![1], (2, 2));
        assert!(oob.is_err());
        let nan = PointCloud::from_parts(
            vec![[f64::NAN, 0.0, 0.0]],
            None,
            vec![[0.0, 0.0]],
            vec![0],
            vec![1],
            (2, 2),
        );
        assert!(nan.is_err());
    }

    #[test]
    fn close_points_share_a_voxel() {
        let pc = cloud(&[[0.005, 0.005, 0.005], [0.006, 0.005, 0.005]]);
        let out = grid_sample(&pc, 0.02).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out.point_id(), &[0]);
    }

    #[test]
    fn survivor_is_smallest_id() {
        let pc = PointCloud::from_parts(
            vec![[0.001, 0.0, 0.0], [0.002, 0.0, 0.0]],
            None,
            vec![[0.0, 0.0], [1.0, 0.0]],
            vec![0, 0],
            vec![9, 3],
            (2, 1),
        )
        .unwrap();
        let out = grid_sample(&pc, 0.02).unwrap();
        assert_eq!(out.point_id(), &[3]);
        assert_eq!(out.src_uv(), &[[1.0, 0.0]]);
    }

    #[test]
    fn lattice_coarser_than_cell_survives() {
        let mut pts = Vec::new();
        for i in 0..5 {
            for j in 0..5 {
                for k in 0..4 {
                    pts.push([
                        i as f64 * 0.05 + 0.01,
                        j as f64 * 0.05 + 0.01,
                        k as f64 * 0.05 + 0.01,
                    ]);
                }
            }
        }
        let pc = cloud(&pts);
        assert_eq!(grid_sample(&pc, 0.02).unwrap().len(), pts.len());
    }

    #[test]
    fn grid_sample_rejects_bad_cell() {
        let pc = cloud(&[[0.0; 3]]);
        assert!(grid_sample(&pc, 0.0).is_err());
        assert!(grid_sample(&pc, -1.0).is_err());
    }

    #[test]
    fn grid_sample_is_idempotent_on_random_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let pc = random_cloud(&mut rng, 300, 0.1);
            let once = grid_sample(&pc, 0.02).unwrap();
            let twice = grid_sample(&once, 0.02).unwrap();
            assert_eq!(once, twice);
            assert!(once.len() <= pc.len());
        }
    }

    #[test]
    fn forced_mixup_and_pass_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = cloud(&[[0.0; 3], [1.0, 0.0, 0.0]]);
        let b = cloud(&[[2.0, 0.0, 0.0], [3.0, 0.0, 0.0], [4.0, 0.0, 0.0]]);
        let (m, mixed) = view_mixup(&a, &b, 1.0, &mut rng).unwrap();
        assert!(mixed);
        assert_eq!(m.len(), 5);
        assert_eq!(m.src_view(), &[0, 0, 1, 1, 1]);
        assert_eq!(m.point_id(), &[0, 1, 2, 3, 4]);
        assert_eq!(&m.positions()[2..], b.positions());
        assert_eq!(&m.src_uv()[2..], b.src_uv());
        // ids stay unique, so the result re-validates
        assert!(PointCloud::from_parts(
            m.positions().to_vec(),
            None,
            m.src_uv().to_vec(),
            m.src_view().to_vec(),
            m.point_id().to_vec(),
            m.source_size()
        )
        .is_ok());
        let (p, mixed) = view_mixup(&a, &b, 0.0, &mut rng).unwrap();
        assert!(!mixed);
        assert_eq!(p, a);
    }

    #[test]
    fn mixup_frequency_matches_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let a = cloud(&[[0.0; 3]]);
        let b = cloud(&[[1.0; 3]]);
        let trials = 10_000;
        let hits = (0..trials)
            .filter(|_| view_mixup(&a, &b, 0.5, &mut rng).unwrap().1)
            .count();
        let freq = hits as f64 / trials as f64;
        assert!((freq - 0.5).abs() <= 0.02, "frequency {freq}");
    }

    #[test]
    fn knn_self_is_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pc = random_cloud(&mut rng, 50, 1.0);
        let t = knn_indices(&pc, 1).unwrap();
        assert!((0..50).all(|i| t.row(i) == [i]));
    }

    #[test]
    fn knn_collinear_hand_case() {
        let pc = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]]);
        let t = knn_indices(&pc, 2).unwrap();
        assert_eq!(t.row(1), &[1, 0]);
    }

    #[test]
    fn knn_tie_break_by_id() {
        // points 1 and 2 are equidistant from point 0; point 2 has the smaller id
        let pc = PointCloud::from_parts(
            vec![[0.0; 3], [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]],
            None,
            vec![[0.0, 0.0]; 3],
            vec![0; 3],
            vec![5, 9, 2],
            (1, 1),
        )
        .unwrap();
        let t = knn_indices(&pc, 2).unwrap();
        assert_eq!(t.row(0), &[0, 2]);
    }

    #[test]
    fn knn_rejects_k_above_n() {
        let pc = cloud(&[[0.0; 3]]);
        assert!(knn_indices(&pc, 2).is_err());
        assert!(knn_indices(&pc, 0).is_err());
    }

    #[test]
    fn knn_matches_full_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pc = random_cloud(&mut rng, 500, 1.0);
        let k = 12;
        let t = knn_indices(&pc, k).unwrap();
        for i in 0..pc.len() {
            let mut all: Vec<(f64, u64, usize)> = (0..pc.len())
                .map(|j| {
                    let (a, b) = (pc.positions()[i], pc.positions()[j]);
                    let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
                    (d, pc.point_id()[j], j)
                })
                .collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let expect: Vec<usize> = all[..k].iter().map(|c| c.2).collect();
            assert_eq!(t.row(i), expect.as_slice(), "row {i}");
        }
    }

    proptest! {
        #[test]
        fn knn_distances_non_decreasing(seed in any::<u64>(), n in 2usize..60, k in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pc = random_cloud(&mut rng, n, 1.0);
            let k = k.min(n);
            let t = knn_indices(&pc, k).unwrap();
            for i in 0..n {
                let d: Vec<f64> = t.row(i).iter().map(|&j| dist2(&pc.positions()[i], &pc.positions()[j])).collect();
                prop_assert!(d.windows(2).all(|w| w[0] <= w[1]));
            }
        }

        #[test]
        fn voxel_knn_equals_brute_force(seed in any::<u64>(), n in 1usize..300, k in 1usize..20, flat in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = k.min(n);
            // quantized coordinates create many exact distance ties
            let pos: Vec<[f64; 3]> = (0..n)
                .map(|_| {
                    let z = if flat { 0.0 } else { rng.random_range(0..5) as f64 * 0.25 };
                    [rng.random_range(0..12) as f64 * 0.25, rng.random_range(0..12) as f64 * 0.25, z]
                })
                .collect();
            let ids: Vec<u64> = (0..n as u64).map(|i| (i * 7919) % 1009).collect();
            prop_assert_eq!(knn_positions(&pos, &ids, k).unwrap(), knn_brute_force(&pos, &ids, k).unwrap());
        }

        #[test]
        fn grid_sample_preserves_fields(seed in any::<u64>(), n in 1usize..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pc = random_cloud(&mut rng, n, 0.2);
            let out = grid_sample(&pc, 0.05).unwrap();
            prop_assert!(out.len() <= pc.len());
            for i in 0..out.len() {
                let src = pc.point_id().iter().position(|&id| id == out.point_id()[i]).unwrap();
                prop_assert_eq!(out.positions()[i], pc.positions()[src]);
                prop_assert_eq!(out.src_uv()[i], pc.src_uv()[src]);
            }
        }
    }
}
