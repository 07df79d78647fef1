//! Point cloud to DSM binning and IDW hole filling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::fusion::PointCloud;
use crate::rasters::{Extent, RasterGrid, DEFAULT_NODATA};

use super::ProductsError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    Median,
    Max,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DsmConfig {
    pub cell_size: f64,
    pub aggregator: Aggregator,
    /// Chebyshev search radius for hole filling, in cells.
    pub fill_radius: usize,
    pub fill_k: usize,
    pub aoi: Option<Extent>,
    pub nodata: f64,
}

impl Default for DsmConfig {
    fn default() -> Self {
        Self {
            cell_size: 1.0,
            aggregator: Aggregator::Median,
            fill_radius: 3,
            fill_k: 8,
            aoi: None,
            nodata: DEFAULT_NODATA,
        }
    }
}

impl DsmConfig {
    pub fn validate(&self) -> Result<(), ProductsError> {
        if !(self.cell_size > 0.0 && self.cell_size.is_finite()) {
            return Err(ProductsError::InvalidConfig(format!("cell_size {}", self.cell_size)));
        }
        if self.fill_k == 0 {
            return Err(ProductsError::InvalidConfig("fill_k must be at least 1".into()));
        }
        if let Some(aoi) = self.aoi {
            if !aoi.is_valid() {
                return Err(ProductsError::EmptyExtent);
            }
        }
        Ok(())
    }
}

/// Cell of `(x, y)`, counting points on the far grid edges as inside.
pub(crate) fn locate(grid: &RasterGrid, x: f64, y: f64) -> Option<(usize, usize)> {
    if let Some(c) = grid.cell_of(x, y) {
        return Some(c);
    }
    let e = grid.extent();
    if !e.contains(x, y) {
        return None;
    }
    let col = (((x - e.min_x) / grid.cell_size).floor() as usize).min(grid.ncols() - 1);
    let row = (((e.max_y - y) / grid.cell_size).floor() as usize).min(grid.nrows() - 1);
    Some((col, row))
}

fn cloud_extent(cloud: &PointCloud) -> Option<Extent> {
    let mut e = Extent::new(f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in cloud.points() {
        e.min_x = e.min_x.min(p.position.x);
        e.min_y = e.min_y.min(p.position.y);
        e.max_x = e.max_x.max(p.position.x);
        e.max_y = e.max_y.max(p.position.y);
    }
    if cloud.is_empty() {
        None
    } else {
        Some(e)
    }
}

fn aggregate(values: &mut [f64], how: Aggregator) -> f64 {
    match how {
        Aggregator::Max => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        Aggregator::Mean => values.iter().sum::<f64>() / values.len() as f64,
        Aggregator::Median => {
            values.sort_unstable_by(f64::total_cmp);
            let n = values.len();
            if n % 2 == 1 {
                values[n / 2]
            } else {
                0.5 * (values[n / 2 - 1] + values[n / 2])
            }
        }
    }
}

/// Bins point elevations into cells of the AOI (or the cloud's bounding
/// box) and reduces each cell with the configured aggregator.
pub fn rasterize_dsm(cloud: &PointCloud, cfg: &DsmConfig) -> Result<RasterGrid, ProductsError> {
    cfg.validate()?;
    let extent = match cfg.aoi {
        Some(aoi) => aoi,
        None => {
            let mut e = cloud_extent(cloud).ok_or(ProductsError::EmptyExtent)?;
            // a degenerate box still gets one cell
            if e.max_x <= e.min_x {
                e.max_x = e.min_x + cfg.cell_size;
            }
            if e.max_y <= e.min_y {
                e.max_y = e.min_y + cfg.cell_size;
            }
            e
        }
    };
    let mut grid = RasterGrid::covering(extent, cfg.cell_size, cfg.nodata)?;
    let ncells = grid.ncols() * grid.nrows();

    // counting sort of point elevations by cell, preserving cloud order
    let cells: Vec<Option<usize>> = cloud
        .points()
        .iter()
        .map(|p| locate(&grid, p.position.x, p.position.y).map(|(c, r)| r * grid.ncols() + c))
        .collect();
    let mut start = vec![0usize; ncells + 1];
    for c in cells.iter().flatten() {
        start[c + 1] += 1;
    }
    for i in 0..ncells {
        start[i + 1] += start[i];
    }
    let mut fill = start.clone();
    let mut zs = vec![0.0; start[ncells]];
    for (p, c) in cloud.points().iter().zip(&cells) {
        if let Some(c) = *c {
            zs[fill[c]] = p.position.z;
            fill[c] += 1;
        }
    }

    let mut chunks: Vec<&mut [f64]> = Vec::with_capacity(ncells);
    let mut rest = zs.as_mut_slice();
    for i in 0..ncells {
        let (head, tail) = rest.split_at_mut(start[i + 1] - start[i]);
        chunks.push(head);
        rest = tail;
    }
    let values: Vec<Option<f64>> = chunks
        .into_par_iter()
        .map(|vals| (!vals.is_empty()).then(|| aggregate(vals, cfg.aggregator)))
        .collect();
    let ncols = grid.ncols();
    for (i, v) in values.into_iter().enumerate() {
        grid.set(i % ncols, i / ncols, v);
    }
    Ok(grid)
}

/// Inverse-distance (power 2) fill of nodata cells from the `fill_k`
/// nearest originally valid cells within the Chebyshev radius.
pub fn fill_holes(grid: &RasterGrid, cfg: &DsmConfig) -> RasterGrid {
    let (ncols, nrows) = (grid.ncols(), grid.nrows());
    let radius = cfg.fill_radius as isize;
    let k = cfg.fill_k.max(1);
    let rows: Vec<Vec<Option<f64>>> = (0..nrows)
        .into_par_iter()
        .map(|row| {
            let mut near: Vec<(i64, usize, usize, f64)> = Vec::new();
            (0..ncols)
                .map(|col| {
                    if let Some(v) = grid.get(col, row) {
                        return Some(v);
                    }
                    if radius == 0 {
                        return None;
                    }
                    near.clear();
                    for dr in -radius..=radius {
                        let r = row as isize + dr;
                        if r < 0 || r >= nrows as isize {
                            continue;
                        }
                        for dc in -radius..=radius {
                            let c = col as isize + dc;
                            if c < 0 || c >= ncols as isize {
                                continue;
                            }
                            if let Some(v) = grid.get(c as usize, r as usize) {
                                let d2 = (dr * dr + dc * dc) as i64;
                                near.push((d2, r as usize, c as usize, v));
                            }
                        }
                    }
                    if near.is_empty() {
                        return None;
                    }
                    near.sort_unstable_by(|a, b| (a.0, a.1, a.2).cmp(&(b.0, b.1, b.2)));
                    let (mut num, mut den) = (0.0, 0.0);
                    for &(d2, _, _, v) in near.iter().take(k) {
                        let w = 1.0 / d2 as f64;
                        num += w * v;
                        den += w;
                    }
                    Some(num / den)
                })
                .collect()
        })
        .collect();
    let mut out = grid.clone();
    for (row, vals) in rows.into_iter().enumerate() {
        for (col, v) in vals.into_iter().enumerate() {
            out.set(col, row, v);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::CloudPoint;
    use crate::geometry::WorldPoint;
    use proptest::prelude::*;

    fn cloud(pts: &[(f64, f64, f64)]) -> PointCloud {
        PointCloud::from_points(
            pts.iter()
                .map(|&(x, y, z)| CloudPoint {
                    position: WorldPoint::new(x, y, z),
                    color: None,
                    source: Some(0),
                })
                .collect(),
        )
    }

    fn unit_aoi(agg: Aggregator) -> DsmConfig {
        DsmConfig {
            aoi: Some(Extent::new(0.0, 0.0, 1.0, 1.0)),
            aggregator: agg,
            ..DsmConfig::default()
        }
    }

    #[test]
    fn single_point() {
        let g = rasterize_dsm(&cloud(&[(0.2, 0.3, 150.0)]), &unit_aoi(Aggregator::Median)).unwrap();
        assert_eq!((g.ncols(), g.nrows()), (1, 1));
        assert_eq!(g.get(0, 0), Some(150.0));
    }

    #[test]
    fn aggregators() {
        let c = cloud(&[(0.2, 0.3, 10.0), (0.7, 0.6, 20.0)]);
        let med = rasterize_dsm(&c, &unit_aoi(Aggregator::Median)).unwrap();
        let max = rasterize_dsm(&c, &unit_aoi(Aggregator::Max)).unwrap();
        let mean = rasterize_dsm(&c, &unit_aoi(Aggregator::Mean)).unwrap();
        assert_eq!(med.get(0, 0), Some(15.0));
        assert_eq!(max.get(0, 0), Some(20.0));
        assert_eq!(mean.get(0, 0), Some(15.0));
    }

    #[test]
    fn empty_cloud_without_aoi() {
        assert!(matches!(
            rasterize_dsm(&PointCloud::default(), &DsmConfig::default()),
            Err(ProductsError::EmptyExtent)
        ));
        let g = rasterize_dsm(&PointCloud::default(), &unit_aoi(Aggregator::Max)).unwrap();
        assert_eq!(g.valid_count(), 0);
    }

    #[test]
    fn bbox_edges_are_binned() {
        let c = cloud(&[(0.0, 0.0, 1.0), (4.0, 3.0, 2.0)]);
        let g = rasterize_dsm(&c, &DsmConfig::default()).unwrap();
        assert_eq!((g.ncols(), g.nrows()), (4, 3));
        assert_eq!(g.valid_count(), 2);
        assert_eq!(g.get(0, 2), Some(1.0));
        assert_eq!(g.get(3, 0), Some(2.0));
    }

    fn grid(vals: Vec<f64>, ncols: usize) -> RasterGrid {
        let nrows = vals.len() / ncols;
        RasterGrid::from_values(0.0, 0.0, 1.0, ncols, nrows, vals, DEFAULT_NODATA).unwrap()
    }

    #[test]
    fn fill_examples() {
        let cfg = DsmConfig::default();
        let full = grid((0..9).map(f64::from).collect(), 3);
        assert_eq!(fill_holes(&full, &cfg), full);

        let mut ring = vec![7.0; 9];
        ring[4] = DEFAULT_NODATA;
        assert_eq!(fill_holes(&grid(ring, 3), &cfg).get(1, 1), Some(7.0));

        // hole at col 0; 10 one cell right, 40 two cells right
        let row = grid(vec![DEFAULT_NODATA, 10.0, 40.0], 3);
        let two = DsmConfig {
            fill_k: 2,
            ..DsmConfig::default()
        };
        let v = fill_holes(&row, &two).get(0, 0).unwrap();
        assert!((v - 16.0).abs() < 1e-12);
    }

    #[test]
    fn fill_respects_radius() {
        let mut vals = vec![DEFAULT_NODATA; 7];
        vals[0] = 5.0;
        let cfg = DsmConfig {
            fill_radius: 2,
            ..DsmConfig::default()
        };
        let out = fill_holes(&grid(vals, 7), &cfg);
        assert_eq!(out.get(2, 0), Some(5.0));
        assert_eq!(out.get(3, 0), None);
    }

    proptest! {
        #[test]
        fn max_is_monotone(
            pts in prop::collection::vec((0.0f64..10.0, 0.0f64..10.0, -5.0f64..50.0), 1..60),
            extra in prop::collection::vec((0.0f64..10.0, 0.0f64..10.0, -5.0f64..50.0), 1..20),
        ) {
            let cfg = DsmConfig {
                aoi: Some(Extent::new(0.0, 0.0, 10.0, 10.0)),
                aggregator: Aggregator::Max,
                ..DsmConfig::default()
            };
            let before = rasterize_dsm(&cloud(&pts), &cfg).unwrap();
            let mut all = pts.clone();
            all.extend(extra);
            let after = rasterize_dsm(&cloud(&all), &cfg).unwrap();
            for row in 0..10 {
                for col in 0..10 {
                    if let Some(b) = before.get(col, row) {
                        prop_assert!(after.get(col, row).unwrap() >= b);
                    }
                }
            }
        }

        #[test]
        fn fill_keeps_valid_and_radius(
            mask in prop::collection::vec(prop::bool::weighted(0.2), 144),
            radius in 0usize..4,
            k in 1usize..6,
        ) {
            let vals: Vec<f64> = mask.iter().enumerate().map(|(i, &m)| if m { i as f64 } else { DEFAULT_NODATA }).collect();
            let g = grid(vals, 12);
            let cfg = DsmConfig { fill_radius: radius, fill_k: k, ..DsmConfig::default() };
            let out = fill_holes(&g, &cfg);
            for row in 0..12usize {
                for col in 0..12usize {
                    if let Some(v) = g.get(col, row) {
                        prop_assert_eq!(out.get(col, row), Some(v));
                    } else if out.get(col, row).is_some() {
                        let mut near = false;
                        for r in 0..12usize {
                            for c in 0..12usize {
                                if g.get(c, r).is_some() && r.abs_diff(row) <= radius && c.abs_diff(col) <= radius {
                                    near = true;
                                }
                            }
                        }
                        prop_assert!(near);
                    }
                }
            }
        }
    }
}
