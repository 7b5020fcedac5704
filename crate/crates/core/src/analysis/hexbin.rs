//! Pointy-top hexagonal binning over a 2-D point cloud.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One occupied cell. `mean` is the mean of the per-point statistic when
/// one was supplied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HexCell {
    pub q: i64,
    pub r: i64,
    pub cx: f64,
    pub cy: f64,
    pub count: usize,
    pub mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HexGrid {
    pub nx: usize,
    pub cells: Vec<HexCell>,
    layout: Layout,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Layout {
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
}

// Circumradius in normalized units: column spacing sqrt(3) * SIZE = 1.
const SIZE: f64 = 0.577_350_269_189_625_8;

impl Layout {
    fn new(points: &[(f64, f64)], nx: usize) -> Self {
        let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in points {
            xmin = xmin.min(x);
            xmax = xmax.max(x);
            ymin = ymin.min(y);
            ymax = ymax.max(y);
        }
        let span = |lo: f64, hi: f64| if hi > lo { (hi - lo) / nx as f64 } else { 1.0 };
        Self {
            x0: xmin,
            y0: ymin,
            w: span(xmin, xmax),
            h: span(ymin, ymax),
        }
    }

    fn normalize(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.x0) / self.w, (y - self.y0) / self.h)
    }

    fn axial(&self, x: f64, y: f64) -> (i64, i64) {
        let (u, v) = self.normalize(x, y);
        let q = (3f64.sqrt() / 3.0 * u - v / 3.0) / SIZE;
        let r = (2.0 / 3.0 * v) / SIZE;
        cube_round(q, r)
    }

    fn center_normalized(q: i64, r: i64) -> (f64, f64) {
        (SIZE * 3f64.sqrt() * (q as f64 + r as f64 / 2.0), SIZE * 1.5 * r as f64)
    }

    fn center(&self, q: i64, r: i64) -> (f64, f64) {
        let (u, v) = Self::center_normalized(q, r);
        (self.x0 + u * self.w, self.y0 + v * self.h)
    }
}

fn cube_round(q: f64, r: f64) -> (i64, i64) {
    let s = -q - r;
    let (mut rq, mut rr, rs) = (q.round(), r.round(), s.round());
    let (dq, dr, ds) = ((rq - q).abs(), (rr - r).abs(), (rs - s).abs());
    if dq > dr && dq > ds {
        rq = -rr - rs;
    } else if dr > ds {
        rr = -rq - rs;
    }
    (rq as i64, rr as i64)
}

/// Bins points into hexagons, `nx` columns across the bounding box.
/// Cells are returned in `(r, q)` order.
pub fn hexbin(points: &[(f64, f64)], z: Option<&[f64]>, nx: usize) -> Result<HexGrid> {
    if points.is_empty() {
        return Err(Error::InvalidParameter("hexbin needs at least one point".into()));
    }
    if nx == 0 {
        return Err(Error::InvalidParameter("hexbin needs nx >= 1".into()));
    }
    if let Some(z) = z {
        if z.len() != points.len() {
            return Err(Error::LengthMismatch {
                expected: points.len(),
                got: z.len(),
            });
        }
    }
    let layout = Layout::new(points, nx);
    let mut acc: BTreeMap<(i64, i64), (usize, f64)> = BTreeMap::new();
    for (i, &(x, y)) in points.iter().enumerate() {
        let (q, r) = layout.axial(x, y);
        let e = acc.entry((r, q)).or_default();
        e.0 += 1;
        e.1 += z.map_or(0.0, |z| z[i]);
    }
    let cells = acc
        .into_iter()
        .map(|((r, q), (count, sum))| {
            let (cx, cy) = layout.center(q, r);
            HexCell {
                q,
                r,
                cx,
                cy,
                count,
                mean: z.map(|_| sum / count as f64),
            }
        })
        .collect();
    Ok(HexGrid { nx, cells, layout })
}

impl HexGrid {
    /// Axial coordinates of the cell a point falls in.
    pub fn cell_of(&self, x: f64, y: f64) -> (i64, i64) {
        self.layout.axial(x, y)
    }

    /// Squared distance from a point to a cell center, in the grid's
    /// normalized coordinates (where hexagons are regular).
    pub fn normalized_distance2(&self, x: f64, y: f64, q: i64, r: i64) -> f64 {
        let (u, v) = self.layout.normalize(x, y);
        let (cu, cv) = Layout::center_normalized(q, r);
        (u - cu).powi(2) + (v - cv).powi(2)
    }

    /// `cx,cy,count,mean` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("cx,cy,count,mean\n");
        for c in &self.cells {
            let mean = c.mean.map(|m| m.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", c.cx, c.cy, c.count, mean));
        }
        out
    }
}
