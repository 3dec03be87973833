use crate::error::{Error, Result};
use crate::pcio::{Point3, PointCloud};

/// Raster of ground elevations, one value per planimetric cell.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundModel {
    pub origin: [f64; 2],
    pub cell: f64,
    pub nx: usize,
    pub ny: usize,
    /// Row-major (`j * nx + i`) elevations.
    pub z: Vec<f64>,
}

impl GroundModel {
    pub fn cell_of(&self, x: f64, y: f64) -> (usize, usize) {
        let i = ((x - self.origin[0]) / self.cell).floor().clamp(0.0, (self.nx - 1) as f64) as usize;
        let j = ((y - self.origin[1]) / self.cell).floor().clamp(0.0, (self.ny - 1) as f64) as usize;
        (i, j)
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.z[j * self.nx + i]
    }

    /// Bilinear interpolation between cell centers, clamped at the border.
    pub fn elevation(&self, x: f64, y: f64) -> f64 {
        let fx = ((x - self.origin[0]) / self.cell - 0.5).clamp(0.0, (self.nx - 1) as f64);
        let fy = ((y - self.origin[1]) / self.cell - 0.5).clamp(0.0, (self.ny - 1) as f64);
        let (i0, j0) = (fx.floor() as usize, fy.floor() as usize);
        let (i1, j1) = ((i0 + 1).min(self.nx - 1), (j0 + 1).min(self.ny - 1));
        let (tx, ty) = (fx - i0 as f64, fy - j0 as f64);
        let a = self.at(i0, j0) * (1.0 - tx) + self.at(i1, j0) * tx;
        let b = self.at(i0, j1) * (1.0 - tx) + self.at(i1, j1) * tx;
        a * (1.0 - ty) + b * ty
    }

    /// A model at constant elevation 0 covering `cloud`.
    pub fn flat(cloud: &PointCloud) -> Result<Self> {
        let (lo, _) = cloud
            .bounds()
            .ok_or_else(|| Error::EmptyCloud("no points for a ground model".into()))?;
        Ok(GroundModel {
            origin: [lo.x, lo.y],
            cell: 1.0,
            nx: 1,
            ny: 1,
            z: vec![0.0],
        })
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_unstable_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-cell minimum z, gaps filled from the nearest populated cell, then a
/// 3x3 median filter.
pub fn ground_model(cloud: &PointCloud, cell: f64) -> Result<GroundModel> {
    if !(cell > 0.0) {
        return Err(Error::InvalidArgument(format!("ground cell must be > 0, got {cell}")));
    }
    let (lo, hi) = cloud
        .bounds()
        .ok_or_else(|| Error::EmptyCloud("no points for a ground model".into()))?;
    let nx = ((hi.x - lo.x) / cell).floor() as usize + 1;
    let ny = ((hi.y - lo.y) / cell).floor() as usize + 1;
    let mut g = GroundModel {
        origin: [lo.x, lo.y],
        cell,
        nx,
        ny,
        z: vec![f64::INFINITY; nx * ny],
    };
    for p in &cloud.points {
        let (i, j) = g.cell_of(p.x, p.y);
        let z = &mut g.z[j * nx + i];
        *z = z.min(p.z);
    }
    let filled: Vec<(usize, usize)> = (0..ny)
        .flat_map(|j| (0..nx).map(move |i| (i, j)))
        .filter(|&(i, j)| g.z[j * nx + i].is_finite())
        .collect();
    let raw = g.z.clone();
    for j in 0..ny {
        for i in 0..nx {
            if !raw[j * nx + i].is_finite() {
                let &(bi, bj) = filled
                    .iter()
                    .min_by_key(|&&(a, b)| ((a as i64 - i as i64).pow(2) + (b as i64 - j as i64).pow(2), b, a))
                    .expect("at least one populated cell");
                g.z[j * nx + i] = raw[bj * nx + bi];
            }
        }
    }
    let base = g.z.clone();
    let mut win = Vec::with_capacity(9);
    for j in 0..ny {
        for i in 0..nx {
            win.clear();
            for b in j.saturating_sub(1)..=(j + 1).min(ny - 1) {
                for a in i.saturating_sub(1)..=(i + 1).min(nx - 1) {
                    win.push(base[b * nx + a]);
                }
            }
            g.z[j * nx + i] = median(&mut win);
        }
    }
    Ok(g)
}

/// Replaces z by height above the interpolated ground.
pub fn height_normalize(cloud: &PointCloud, ground: &GroundModel) -> PointCloud {
    PointCloud {
        points: cloud
            .points
            .iter()
            .map(|p| Point3::new(p.x, p.y, p.z - ground.elevation(p.x, p.y)))
            .collect(),
        label: cloud.label.clone(),
    }
}
