//! Tile-and-stitch inference for images larger than the model input.
//!
//! Tiles sit at the same positions in both images. Each output pixel is
//! copied from the tile whose center is nearest (Euclidean), ties going to
//! the lowest row-major tile index. Tile centers are at `pos + (tile - 1)/2`
//! in pixel-index coordinates.

use crate::error::{Error, Result};
use crate::io::RawMap;
use crate::patches::ImageRgb;

pub const DEFAULT_TILE: usize = 224;
pub const DEFAULT_STRIDE: usize = 112;

/// `0, stride, 2·stride, …` while the tile fits, plus a final tile flush
/// with the far edge if needed.
pub fn tile_positions(len: usize, tile: usize, stride: usize) -> Result<Vec<usize>> {
    if tile == 0 || stride == 0 {
        return Err(Error::config(format!(
            "tile ({tile}) and stride ({stride}) must be positive"
        )));
    }
    if stride > tile {
        return Err(Error::config(format!(
            "stride {stride} exceeds the tile {tile}; tiles would leave gaps"
        )));
    }
    if len < tile {
        return Err(Error::dim(format!("image side {len} is smaller than the tile {tile}")));
    }
    let mut pos: Vec<usize> = (0..).map(|k| k * stride).take_while(|p| p + tile <= len).collect();
    let last = len - tile;
    if *pos.last().unwrap() != last {
        pos.push(last);
    }
    Ok(pos)
}

/// Index of the nearest center along one axis (lowest index on ties).
/// Works on doubled coordinates so all comparisons are exact.
fn nearest_1d(p: usize, starts: &[usize], tile: usize) -> usize {
    let p2 = 2 * p as i64;
    let mut best = 0;
    let mut best_d = i64::MAX;
    for (k, &s) in starts.iter().enumerate() {
        let d = (p2 - (2 * s as i64 + tile as i64 - 1)).abs();
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TileLayout {
    pub height: usize,
    pub width: usize,
    pub tile: usize,
    pub ys: Vec<usize>,
    pub xs: Vec<usize>,
}

impl TileLayout {
    pub fn new(height: usize, width: usize, tile: usize, stride: usize) -> Result<Self> {
        Ok(TileLayout {
            height,
            width,
            tile,
            ys: tile_positions(height, tile, stride)?,
            xs: tile_positions(width, tile, stride)?,
        })
    }

    pub fn num_tiles(&self) -> usize {
        self.ys.len() * self.xs.len()
    }

    /// Top-left corner of tile `k` in row-major placement order.
    pub fn origin(&self, k: usize) -> (usize, usize) {
        (self.ys[k / self.xs.len()], self.xs[k % self.xs.len()])
    }

    /// Tile assigned to pixel `(y, x)`. The squared distance separates into
    /// independent row and column terms, so per-axis argmins (each taking
    /// the lowest index on ties) give the lowest row-major minimizer.
    pub fn assign(&self, y: usize, x: usize) -> usize {
        nearest_1d(y, &self.ys, self.tile) * self.xs.len() + nearest_1d(x, &self.xs, self.tile)
    }

    /// Assignment of every pixel, row-major.
    pub fn assignment(&self) -> Vec<usize> {
        let cols: Vec<usize> = (0..self.width).map(|x| nearest_1d(x, &self.xs, self.tile)).collect();
        let mut out = Vec::with_capacity(self.height * self.width);
        for y in 0..self.height {
            let r = nearest_1d(y, &self.ys, self.tile) * self.xs.len();
            out.extend(cols.iter().map(|c| r + c));
        }
        out
    }
}

/// Runs `regress` on every tile pair and stitches the per-pixel maps.
pub fn infer_tiled<F>(img1: &ImageRgb, img2: &ImageRgb, tile: usize, stride: usize, mut regress: F) -> Result<RawMap>
where
    F: FnMut(&ImageRgb, &ImageRgb) -> Result<RawMap>,
{
    if img1.height != img2.height || img1.width != img2.width {
        return Err(Error::dim(format!(
            "image sizes differ: {}x{} vs {}x{}",
            img1.height, img1.width, img2.height, img2.width
        )));
    }
    let layout = TileLayout::new(img1.height, img1.width, tile, stride)?;
    let assign = layout.assignment();
    let mut out: Option<RawMap> = None;
    for k in 0..layout.num_tiles() {
        let (y0, x0) = layout.origin(k);
        let pred = regress(&img1.crop(y0, x0, tile, tile)?, &img2.crop(y0, x0, tile, tile)?)?;
        if pred.height != tile || pred.width != tile {
            return Err(Error::dim(format!(
                "regressor returned {}x{} for a {tile}x{tile} tile",
                pred.height, pred.width
            )));
        }
        let c = pred.channels;
        let out = out.get_or_insert_with(|| RawMap {
            height: img1.height,
            width: img1.width,
            channels: c,
            data: vec![0.0; img1.height * img1.width * c],
        });
        if out.channels != c {
            return Err(Error::dim("regressor channel count changed between tiles"));
        }
        for ty in 0..tile {
            for tx in 0..tile {
                let (y, x) = (y0 + ty, x0 + tx);
                if assign[y * img1.width + x] == k {
                    let dst = (y * img1.width + x) * c;
                    let src = (ty * tile + tx) * c;
                    out.data[dst..dst + c].copy_from_slice(&pred.data[src..src + c]);
                }
            }
        }
    }
    Ok(out.expect("at least one tile"))
}

/// Flow for an arbitrary-size pair from a fixed-size regressor.
pub fn flow_infer_tiled<F>(img1: &ImageRgb, img2: &ImageRgb, tile: usize, stride: usize, regress: F) -> Result<RawMap>
where
    F: FnMut(&ImageRgb, &ImageRgb) -> Result<RawMap>,
{
    let out = infer_tiled(img1, img2, tile, stride, regress)?;
    if out.channels != 2 {
        return Err(Error::dim(format!(
            "flow regressor produced {} channel(s)",
            out.channels
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positions() {
        assert_eq!(tile_positions(448, 224, 112).unwrap(), vec![0, 112, 224]);
        assert_eq!(tile_positions(224, 224, 112).unwrap(), vec![0]);
        assert_eq!(tile_positions(300, 224, 112).unwrap(), vec![0, 76]);
        assert_eq!(tile_positions(10, 4, 3).unwrap(), vec![0, 3, 6]);
        assert_eq!(tile_positions(11, 4, 3).unwrap(), vec![0, 3, 6, 7]);
        assert!(matches!(tile_positions(100, 224, 112), Err(Error::Dimension(_))));
        assert!(matches!(tile_positions(100, 4, 5), Err(Error::Config(_))));
    }

    #[test]
    fn worked_example() {
        // 448 wide, 224 high: column centers near 112, 224, 336
        let l = TileLayout::new(224, 448, 224, 112).unwrap();
        assert_eq!(l.num_tiles(), 3);
        assert_eq!(l.assign(0, 300), 2);
        assert_eq!(l.origin(2), (0, 224));
    }

    #[test]
    fn ties_take_the_lowest_index() {
        // pixel 3 is equidistant from centers 1.5 and 4.5
        let l = TileLayout::new(4, 9, 4, 3).unwrap();
        assert_eq!(l.xs, vec![0, 3, 5]);
        assert_eq!(l.assign(0, 3), 0);
        assert_eq!(l.assign(0, 4), 1);
        assert_eq!(l.assign(0, 6), 2);
        let l = TileLayout::new(4, 7, 4, 3).unwrap();
        assert_eq!(l.xs, vec![0, 3]);
        assert_eq!(l.assign(0, 3), 0);
    }

    #[test]
    fn separable_assignment_matches_brute_force() {
        for (h, w, t, s) in [(9, 13, 4, 3), (20, 20, 8, 5), (16, 31, 7, 2)] {
            let l = TileLayout::new(h, w, t, s).unwrap();
            let a = l.assignment();
            for y in 0..h {
                for x in 0..w {
                    let mut best = (f64::INFINITY, 0);
                    for k in 0..l.num_tiles() {
                        let (oy, ox) = l.origin(k);
                        let cy = oy as f64 + (t as f64 - 1.0) / 2.0;
                        let cx = ox as f64 + (t as f64 - 1.0) / 2.0;
                        let d = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        if d < best.0 {
                            best = (d, k);
                        }
                    }
                    assert_eq!(a[y * w + x], best.1);
                    let (oy, ox) = l.origin(best.1);
                    assert!(y >= oy && y < oy + t && x >= ox && x < ox + t);
                }
            }
        }
    }

    #[test]
    fn stitching_copies_assigned_tiles() {
        let img = ImageRgb::filled(10, 13, [0.0; 3]);
        let mut calls = 0;
        let out = infer_tiled(&img, &img, 4, 3, |_, _| {
            calls += 1;
            Ok(RawMap::new(4, 4, 1, vec![calls as f32; 16]).unwrap())
        })
        .unwrap();
        let l = TileLayout::new(10, 13, 4, 3).unwrap();
        assert_eq!(calls, l.num_tiles());
        for (i, &k) in l.assignment().iter().enumerate() {
            assert_eq!(out.data[i], (k + 1) as f32);
        }
    }
}
