//! PNG sample grids, neighbor panels and matched-frame strips.

use std::path::Path;

use image::{ImageFormat, RgbImage};

use crate::corpus::planar_to_image;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A rectangular layout of optional tiles, each a planar `(3, res, res)`
/// image in [-1, 1]. Empty cells stay black.
#[derive(Clone, Debug)]
pub struct Layout {
    res: usize,
    rows: usize,
    cols: usize,
    cells: Vec<Option<Vec<f32>>>,
}

impl Layout {
    pub fn new(res: usize, rows: usize, cols: usize) -> Self {
        Self {
            res,
            rows,
            cols,
            cells: vec![None; rows * cols],
        }
    }

    pub fn set(&mut self, row: usize, col: usize, tile: &[f32]) -> Result<()> {
        if row >= self.rows || col >= self.cols {
            return Err(Error::Invalid(format!("cell ({row}, {col}) outside {}x{}", self.rows, self.cols)));
        }
        if tile.len() != 3 * self.res * self.res {
            return Err(Error::Invalid(format!("tile has {} values, expected {}", tile.len(), 3 * self.res * self.res)));
        }
        self.cells[row * self.cols + col] = Some(tile.to_vec());
        Ok(())
    }

    /// Occupied cells.
    pub fn tiles(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }

    pub fn render(&self) -> RgbImage {
        let r = self.res as u32;
        let mut out = RgbImage::new(r * self.cols as u32, r * self.rows as u32);
        for (i, cell) in self.cells.iter().enumerate() {
            let Some(values) = cell else { continue };
            let tile = planar_to_image(values, self.res);
            let (x0, y0) = ((i % self.cols) as u32 * r, (i / self.cols) as u32 * r);
            for (x, y, p) in tile.enumerate_pixels() {
                out.put_pixel(x0 + x, y0 + y, *p);
            }
        }
        out
    }
}

/// Tiles a `(m, 3, res, res)` batch row-major into `cols` columns.
pub fn grid(images: &Tensor<f32>, cols: usize) -> Result<RgbImage> {
    let shape = images.shape();
    if shape.len() != 4 || shape[1] != 3 || shape[2] != shape[3] {
        return Err(Error::Invalid(format!("expected (m, 3, r, r) images, got {shape:?}")));
    }
    if cols == 0 {
        return Err(Error::Invalid("grid needs at least one column".into()));
    }
    let m = shape[0];
    let mut layout = Layout::new(shape[2], m.div_ceil(cols), cols);
    for i in 0..m {
        layout.set(i / cols, i % cols, images.item(i))?;
    }
    Ok(layout.render())
}

/// Side length of a square grid of `m` tiles.
pub fn square_side(m: usize) -> Result<usize> {
    let side = (m as f64).sqrt().round() as usize;
    if m == 0 || side * side != m {
        return Err(Error::Invalid(format!("{m} is not a positive perfect square")));
    }
    Ok(side)
}

/// Nearest-neighbor panel: the query tile at the top left, then one row of
/// neighbor tiles per entry of `rows`.
pub fn neighbor_panel(res: usize, query: &[f32], rows: &[Vec<Vec<f32>>]) -> Result<Layout> {
    let k = rows.iter().map(Vec::len).max().unwrap_or(0);
    let mut layout = Layout::new(res, rows.len().max(1), 1 + k);
    layout.set(0, 0, query)?;
    for (r, row) in rows.iter().enumerate() {
        for (c, tile) in row.iter().enumerate() {
            layout.set(r, 1 + c, tile)?;
        }
    }
    Ok(layout)
}

/// Most matched pairs a retrieval strip shows.
pub const MAX_STRIP_COLUMNS: usize = 20;

/// Two-row strip: query frames on top, their matches below, at most
/// [`MAX_STRIP_COLUMNS`] pairs.
pub fn match_strip(res: usize, pairs: &[(Vec<f32>, Vec<f32>)]) -> Result<Layout> {
    let n = pairs.len().min(MAX_STRIP_COLUMNS);
    let mut layout = Layout::new(res, 2, n.max(1));
    for (c, (q, m)) in pairs.iter().take(n).enumerate() {
        layout.set(0, c, q)?;
        layout.set(1, c, m)?;
    }
    Ok(layout)
}

/// Places images side by side, top-aligned.
pub fn hconcat(parts: &[RgbImage]) -> RgbImage {
    let w = parts.iter().map(|p| p.width()).sum();
    let h = parts.iter().map(|p| p.height()).max().unwrap_or(0);
    let mut out = RgbImage::new(w, h);
    let mut x0 = 0;
    for p in parts {
        for (x, y, px) in p.enumerate_pixels() {
            out.put_pixel(x0 + x, y, *px);
        }
        x0 += p.width();
    }
    out
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), ImageFormat::Png)
        .map_err(|e| Error::Invalid(format!("png encoding failed: {e}")))?;
    Ok(bytes)
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, encode_png(img)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_dimensions_follow_tiling() {
        let t = Tensor::from_vec(&[6, 3, 4, 4], vec![0.0; 6 * 48]);
        let img = grid(&t, 3).unwrap();
        assert_eq!((img.width(), img.height()), (12, 8));
    }

    #[test]
    fn single_tile_grid_matches_the_image() {
        let data: Vec<f32> = (0..48).map(|i| i as f32 / 24.0 - 1.0).collect();
        let t = Tensor::from_vec(&[1, 3, 4, 4], data.clone());
        assert_eq!(grid(&t, 1).unwrap(), planar_to_image(&data, 4));
    }

    #[test]
    fn square_side_rejects_non_squares() {
        assert_eq!(square_side(64).unwrap(), 8);
        assert_eq!(square_side(1).unwrap(), 1);
        assert!(square_side(10).is_err());
        assert!(square_side(0).is_err());
    }

    #[test]
    fn panel_and_strip_shapes() {
        let tile = vec![0.0f32; 3 * 2 * 2];
        let rows = vec![vec![tile.clone(); 10]; 4];
        let p = neighbor_panel(2, &tile, &rows).unwrap();
        assert_eq!(p.tiles(), 41);
        assert_eq!(p.render().dimensions(), (22, 8));
        let one = neighbor_panel(2, &tile, &[vec![tile.clone()]]).unwrap();
        assert_eq!(one.tiles(), 2);
        let pairs = vec![(tile.clone(), tile.clone()); 30];
        let strip = match_strip(2, &pairs).unwrap();
        assert_eq!(strip.render().dimensions(), (40, 4));
        assert_eq!(strip.tiles(), 40);
    }

    #[test]
    fn png_encoding_is_deterministic() {
        let t = Tensor::from_vec(&[2, 3, 4, 4], (0..96).map(|i| (i % 7) as f32 / 3.5 - 1.0).collect());
        let img = grid(&t, 2).unwrap();
        assert_eq!(encode_png(&img).unwrap(), encode_png(&img).unwrap());
    }
}
