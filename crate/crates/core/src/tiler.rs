//! Fixed-size georeferenced tiling, empty-tile filtering and seeded splits.
//!
//! Tiles are laid out row-major from the top-left corner. Right and bottom
//! edge tiles are zero-padded to the full tile size and remember their
//! unpadded extent in [`ValidRegion`].
//!
//! On disk a tile store is `<aoi>/<row>_<col>.png`, `<row>_<col>.wld`,
//! `<row>_<col>_mask.png` plus a tab-separated `splits.txt` manifest with
//! one line per tile: path, split, valid width, valid height.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geodata::{self, ClassMask, GeoError, GeoRaster};

pub const MIN_TILE_SIZE: usize = 32;
pub const MANIFEST_NAME: &str = "splits.txt";

#[derive(Debug, Error)]
pub enum TileError {
    #[error("tile size {0} is below the minimum of {MIN_TILE_SIZE}")]
    TileSize(usize),
    #[error("raster is {0}x{1} but mask is {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("split ratios {0:?} must be positive and sum to 1")]
    Ratios((f64, f64, f64)),
    #[error("{0} tiles cannot populate three splits (need at least 3)")]
    TooFewTiles(usize),
    #[error("tile manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Geo(#[from] GeoError),
}

pub type Result<T> = std::result::Result<T, TileError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
    Unassigned,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "TRAIN",
            Split::Val => "VAL",
            Split::Test => "TEST",
            Split::Unassigned => "UNASSIGNED",
        })
    }
}

impl FromStr for Split {
    type Err = TileError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "TRAIN" => Ok(Split::Train),
            "VAL" => Ok(Split::Val),
            "TEST" => Ok(Split::Test),
            "UNASSIGNED" => Ok(Split::Unassigned),
            other => Err(TileError::Manifest(format!("unknown split {other:?}"))),
        }
    }
}

/// Rectangle of unpadded pixels inside a tile.
///
/// Freshly cut tiles have their valid region anchored at the top-left
/// corner; augmentation may move it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValidRegion {
    pub col0: usize,
    pub row0: usize,
    pub width: usize,
    pub height: usize,
}

impl ValidRegion {
    pub fn at_origin(width: usize, height: usize) -> Self {
        ValidRegion { col0: 0, row0: 0, width, height }
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row0..self.row0 + self.height).contains(&row) && (self.col0..self.col0 + self.width).contains(&col)
    }

    /// Row-major per-pixel validity for a `size x size` tile.
    pub fn mask(&self, size: usize) -> Vec<bool> {
        (0..size * size).map(|i| self.contains(i / size, i % size)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TileSample {
    pub image: GeoRaster,
    pub mask: ClassMask,
    pub aoi_id: String,
    /// `(row, col)` in the tile grid.
    pub tile_index: (usize, usize),
    pub valid_region: ValidRegion,
    pub split: Split,
}

impl TileSample {
    pub fn size(&self) -> usize {
        self.mask.width
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        self.valid_region.mask(self.size())
    }

    pub fn has_dwelling(&self) -> bool {
        self.mask.data.iter().any(|&c| (1..=7).contains(&c))
    }

    /// Relative path of the tile image inside a tile store.
    pub fn relative_path(&self) -> String {
        format!("{}/{}_{}.png", self.aoi_id, self.tile_index.0, self.tile_index.1)
    }
}

/// Cuts `raster` and `mask` into `tile_size` squares in row-major order.
pub fn tile_raster(raster: &GeoRaster, mask: &ClassMask, tile_size: usize, aoi_id: &str) -> Result<Vec<TileSample>> {
    if tile_size < MIN_TILE_SIZE {
        return Err(TileError::TileSize(tile_size));
    }
    if (raster.width, raster.height) != (mask.width, mask.height) {
        return Err(TileError::DimensionMismatch(raster.width, raster.height, mask.width, mask.height));
    }
    let rows = raster.height.div_ceil(tile_size);
    let cols = raster.width.div_ceil(tile_size);
    let mut tiles = Vec::with_capacity(rows * cols);
    for tr in 0..rows {
        for tc in 0..cols {
            let (col, row) = (tc * tile_size, tr * tile_size);
            tiles.push(TileSample {
                image: raster.window(col, row, tile_size, tile_size),
                mask: mask.window(col, row, tile_size, tile_size),
                aoi_id: aoi_id.to_string(),
                tile_index: (tr, tc),
                valid_region: ValidRegion::at_origin(tile_size.min(raster.width - col), tile_size.min(raster.height - row)),
                split: Split::Unassigned,
            });
        }
    }
    Ok(tiles)
}

/// Inverse of [`tile_raster`] for tiles that still carry their origin-anchored
/// valid regions.
pub fn reassemble(tiles: &[TileSample], width: usize, height: usize) -> Option<(GeoRaster, ClassMask)> {
    let first = tiles.first()?;
    let size = first.size();
    let bands = first.image.bands;
    let mut data = vec![0u8; width * height * bands];
    let mut mask = ClassMask::zeros(width, height);
    for t in tiles {
        let (row0, col0) = (t.tile_index.0 * size, t.tile_index.1 * size);
        let v = t.valid_region;
        for r in 0..v.height {
            for c in 0..v.width {
                let (gr, gc) = (row0 + r, col0 + c);
                if gr >= height || gc >= width {
                    return None;
                }
                mask.set(gr, gc, t.mask.get(r, c));
                for b in 0..bands {
                    data[(b * height + gr) * width + gc] = t.image.sample(b, r, c);
                }
            }
        }
    }
    let transform = tiles.iter().find(|t| t.tile_index == (0, 0))?.image.transform;
    Some((GeoRaster { width, height, bands, data, transform }, mask))
}

/// Keeps tiles with at least one dwelling pixel; returns the discard count.
pub fn filter_empty(tiles: Vec<TileSample>) -> (Vec<TileSample>, usize) {
    let before = tiles.len();
    let kept: Vec<TileSample> = tiles.into_iter().filter(TileSample::has_dwelling).collect();
    let discarded = before - kept.len();
    (kept, discarded)
}

/// `(n_train, n_val, n_test)` for `n` items: the first two are rounded
/// (half away from zero), the test split takes the remainder.
pub fn split_counts(n: usize, ratios: (f64, f64, f64)) -> Result<(usize, usize, usize)> {
    let (a, b, c) = ratios;
    if !(a > 0.0 && b > 0.0 && c > 0.0) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(TileError::Ratios(ratios));
    }
    if n < 3 {
        return Err(TileError::TooFewTiles(n));
    }
    let n_train = (a * n as f64).round() as usize;
    let n_val = (b * n as f64).round() as usize;
    if n_train + n_val >= n || n_train == 0 || n_val == 0 {
        return Err(TileError::TooFewTiles(n));
    }
    Ok((n_train, n_val, n - n_train - n_val))
}

/// Seeded permutation of `0..n`: Fisher-Yates from the top, drawing
/// `j = next_u64() % (i + 1)` from ChaCha8 seeded with `seed`.
pub fn seeded_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        order.swap(i, j);
    }
    order
}

/// Assigns TRAIN / VAL / TEST by a seeded shuffle; input order is preserved.
pub fn split_dataset(mut tiles: Vec<TileSample>, ratios: (f64, f64, f64), seed: u64) -> Result<Vec<TileSample>> {
    let (n_train, n_val, _) = split_counts(tiles.len(), ratios)?;
    for (rank, idx) in seeded_permutation(tiles.len(), seed).into_iter().enumerate() {
        tiles[idx].split = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(tiles)
}

/// Writes tiles and the split manifest under `root`.
pub fn write_tile_store(tiles: &[TileSample], root: &Path) -> Result<()> {
    let mut manifest = String::new();
    for t in tiles {
        let dir = root.join(&t.aoi_id);
        fs::create_dir_all(&dir).map_err(|e| GeoError::Io { path: dir.display().to_string(), source: e })?;
        let stem = format!("{}_{}", t.tile_index.0, t.tile_index.1);
        geodata::save_raster_bundle(&t.image, &dir.join(format!("{stem}.png")), &dir.join(format!("{stem}.wld")))?;
        geodata::save_mask(&t.mask, &dir.join(format!("{stem}_mask.png")))?;
        if t.valid_region.col0 != 0 || t.valid_region.row0 != 0 {
            return Err(TileError::Manifest(format!("{}: augmented tiles cannot be stored", t.relative_path())));
        }
        manifest.push_str(&format!("{}\t{}\t{}\t{}\n", t.relative_path(), t.split, t.valid_region.width, t.valid_region.height));
    }
    let path = root.join(MANIFEST_NAME);
    fs::write(&path, manifest).map_err(|e| GeoError::Io { path: path.display().to_string(), source: e })?;
    Ok(())
}

fn parse_stem(stem: &str) -> Option<(usize, usize)> {
    let (r, c) = stem.split_once('_')?;
    Some((r.parse().ok()?, c.parse().ok()?))
}

/// Reads a tile store written by [`write_tile_store`].
pub fn read_tile_store(root: &Path) -> Result<Vec<TileSample>> {
    let path = root.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).map_err(|e| GeoError::Io { path: path.display().to_string(), source: e })?;
    let mut tiles = Vec::new();
    for (lineno, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |why: &str| TileError::Manifest(format!("line {}: {why}", lineno + 1));
        let fields: Vec<&str> = line.split('\t').collect();
        let [rel, split, w, h] = fields[..] else { return Err(bad("expected 4 tab-separated fields")) };
        let (aoi, file) = rel.rsplit_once('/').ok_or_else(|| bad("path lacks an aoi directory"))?;
        let stem = file.strip_suffix(".png").ok_or_else(|| bad("tile path must end in .png"))?;
        let tile_index = parse_stem(stem).ok_or_else(|| bad("tile file must be named <row>_<col>.png"))?;
        let dir = root.join(aoi);
        let image = geodata::load_raster_bundle(&dir.join(file), &dir.join(format!("{stem}.wld")))?;
        let mask = geodata::load_mask(&dir.join(format!("{stem}_mask.png")))?;
        let valid = ValidRegion::at_origin(w.parse().map_err(|_| bad("bad width"))?, h.parse().map_err(|_| bad("bad height"))?);
        if (image.width, image.height) != (mask.width, mask.height) || valid.width > mask.width || valid.height > mask.height {
            return Err(bad("image, mask and valid region disagree"));
        }
        tiles.push(TileSample { image, mask, aoi_id: aoi.to_string(), tile_index, valid_region: valid, split: split.parse()? });
    }
    Ok(tiles)
}
