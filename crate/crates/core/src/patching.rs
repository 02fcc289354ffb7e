//! Splits an image into a grid of non-overlapping square patches.

use serde::{Deserialize, Serialize};

use crate::dataio::FloatImage;
use crate::error::{Error, Result};

/// Fewest patches an image may be cut into.
pub const MIN_PATCHES: usize = 4;

/// Grid neighbourhood used when deciding which patches are adjacent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Connectivity {
    #[default]
    Four,
    Eight,
}

impl Connectivity {
    fn offsets(self) -> &'static [(isize, isize)] {
        const FOUR: [(isize, isize); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];
        const EIGHT: [(isize, isize); 8] = [
            (-1, -1),
            (-1, 0),
            (-1, 1),
            (0, -1),
            (0, 1),
            (1, -1),
            (1, 0),
            (1, 1),
        ];
        match self {
            Connectivity::Four => &FOUR,
            Connectivity::Eight => &EIGHT,
        }
    }

    pub fn from_count(n: u32) -> Result<Self> {
        match n {
            4 => Ok(Connectivity::Four),
            8 => Ok(Connectivity::Eight),
            _ => Err(Error::config(format!("connectivity must be 4 or 8, got {n}"))),
        }
    }

    pub fn count(self) -> u32 {
        match self {
            Connectivity::Four => 4,
            Connectivity::Eight => 8,
        }
    }
}

/// Row/column extent of a patch grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridShape {
    pub rows: usize,
    pub cols: usize,
}

impl GridShape {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// In-bounds neighbours of patch `index` (row-major), ascending.
    pub fn neighbors(&self, index: usize, conn: Connectivity) -> Result<Vec<usize>> {
        if index >= self.len() {
            return Err(Error::Bounds {
                index,
                len: self.len(),
            });
        }
        let mut out = Vec::with_capacity(8);
        self.for_each_neighbor(index, conn, |q| out.push(q));
        Ok(out)
    }

    /// Calls `f` on each neighbour of `index`; `index` must be in range.
    #[inline]
    pub(crate) fn for_each_neighbor(&self, index: usize, conn: Connectivity, mut f: impl FnMut(usize)) {
        let (r, c) = ((index / self.cols) as isize, (index % self.cols) as isize);
        for &(dr, dc) in conn.offsets() {
            let (nr, nc) = (r + dr, c + dc);
            if nr >= 0 && nc >= 0 && (nr as usize) < self.rows && (nc as usize) < self.cols {
                f(nr as usize * self.cols + nc as usize);
            }
        }
    }
}

/// An image cut into `rows × cols` flattened patches, row-major.
///
/// Each patch vector is laid out row by row with channels interleaved,
/// `patch_size² · channels` values long.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub shape: GridShape,
    pub patch_size: usize,
    pub channels: usize,
    pub patches: Vec<Vec<f64>>,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn neighbors(&self, index: usize, conn: Connectivity) -> Result<Vec<usize>> {
        self.shape.neighbors(index, conn)
    }

    /// Stitches the patches back into the (cropped) image they came from.
    pub fn reassemble(&self) -> FloatImage {
        let s = self.patch_size;
        let (h, w) = (self.shape.rows * s, self.shape.cols * s);
        let mut pixels = vec![0.0; h * w * self.channels];
        for (p, patch) in self.patches.iter().enumerate() {
            let (gr, gc) = (p / self.shape.cols, p % self.shape.cols);
            for y in 0..s {
                let src = &patch[y * s * self.channels..(y + 1) * s * self.channels];
                let start = ((gr * s + y) * w + gc * s) * self.channels;
                pixels[start..start + src.len()].copy_from_slice(src);
            }
        }
        FloatImage {
            height: h,
            width: w,
            channels: self.channels,
            pixels,
        }
    }
}

/// Grid shape an image of `height × width` gets with `patch_size`, after
/// checking the minimum patch count.
pub fn grid_shape(height: usize, width: usize, patch_size: usize) -> Result<GridShape> {
    if patch_size == 0 {
        return Err(Error::config("patch size must be at least 1"));
    }
    let shape = GridShape::new(height / patch_size, width / patch_size);
    if shape.len() < MIN_PATCHES {
        return Err(Error::config(format!(
            "patch size {patch_size} gives {} patch(es) on a {height}x{width} image; at least {MIN_PATCHES} are required",
            shape.len()
        )));
    }
    Ok(shape)
}

/// Cuts `img` into `patch_size` squares; trailing rows/columns that do not
/// fill a whole patch are dropped.
pub fn partition(img: &FloatImage, patch_size: usize) -> Result<PatchGrid> {
    let shape = grid_shape(img.height, img.width, patch_size)?;
    let s = patch_size;
    let ch = img.channels;
    let mut patches = Vec::with_capacity(shape.len());
    for gr in 0..shape.rows {
        for gc in 0..shape.cols {
            let mut v = Vec::with_capacity(s * s * ch);
            for y in gr * s..(gr + 1) * s {
                let start = (y * img.width + gc * s) * ch;
                v.extend_from_slice(&img.pixels[start..start + s * ch]);
            }
            patches.push(v);
        }
    }
    Ok(PatchGrid {
        shape,
        patch_size,
        channels: ch,
        patches,
    })
}
